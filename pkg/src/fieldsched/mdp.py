"""Finite decision process over age-of-information vectors.

State = (age vector, last action). The no-repeat rule makes legal actions
depend on the previous activation, so the canonical state carries it even
though every post-transition state identifies the last action as the unique
age-1 node; the root (all expired, nothing activated yet) is the exception.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

from .correlation import CorrelationParams
from .infofield import (EXPIRED, AoIState, Layout, QuadratureConfig,
                        total_gains)


class RepeatedActionError(ValueError):
    """An action repeated the previous activation, violating the no-repeat rule."""


@dataclass(frozen=True)
class MdpState:
    ages: AoIState
    last: Optional[int] = None


@dataclass(frozen=True)
class MdpModel:
    """Layout, correlation and quadrature plus the derived aging structure.

    k_matrix[i][j] = floor(d_ij / slot_distance): decision slots until node
    j's fresh data can fully out-date node i's coverage. max_aoi[i] caps each
    node's useful age; beyond it the data is dominated everywhere and the age
    collapses to EXPIRED.
    """

    layout: Layout
    params: CorrelationParams
    quad: QuadratureConfig
    k_matrix: tuple[tuple[int, ...], ...] = field(init=False)
    max_aoi: tuple[int, ...] = field(init=False)

    def __post_init__(self) -> None:
        if self.layout.n != 3:
            raise ValueError("the decision process is defined for exactly three nodes")
        slot = self.params.slot_distance
        n = self.layout.n
        k = tuple(tuple(int(self.layout.distance(i, j) // slot) if i != j else 0
                        for j in range(n)) for i in range(n))
        object.__setattr__(self, "k_matrix", k)
        object.__setattr__(self, "max_aoi", tuple(_max_aoi_formula(k, i) for i in range(n)))

    @classmethod
    def build(cls, layout: Layout, params: CorrelationParams,
              quad: Optional[QuadratureConfig] = None) -> "MdpModel":
        return cls(layout, params, quad or QuadratureConfig.for_params(params))

    def legal_actions(self, state: MdpState) -> tuple[int, ...]:
        return tuple(a for a in range(self.layout.n) if a != state.last)

    def root(self) -> MdpState:
        return MdpState(AoIState.all_expired(self.layout.n), None)


def _max_aoi_formula(k: tuple[tuple[int, ...], ...], i: int) -> int:
    """Age cap of node i: worst case over the two other nodes holding ages {1, 2}."""
    j, l = [x for x in range(3) if x != i]
    return max(min(k[i][j] + 1, k[i][l] + 2), min(k[i][j] + 2, k[i][l] + 1))


def max_aoi(node: int, model: MdpModel) -> int:
    """Maximum useful age of ``node``; data older than this carries no information."""
    return model.max_aoi[node]


def age_step(ages: AoIState, action: int, model: MdpModel) -> AoIState:
    """Apply one decision step: acted node to 0, everyone ages 1, cap to EXPIRED.

    No-repeat enforcement lives in transition(); this raw step also serves
    policies (like pure greedy) that are allowed to repeat.
    """
    out = []
    for i, a in enumerate(ages.ages):
        new = 1 if i == action else (a + 1 if a != EXPIRED else EXPIRED)
        if new != EXPIRED and new > model.max_aoi[i]:
            new = EXPIRED
        out.append(new)
    return AoIState(tuple(out))


def transition(state: MdpState, action: int, model: MdpModel) -> MdpState:
    """Deterministic MDP transition under the no-repeat rule."""
    if action == state.last:
        raise RepeatedActionError(f"action {action} repeats the previous activation")
    if not 0 <= action < model.layout.n:
        raise ValueError(f"action {action} out of range")
    return MdpState(age_step(state.ages, action, model), action)


@lru_cache(maxsize=None)
def _first_activation_gain(layout: Layout, params: CorrelationParams,
                           quad: QuadratureConfig) -> float:
    expired = AoIState.all_expired(layout.n)
    return total_gains(layout, expired, params, quad)[0].value


def reward(state: MdpState | AoIState, action: int, model: MdpModel) -> float:
    """Activation gain normalized by the very first activation's gain.

    The normalizer (gain of node 1 from the all-expired state) is the largest
    gain any action can achieve, so rewards live in [0, 1].
    """
    ages = state.ages if isinstance(state, MdpState) else state
    gain = total_gains(model.layout, ages, model.params, model.quad)[action].value
    return gain / _first_activation_gain(model.layout, model.params, model.quad)


@dataclass(frozen=True)
class StateSpaceReport:
    states: frozenset[MdpState]
    bfs_count: int
    closed_form_count: int

    @property
    def mismatch(self) -> bool:
        return self.bfs_count != self.closed_form_count


def closed_form_state_count(model: MdpModel) -> int:
    """Closed-form AoI-vector count; reported alongside BFS, never asserted equal.

    Sums, per node i holding the maximal age m, indicators that the other two
    nodes' ages (m-1, m-2 in either assignment) are still within their
    out-dating windows.
    """
    def u(x: int) -> int:
        return 1 if x >= 0 else 0

    k = model.k_matrix
    total = 0
    for i in range(3):
        j, l = [x for x in range(3) if x != i]
        total += 1
        for m in range(2, model.max_aoi[i] + 1):
            total += (u(k[i][j] - (m - 1)) * u(k[i][l] - (m - 2))
                      + u(k[i][j] - (m - 2)) * u(k[i][l] - (m - 1)))
    return total


def enumerate_states(model: MdpModel) -> StateSpaceReport:
    """BFS over transitions from the all-expired root under the no-repeat rule.

    The reachable set is the operational state space; the closed-form count is
    evaluated for the report only (its m = 1 term semantics are unclear for
    one-activation-per-slot dynamics, so a mismatch is data, not an error).
    """
    root = model.root()
    seen = {root}
    frontier = [root]
    while frontier:
        state = frontier.pop()
        for a in model.legal_actions(state):
            nxt = transition(state, a, model)
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return StateSpaceReport(frozenset(seen), len(seen), closed_form_state_count(model))


def _format_ages(ages: AoIState) -> str:
    return "|".join("inf" if a == EXPIRED else str(a) for a in ages.ages)


def dump_state_space(model: MdpModel, path) -> int:
    """CSV dump (state, last, legal actions, reward per action); returns row count."""
    report = enumerate_states(model)
    states = sorted(report.states, key=lambda s: (_format_ages(s.ages), -1 if s.last is None else s.last))
    rows = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ages", "last", "legal_actions", "rewards"])
        for state in states:
            actions = model.legal_actions(state)
            rewards = [f"{reward(state, a, model):.6f}" for a in actions]
            writer.writerow([_format_ages(state.ages),
                             "" if state.last is None else state.last + 1,
                             " ".join(str(a + 1) for a in actions),
                             " ".join(rewards)])
            rows += 1
    return rows
