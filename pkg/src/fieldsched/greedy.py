"""Single-step scheduling: activate the argmax-gain node each decision slot."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

from . import mdp
from .correlation import CorrelationParams
from .infofield import (AoIState, GainResult, Layout, QuadratureConfig,
                        total_gains)

Policy = Callable[[mdp.MdpState], int]


class GreedyDecision(NamedTuple):
    action: int
    degenerate: bool
    gains: tuple[GainResult, ...]


def greedy_step(layout: Layout, state: AoIState, params: CorrelationParams,
                quad: QuadratureConfig) -> GreedyDecision:
    """Argmax of total gain over candidates.

    Candidates whose gains agree with the best within twice the combined error
    estimates are an unresolvable tie: the lowest index wins and the decision
    is flagged degenerate.
    """
    gains = total_gains(layout, state, params, quad)
    best = max(range(layout.n), key=lambda i: gains[i].value)
    contenders = [
        i for i in range(layout.n)
        if gains[best].value - gains[i].value
        <= 2.0 * (gains[best].err_estimate + gains[i].err_estimate)
    ]
    return GreedyDecision(min(contenders), len(contenders) > 1, gains)


@dataclass
class ScheduleTrace:
    """Visited states, chosen actions and their gains, one row per decision slot."""

    actions: list[int] = field(default_factory=list)
    gains: list[GainResult] = field(default_factory=list)
    states: list[AoIState] = field(default_factory=list)
    degenerate: list[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class PeriodicSchedule:
    """Shortest repeating activation string after the transient.

    The cycle is rotation-normalized (lexicographically smallest rotation), so
    "231" and "123" are the same class; node identities are never permuted.
    An empty cycle means no period was found within the trace.
    """

    cycle: tuple[int, ...]
    preperiod: int
    activation_fractions: tuple[float, ...]
    flags: tuple[str, ...] = ()

    @property
    def is_periodic(self) -> bool:
        return bool(self.cycle)

    @property
    def label(self) -> str:
        if not self.cycle:
            return "aperiodic"
        return "".join(str(i + 1) for i in self.cycle)

    def with_flag(self, flag: str) -> "PeriodicSchedule":
        return PeriodicSchedule(self.cycle, self.preperiod,
                                self.activation_fractions, self.flags + (flag,))


def simulate(layout: Layout, initial: Optional[AoIState], steps: int,
             params: CorrelationParams, quad: QuadratureConfig,
             policy: Optional[Policy] = None,
             model: Optional[mdp.MdpModel] = None) -> ScheduleTrace:
    """Roll the scheduler forward from ``initial`` (default: all expired).

    ``policy`` overrides the greedy rule (e.g. replaying a learned table); it
    receives the full (ages, last action) state. Ages advance by one slot per
    step and collapse to EXPIRED past each node's cap.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if model is None:
        model = mdp.MdpModel.build(layout, params, quad)
    ages = initial if initial is not None else AoIState.all_expired(layout.n)
    last: Optional[int] = None
    trace = ScheduleTrace()
    for _ in range(steps):
        if policy is None:
            action, degenerate, gains = greedy_step(layout, ages, params, quad)
        else:
            action = policy(mdp.MdpState(ages, last))
            degenerate = False
            gains = total_gains(layout, ages, params, quad)
        trace.actions.append(action)
        trace.gains.append(gains[action])
        trace.states.append(ages)
        trace.degenerate.append(degenerate)
        ages = mdp.age_step(ages, action, model)
        last = action
    return trace


def _min_rotation(seq: tuple[int, ...]) -> tuple[int, ...]:
    return min(tuple(seq[i:] + seq[:i]) for i in range(len(seq)))


def detect_cycle(trace: ScheduleTrace, min_repeats: int = 4) -> PeriodicSchedule:
    """Smallest period and preperiod of the action string.

    A period p is accepted when the periodic suffix spans at least
    ``min_repeats`` full periods; scanning p upward guarantees minimality.
    Returns an aperiodic-within-horizon result (empty cycle) otherwise.
    """
    actions = tuple(trace.actions)
    n = len(actions)
    n_nodes = len(trace.states[0]) if trace.states else (max(actions) + 1)
    for p in range(1, n // min_repeats + 1):
        pre = 0
        for i in range(n - p - 1, -1, -1):
            if actions[i] != actions[i + p]:
                pre = i + 1
                break
        if n - pre >= min_repeats * p:
            cycle = _min_rotation(actions[pre:pre + p])
            fractions = tuple(cycle.count(i) / p for i in range(n_nodes))
            return PeriodicSchedule(cycle, pre, fractions)
    return PeriodicSchedule((), n, (), flags=("aperiodic-within-horizon",))
