"""Slot-synchronous shared medium for a single BSS.

At every decision point the channel is idle and each station says whether it
transmits. No transmitter costs one idle slot; one transmitter holds the
medium for T_s; two or more collide for T_c. Busy periods are rounded up to
whole slots on the slot clock, while all metrics are kept in exact
microseconds. Transmitters receive their ACK or timeout at the end of the
busy period, before the next decision point.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import IO, Callable, Protocol, Sequence

import numpy as np

from frma.analytic import AccessScheme, PhyTimings, channel_times

__all__ = [
    "AlwaysTransmit",
    "AlwaysWait",
    "Busy",
    "ChannelEngine",
    "EngineError",
    "Feedback",
    "FeedbackKind",
    "IDLE",
    "Outcome",
    "RunMetrics",
    "StationPolicy",
    "StepResult",
    "TRACE_HEADER",
    "jain_index",
    "run",
    "throughput",
]


class EngineError(RuntimeError):
    """Contract violation in the engine loop."""


class FeedbackKind(enum.Enum):
    ACK = "ack"
    TIMEOUT = "timeout"


class Outcome(enum.Enum):
    IDLE = "idle"
    SUCCESS = "success"
    COLLISION = "collision"


@dataclass(frozen=True)
class Feedback:
    station: int
    decision_slot: int
    delivery_slot: int
    kind: FeedbackKind


class _Idle:
    def __repr__(self):
        return "IDLE"


IDLE = _Idle()


@dataclass(frozen=True)
class Busy:
    remaining_slots: int
    outcome: Outcome
    stations: tuple[int, ...]


@dataclass(frozen=True)
class StepResult:
    outcome: Outcome
    stations: tuple[int, ...]
    start_slot: int
    slots: int
    duration_us: float
    feedback: tuple[Feedback, ...] = ()

    @property
    def busy(self) -> bool:
        return self.outcome is not Outcome.IDLE


@dataclass
class RunMetrics:
    """Counters for one run.

    ``elapsed_us`` is derived from the counters so time conservation holds by
    construction; ``overhead_us`` is channel time spent on non-payload
    exchanges such as federated model rounds.
    """

    n_stations: int
    slot_us: float
    t_s_us: float
    t_c_us: float
    payload_us: float
    per_station_successes: list[int] = field(default_factory=list)
    success_count: int = 0
    collision_count: int = 0
    idle_slots: int = 0
    overhead_us: float = 0.0
    overhead_events: int = 0
    slots: int = 0
    transmit_decisions: int = 0
    decision_points: int = 0

    def __post_init__(self):
        if not self.per_station_successes:
            self.per_station_successes = [0] * self.n_stations

    @property
    def per_station_payload_us(self) -> list[float]:
        return [k * self.payload_us for k in self.per_station_successes]

    @property
    def elapsed_us(self) -> float:
        return (self.idle_slots * self.slot_us + self.success_count * self.t_s_us
                + self.collision_count * self.t_c_us + self.overhead_us)


class StationPolicy(Protocol):
    def decide(self) -> bool: ...

    def observe(self, busy: bool) -> None: ...

    def on_feedback(self, fb: Feedback) -> None: ...


TRACE_HEADER = ("slot", "event", "stations", "elapsed_us")


class ChannelEngine:
    """Owns the slot clock, channel state and run metrics."""

    def __init__(self, n_stations: int, pt: PhyTimings,
                 scheme: AccessScheme | str = AccessScheme.BASIC,
                 trace: IO[str] | None = None):
        if n_stations < 1:
            raise ValueError("need at least one station")
        self.n_stations = n_stations
        self.pt = pt
        self.scheme = AccessScheme.parse(scheme)
        self.t_s_us, self.t_c_us = channel_times(pt, self.scheme)
        self.success_slots = self.slots_for(self.t_s_us)
        self.collision_slots = self.slots_for(self.t_c_us)
        self.slot_index = 0
        self.state: _Idle | Busy = IDLE
        self.metrics = RunMetrics(n_stations=n_stations, slot_us=pt.slot_us,
                                  t_s_us=self.t_s_us, t_c_us=self.t_c_us,
                                  payload_us=pt.payload_us)
        self._trace = None
        if trace is not None:
            self._trace = csv.writer(trace, lineterminator="\n")
            self._trace.writerow(TRACE_HEADER)

    def slots_for(self, duration_us: float) -> int:
        # tolerate representation error such as 2190.2 / 10 -> 219.02000000000001
        return max(1, math.ceil(duration_us / self.pt.slot_us - 1e-9))

    @property
    def elapsed_us(self) -> float:
        return self.metrics.elapsed_us

    def step(self, decisions: Sequence[bool]) -> StepResult:
        if self.state is not IDLE:
            raise EngineError(f"decisions solicited while channel is {self.state}")
        if len(decisions) != self.n_stations:
            raise EngineError(f"expected {self.n_stations} decisions, got {len(decisions)}")
        m = self.metrics
        start = self.slot_index
        tx = tuple(i for i, d in enumerate(decisions) if d)
        m.decision_points += 1
        m.transmit_decisions += len(tx)
        if not tx:
            self.slot_index += 1
            m.idle_slots += 1
            m.slots += 1
            self._log(start, Outcome.IDLE, tx)
            return StepResult(Outcome.IDLE, tx, start, 1, self.pt.slot_us)

        if len(tx) == 1:
            outcome, slots, dur, kind = (Outcome.SUCCESS, self.success_slots,
                                         self.t_s_us, FeedbackKind.ACK)
        else:
            outcome, slots, dur, kind = (Outcome.COLLISION, self.collision_slots,
                                         self.t_c_us, FeedbackKind.TIMEOUT)
        self.state = Busy(slots, outcome, tx)
        self.slot_index += slots
        m.slots += slots
        if outcome is Outcome.SUCCESS:
            m.success_count += 1
            m.per_station_successes[tx[0]] += 1
        else:
            m.collision_count += 1
        self.state = IDLE
        fb = tuple(Feedback(i, start, self.slot_index, kind) for i in tx)
        self._log(start, outcome, tx)
        return StepResult(outcome, tx, start, slots, dur, fb)

    def occupy(self, duration_us: float) -> int:
        """Hold the medium for a non-payload exchange; returns the slots consumed."""
        if duration_us < 0:
            raise ValueError("duration must be non-negative")
        if self.state is not IDLE:
            raise EngineError("channel already busy")
        if duration_us == 0:
            return 0
        slots = self.slots_for(duration_us)
        self.slot_index += slots
        self.metrics.slots += slots
        self.metrics.overhead_us += duration_us
        self.metrics.overhead_events += 1
        return slots

    def _log(self, slot: int, outcome: Outcome, stations: tuple[int, ...]) -> None:
        if self._trace is not None:
            self._trace.writerow([slot, outcome.value, ";".join(map(str, stations)),
                                  format(self.elapsed_us, ".15g")])


def run(agents: Sequence[StationPolicy], duration_us: float, pt: PhyTimings,
        scheme: AccessScheme | str = AccessScheme.BASIC, *,
        seed: int | None = None, trace: IO[str] | None = None,
        after_step: Callable[[ChannelEngine, StepResult], None] | None = None,
        engine: ChannelEngine | None = None) -> RunMetrics:
    """Drive ``agents`` on a fresh engine until ``duration_us`` has elapsed.

    When ``seed`` is given every agent exposing an ``rng`` attribute gets its
    own independent generator spawned from it.
    """
    if not agents:
        raise ValueError("need at least one agent")
    if not duration_us > 0:
        raise ValueError("duration must be positive")
    if seed is not None:
        children = np.random.SeedSequence(seed).spawn(len(agents))
        for agent, child in zip(agents, children):
            if hasattr(agent, "rng"):
                agent.rng = np.random.default_rng(child)
    if engine is None:
        engine = ChannelEngine(len(agents), pt, scheme, trace=trace)
    while engine.elapsed_us < duration_us:
        decisions = [a.decide() for a in agents]
        res = engine.step(decisions)
        for fb in res.feedback:
            agents[fb.station].on_feedback(fb)
        for a in agents:
            a.observe(res.busy)
        if after_step is not None:
            after_step(engine, res)
    return engine.metrics


def throughput(metrics: RunMetrics, pt: PhyTimings) -> tuple[float, list[float]]:
    """Aggregate and per-station throughput in Mb/s."""
    elapsed = metrics.elapsed_us
    if not elapsed > 0:
        raise ValueError("no time has elapsed")
    per = [p / elapsed * pt.data_rate_mbps for p in metrics.per_station_payload_us]
    return sum(per), per


def jain_index(values: Sequence[float]) -> float:
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("need at least one value")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("values must be finite and non-negative")
    sq = float(np.sum(x * x))
    if sq == 0.0:
        raise ValueError("fairness undefined for an all-zero allocation")
    return float(np.sum(x)) ** 2 / (x.size * sq)


class AlwaysTransmit:
    def decide(self) -> bool:
        return True

    def observe(self, busy: bool) -> None:
        pass

    def on_feedback(self, fb: Feedback) -> None:
        pass


class AlwaysWait(AlwaysTransmit):
    def decide(self) -> bool:
        return False
