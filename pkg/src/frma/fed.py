"""Federated averaging at the access point.

Every ``period`` successful transmissions (or every ``period`` slots) the AP
collects a snapshot of each station's network, averages them parameter-wise
and installs the mean into every station, replacing both the online and the
target network. Replay memories and exploration state stay local. The
exchange holds the channel for ``overhead_us``, which counts toward elapsed
time but carries no payload.

The averaging step divides by the number of stations (FedAvg); a plain sum of
models is not a usable global model.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from frma.channel import ChannelEngine, Outcome, StepResult
from frma.qnn import ArchitectureMismatch, QnnWeights

__all__ = [
    "AggregationError",
    "FedConfig",
    "FedCoordinator",
    "FedRound",
    "ROUND_HEADER",
    "TriggerKind",
    "aggregate",
    "broadcast",
]


class AggregationError(ValueError):
    pass


class TriggerKind(str, enum.Enum):
    SUCCESSES = "successes"
    SLOTS = "slots"


@dataclass(frozen=True)
class FedConfig:
    period: int = 100
    trigger: TriggerKind = TriggerKind.SUCCESSES
    # None: one basic-access successful busy period per round
    overhead_us: float | None = None

    def __post_init__(self):
        if self.period < 1:
            raise ValueError(f"period must be >= 1, got {self.period}")
        if self.overhead_us is not None and self.overhead_us < 0:
            raise ValueError(f"overhead_us must be >= 0, got {self.overhead_us}")
        object.__setattr__(self, "trigger", TriggerKind(self.trigger))


@dataclass(frozen=True)
class FedRound:
    index: int
    slot: int
    elapsed_us: float
    participants: int


def _mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    # offsets from the component-wise minimum, summed in sorted order: exact on
    # identical inputs, bitwise independent of station order, and clipped so
    # rounding never leaves the [min, max] hull
    stack = np.stack(arrays)
    lo, hi = stack.min(axis=0), stack.max(axis=0)
    d = np.sort(stack - lo, axis=0)
    return np.clip(lo + d.sum(axis=0) / len(arrays), lo, hi)


def aggregate(weights: Sequence[QnnWeights]) -> QnnWeights:
    """Parameter-wise mean of the given networks."""
    if not weights:
        raise AggregationError("nothing to aggregate")
    arch = weights[0].arch
    for w in weights[1:]:
        if w.arch != arch:
            raise AggregationError(f"architecture mismatch: {w.arch.tag} vs {arch.tag}")
    ws = [_mean([w.weights[i] for w in weights]) for i in range(len(weights[0].weights))]
    bs = [_mean([w.biases[i] for w in weights]) for i in range(len(weights[0].biases))]
    try:
        return QnnWeights(arch, ws, bs, max(w.version for w in weights) + 1)
    except ArchitectureMismatch as exc:
        raise AggregationError(str(exc)) from exc


def broadcast(global_w: QnnWeights, stations) -> None:
    """Install copies of ``global_w`` into every station's trainer."""
    for st in stations:
        st.trainer.install(global_w)


ROUND_HEADER = ("round", "slot", "elapsed_us", "participants")


class FedCoordinator:
    """Hooks into the engine loop via ``after_step`` and runs rounds on schedule."""

    def __init__(self, cfg: FedConfig, stations, *, overhead_us: float,
                 enabled: bool = True, log: IO[str] | None = None):
        self.cfg = cfg
        self.stations = list(stations)
        self.overhead_us = cfg.overhead_us if cfg.overhead_us is not None else overhead_us
        self.enabled = enabled
        self.successes = 0
        self.rounds: list[FedRound] = []
        self._epoch = 0
        self._log = None
        if log is not None:
            self._log = csv.writer(log, lineterminator="\n")
            self._log.writerow(ROUND_HEADER)

    def due(self, res: StepResult, slot_index: int) -> bool:
        if self.cfg.trigger is TriggerKind.SUCCESSES:
            if res.outcome is Outcome.SUCCESS:
                self.successes += 1
                return self.successes % self.cfg.period == 0
            return False
        # slot trigger: fire once per period boundary crossed (t mod T == T-1)
        epoch = slot_index // self.cfg.period
        if epoch > self._epoch:
            self._epoch = epoch
            return True
        return False

    def after_step(self, engine: ChannelEngine, res: StepResult) -> FedRound | None:
        return self.maybe_round(res, engine)

    def maybe_round(self, res: StepResult, engine: ChannelEngine) -> FedRound | None:
        if not self.due(res, engine.slot_index) or not self.enabled:
            return None
        global_w = aggregate([st.trainer.w.copy() for st in self.stations])
        broadcast(global_w, self.stations)
        engine.occupy(self.overhead_us)
        rnd = FedRound(len(self.rounds) + 1, engine.slot_index, engine.elapsed_us,
                       len(self.stations))
        self.rounds.append(rnd)
        if self._log is not None:
            self._log.writerow([rnd.index, rnd.slot, format(rnd.elapsed_us, ".15g"),
                                rnd.participants])
        return rnd
