"""FRMA station: history state, epsilon-greedy access and Monte Carlo rewards.

A station's state is the last ``M`` action-observation tuples
``c_l = (a_{l-1}, o_l)``, each encoded as two 0/1 reals (Wait/Idle -> 0,
Transmit/Busy -> 1), oldest first and zero-padded at start.

Rewards:

* Wait is rewarded 1 when the slot it deferred turned out busy, 0 when idle.
* Transmit looks back over the decision-time window for earlier decisions
  taken in the same context tuple ``c_t`` that were transmits with a known
  outcome, and folds their ACK/timeout results oldest to newest with
  ``reward = eta * reward +/- 1``. The current transmit is part of the window,
  so its own outcome enters last with full weight. Matches whose feedback is
  still outstanding are skipped.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from frma.channel import Feedback, FeedbackKind
from frma.qnn import TRANSMIT, WAIT, Experience, QnnWeights, Trainer, forward

__all__ = [
    "AgentContext",
    "DecisionRecord",
    "EpsilonSchedule",
    "FrmaStation",
    "ProtocolError",
    "TRANSMIT",
    "WAIT",
    "decode_state",
    "encode_state",
    "reward_transmit",
    "reward_wait",
    "select_action",
]

IDLE_OBS, BUSY_OBS = 0, 1


class ProtocolError(RuntimeError):
    """Feedback that matches no outstanding transmission."""


@dataclass
class EpsilonSchedule:
    eps0: float = 1.0
    eps_min: float = 0.01
    decay: float = 0.995
    steps: int = 0

    @property
    def value(self) -> float:
        return max(self.eps_min, self.eps0 * self.decay ** self.steps)

    def advance(self) -> None:
        self.steps += 1


@dataclass(eq=False)
class DecisionRecord:
    """One slot of a station's history: the tuple it saw and what it did next."""

    context: tuple[int, int]
    action: int | None = None
    feedback: FeedbackKind | None = None
    slot: int = -1


def encode_state(history: Iterable[tuple[int, int]], memory: int = 20) -> np.ndarray:
    tuples = list(history)[-memory:]
    out = np.zeros(2 * memory)
    off = 2 * (memory - len(tuples))
    for k, (a, o) in enumerate(tuples):
        out[off + 2 * k] = a
        out[off + 2 * k + 1] = o
    return out


def decode_state(state: Sequence[float]) -> list[tuple[int, int]]:
    v = np.asarray(state)
    return [(int(v[i]), int(v[i + 1])) for i in range(0, len(v), 2)]


class AgentContext:
    def __init__(self, memory: int = 20):
        self.memory = memory
        self.history: deque[DecisionRecord] = deque(
            (DecisionRecord((WAIT, IDLE_OBS)) for _ in range(memory)), maxlen=memory)
        self.pending: dict[int, _Pending] = {}

    @property
    def current(self) -> DecisionRecord:
        return self.history[-1]

    def state(self) -> np.ndarray:
        return encode_state((r.context for r in self.history), self.memory)

    def push(self, action: int, busy: bool) -> DecisionRecord:
        rec = DecisionRecord((action, BUSY_OBS if busy else IDLE_OBS))
        self.history.append(rec)
        return rec


@dataclass
class _Pending:
    state: np.ndarray
    window: list[DecisionRecord]
    record: DecisionRecord
    observed: bool = False


def reward_wait(ctx: AgentContext) -> float:
    """1 if the slot just observed after waiting was busy, else 0."""
    a, o = ctx.current.context
    return 1.0 if o == BUSY_OBS else 0.0


def reward_transmit(window: Sequence[DecisionRecord], eta: float = 0.9) -> float:
    """Monte Carlo transmit reward over a decision-time window (newest last)."""
    target = window[-1].context
    reward = 0.0
    for rec in window:
        if rec.context != target or rec.action != TRANSMIT or rec.feedback is None:
            continue
        if rec.feedback is FeedbackKind.ACK:
            reward = eta * reward + 1.0
        else:
            reward = eta * reward - 1.0
    return reward


def select_action(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over (Wait, Transmit); equal Q-values pick Wait."""
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(2))
    return TRANSMIT if q[TRANSMIT] > q[WAIT] else WAIT


class FrmaStation:
    """Channel policy backed by a Q-network trainer."""

    def __init__(self, trainer: Trainer, *, eta: float = 0.9, memory: int = 20,
                 epsilon: EpsilonSchedule | None = None,
                 rng: np.random.Generator | None = None, learn: bool = True,
                 log_every: int = 0):
        if memory * 2 != trainer.w.arch.input_dim:
            raise ValueError(f"memory {memory} does not fit a {trainer.w.arch.input_dim}-input network")
        self.trainer = trainer
        self.eta = eta
        self.ctx = AgentContext(memory)
        self.epsilon = epsilon if epsilon is not None else EpsilonSchedule()
        self.rng = rng if rng is not None else np.random.default_rng()
        self.learn = learn
        self.log_every = log_every
        self.log: list[tuple[int, float, float, float]] = []
        self._slot = 0
        self._state: np.ndarray | None = None
        self._action: int | None = None
        self._rewards: list[float] = []
        self._losses: list[float] = []
        self.experiences = 0
        self.decisions = 0

    @property
    def weights(self) -> QnnWeights:
        return self.trainer.w

    def decide(self) -> bool:
        s = self.ctx.state()
        q = forward(self.trainer.w, s)
        a = select_action(q, self.epsilon.value, self.rng)
        rec = self.ctx.current
        rec.action = a
        self._state, self._action = s, a
        self.decisions += 1
        if a == TRANSMIT:
            self.ctx.pending[self._slot] = _Pending(s, list(self.ctx.history), rec)
        return a == TRANSMIT

    def on_feedback(self, fb: Feedback) -> None:
        # feedback for one station arrives in decision order
        for p in self.ctx.pending.values():
            if p.record.feedback is None:
                p.record.feedback = fb.kind
                p.record.slot = fb.decision_slot
                return
        raise ProtocolError(f"no outstanding transmission for feedback from slot {fb.decision_slot}")

    def observe(self, busy: bool) -> list[Experience]:
        a = self._action
        if a is None:
            raise ProtocolError("observation before any decision")
        self.ctx.push(a, busy)
        self._slot += 1
        s_next = self.ctx.state()
        out = []
        if a == WAIT:
            out.append(Experience(self._state, WAIT, reward_wait(self.ctx), s_next))
        for key in list(self.ctx.pending):
            p = self.ctx.pending[key]
            if p.record.feedback is None:
                continue
            out.append(Experience(p.state, TRANSMIT, reward_transmit(p.window, self.eta), s_next))
            del self.ctx.pending[key]
        self._action = None
        for e in out:
            self.trainer.buffer.push(e)
            if self.log_every:
                self._rewards.append(e.r_next)
        self.experiences += len(out)
        if self.learn:
            self.training_tick()
        return out

    def training_tick(self) -> float | None:
        loss = self.trainer.tick()
        if loss is None:
            return None
        self.epsilon.advance()
        if self.log_every:
            self._losses.append(loss)
            if self.trainer.train_steps % self.log_every == 0:
                self.log.append((self.trainer.train_steps, self.epsilon.value,
                                 float(np.mean(self._losses)), float(np.mean(self._rewards))))
                self._losses.clear()
                self._rewards.clear()
        return loss
