"""DCF stations with binary exponential backoff.

DIFS and EIFS are already part of the busy durations T_s and T_c, so every
decision point the engine offers is a pure backoff slot. Counters only move at
decision points, which is the frozen-during-busy behaviour of the slotted model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from frma.analytic import AccessScheme, BackoffParams, PhyTimings, channel_times
from frma.channel import Feedback, FeedbackKind

__all__ = ["BebState", "DcfStation", "busy_durations"]


@dataclass
class BebState:
    stage: int = 0
    retries: int = 0
    backoff_counter: int = 0
    cw_current: int = 15
    dropped: int = 0


def contention_window(stage: int, bp: BackoffParams) -> int:
    return min((bp.cw_min + 1) * 2 ** stage - 1, bp.cw_max)


class DcfStation:
    """One saturated station running BEB.

    The first counter is drawn lazily at the first decision, so a generator
    installed by ``channel.run`` governs every draw.
    """

    def __init__(self, bp: BackoffParams, rng: np.random.Generator | None = None):
        self.bp = bp
        self.rng = rng if rng is not None else np.random.default_rng()
        self.state = BebState(cw_current=bp.cw_min)
        self._fresh = True

    def reset(self) -> None:
        self.state = BebState(cw_current=self.bp.cw_min,
                              backoff_counter=self._draw(self.bp.cw_min))
        self._fresh = False

    def _draw(self, cw: int) -> int:
        return int(self.rng.integers(0, cw + 1))

    def on_idle_slot(self) -> bool:
        """Transmit when the counter is zero, otherwise count down one slot."""
        if self._fresh:
            self.reset()
        s = self.state
        if s.backoff_counter == 0:
            return True
        s.backoff_counter -= 1
        return False

    decide = on_idle_slot

    def observe(self, busy: bool) -> None:
        pass

    def on_feedback(self, fb: Feedback | FeedbackKind) -> BebState:
        kind = fb.kind if isinstance(fb, Feedback) else fb
        s = self.state
        if kind is FeedbackKind.ACK:
            s.stage = 0
            s.retries = 0
        else:
            s.retries += 1
            if s.retries > self.bp.retry_limit:
                s.dropped += 1
                s.stage = 0
                s.retries = 0
            else:
                s.stage = min(s.stage + 1, self.bp.m)
        s.cw_current = contention_window(s.stage, self.bp)
        s.backoff_counter = self._draw(s.cw_current)
        return s


def busy_durations(pt: PhyTimings, scheme: AccessScheme | str) -> tuple[float, float]:
    """(T_s, T_c) for the simulator, taken from the same source as the model."""
    return channel_times(pt, scheme)
