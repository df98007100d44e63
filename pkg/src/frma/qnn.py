"""Residual MLP Q-network, replay memory and semi-gradient TD training.

Default topology: 40 -> FC(64) -> FC(64) -> ResBlock -> ResBlock -> 2, where a
ResBlock is two FC layers whose output gets the block input added before the
final ReLU. Hidden layers use ReLU, the output is linear. Weights are stored
as ``(fan_in, fan_out)`` matrices so a batch is ``X @ W + b``.

Checkpoint layout (little-endian)::

    8 bytes   magic  b"FRMAQNN\\0"
    uint16    format version (1)
    uint32    header length H
    H bytes   UTF-8 JSON: {"arch": {...}, "version": int, "layers": [[in, out], ...], "meta": {...}}
    then per layer: W as in*out float64 row-major, followed by b as out float64
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

__all__ = [
    "Arch",
    "ArchitectureMismatch",
    "BufferNotReady",
    "DEFAULT_ARCH",
    "Experience",
    "QnnWeights",
    "ReplayBuffer",
    "Trainer",
    "TrainerConfig",
    "TrainingDivergence",
    "forward",
    "forward_batch",
    "gradients",
    "init_weights",
    "load_checkpoint",
    "save_checkpoint",
    "sync_target",
    "td_target",
    "train_step",
]

WAIT, TRANSMIT = 0, 1


class ArchitectureMismatch(ValueError):
    pass


class TrainingDivergence(FloatingPointError):
    pass


class BufferNotReady(LookupError):
    pass


@dataclass(frozen=True)
class Arch:
    input_dim: int = 40
    hidden: int = 64
    n_plain: int = 2
    n_blocks: int = 2
    n_actions: int = 2

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = []
        fan_in = self.input_dim
        for _ in range(self.n_plain):
            dims.append((fan_in, self.hidden))
            fan_in = self.hidden
        for _ in range(self.n_blocks):
            if fan_in != self.hidden:
                raise ArchitectureMismatch("residual block needs a hidden-width input")
            dims += [(self.hidden, self.hidden), (self.hidden, self.hidden)]
        dims.append((fan_in, self.n_actions))
        return dims

    @property
    def tag(self) -> str:
        return (f"resmlp-in{self.input_dim}-h{self.hidden}-fc{self.n_plain}"
                f"-res{self.n_blocks}-out{self.n_actions}")

    def to_dict(self) -> dict[str, int]:
        return {"input_dim": self.input_dim, "hidden": self.hidden, "n_plain": self.n_plain,
                "n_blocks": self.n_blocks, "n_actions": self.n_actions}


DEFAULT_ARCH = Arch()


@dataclass
class QnnWeights:
    arch: Arch
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    version: int = 0

    def __post_init__(self):
        dims = self.arch.layer_dims()
        if len(self.weights) != len(dims) or len(self.biases) != len(dims):
            raise ArchitectureMismatch(f"{self.arch.tag} expects {len(dims)} layers")
        for (fi, fo), w, b in zip(dims, self.weights, self.biases):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise ArchitectureMismatch(
                    f"layer shape {w.shape}/{b.shape} does not match {(fi, fo)}")

    def copy(self) -> "QnnWeights":
        return QnnWeights(self.arch, [w.copy() for w in self.weights],
                          [b.copy() for b in self.biases], self.version)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())

    def assign(self, other: "QnnWeights") -> None:
        """Copy ``other``'s values into these arrays in place."""
        if other.arch != self.arch:
            raise ArchitectureMismatch(f"{other.arch.tag} != {self.arch.tag}")
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src
        self.version = other.version


def init_weights(seed: int | np.random.Generator | None = None,
                 arch: Arch = DEFAULT_ARCH) -> QnnWeights:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ws, bs = [], []
    for fi, fo in arch.layer_dims():
        bound = np.sqrt(6.0 / fi)
        ws.append(rng.uniform(-bound, bound, size=(fi, fo)))
        bs.append(np.zeros(fo))
    return QnnWeights(arch, ws, bs)


def forward_batch(w: QnnWeights, x: np.ndarray, keep: bool = False):
    """Q-values for a batch of states, shape (B, n_actions).

    With ``keep`` the pre-activations are returned as well, for ``gradients``.
    """
    arch = w.arch
    h = x
    cache = [x]
    li = 0
    for _ in range(arch.n_plain):
        z = h @ w.weights[li] + w.biases[li]
        h = np.maximum(z, 0.0)
        cache.append(z)
        li += 1
    for _ in range(arch.n_blocks):
        z1 = h @ w.weights[li] + w.biases[li]
        u = np.maximum(z1, 0.0)
        z2 = u @ w.weights[li + 1] + w.biases[li + 1] + h
        h = np.maximum(z2, 0.0)
        cache += [z1, z2]
        li += 2
    q = h @ w.weights[li] + w.biases[li]
    if keep:
        return q, cache
    return q


def forward(w: QnnWeights, s: Sequence[float]) -> np.ndarray:
    x = np.asarray(s, dtype=float)
    if x.shape != (w.arch.input_dim,):
        raise ValueError(f"state must have length {w.arch.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("state contains non-finite values")
    return forward_batch(w, x[None, :])[0]


def gradients(w: QnnWeights, x: np.ndarray, dq: np.ndarray
              ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradient of ``sum(dq * Q(x))`` with respect to every weight and bias."""
    _, cache = forward_batch(w, x, keep=True)
    return _backprop(w, cache, dq)


def _backprop(w: QnnWeights, cache: list[np.ndarray], dq: np.ndarray
              ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    arch = w.arch
    n_layers = len(w.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]

    def act(z):
        return np.maximum(z, 0.0)

    # hidden output feeding the linear head
    li = n_layers - 1
    h_last = act(cache[-1]) if len(cache) > 1 else cache[0]
    gw[li] = h_last.T @ dq
    gb[li] = dq.sum(axis=0)
    dh = dq @ w.weights[li].T

    ci = len(cache) - 1
    li -= 1
    for _ in range(arch.n_blocks):
        z1, z2 = cache[ci - 1], cache[ci]
        h_in = act(cache[ci - 2]) if ci - 2 > 0 else cache[0]
        dz2 = dh * (z2 > 0)
        u = act(z1)
        gw[li] = u.T @ dz2
        gb[li] = dz2.sum(axis=0)
        dz1 = (dz2 @ w.weights[li].T) * (z1 > 0)
        gw[li - 1] = h_in.T @ dz1
        gb[li - 1] = dz1.sum(axis=0)
        dh = dz2 + dz1 @ w.weights[li - 1].T
        ci -= 2
        li -= 2
    for _ in range(arch.n_plain):
        z = cache[ci]
        h_in = act(cache[ci - 1]) if ci - 1 > 0 else cache[0]
        dz = dh * (z > 0)
        gw[li] = h_in.T @ dz
        gb[li] = dz.sum(axis=0)
        dh = dz @ w.weights[li].T
        ci -= 1
        li -= 1
    return gw, gb


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 0.001
    gamma: float = 0.9
    batch_size: int = 32
    target_replace_every: int = 200
    memory_size: int = 1000

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.target_replace_every < 1:
            raise ValueError("batch_size and target_replace_every must be >= 1")
        if self.memory_size < self.batch_size:
            raise ValueError("memory_size must be at least batch_size")


@dataclass(frozen=True)
class Experience:
    s_t: np.ndarray
    a_t: int
    r_next: float
    s_next: np.ndarray


def td_target(w_target: QnnWeights, r, s_next, gamma: float = 0.9):
    """r + gamma * max_a Q_target(s_next, a); vectorised over a batch when given one.

    Continuing task: no terminal masking.
    """
    s_next = np.asarray(s_next, dtype=float)
    if s_next.ndim == 1:
        return float(r) + gamma * float(np.max(forward_batch(w_target, s_next[None, :])))
    return np.asarray(r, dtype=float) + gamma * forward_batch(w_target, s_next).max(axis=1)


def train_step(w: QnnWeights, w_target: QnnWeights,
               batch: Sequence[Experience] | tuple[np.ndarray, ...],
               cfg: TrainerConfig = TrainerConfig()) -> tuple[QnnWeights, float]:
    """One in-place semi-gradient update, theta += rho * mean((v - q) * grad q).

    ``batch`` is either a list of Experience or the (S, A, R, S') arrays from
    ``ReplayBuffer.sample``. The target v is a constant; no gradient flows
    through ``w_target``. Returns ``w`` and the mean squared TD error.
    """
    if isinstance(batch, tuple):
        s, a, r, s2 = batch
    else:
        if len(batch) == 0:
            raise ValueError("empty batch")
        s = np.stack([e.s_t for e in batch])
        a = np.array([e.a_t for e in batch], dtype=np.intp)
        r = np.array([e.r_next for e in batch], dtype=float)
        s2 = np.stack([e.s_next for e in batch])
    n = len(a)
    if n == 0:
        raise ValueError("empty batch")
    v = td_target(w_target, r, s2, cfg.gamma)
    q_all, cache = forward_batch(w, s, keep=True)
    q = q_all[np.arange(n), a]
    delta = v - q
    loss = float(np.mean(delta * delta))
    if not np.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss {loss}")
    dq = np.zeros_like(q_all)
    dq[np.arange(n), a] = delta / n
    gw, gb = _backprop(w, cache, dq)
    lr = cfg.learning_rate
    for i in range(len(w.weights)):
        w.weights[i] += lr * gw[i]
        w.biases[i] += lr * gb[i]
    return w, loss


def sync_target(w: QnnWeights, w_target: QnnWeights) -> QnnWeights:
    w_target.assign(w)
    return w_target


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int = 1000, state_dim: int = 40):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros(capacity, dtype=np.intp)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self._next = 0
        self._size = 0
        self.pushed = 0

    def __len__(self) -> int:
        return self._size

    def push(self, e: Experience) -> None:
        i = self._next
        self.s[i] = e.s_t
        self.a[i] = e.a_t
        self.r[i] = e.r_next
        self.s2[i] = e.s_next
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.pushed += 1

    def ready(self, batch_size: int) -> bool:
        return self._size >= batch_size

    def ordered(self) -> list[Experience]:
        """Contents oldest first."""
        start = self._next if self._size == self.capacity else 0
        idx = [(start + k) % self.capacity for k in range(self._size)]
        return [Experience(self.s[i].copy(), int(self.a[i]), float(self.r[i]),
                           self.s2[i].copy()) for i in idx]

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if not self.ready(batch_size):
            raise BufferNotReady(f"{self._size} < {batch_size} transitions stored")
        return rng.choice(self._size, size=batch_size, replace=False)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = self.sample_indices(batch_size, rng)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx]


@dataclass
class Trainer:
    """Owns one station's online and target networks and its replay memory."""

    w: QnnWeights
    cfg: TrainerConfig = field(default_factory=TrainerConfig)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    w_target: QnnWeights | None = None
    buffer: ReplayBuffer | None = None
    train_steps: int = 0
    since_sync: int = 0
    syncs: int = 0

    def __post_init__(self):
        if self.w_target is None:
            self.w_target = self.w.copy()
        if self.buffer is None:
            self.buffer = ReplayBuffer(self.cfg.memory_size, self.w.arch.input_dim)

    def tick(self) -> float | None:
        """One training step if the memory holds a full batch, else None."""
        if not self.buffer.ready(self.cfg.batch_size):
            return None
        batch = self.buffer.sample(self.cfg.batch_size, self.rng)
        _, loss = train_step(self.w, self.w_target, batch, self.cfg)
        self.train_steps += 1
        self.since_sync += 1
        if self.since_sync >= self.cfg.target_replace_every:
            sync_target(self.w, self.w_target)
            self.since_sync = 0
            self.syncs += 1
        return loss

    def install(self, global_w: QnnWeights) -> None:
        """Replace online and target networks by copies of ``global_w``."""
        self.w.assign(global_w)
        self.w_target.assign(global_w)


_MAGIC = b"FRMAQNN\0"
_FORMAT = 1


def save_checkpoint(w: QnnWeights, path: str | Path, meta: dict[str, Any] | None = None) -> None:
    header = json.dumps({
        "arch": w.arch.to_dict(),
        "tag": w.arch.tag,
        "version": w.version,
        "layers": [list(d) for d in w.arch.layer_dims()],
        "meta": meta or {},
    }, sort_keys=True).encode("utf-8")
    chunks = [_MAGIC, struct.pack("<HI", _FORMAT, len(header)), header]
    for wm, b in zip(w.weights, w.biases):
        chunks.append(np.ascontiguousarray(wm, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path, expect: Arch | None = DEFAULT_ARCH
                    ) -> tuple[QnnWeights, dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a Q-network checkpoint")
    fmt, hlen = struct.unpack_from("<HI", raw, 8)
    if fmt != _FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {fmt}")
    off = 14
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    arch = Arch(**header["arch"])
    if expect is not None and arch != expect:
        raise ArchitectureMismatch(f"checkpoint holds {arch.tag}, expected {expect.tag}")
    ws, bs = [], []
    for fi, fo in arch.layer_dims():
        ws.append(np.frombuffer(raw, dtype="<f8", count=fi * fo, offset=off)
                  .reshape(fi, fo).astype(float))
        off += 8 * fi * fo
        bs.append(np.frombuffer(raw, dtype="<f8", count=fo, offset=off).astype(float))
        off += 8 * fo
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return QnnWeights(arch, ws, bs, header.get("version", 0)), header.get("meta", {})
