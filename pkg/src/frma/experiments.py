"""Monte Carlo trials, pre-training, station sweeps and fairness time series.

Every trial derives its randomness from ``trial_seed(master_seed, i)``, so a
run is a pure function of its config. Rows are produced in trial order and
written with fixed float formatting, which makes output files byte-identical
across repeated runs.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from frma.agent import EpsilonSchedule, FrmaStation
from frma.analytic import AccessScheme, normalized_throughput
from frma.channel import ChannelEngine, Outcome, StepResult, jain_index, run, throughput
from frma.config import ConfigError, ExperimentConfig, Scheme
from frma.dcf import DcfStation
from frma.fed import FedCoordinator, aggregate
from frma.qnn import (
    Arch,
    QnnWeights,
    Trainer,
    forward_batch,
    gradients,
    init_weights,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

__all__ = [
    "FairnessSeries",
    "PAPER_PRETRAIN_STEPS",
    "RESULT_HEADER",
    "ResultRow",
    "fairness_timeseries",
    "gradient_check",
    "load_pretrained",
    "make_frma_stations",
    "pretrain",
    "run_experiment",
    "simulate_trial",
    "splitmix64",
    "sweep_stations",
    "trial_seed",
    "write_rows",
]

PAPER_PRETRAIN_STEPS = 80_000
_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (a bijection on 64-bit integers)."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def trial_seed(master_seed: int, trial: int) -> int:
    # distinct (master, trial) pairs map to distinct states for trial < 2**32
    if not 0 <= trial < 1 << 32:
        raise ValueError(f"trial index out of range: {trial}")
    return splitmix64(((master_seed << 32) | trial) & _MASK)


@dataclass
class ResultRow:
    scheme: str
    n: int
    trial: int | str
    aggregate_mbps: float
    per_station_mbps: list[float] = field(default_factory=list)
    jain: float | None = None
    collisions: float | None = None
    successes: float | None = None
    fl_rounds: float | None = None

    def cells(self) -> list[str]:
        def f(x):
            return "" if x is None else format(x, ".10g")
        return [self.scheme, str(self.n), str(self.trial), f(self.aggregate_mbps),
                ";".join(f(x) for x in self.per_station_mbps), f(self.jain),
                f(self.collisions), f(self.successes), f(self.fl_rounds)]


RESULT_HEADER = ("scheme", "n", "trial", "aggregate_mbps", "per_station_mbps", "jain",
                 "collisions", "successes", "fl_rounds")


def write_rows(rows: Iterable[ResultRow], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(RESULT_HEADER)
    for r in rows:
        w.writerow(r.cells())


def _arch(cfg: ExperimentConfig) -> Arch:
    return Arch(input_dim=2 * cfg.memory)


def make_frma_stations(cfg: ExperimentConfig, seq: np.random.SeedSequence, n: int | None = None,
                       init: Sequence[QnnWeights] | None = None, epsilon_steps: int = 0,
                       learn: bool = True) -> list[FrmaStation]:
    """Fresh FRMA stations; ``init`` supplies starting weights (one per station)."""
    n = cfg.n_stations if n is None else n
    out = []
    for i, child in enumerate(seq.spawn(n)):
        k_init, k_train, k_policy = child.spawn(3)
        if init is not None:
            w = init[i % len(init)].copy()
        else:
            w = init_weights(np.random.default_rng(k_init), _arch(cfg))
        tr = Trainer(w, cfg.trainer, rng=np.random.default_rng(k_train))
        out.append(FrmaStation(tr, eta=cfg.eta, memory=cfg.memory,
                               epsilon=EpsilonSchedule(steps=epsilon_steps),
                               rng=np.random.default_rng(k_policy), learn=learn))
    return out


def load_pretrained(path: str | Path, n: int, arch: Arch) -> tuple[list[QnnWeights], int]:
    """Weights for ``n`` stations plus the exploration step count to resume from.

    ``path`` is either a single checkpoint shared by every station or a
    pre-training directory; a directory supplies per-station models when it
    holds exactly ``n`` of them and the global model otherwise.
    """
    p = Path(path)
    if p.is_dir():
        per = sorted(p.glob("station_*.ckpt"))
        files = per if len(per) == n else [p / "global.ckpt"]
    else:
        files = [p]
    loaded = [load_checkpoint(f, expect=arch) for f in files]
    eps_steps = max(int(meta.get("epsilon_steps", 0)) for _, meta in loaded)
    return [w for w, _ in loaded], eps_steps


def _frma_setup(cfg: ExperimentConfig, seq: np.random.SeedSequence, engine: ChannelEngine):
    init, eps_steps = None, 0
    if cfg.pretrain_checkpoint:
        init, eps_steps = load_pretrained(cfg.pretrain_checkpoint, cfg.n_stations, _arch(cfg))
    stations = make_frma_stations(cfg, seq, init=init, epsilon_steps=eps_steps)
    fed = FedCoordinator(cfg.fed, stations, overhead_us=engine.t_s_us, enabled=cfg.fl_enabled)
    return stations, fed


def _agents(cfg: ExperimentConfig, seq: np.random.SeedSequence, engine: ChannelEngine):
    if cfg.scheme is Scheme.FRMA:
        return _frma_setup(cfg, seq, engine)
    rngs = [np.random.default_rng(s) for s in seq.spawn(cfg.n_stations)]
    return [DcfStation(cfg.backoff, r) for r in rngs], None


def simulate_trial(cfg: ExperimentConfig, trial: int) -> ResultRow:
    if cfg.scheme is Scheme.ANALYTIC:
        raise ConfigError("experiment.scheme: analytic rows are not simulated")
    seq = np.random.SeedSequence(trial_seed(cfg.master_seed, trial))
    engine = ChannelEngine(cfg.n_stations, cfg.phy, cfg.scheme.access)
    agents, fed = _agents(cfg, seq, engine)
    m = run(agents, cfg.duration_us, cfg.phy, engine=engine,
            after_step=fed.after_step if fed is not None else None)
    agg, per = throughput(m, cfg.phy)
    jain = jain_index(per) if agg > 0 else None
    return ResultRow(cfg.scheme.value, cfg.n_stations, trial, agg, per, jain,
                     m.collision_count, m.success_count,
                     len(fed.rounds) if fed is not None else None)


def _mean_row(rows: Sequence[ResultRow]) -> ResultRow:
    def mean(xs):
        xs = [x for x in xs if x is not None]
        return float(np.mean(xs)) if xs else None
    per = np.mean([r.per_station_mbps for r in rows], axis=0).tolist()
    return ResultRow(rows[0].scheme, rows[0].n, "mean", mean(r.aggregate_mbps for r in rows), per,
                     mean(r.jain for r in rows), mean(r.collisions for r in rows),
                     mean(r.successes for r in rows), mean(r.fl_rounds for r in rows))


def run_experiment(cfg: ExperimentConfig) -> list[ResultRow]:
    """One row per trial followed by the trial mean (analytic: a single row)."""
    if cfg.scheme is Scheme.ANALYTIC:
        res = normalized_throughput(cfg.n_stations, cfg.phy, cfg.backoff, AccessScheme.BASIC)
        return [ResultRow("analytic", cfg.n_stations, 0, res.throughput_mbps)]
    rows = [simulate_trial(cfg, i) for i in range(cfg.trials)]
    return rows + [_mean_row(rows)]


def sweep_stations(cfg: ExperimentConfig, n_list: Sequence[int],
                   include_frma: bool = True) -> list[ResultRow]:
    """Trial-mean throughput for each scheme and station count."""
    if not n_list:
        raise ValueError("n_list must not be empty")
    rows = []
    for n in n_list:
        for access in (AccessScheme.BASIC, AccessScheme.RTS_CTS):
            res = normalized_throughput(n, cfg.phy, cfg.backoff, access)
            rows.append(ResultRow(f"analytic-{access.value}", n, "mean", res.throughput_mbps))
        schemes = [Scheme.BASIC, Scheme.RTS_CTS] + ([Scheme.FRMA] if include_frma else [])
        for scheme in schemes:
            sub = cfg.replace(scheme=scheme, n_stations=n)
            mean = run_experiment(sub)[-1]
            mean.scheme = "frma" if scheme is Scheme.FRMA else f"sim-{scheme.value}"
            rows.append(mean)
    return rows


def pretrain(cfg: ExperimentConfig, out_dir: str | Path, steps: int = PAPER_PRETRAIN_STEPS, *,
             allow_short: bool = False, n_stations: int = 5,
             log_fh: IO[str] | None = None) -> Path:
    """Train ``n_stations`` FRMA stations online for ``steps`` channel decisions.

    Writes ``station_<i>.ckpt`` for every station and ``global.ckpt`` (their
    average) into ``out_dir`` and returns the global checkpoint path.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if steps < PAPER_PRETRAIN_STEPS:
        if not allow_short:
            raise ConfigError(f"pretrain steps {steps} < {PAPER_PRETRAIN_STEPS}; pass allow_short to accept")
        log.warning("pre-training for %d steps; the reference workflow uses %d",
                    steps, PAPER_PRETRAIN_STEPS)
    cfg = cfg.replace(scheme=Scheme.FRMA, n_stations=n_stations)
    seq = np.random.SeedSequence(trial_seed(cfg.master_seed, 0))
    engine = ChannelEngine(n_stations, cfg.phy, AccessScheme.BASIC)
    stations, fed = _frma_setup(cfg.replace(pretrain_checkpoint=None), seq, engine)
    for st in stations:
        st.log_every = 100 if log_fh is not None else 0
    for _ in range(steps):
        res = engine.step([s.decide() for s in stations])
        for fb in res.feedback:
            stations[fb.station].on_feedback(fb)
        for s in stations:
            s.observe(res.busy)
        fed.after_step(engine, res)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eps_steps = max(s.epsilon.steps for s in stations)
    meta = {"steps": steps, "epsilon_steps": eps_steps, "master_seed": cfg.master_seed,
            "fl_rounds": len(fed.rounds)}
    for i, s in enumerate(stations):
        save_checkpoint(s.weights, out / f"station_{i}.ckpt",
                        meta=dict(meta, station=i, train_steps=s.trainer.train_steps))
    path = out / "global.ckpt"
    save_checkpoint(aggregate([s.weights.copy() for s in stations]), path, meta=meta)
    if log_fh is not None:
        w = csv.writer(log_fh, lineterminator="\n")
        w.writerow(("station", "step", "epsilon", "loss", "reward_mean"))
        for i, s in enumerate(stations):
            for step, eps, loss, reward in s.log:
                w.writerow((i, step, format(eps, ".10g"), format(loss, ".10g"), format(reward, ".10g")))
    return path


@dataclass
class FairnessSeries:
    """Per-window successes of each station on a fixed slot grid."""

    n: int
    window_slots: int
    slot_us: float
    payload_us: float
    data_rate_mbps: float
    successes: np.ndarray  # (windows, n)
    collisions: np.ndarray  # (windows,)
    fl_rounds: int = 0

    def window_mbps(self) -> np.ndarray:
        span = self.window_slots * self.slot_us
        return self.successes * self.payload_us / span * self.data_rate_mbps

    def final_jain(self, fraction: float = 0.1) -> float | None:
        """Jain index of per-station successes over the last ``fraction`` of the run."""
        k = max(1, int(round(len(self.successes) * fraction)))
        tail = self.successes[-k:].sum(axis=0)
        return jain_index(tail) if tail.sum() > 0 else None

    def max_share(self, fraction: float = 0.1) -> float | None:
        k = max(1, int(round(len(self.successes) * fraction)))
        tail = self.successes[-k:].sum(axis=0)
        return float(tail.max() / tail.sum()) if tail.sum() > 0 else None

    def rows(self) -> list[list[str]]:
        out = []
        mbps = self.window_mbps()
        for k in range(len(self.successes)):
            per = mbps[k]
            j = jain_index(per) if per.sum() > 0 else None
            out.append([str(k), str(k * self.window_slots), format(per.sum(), ".10g"),
                        *(format(x, ".10g") for x in per),
                        "" if j is None else format(j, ".10g"), str(int(self.collisions[k]))])
        return out

    def header(self) -> list[str]:
        return (["window", "start_slot", "aggregate_mbps"]
                + [f"station_{i}_mbps" for i in range(self.n)] + ["jain", "collisions"])

    def write(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(self.header())
        w.writerows(self.rows())


def fairness_timeseries(cfg: ExperimentConfig, trial: int = 0) -> FairnessSeries:
    """Windowed per-station throughput of an FRMA run over ``duration_us`` worth of slots.

    Events are binned by the slot in which they start; the run stops at the
    first decision point at or beyond the last slot, so the series holds
    ``ceil(duration_slots / window_slots)`` windows.
    """
    cfg = cfg.replace(scheme=Scheme.FRMA)
    total = int(round(cfg.duration_us / cfg.phy.slot_us))
    windows = math.ceil(total / cfg.window_slots)
    succ = np.zeros((windows, cfg.n_stations), dtype=np.int64)
    coll = np.zeros(windows, dtype=np.int64)
    seq = np.random.SeedSequence(trial_seed(cfg.master_seed, trial))
    engine = ChannelEngine(cfg.n_stations, cfg.phy, AccessScheme.BASIC)
    stations, fed = _frma_setup(cfg, seq, engine)

    def record(eng: ChannelEngine, res: StepResult) -> None:
        k = res.start_slot // cfg.window_slots
        if res.outcome is Outcome.SUCCESS:
            succ[k, res.stations[0]] += 1
        elif res.outcome is Outcome.COLLISION:
            coll[k] += 1
        fed.after_step(eng, res)

    while engine.slot_index < total:
        res = engine.step([s.decide() for s in stations])
        for fb in res.feedback:
            stations[fb.station].on_feedback(fb)
        for s in stations:
            s.observe(res.busy)
        record(engine, res)
    return FairnessSeries(cfg.n_stations, cfg.window_slots, cfg.phy.slot_us, cfg.phy.payload_us,
                          cfg.phy.data_rate_mbps, succ, coll, len(fed.rounds))


def _activation_pattern(cache: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([z > 0 for z in cache[1:]], axis=1)


def gradient_check(seed: int = 0, nets: int = 10, states: int = 10, eps: float = 1e-3,
                   arch: Arch | None = None) -> list[tuple[int, int, float]]:
    """Backprop vs central differences; returns (net, state, max relative error) per probe.

    The probe differentiates one randomly weighted combination of both action
    values, which covers every parameter of the network. A ReLU network is
    piecewise linear in any single parameter, so the central difference has
    no truncation error unless the step crosses a kink. That allows a large
    step, which keeps round-off small; a step that changes the activation
    pattern is retried ten times smaller (up to four times). Relative errors
    use a 1e-7 absolute floor.
    """
    arch = arch or Arch()
    out = []
    seq = np.random.SeedSequence(seed)
    for i, child in enumerate(seq.spawn(nets)):
        rng = np.random.default_rng(child)
        w = init_weights(rng, arch)
        # non-zero biases so every term of the gradient is exercised
        for b in w.biases:
            b[...] = rng.normal(scale=0.1, size=b.shape)
        x = rng.integers(0, 2, (states, arch.input_dim)).astype(float)
        dq = rng.normal(size=(states, arch.n_actions))
        analytic = []
        for j in range(states):
            gw, gb = gradients(w, x[j:j + 1], dq[j:j + 1])
            analytic.append(np.concatenate([g.reshape(-1) for pair in zip(gw, gb) for g in pair]))
        analytic = np.stack(analytic)

        base = _activation_pattern(forward_batch(w, x, keep=True)[1])

        def probe(flat, k, h):
            old = flat[k]
            flat[k] = old + h
            q_hi, c_hi = forward_batch(w, x, keep=True)
            flat[k] = old - h
            q_lo, c_lo = forward_batch(w, x, keep=True)
            flat[k] = old
            smooth = (np.all(_activation_pattern(c_hi) == base, axis=1)
                      & np.all(_activation_pattern(c_lo) == base, axis=1))
            num = np.sum(dq * (q_hi - q_lo), axis=1) / (2 * h)
            return num, smooth

        worst = np.zeros(states)
        col = 0
        # one batched forward per perturbation yields the difference for every state
        for p in w.params():
            flat = p.reshape(-1)
            for k in range(flat.size):
                num, smooth = probe(flat, k, eps)
                h = eps
                for _ in range(4):
                    if smooth.all():
                        break
                    h /= 10
                    retry, ok = probe(flat, k, h)
                    num = np.where(smooth, num, retry)
                    smooth = smooth | ok
                ana = analytic[:, col]
                err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-7)
                np.maximum(worst, err, out=worst)
                col += 1
        out.extend((i, j, float(worst[j])) for j in range(states))
    return out
