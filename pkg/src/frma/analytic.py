"""Closed-form saturation throughput for DCF basic access and RTS/CTS.

The per-slot transmission probability follows the finite-retry-limit form of
the two-dimensional backoff chain (Bianchi 2000 with a retry limit ``R``), so
the numbers differ slightly from the classic infinite-retry expression when
``R`` is finite.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import IO, Iterable

__all__ = [
    "AccessScheme",
    "AnalyticResult",
    "BackoffParams",
    "DegenerateInputError",
    "PhyTimings",
    "SolverError",
    "SWEEP_HEADER",
    "channel_times",
    "collision_probability",
    "normalized_throughput",
    "solve_fixed_point",
    "slot_throughput",
    "sweep",
    "tau_from_collision",
    "transmission_probabilities",
    "write_sweep_csv",
]


class SolverError(RuntimeError):
    """The tau/P_w fixed point did not converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class DegenerateInputError(ValueError):
    pass


class AccessScheme(str, enum.Enum):
    BASIC = "basic"
    RTS_CTS = "rts"

    @classmethod
    def parse(cls, value: "str | AccessScheme") -> "AccessScheme":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("/", "").replace("-", "").replace("_", "")
        aliases = {"basic": cls.BASIC, "rts": cls.RTS_CTS, "rtscts": cls.RTS_CTS}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown access scheme {value!r}") from None


@dataclass(frozen=True)
class PhyTimings:
    """Air-time constants. Durations in microseconds, sizes in bytes."""

    slot_us: float = 10.0
    sifs_us: float = 16.0
    difs_us: float = 34.0
    rts_us: float = 46.0
    cts_us: float = 38.0
    phy_header_us: float = 20.0
    mac_header_bytes: float = 60.0
    ack_us: float = 40.0
    prop_delay_us: float = 0.1
    payload_bytes: float = 1500.0
    data_rate_mbps: float = 6.0

    def __post_init__(self):
        positive = ("slot_us", "sifs_us", "difs_us", "rts_us", "cts_us",
                    "phy_header_us", "ack_us", "data_rate_mbps")
        for name in positive:
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive, got {value!r}")
        for name in ("prop_delay_us", "mac_header_bytes", "payload_bytes"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be non-negative, got {value!r}")

    @property
    def eifs_us(self) -> float:
        return self.sifs_us + self.ack_us + self.prop_delay_us

    @property
    def header_us(self) -> float:
        """H: PHY header plus MAC header air time."""
        return self.phy_header_us + self.mac_header_bytes * 8.0 / self.data_rate_mbps

    @property
    def payload_us(self) -> float:
        """E[P]: payload air time."""
        return self.payload_bytes * 8.0 / self.data_rate_mbps


@dataclass(frozen=True)
class BackoffParams:
    """Contention window limits. ``m`` is inferred from the window sizes when omitted."""

    cw_min: int = 15
    cw_max: int = 1023
    retry_limit: int = 6
    m: int | None = None

    def __post_init__(self):
        if self.cw_min < 0 or self.cw_max < self.cw_min:
            raise ValueError(f"need 0 <= cw_min <= cw_max, got {self.cw_min}, {self.cw_max}")
        ratio = (self.cw_max + 1) / (self.cw_min + 1)
        stages = math.log2(ratio)
        if abs(stages - round(stages)) > 1e-12:
            raise ValueError(
                f"(cw_max+1)/(cw_min+1) = {ratio} is not a power of two")
        stages = int(round(stages))
        if self.m is None:
            object.__setattr__(self, "m", stages)
        elif self.m != stages:
            raise ValueError(f"m={self.m} inconsistent with cw_min/cw_max (expected {stages})")
        if self.retry_limit < self.m:
            raise ValueError(f"retry_limit ({self.retry_limit}) must be >= m ({self.m})")

    @property
    def w0(self) -> int:
        """Smallest window size: the backoff counter takes W_0 = cw_min + 1 values."""
        return self.cw_min + 1


@dataclass(frozen=True)
class AnalyticResult:
    n: int
    scheme: AccessScheme
    tau: float
    p_w: float
    p_tr: float
    p_s: float
    t_s_us: float
    t_c_us: float
    s_normalized: float
    throughput_mbps: float = field(default=0.0)


def tau_from_collision(p: float, bp: BackoffParams) -> float:
    """Per-slot transmission probability given the conditional collision probability.

    Evaluated in an algebraically equivalent polynomial form that is regular at
    ``p = 1/2`` and ``p = 1``: the ratio in the printed expression reduces to
    ``(sum_{j<=m} (2p)^j + 2^m p^(m+1) sum_{j<R-m} p^j) / sum_{j<=R} p^j``.
    """
    m, r = bp.m, bp.retry_limit
    num = sum((2.0 * p) ** j for j in range(m + 1))
    num += 2.0 ** m * p ** (m + 1) * sum(p ** j for j in range(r - m))
    den = sum(p ** j for j in range(r + 1))
    return 2.0 / (bp.w0 * num / den + 1.0)


def collision_probability(tau: float, n: int) -> float:
    return 1.0 - (1.0 - tau) ** (n - 1)


def solve_fixed_point(n: int, bp: BackoffParams, *, tol: float = 1e-10,
                      max_iter: int = 200) -> tuple[float, float]:
    """Solve the coupled tau / P_w equations by bisection on tau.

    The residual ``tau - tau_from_collision(P_w(tau))`` is strictly increasing
    in tau, so bisection over (1e-12, 1 - 1e-12) always brackets the root.
    """
    if n < 1:
        raise ValueError(f"station count must be >= 1, got {n}")

    def residual(tau: float) -> float:
        return tau - tau_from_collision(collision_probability(tau, n), bp)

    lo, hi = 1e-12, 1.0 - 1e-12
    f_lo = residual(lo)
    if f_lo > 0:
        raise SolverError("root not bracketed", f_lo)
    mid, f_mid = lo, f_lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        f_mid = residual(mid)
        if f_mid == 0.0:
            break
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
    f_mid = residual(mid)
    if abs(f_mid) >= tol:
        raise SolverError(f"bisection did not converge for n={n}", abs(f_mid))
    return mid, collision_probability(mid, n)


def channel_times(pt: PhyTimings, scheme: AccessScheme | str) -> tuple[float, float]:
    """Busy-channel durations (T_s, T_c) in microseconds for one access scheme."""
    scheme = AccessScheme.parse(scheme)
    h, ep, d = pt.header_us, pt.payload_us, pt.prop_delay_us
    if scheme is AccessScheme.BASIC:
        t_s = h + ep + pt.sifs_us + d + pt.ack_us + pt.difs_us + d
        t_c = h + ep + pt.eifs_us + d
    else:
        t_s = (pt.rts_us + pt.sifs_us + d + pt.cts_us + pt.sifs_us + d + h
               + ep + pt.sifs_us + d + pt.ack_us + pt.difs_us + d)
        t_c = pt.rts_us + pt.eifs_us + d
    return t_s, t_c


def transmission_probabilities(n: int, tau: float) -> tuple[float, float]:
    """P_tr (someone transmits) and P_s (exactly one does, given someone does)."""
    if n < 1:
        raise ValueError(f"station count must be >= 1, got {n}")
    if not 0.0 < tau <= 1.0:
        raise DegenerateInputError(f"tau must lie in (0, 1], got {tau!r}")
    p_tr = 1.0 - (1.0 - tau) ** n
    p_s = n * tau * (1.0 - tau) ** (n - 1) / p_tr
    return p_tr, p_s


def slot_throughput(p_tr: float, p_s: float, payload_us: float, slot_us: float,
                    t_s_us: float, t_c_us: float) -> float:
    """Expected payload time per expected virtual-slot length."""
    denom = (1.0 - p_tr) * slot_us + p_tr * p_s * t_s_us + p_tr * (1.0 - p_s) * t_c_us
    return p_s * p_tr * payload_us / denom


def normalized_throughput(n: int, pt: PhyTimings, bp: BackoffParams,
                          scheme: AccessScheme | str) -> AnalyticResult:
    scheme = AccessScheme.parse(scheme)
    tau, p_w = solve_fixed_point(n, bp)
    t_s, t_c = channel_times(pt, scheme)
    p_tr, p_s = transmission_probabilities(n, tau)
    s = slot_throughput(p_tr, p_s, pt.payload_us, pt.slot_us, t_s, t_c)
    return AnalyticResult(n=n, scheme=scheme, tau=tau, p_w=p_w, p_tr=p_tr, p_s=p_s,
                          t_s_us=t_s, t_c_us=t_c, s_normalized=s,
                          throughput_mbps=s * pt.data_rate_mbps)


def sweep(n_range: Iterable[int], pt: PhyTimings, bp: BackoffParams,
          schemes: Iterable[AccessScheme] = (AccessScheme.BASIC, AccessScheme.RTS_CTS),
          ) -> list[AnalyticResult]:
    ns = list(n_range)
    if not ns:
        raise ValueError("n_range is empty")
    schemes = [AccessScheme.parse(s) for s in schemes]
    return [normalized_throughput(n, pt, bp, s) for n in ns for s in schemes]


SWEEP_HEADER = ("n", "scheme", "tau", "p_w", "p_tr", "p_s",
                "t_s_us", "t_c_us", "s_norm", "throughput_mbps")


def _fmt(x: float) -> str:
    return format(x, ".15g")


def write_sweep_csv(rows: Iterable[AnalyticResult], fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in rows:
        writer.writerow([r.n, r.scheme.value] + [_fmt(v) for v in (
            r.tau, r.p_w, r.p_tr, r.p_s, r.t_s_us, r.t_c_us, r.s_normalized,
            r.throughput_mbps)])
