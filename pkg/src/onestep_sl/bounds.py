"""Closed-form constants and tail/expectation bounds for the Super Learner's excess risk.

``ratio`` is always ``|A| / deg(G)``: the number of units divided by one plus the
maximum degree of the dependency graph. Probability bounds are returned capped
at 1; the ``*_raw`` variants return the uncapped value.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

E = math.e
E2 = math.e**2


class ParameterError(ValueError):
    pass


class Which(str, enum.Enum):
    TIME = "time-bound"
    GRAPH = "graph-bound"


class Regime(str, enum.Enum):
    GRAPH_SHARPER = "graph-sharper"
    TIME_SHARPER = "time-sharper"
    INDETERMINATE = "indeterminate"


@dataclass(frozen=True)
class BoundParameters:
    b1: float
    b2: float
    beta: float
    gamma: float
    v1: float
    ratio: float
    a: float = 1.0
    J: int = 1
    t: int = 1
    N: int = 2
    Nprime: int = 2

    def __post_init__(self):
        if not self.b1 > 0:
            raise ParameterError("b1 must be > 0")
        if not 0 < self.b2 <= 2 * self.b1:
            raise ParameterError("b2 must lie in (0, 2*b1]")
        if not 0 < self.beta <= 1:
            raise ParameterError("beta must lie in (0, 1]")
        if not self.gamma > 0:
            raise ParameterError("gamma must be > 0")
        if not self.v1 > 0:
            raise ParameterError("v1 must be > 0")
        if not self.ratio > 0:
            raise ParameterError("ratio must be > 0")
        if not self.a > 0:
            raise ParameterError("a must be > 0")
        if int(self.J) != self.J or self.J < 1:
            raise ParameterError("J must be a positive integer")
        if int(self.t) != self.t or self.t < 1:
            raise ParameterError("t must be a positive integer")
        if int(self.N) != self.N or self.N < 2 or int(self.Nprime) != self.Nprime or self.Nprime < 2:
            raise ParameterError("N and Nprime must be integers >= 2")

    def with_(self, **kw) -> "BoundParameters":
        d = asdict(self)
        d.update(kw)
        return BoundParameters(**d)


def v2(p: BoundParameters) -> float:
    """Almost-sure bound on the time-averaged conditional variance of the risk gap."""
    if p.ratio <= 0:
        raise ParameterError("ratio must be > 0")
    return 1.5 * math.pi * ((15 * p.b2 / p.ratio) ** 2 + 64 * p.v1 / p.ratio)


@dataclass(frozen=True)
class TailConstants:
    C1: float
    C2: float
    C1p: float
    C2p: float
    x_low: float
    x_low_p: float


def theorem1_constants(p: BoundParameters) -> TailConstants:
    a, beta, g = p.a, p.beta, p.gamma
    C1 = 2 ** (5 - beta) * (1 + a) ** 2 * g / a**beta
    C2 = 8 * (1 + a) * p.b2 / 3
    C1p = 2 ** (6 + 2 * beta) * E2 * (1 + a) ** 2 * g / a**beta
    C2p = 60 * E * (1 + a) * p.b2
    x_low = a * (2.0 ** (-p.N) * v2(p) / g) ** (1 / beta)
    x_low_p = a * p.b1 * 2.0 ** (-p.Nprime)
    return TailConstants(C1, C2, C1p, C2p, x_low, x_low_p)


def theorem1_tail_bound_raw(p: BoundParameters, x: float, which: Which | str) -> float:
    which = Which(which)
    c = theorem1_constants(p)
    beta, t = p.beta, p.t
    if which is Which.TIME:
        if x < c.x_low:
            raise ValueError("below stratification threshold")
        return 2 * p.J * p.N * (math.exp(-t * x ** (2 - beta) / c.C1) + math.exp(-t * x / c.C2))
    if x < c.x_low_p:
        raise ValueError("below stratification threshold")
    info = p.ratio / t**beta
    return 2 * E2 * p.J * p.Nprime * (math.exp(-info * x ** (2 - beta) / c.C1p) + math.exp(-p.ratio * x / c.C2p))


def theorem1_tail_bound(p: BoundParameters, x: float, which: Which | str) -> float:
    """Bound on P[excess_SL >= (1+2a) excess_oracle + x], capped at 1."""
    return min(1.0, theorem1_tail_bound_raw(p, x, which))


# Expectation-bound side conditions use log C3 directly: C3 under/overflows for small beta.
def log_C3(p: BoundParameters) -> float:
    return ((2 - p.beta) / p.beta) * math.log(v2(p) / p.gamma) - math.log(2 ** (5 - p.beta) * p.gamma)


def log_C3p(p: BoundParameters) -> float:
    return math.log(p.b1) - math.log(2 ** (6 + 2 * p.beta) * E2 * p.gamma)


def C3(p: BoundParameters) -> float:
    return math.exp(log_C3(p))


def C3p(p: BoundParameters) -> float:
    return math.exp(log_C3p(p))


def _min_integer(lower: float) -> int:
    return max(2, math.ceil(lower - 1e-12))


def min_N(p: BoundParameters) -> int:
    """Smallest admissible ``N`` for the time-bound expectation inequality."""
    lower = p.beta / (2 - p.beta) * (math.log(p.t) + log_C3(p)) / math.log(2)
    return _min_integer(lower)


def min_Nprime(p: BoundParameters) -> int:
    """Smallest admissible ``N'`` for the graph-bound expectation inequality."""
    lower = p.beta / (2 - p.beta) * (math.log(p.ratio / p.t**p.beta) + log_C3p(p)) / math.log(2)
    return _min_integer(lower)


def common_N_lower(p: BoundParameters) -> float:
    """Lower bound on a shared ``N = N'`` making both expectation inequalities valid."""
    extra = max(0.0, log_C3(p) - math.log(2 * E2 * 8**p.beta) - log_C3p(p))
    return p.beta / (2 - p.beta) * (math.log(p.ratio / p.t**p.beta) + log_C3p(p) + extra) / math.log(2)


def corollary_bound(p: BoundParameters, which: Which | str, check: bool = True) -> float:
    """Bound on E[excess_SL - (1+2a) excess_oracle] (time- or graph-information version)."""
    which = Which(which)
    c = theorem1_constants(p)
    beta, t = p.beta, p.t
    if which is Which.TIME:
        if check and p.N < min_N(p):
            raise ParameterError(f"N={p.N} violates the side condition; minimal admissible N is {min_N(p)}")
        L = math.log(2 * p.J * p.N)
        return 3 * (c.C1 * L / t) ** (1 / (2 - beta)) + 2 * c.C2 * L / t
    if check and p.Nprime < min_Nprime(p):
        raise ParameterError(f"N'={p.Nprime} violates the side condition; minimal admissible N' is {min_Nprime(p)}")
    L = math.log(2 * p.J * p.Nprime)
    info = p.ratio / t**beta
    return 3 * (c.C1p * L / info) ** (1 / (2 - beta)) + 2 * c.C2p * L / p.ratio


def condition_one(p: BoundParameters) -> bool:
    r = p.ratio
    return p.t ** (1 + p.beta) <= r / (2 * E2 * 8**p.beta) and p.t <= r / (45 * E / 2)


def condition_two(p: BoundParameters) -> bool:
    r = p.ratio
    return p.t ** (1 + p.beta) <= r / (2 * E2 * 8**p.beta) and r >= 24 * E * (3 / (2 * E)) ** (1 / p.beta)


@dataclass(frozen=True)
class RegimeVerdict:
    regime: Regime
    condition_one: bool
    condition_two: bool
    common_N_lower: float


def regime_compare(p: BoundParameters) -> RegimeVerdict:
    """Which information measure gives the sharper expectation bound.

    ``graph-sharper`` when both graph terms are no larger than their time
    counterparts, ``time-sharper`` when both inequalities fail strictly,
    ``indeterminate`` otherwise.
    """
    r = p.ratio
    first = r / (2 * E2 * 8**p.beta)
    second = r / (45 * E / 2)
    c1 = condition_one(p)
    if c1:
        regime = Regime.GRAPH_SHARPER
    elif p.t ** (1 + p.beta) > first and p.t > second:
        regime = Regime.TIME_SHARPER
    else:
        regime = Regime.INDETERMINATE
    return RegimeVerdict(regime, c1, condition_two(p), common_N_lower(p))


def theorem2_tail_bound_raw(ratio: float, V: float, b2: float, x: float) -> float:
    if V <= 0:
        raise ValueError("V must be > 0")
    if x < 0:
        raise ValueError("x must be >= 0")
    return math.exp(2 - ratio * x * x / (32 * E2 * V + 15 * E * b2 * x))


def theorem2_tail_bound(ratio: float, V: float, b2: float, x: float) -> float:
    """Bound on P[|H_hat - H_tilde| >= x, max conditional variance <= V], capped at 1."""
    return min(1.0, theorem2_tail_bound_raw(ratio, V, b2, x))


def h(u):
    """``(1+u) log(1+u) - u``, accurate down to tiny ``u`` via its Taylor series."""
    u = np.asarray(u, dtype=float)
    out = (1 + u) * np.log1p(u) - u
    small = np.abs(u) < 1e-2
    if np.any(small):
        us = u[small] if u.ndim else u
        series = np.zeros_like(us)
        for k in range(14, 1, -1):
            series = series + (-1) ** k * us**k / (k * (k - 1))
        if u.ndim:
            out[small] = series
        else:
            out = series
    return out if u.ndim else float(out)


def janson_bound(n_units: int, deg: int, V: float, B: float, x: float) -> float:
    """Upper-tail bound for the average of ``n_units`` variables with dependency degree ``deg``."""
    if min(n_units, deg, B) <= 0 or x < 0 or V < 0:
        raise ValueError("janson_bound needs positive n_units, deg, B and x, V >= 0")
    if V == 0:
        return 1.0 if x == 0 else 0.0
    return float(math.exp(-(n_units * V / (B * B * deg)) * h(4 * B * x / (5 * V))))


def rosenthal_moment_bound(n_units: int, deg: int, V: float, B: float, pth: float) -> float:
    """Bound on the ``pth`` central absolute moment of the unit average."""
    if pth < 2:
        raise ValueError("pth must be >= 2")
    return 1.5 * math.pi * ((15 * B * deg / (2 * n_units)) ** pth * pth**pth + (32 * V * deg / n_units) ** (pth / 2) * pth ** (pth / 2))


def quadratic_lemma_solve(a_: float, b_: float, c_: float) -> float:
    """The ``p > 0`` with ``c = b sqrt(p) + a p``."""
    if not (a_ > 0 and c_ > 0 and b_ >= 0):
        raise ValueError("need a > 0, b >= 0, c > 0")
    root = 2 * c_ / (b_ + math.sqrt(b_ * b_ + 4 * a_ * c_))
    return root * root


def strong_convexity_gamma(a1: float, a2: float) -> float:
    """Variance-bound constant ``4 a1^2 / a2`` for an ``a1``-Lipschitz, ``a2``-strongly convex loss."""
    if a1 <= 0 or a2 <= 0:
        raise ValueError("a1 and a2 must be positive")
    return 4 * a1 * a1 / a2


def least_squares_constants(B: float) -> tuple[float, float]:
    """``(a1, a2)`` for the squared loss with outcomes and predictions in ``[0, B]``."""
    return 4.0 * B, 2.0


def constants_table(p: BoundParameters) -> dict:
    """Every constant, threshold and regime flag for ``p`` as an ordered dict."""
    c = theorem1_constants(p)
    verdict = regime_compare(p)
    return {
        "ratio": p.ratio,
        "v2": v2(p),
        "C1": c.C1,
        "C2": c.C2,
        "C1'": c.C1p,
        "C2'": c.C2p,
        "C3": C3(p),
        "C3'": C3p(p),
        "x_low": c.x_low,
        "x_low'": c.x_low_p,
        "min_N": min_N(p),
        "min_N'": min_Nprime(p),
        "common_N_lower": verdict.common_N_lower,
        "condition_one": verdict.condition_one,
        "condition_two": verdict.condition_two,
        "regime": verdict.regime.value,
    }


@dataclass(frozen=True, eq=False)
class RegimeSweep:
    """Grid points where the sufficient condition holds, with both expectation bounds."""

    beta: np.ndarray
    t: np.ndarray
    ratio: np.ndarray
    J: np.ndarray
    N: np.ndarray
    graph: np.ndarray
    time: np.ndarray
    condition_one: np.ndarray

    @property
    def consistent(self) -> np.ndarray:
        return self.graph <= self.time

    def __len__(self) -> int:
        return len(self.beta)

    def params(self, base: BoundParameters, i: int) -> BoundParameters:
        n = int(self.N[i])
        return base.with_(beta=float(self.beta[i]), t=int(self.t[i]), ratio=float(self.ratio[i]), J=int(self.J[i]),
                          N=n, Nprime=n)


def regime_sweep(base: BoundParameters, betas, ts, ratios, Js=(1,)) -> RegimeSweep:
    """Compare both expectation bounds wherever the sufficient condition holds.

    Each point uses a shared ``N = N'`` equal to the smallest admissible integer
    above :func:`common_N_lower`. Vectorised: the other fields of ``base``
    (``b1, b2, gamma, v1, a``) are held fixed.
    """
    B, T, R, JJ = np.meshgrid(np.asarray(betas, float), np.asarray(ts, float), np.asarray(ratios, float),
                              np.asarray(Js, float), indexing="ij")
    B, T, R, JJ = B.ravel(), T.ravel(), R.ravel(), JJ.ravel()
    first = T ** (1 + B) <= R / (2 * E2 * 8.0**B)
    keep = first & (R >= 24 * E * (3 / (2 * E)) ** (1 / B))
    B, T, R, JJ = B[keep], T[keep], R[keep], JJ[keep]
    cond1 = T <= R / (45 * E / 2)
    a, g, b1, b2 = base.a, base.gamma, base.b1, base.b2
    v2_ = 1.5 * math.pi * ((15 * b2 / R) ** 2 + 64 * base.v1 / R)
    lc3 = ((2 - B) / B) * np.log(v2_ / g) - np.log(2.0 ** (5 - B) * g)
    lc3p = math.log(b1) - np.log(2.0 ** (6 + 2 * B) * E2 * g)
    extra = np.maximum(0.0, lc3 - np.log(2 * E2 * 8.0**B) - lc3p)
    lower = B / (2 - B) * (np.log(R / T**B) + lc3p + extra) / math.log(2)
    N = np.maximum(2, np.ceil(lower - 1e-12))
    L = np.log(2 * JJ * N)
    C1 = 2.0 ** (5 - B) * (1 + a) ** 2 * g / a**B
    C1p = 2.0 ** (6 + 2 * B) * E2 * (1 + a) ** 2 * g / a**B
    C2, C2p = 8 * (1 + a) * b2 / 3, 60 * E * (1 + a) * b2
    time = 3 * (C1 * L / T) ** (1 / (2 - B)) + 2 * C2 * L / T
    graph = 3 * (C1p * L / (R / T**B)) ** (1 / (2 - B)) + 2 * C2p * L / R
    return RegimeSweep(B, T.astype(int), R, JJ.astype(int), N.astype(int), graph, time, cond1)
