"""Special functions, the log-barrier solver and seeded samplers.

Everything here is pure: randomness only enters through an explicit
:class:`RngStream` argument.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

INV_E = math.exp(-1.0)

# f(x) -> (value, gradient, hessian); value may be +inf outside the domain.
SmoothFn = Callable[[np.ndarray], tuple[float, np.ndarray, np.ndarray]]


# ---------------------------------------------------------------------------
# Random streams


class Source(enum.IntEnum):
    """Randomness sources; each gets its own stream per device."""

    SETUP = 0
    DATA = 1
    ARRIVALS = 2
    CAPACITY = 3
    CHANNEL = 4
    MINIBATCH = 5
    SCHEDULING = 6
    TEST = 7


class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Streams are derived with :class:`numpy.random.SeedSequence` spawn keys,
    so two streams with different ids are statistically independent and the
    draws of one never depend on how often another was used.
    """

    def __init__(self, seed: int, stream_id: int | Sequence[int] = ()):
        if isinstance(stream_id, (int, np.integer)):
            stream_id = (int(stream_id),)
        self.seed = int(seed)
        self.stream_id = tuple(int(s) for s in stream_id)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    @classmethod
    def for_device(cls, seed: int, replication: int, source: Source, device: int) -> "RngStream":
        return cls(seed, (replication, int(source), device))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def exponential(self, scale=1.0, size=None):
        return self.generator.exponential(scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self.generator.permutation(x)


# ---------------------------------------------------------------------------
# Lambert W, lower branch


def lambert_w_m1(psi: float) -> float:
    """Lower real branch ``W_{-1}`` of the Lambert W function.

    Returns ``w <= -1`` with ``w * exp(w) == psi`` for ``-1/e <= psi < 0``.
    Starts from the branch-point series or the log asymptote and polishes
    with Halley's iteration.
    """
    psi = float(psi)
    if not psi < 0.0 or math.isnan(psi):
        raise ValueError(f"lambert_w_m1 needs psi < 0, got {psi!r}")
    # one ulp of slack below -1/e absorbs the rounding of -1/e itself
    if psi < -INV_E * (1.0 + 4.0 * np.finfo(float).eps):
        raise ValueError(f"lambert_w_m1 needs psi >= -1/e, got {psi!r}")
    q = 1.0 + math.e * psi
    if q <= 0.0:
        return -1.0
    if psi > -0.25:
        lg = math.log(-psi)
        w = lg - math.log(-lg)
    else:
        p = math.sqrt(2.0 * q)
        w = -1.0 - p - p * p / 3.0 - 11.0 / 72.0 * p ** 3
        if q < 1e-20:
            return w
    for _ in range(64):
        ew = math.exp(w)
        f = w * ew - psi
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        dw = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w_new = w - dw
        if w_new > -1.0:
            w_new = 0.5 * (w - 1.0)
        if abs(w_new - w) <= 4.0 * np.finfo(float).eps * abs(w_new):
            w = w_new
            break
        w = w_new
    return w


def bisect(fn: Callable[[float], float], lo: float, hi: float, rtol: float = 1e-15, max_iter: int = 400) -> float:
    """Plain bisection on a bracketing interval ``fn(lo) * fn(hi) <= 0``."""
    flo = fn(lo)
    fhi = fn(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0:
        raise ValueError("root is not bracketed")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = fn(mid)
        if fm == 0.0:
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo <= rtol * max(abs(lo), abs(hi)):
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Log-barrier method on {x : sum(x) = 1, g_i(x) < 0}


class InfeasibleStartError(ValueError):
    pass


class SolverDidNotConverge(RuntimeError):
    def __init__(self, message: str, best: np.ndarray):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class SolverOptions:
    newton_tolerance: float = 1e-12
    max_newton_iters: int = 200
    barrier_mu: float = 10.0
    barrier_initial_t: float = 1.0
    backtrack_alpha: float = 0.25
    backtrack_beta: float = 0.5
    duality_gap: float = 1e-8
    equality_tolerance: float = 1e-10

    def __post_init__(self):
        if not 0.0 < self.backtrack_alpha < 0.5:
            raise ValueError("backtrack_alpha must lie in (0, 0.5)")
        if not 0.0 < self.backtrack_beta < 1.0:
            raise ValueError("backtrack_beta must lie in (0, 1)")
        if not self.barrier_mu > 1.0:
            raise ValueError("barrier_mu must exceed 1")
        if min(self.newton_tolerance, self.barrier_initial_t, self.duality_gap, self.equality_tolerance) <= 0:
            raise ValueError("tolerances and the initial barrier weight must be positive")
        if self.max_newton_iters < 1:
            raise ValueError("max_newton_iters must be >= 1")


def _barrier_eval(x, t, objective, constraints, need_derivs=True):
    f, gf, hf = objective(x)
    if not np.isfinite(f):
        return math.inf, None, None
    val = t * f
    if need_derivs:
        grad = t * np.asarray(gf, dtype=float)
        hess = t * np.asarray(hf, dtype=float)
    for g in constraints:
        gi, ggi, hgi = g(x)
        if not gi < 0.0:
            return math.inf, None, None
        val -= math.log(-gi)
        if need_derivs:
            ggi = np.asarray(ggi, dtype=float)
            grad = grad + ggi / (-gi)
            hess = hess + np.outer(ggi, ggi) / (gi * gi) + np.asarray(hgi, dtype=float) / (-gi)
    if not need_derivs:
        return val, None, None
    return val, grad, hess


def solve_barrier(
    objective: SmoothFn,
    constraints: Sequence[SmoothFn],
    start: np.ndarray,
    opts: SolverOptions = SolverOptions(),
) -> np.ndarray:
    """Minimise a convex ``objective`` over ``sum(x) = 1`` and ``g_i(x) <= 0``.

    Path-following log-barrier method. Each centering step is a damped
    Newton method on the barrier function restricted to the affine set
    ``sum(x) = 1`` (one coordinate is eliminated, so every step satisfies
    ``sum(dx) = 0``). Stops once ``len(constraints) / t`` drops below
    ``opts.duality_gap``.
    """
    x = np.array(start, dtype=float)
    n = x.size
    if abs(x.sum() - 1.0) > opts.equality_tolerance:
        raise InfeasibleStartError(f"start violates sum(x)=1 by {x.sum() - 1.0:.3e}")
    g0 = np.array([g(x)[0] for g in constraints], dtype=float)
    bad = np.flatnonzero(~(g0 < 0.0))
    if bad.size:
        raise InfeasibleStartError(f"constraint {bad[0]} not strictly satisfied at start (g={g0[bad[0]]!r})")
    if n == 1:
        return x
    m = g0.size
    # columns span {dx : sum(dx) = 0}
    basis = np.vstack([np.eye(n - 1), -np.ones((1, n - 1))])
    t = opts.barrier_initial_t
    if m == 0:
        t = 1.0
    while True:
        for it in range(opts.max_newton_iters):
            val, grad, hess = _barrier_eval(x, t, objective, constraints)
            rg = basis.T @ grad
            rh = basis.T @ hess @ basis
            try:
                dy = -np.linalg.solve(rh, rg)
            except np.linalg.LinAlgError:
                dy = -np.linalg.lstsq(rh, rg, rcond=None)[0]
            dx = basis @ dy
            slope = float(grad @ dx)
            # half the squared Newton decrement, relative to the barrier value's scale
            if -slope / 2.0 <= opts.newton_tolerance * max(1.0, abs(val)):
                break
            step = 1.0
            while True:
                cand = x + step * dx
                cval = _barrier_eval(cand, t, objective, constraints, need_derivs=False)[0]
                if cval <= val + opts.backtrack_alpha * step * slope:
                    break
                step *= opts.backtrack_beta
                if step < 1e-20:
                    break
            if step < 1e-20 or np.array_equal(cand, x):
                # no representable progress left along dx: treat as centred
                break
            x = cand
        else:
            raise SolverDidNotConverge(
                f"centering did not converge within {opts.max_newton_iters} Newton steps (t={t:.3e})", x.copy()
            )
        if m == 0 or m / t < opts.duality_gap:
            break
        t *= opts.barrier_mu
    # re-project onto the simplex plane to kill accumulated rounding
    x = x + (1.0 - x.sum()) / n
    return x


# ---------------------------------------------------------------------------
# Truncated samplers


def sample_truncated_gaussian(mean: float, sd: float, lo: float, hi: float, rng: RngStream, size=None):
    """Gaussian(mean, sd) conditioned on ``[lo, hi]``.

    Rejection sampling in batches; after 10**4 rejections for one draw the
    remaining values come from the (clamped) inverse CDF instead.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    if not sd > 0:
        raise ValueError("need sd > 0")
    n = 1 if size is None else int(np.prod(size))
    out = np.empty(n)
    filled = 0
    attempts = 0
    budget = 10_000 * n
    while filled < n and attempts < budget:
        batch = max(16, 2 * (n - filled))
        draws = rng.normal(mean, sd, batch)
        attempts += batch
        ok = draws[(draws >= lo) & (draws <= hi)]
        take = min(ok.size, n - filled)
        out[filled:filled + take] = ok[:take]
        filled += take
    if filled < n:
        a = special.ndtr((lo - mean) / sd)
        b = special.ndtr((hi - mean) / sd)
        u = rng.uniform(a, b, n - filled) if b > a else np.full(n - filled, a)
        x = mean + sd * special.ndtri(u)
        out[filled:] = np.clip(np.nan_to_num(x, nan=lo, posinf=hi, neginf=lo), lo, hi)
    if size is None:
        return float(out[0])
    return out.reshape(size)


def truncated_poisson_pmf(rate: float, hi: int) -> np.ndarray:
    """pmf of Poisson(rate) conditioned on ``<= hi`` over ``0..hi``."""
    k = np.arange(hi + 1)
    if rate == 0:
        pmf = np.zeros(hi + 1)
        pmf[0] = 1.0
        return pmf
    logp = k * math.log(rate) - rate - special.gammaln(k + 1)
    logp -= logp.max()
    p = np.exp(logp)
    return p / p.sum()


def sample_truncated_poisson(rate: float, hi: int, rng: RngStream, size=None):
    """Poisson(rate) conditioned on ``<= hi``, by inverse CDF on ``0..hi``."""
    if rate < 0 or hi < 0:
        raise ValueError("need rate >= 0 and hi >= 0")
    cdf = np.cumsum(truncated_poisson_pmf(rate, int(hi)))
    cdf[-1] = 1.0
    u = rng.random(size)
    k = np.searchsorted(cdf, u, side="right")
    k = np.minimum(k, hi)
    if size is None:
        return int(k)
    return k.astype(int)
