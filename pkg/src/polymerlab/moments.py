"""Moments of the partition function and the exponents built from them.

Exact side: replica computations that never touch a sampled environment.
The second moment is the expectation of ``m2 ** (collision count)`` for a
difference walk started at the origin, where ``m2 = exp(lmgf(2b) - 2 lmgf(b))``.
Two independent routes are implemented, a spatial DP over the difference walk
and a renewal equation driven by return probabilities of the simple random
walk; they agree to rounding and cross-validate each other.  The third moment
uses the analogous DP over two relative coordinates.

Monte Carlo side: growth-rate estimates ``(1/n) log E[W_n^p]`` from sampled
environments, the tail exponent of ``sup_k W_k``, and the derived
homogenization rate ``xi = d/2 - (d+2)/(2 p*)``.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.special import gammaln, logsumexp, zeta

from .environment import DisorderLaw, SeededEnvironment, derive_seed
from .errors import CapacityError, NoTransitionError
from .lattice import PolymerConfig, evolve

__all__ = [
    "return_probability",
    "ReturnProbability",
    "exact_second_moment",
    "second_moment_curve",
    "exact_kth_moment",
    "second_moment_growth_rate",
    "l2_growth_point",
    "beta_crit_L2",
    "BetaCritResult",
    "mc_moment",
    "MCMoment",
    "sample_log_partitions",
    "MomentCurve",
    "build_moment_curve",
    "synthetic_moment_curve",
    "estimate_qstar",
    "QStarEstimate",
    "estimate_pstar",
    "PStarEstimate",
    "xi_from_pstar",
    "gff_intensity",
    "GFFIntensity",
    "PhasePoint",
    "compute_phase_point",
]


# ---------------------------------------------------------------------------
# simple-random-walk return probabilities
# ---------------------------------------------------------------------------

# Cache of walk tables per dimension.  Each entry holds the largest arrays
# computed so far; smaller requests reuse prefixes.
_WALK_CACHE: dict = {}


def _central_binomials(T):
    """b[j] = C(2j, j) 4^-j for j = 0..T, by the stable ratio recurrence."""
    b = np.empty(T + 1)
    b[0] = 1.0
    for j in range(1, T + 1):
        b[j] = b[j - 1] * (2 * j - 1) / (2 * j)
    return b


def _return_curve(d, T):
    """r[j] = P(SRW in Z^d returns to 0 at time 2j), j = 0..T.

    Built by conditioning on the number of steps the walk spends in the
    first axis: r_d[j] = sum_m Binom(2m; 2j, 1/d) b[m] r_{d-1}[j-m].
    d = 1 is b itself and d = 2 collapses to b^2 exactly.
    """
    b = _central_binomials(T)
    if d == 1:
        return b.copy()
    if d == 2:
        return b * b
    prev = _return_curve(d - 1, T)
    # log of C(2j, 2m) (1/d)^{2m} ((d-1)/d)^{2j-2m} via a gammaln table
    lg = gammaln(np.arange(2 * T + 2) + 1.0)
    la = math.log(1.0 / d)
    lb = math.log((d - 1.0) / d)
    out = np.empty(T + 1)
    out[0] = 1.0
    for j in range(1, T + 1):
        m = np.arange(j + 1)
        lw = lg[2 * j] - lg[2 * m] - lg[2 * j - 2 * m] + 2 * m * la \
            + (2 * j - 2 * m) * lb
        out[j] = np.dot(np.exp(lw) * b[m], prev[j - m])
    return out


def _walk_tables(d, T):
    """Return (r, f) arrays of length T+1: return and first-return curves."""
    cached = _WALK_CACHE.get(d)
    if cached is not None and len(cached[0]) > T:
        r, f = cached
        return r[: T + 1], f[: T + 1]
    r = _return_curve(d, T)
    # renewal inversion: r_j = sum_{i<=j} f_i r_{j-i}, f_0 = 0
    f = np.zeros(T + 1)
    for j in range(1, T + 1):
        f[j] = r[j] - np.dot(f[1:j], r[j - 1:0:-1])
    _WALK_CACHE[d] = (r, f)
    return r, f


@dataclasses.dataclass(frozen=True)
class ReturnProbability:
    """Probability that SRW in Z^d ever returns to the origin.

    truncated:     P(first return happens by time 2T)
    extrapolated:  truncated plus the fitted tail sum_{j>T} c j^{-d/2}
                   with c matched to the last computed first-return weight
    """

    d: int
    T: int
    truncated: float
    extrapolated: float


def return_probability(d, T=2048):
    """Return probability of the simple random walk, truncated at time 2T.

    Transient only for d >= 3; for d in {1, 2} the extrapolated value is
    reported as 1.0 (recurrence) and the truncated partial sum still carries
    the finite-horizon information.
    """
    if d < 1:
        raise ValueError("dimension must be positive")
    if T < 1:
        raise ValueError("T must be >= 1")
    r, f = _walk_tables(d, T)
    truncated = float(f[1:].sum())
    if d <= 2:
        return ReturnProbability(d, T, truncated, 1.0)
    # f_j ~ c j^{-d/2}; match c at the truncation edge, then add the exact
    # tail of the power law via the Hurwitz zeta difference.
    c = f[T] * T ** (d / 2.0)
    tail = c * float(zeta(d / 2.0, T + 1))
    return ReturnProbability(d, T, truncated, truncated + tail)


# ---------------------------------------------------------------------------
# exact replica moments
# ---------------------------------------------------------------------------


def _pair_multiplier(beta, law):
    """m2 = E[e^{2 b w}] / E[e^{b w}]^2, the collision multiplier."""
    return math.exp(law.log_mgf(2.0 * beta) - 2.0 * law.log_mgf(beta))


def _difference_shifts(d):
    """Offsets and probabilities of one step of the two-replica difference.

    Both replicas take one SRW step; the difference X1 - X2 moves by the
    difference of the two unit steps.  Duplicate offsets are merged.
    """
    table: dict = {}
    unit = 1.0 / (2 * d) ** 2
    for a1 in range(2 * d):
        for a2 in range(2 * d):
            off = [0] * d
            off[a1 // 2] += 1 if a1 % 2 == 0 else -1
            off[a2 // 2] -= 1 if a2 % 2 == 0 else -1
            key = tuple(off)
            table[key] = table.get(key, 0.0) + unit
    return sorted(table.items())


def _shift_accumulate(dst, src, shifts, d):
    """dst = sum over shifts of prob * src translated by the offset."""
    dst.fill(0.0)
    n_side = src.shape[0]
    for off, prob in shifts:
        src_sl = []
        dst_sl = []
        for k in range(d):
            o = off[k]
            if o >= 0:
                src_sl.append(slice(0, n_side - o))
                dst_sl.append(slice(o, n_side))
            else:
                src_sl.append(slice(-o, n_side))
                dst_sl.append(slice(0, n_side + o))
        dst[tuple(dst_sl)] += prob * src[tuple(src_sl)]
    return dst


def _second_moment_dp(d, n, m2):
    """E[W_t^2] for t = 0..n via the difference-walk DP.

    The difference walk starts at 0; after every step, mass sitting at the
    origin is multiplied by m2 (the two replicas share that step's weight).
    The total mass after t steps is E[W_t^2].
    """
    side = 4 * n + 1
    if side ** d > 3_000_000:
        raise CapacityError(
            f"difference-walk state of side {side}^{d} is too large; "
            "use the renewal method")
    shifts = _difference_shifts(d)
    cur = np.zeros((side,) * d)
    nxt = np.zeros_like(cur)
    origin = (2 * n,) * d
    cur[origin] = 1.0
    out = np.empty(n + 1)
    out[0] = 1.0
    for t in range(1, n + 1):
        _shift_accumulate(nxt, cur, shifts, d)
        nxt[origin] *= m2
        cur, nxt = nxt, cur
        out[t] = cur.sum()
    return out


def _second_moment_renewal(d, n, m2):
    """E[W_t^2] for t = 0..n via the collision renewal equation.

    The difference walk D = X1 - X2 of two independent SRWs satisfies
    P(D_t = 0) = P(SRW at time 2t is at 0): negating the second walk's
    increments shows D_t is a sum of 2t iid uniform unit steps.  Its return
    curve is therefore the r table and its first-return law is the f table.
    Conditioning E[m2^(collisions in 1..t)] on the first collision time
    gives phi_t = (1 - F_t) + m2 * sum_{j<=t} f_j phi_{t-j}.

    Rescaling by exact powers of two keeps the recursion in range for
    strongly growing moments; entries whose true value overflows a double
    come back as inf.
    """
    _, f = _walk_tables(d, max(n, 2))
    F = np.cumsum(f)
    phi = np.empty(n + 1)
    phi[0] = 1.0
    logs = np.zeros(n + 1)
    shift = 0  # phi holds true values times 2**-shift
    log2 = math.log(2.0)
    for t in range(1, n + 1):
        no_ret = math.ldexp(1.0 - F[t], -shift) if shift <= 1074 else 0.0
        val = no_ret + m2 * np.dot(f[1:t + 1], phi[t - 1::-1])
        if val > 8.8e99:
            phi[:t] = np.ldexp(phi[:t], -664)
            val = math.ldexp(val, -664)
            shift += 664
        phi[t] = val
        logs[t] = math.log(val) + shift * log2
    if shift == 0:
        # no rescaling happened: return the directly accumulated values
        return phi
    # rescaled: early entries may have underflowed in place, so rebuild
    # from the logs recorded at write time (inf where a double overflows)
    with np.errstate(over="ignore"):
        return np.exp(logs)


def second_moment_curve(d, n, beta, law, method="auto"):
    """E[W_t^2] for t = 0..n as an array, exact up to rounding.

    method: "dp" (spatial difference walk), "renewal", or "auto".
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    m2 = _pair_multiplier(beta, law)
    if method == "auto":
        method = "dp" if (4 * n + 1) ** d <= 3_000_000 else "renewal"
    if method == "dp":
        return _second_moment_dp(d, n, m2)
    if method == "renewal":
        return _second_moment_renewal(d, n, m2)
    raise ValueError(f"unknown method {method!r}")


def exact_second_moment(d, n, beta, law, method="auto"):
    """E[W_n^2], exact up to rounding.  beta = 0 gives exactly 1.0."""
    if beta == 0.0:
        return 1.0
    return float(second_moment_curve(d, n, beta, law, method)[n])


def _third_moment_dp(d, n, beta, law):
    """E[W_n^3] via the DP over (X1-X2, X1-X3) in Z^{2d}.

    The step multiplier depends on the coincidence pattern of the three
    replicas: all three together costs m3 = E e^{3bw} / (E e^{bw})^3, exactly
    one coinciding pair costs m2.  Patterns are read off the two relative
    coordinates Y = X1-X2 and Z = X1-X3: Y=Z=0 means a triple; Y=0, Z=0, or
    Y=Z each seat one pair.
    """
    side = 4 * n + 1
    if side ** (2 * d) > 60_000_000:
        raise CapacityError(
            f"third-moment state of side {side}^{2 * d} is too large")
    m2 = _pair_multiplier(beta, law)
    m3 = math.exp(law.log_mgf(3.0 * beta) - 3.0 * law.log_mgf(beta))
    # one step of (Y, Z) from the three independent SRW steps
    table: dict = {}
    unit = (1.0 / (2 * d)) ** 3
    steps = []
    for a in range(2 * d):
        e = [0] * d
        e[a // 2] = 1 if a % 2 == 0 else -1
        steps.append(e)
    for s1 in steps:
        for s2 in steps:
            for s3 in steps:
                off = tuple(s1[k] - s2[k] for k in range(d)) \
                    + tuple(s1[k] - s3[k] for k in range(d))
                table[off] = table.get(off, 0.0) + unit
    shifts = sorted(table.items())
    dim = 2 * d
    cur = np.zeros((side,) * dim)
    nxt = np.zeros_like(cur)
    c = 2 * n
    origin = (c,) * dim
    cur[origin] = 1.0
    # Pair planes: Y = 0 holds the (1,2) pair, Z = 0 the (1,3) pair, and the
    # diagonal Y = Z the (2,3) pair.  They intersect pairwise only at the
    # origin (the triple point), which collects m2 three times below and is
    # then corrected to the triple multiplier m3.
    y0 = (c,) * d + (slice(None),) * d
    z0 = (slice(None),) * d + (c,) * d
    idx = np.indices((side,) * d).reshape(d, -1)
    diag = tuple(idx[k] for k in range(d)) * 2
    for t in range(n):
        _shift_accumulate(nxt, cur, shifts, dim)
        nxt[y0] *= m2
        nxt[z0] *= m2
        nxt[diag] *= m2
        nxt[origin] *= m3 / (m2 ** 3)
        cur, nxt = nxt, cur
    return float(cur.sum())


def exact_kth_moment(d, n, beta, law, k):
    """E[W_n^k] for k in {1, 2, 3}, exact up to rounding.

    k = 1 is identically 1 (martingale).  k = 2 delegates to
    exact_second_moment.  k = 3 runs the relative-coordinate DP and is
    limited to small d and n by the (4n+1)^{2d} state.
    """
    if k == 1:
        return 1.0
    if k == 2:
        return exact_second_moment(d, n, beta, law)
    if k == 3:
        if beta == 0.0:
            return 1.0
        return _third_moment_dp(d, n, beta, law)
    raise ValueError("k must be 1, 2, or 3")


# ---------------------------------------------------------------------------
# L2 growth and the critical temperature
# ---------------------------------------------------------------------------


def second_moment_growth_rate(d, beta, law, n=8192):
    """Finite-n growth rate of E[W_n^2] with a criticality threshold.

    rate = (log E[W_n^2] - log E[W_{n/2}^2]) / (n/2) from the renewal
    recursion with rescaling.  At an L2-critical point the second moment
    grows like sqrt(n), so the rate there is ~ log(2)/n; the decision
    threshold is three times that.  Returns dict(rate, threshold,
    supercritical).
    """
    if n < 8 or n & (n - 1):
        raise ValueError("n must be a power of two >= 8")
    m2 = _pair_multiplier(beta, law)
    _, f = _walk_tables(d, n)
    F = np.cumsum(f)
    phi = np.empty(n + 1)
    phi[0] = 1.0
    shift = 0
    log_half = None
    log2 = math.log(2.0)
    for t in range(1, n + 1):
        no_ret = math.ldexp(1.0 - F[t], -shift) if shift <= 1074 else 0.0
        val = no_ret + m2 * np.dot(f[1:t + 1], phi[t - 1::-1])
        if val > 8.8e99:
            phi[:t] = np.ldexp(phi[:t], -664)
            val = math.ldexp(val, -664)
            shift += 664
        phi[t] = val
        if t == n // 2:
            log_half = math.log(val) + shift * log2
    log_full = math.log(phi[n]) + shift * log2
    rate = (log_full - log_half) / (n / 2.0)
    threshold = 3.0 * math.log(2.0) / n
    return {"rate": rate, "threshold": threshold,
            "supercritical": rate > threshold}


def l2_growth_point(d, law, tol=5e-3, n=16384, bracket=None):
    """Bisection of the finite-n supercriticality indicator in beta.

    Independent check of beta_crit_L2: no return-probability extrapolation
    enters, only the renewal recursion run to horizon n.
    """
    if d <= 2:
        raise NoTransitionError(
            "the second moment diverges for every beta > 0 when d <= 2")

    def hot(b):
        return second_moment_growth_rate(d, b, law, n)["supercritical"]

    if bracket is None:
        lo, hi = 0.0, None
        b = 0.25
        while b <= 512.0:
            if hot(b):
                hi = b
                break
            lo = b
            b *= 2.0
        if hi is None:
            raise NoTransitionError(
                "no supercritical growth found up to beta = 512")
    else:
        lo, hi = bracket
        if hot(lo) or not hot(hi):
            raise ValueError("bracket does not straddle the growth onset")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if hot(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


@dataclasses.dataclass(frozen=True)
class BetaCritResult:
    """Root of lmgf(2b) - 2 lmgf(b) + log p_return = 0."""

    d: int
    beta_hat: float
    tol: float
    p_return: float
    T: int
    g_lo: float
    g_hi: float


def beta_crit_L2(d, law, tol=1e-4, T=2048, beta_max=512.0):
    """L2-critical temperature: the beta where m2 * p_return reaches 1.

    Solves g(beta) = lmgf(2 beta) - 2 lmgf(beta) + log p_return(d) = 0 with
    the tail-extrapolated return probability.  g is strictly increasing in
    beta (it is the log of E[e^{2 b w}]/E[e^{b w}]^2 >= 1, increasing), so a
    doubling scan brackets the root and bisection finishes.  d <= 2 has no
    root since p_return = 1 there.
    """
    if d <= 2:
        raise NoTransitionError(
            "recurrent dimensions have no L2 transition; d must be >= 3")
    p = return_probability(d, T).extrapolated
    logp = math.log(p)

    def g(b):
        return law.log_mgf(2.0 * b) - 2.0 * law.log_mgf(b) + logp

    lo, hi = 0.0, None
    b = 0.25
    while b <= beta_max:
        if g(b) > 0.0:
            hi = b
            break
        lo = b
        b *= 2.0
    if hi is None:
        raise NoTransitionError(
            f"g(beta) stays below 0 up to beta = {beta_max}; the disorder "
            "law's pair multiplier never outgrows the return mass")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    beta_hat = 0.5 * (lo + hi)
    return BetaCritResult(d, beta_hat, tol, p, T, g(lo), g(hi))


# ---------------------------------------------------------------------------
# Monte Carlo moments
# ---------------------------------------------------------------------------


def sample_log_partitions(config, reps, base_seed, stream=0, want="final"):
    """Sample log W_n over independent environments.

    want = "final": array of log W_n, shape (reps,).
    want = "sup":   tuple (log W_n, log sup_{k<=n} W_k, log sup_{k<=n/2} W_k),
                    the running maxima needed for tail estimation.
    Replica i uses the child seed derive_seed(base_seed, i, stream), so the
    result is independent of batching or execution order.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    n = config.n
    finals = np.empty(reps)
    sups = np.empty(reps) if want == "sup" else None
    sups_half = np.empty(reps) if want == "sup" else None
    for i in range(reps):
        env = SeededEnvironment(derive_seed(base_seed, i, stream), config.law)
        ev = evolve(config, env)
        trace = ev.stats.log_mass_trace
        finals[i] = trace[n]
        if want == "sup":
            sups[i] = trace.max()
            sups_half[i] = trace[: n // 2 + 1].max()
    if want == "sup":
        return finals, sups, sups_half
    return finals


def _rate_from_logs(logw, p, n):
    """(1/n) log mean(W^p) from log W samples, via logsumexp."""
    m = len(logw)
    return (logsumexp(p * logw) - math.log(m)) / n


@dataclasses.dataclass(frozen=True)
class MCMoment:
    """Monte Carlo estimate of (1/n) log E[W_n^p]."""

    p: float
    n: int
    reps: int
    rate: float
    se: float
    ci: tuple
    heavy_tail: bool
    top_share: float


def mc_moment(config, p, n=None, reps=1000, base_seed=0, stream=0,
              n_boot=400, logw=None):
    """Estimate (1/n) log E[W_n^p] with a bootstrap CI.

    n defaults to the config's horizon and otherwise overrides it.  p = 0
    returns exactly 0.  The heavy-tail flag trips when the single largest
    term e^{p log W} carries more than half of the sample sum, in which
    case the estimate is dominated by one draw and the CI is not
    trustworthy.  Pass precomputed log W samples through logw to reuse one
    set of environments across several p.
    """
    if reps < 1000 and logw is None:
        raise ValueError("reps must be >= 1000 for a usable tail")
    if n is None:
        n = config.n
    elif n != config.n:
        config = dataclasses.replace(config, n=n)
    if p == 0.0:
        return MCMoment(0.0, n, reps, 0.0, 0.0, (0.0, 0.0), False, 0.0)
    if logw is None:
        logw = sample_log_partitions(config, reps, base_seed, stream)
    reps = len(logw)
    rate = _rate_from_logs(logw, p, n)
    top = p * logw.max()
    top_share = math.exp(top - (rate * n + math.log(reps)))
    rng = np.random.default_rng((int(base_seed), 0x9E3779B9))
    idx = rng.integers(0, reps, size=(n_boot, reps))
    boots = np.array([_rate_from_logs(logw[row], p, n) for row in idx])
    se = float(boots.std(ddof=1))
    lo, hi = np.percentile(boots, [2.5, 97.5])
    return MCMoment(p, n, reps, rate, se, (float(lo), float(hi)),
                    bool(top_share > 0.5), float(top_share))


# ---------------------------------------------------------------------------
# moment curves and q*
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class MomentCurve:
    """Estimated growth rates a_n(p) = (1/n) log E[W_n^p] on a (p, n) grid.

    a_hat extrapolates each p-row to n = infinity by a least-squares fit of
    a_n = A + B/n over the doubling n grid; a_se propagates the per-point
    bootstrap errors through the linear fit.  law may be None for synthetic
    curves built directly from rate values (no refinement possible then).
    """

    d: int
    beta: float
    law: Optional[DisorderLaw]
    p_grid: np.ndarray
    n_grid: tuple
    rates: np.ndarray          # shape (len(p_grid), len(n_grid))
    ses: np.ndarray
    heavy: np.ndarray          # bool, same shape
    a_hat: np.ndarray          # extrapolated, per p
    a_se: np.ndarray
    reps: int = 0
    base_seed: int = 0
    streams_used: int = 1

    def moment_bound(self, p):
        """Upper bound lmgf(p b) - p lmgf(b), valid for every admissible p."""
        return self.law.log_mgf(p * self.beta) - p * self.law.log_mgf(self.beta)

    def invariant_report(self, z=3.0):
        """Violations of the exact constraints, judged at z standard errors.

        For p >= 1: 0 <= a(p) <= lmgf(p b) - p lmgf(b), and the n-rows must
        be nonincreasing in n.  Returns a list of human-readable strings.
        """
        bad = []
        for i, p in enumerate(self.p_grid):
            if p < 1.0:
                continue
            tol = z * max(self.a_se[i], 1e-12)
            if self.a_hat[i] < -tol:
                bad.append(f"a({p}) = {self.a_hat[i]:.4g} below 0")
            if self.law is not None:
                ub = self.moment_bound(p)
                if self.a_hat[i] > ub + tol:
                    bad.append(f"a({p}) = {self.a_hat[i]:.4g} above "
                               f"annealed bound {ub:.4g}")
            for j in range(1, len(self.n_grid)):
                slack = z * math.hypot(self.ses[i, j], self.ses[i, j - 1])
                if self.rates[i, j] > self.rates[i, j - 1] + slack:
                    bad.append(
                        f"a_n({p}) increases from n={self.n_grid[j-1]} "
                        f"to n={self.n_grid[j]}")
        return bad

    def convexity_report(self, z=3.0):
        """Second differences of a_hat(p) that are negative beyond noise."""
        bad = []
        a, s, p = self.a_hat, self.a_se, self.p_grid
        for i in range(1, len(p) - 1):
            if p[i + 1] - p[i] != p[i] - p[i - 1]:
                continue
            d2 = a[i + 1] - 2 * a[i] + a[i - 1]
            noise = z * math.sqrt(s[i + 1] ** 2 + 4 * s[i] ** 2 + s[i - 1] ** 2)
            if d2 < -noise:
                bad.append(f"a(p) concave at p = {p[i]}: d2 = {d2:.4g}")
        return bad


def _extrapolate_rates(n_grid, row, row_se):
    """Fit a_n = A + B/n; return (A, se_A) with error propagation.

    The fit is linear in the data, A = sum_i w_i a_{n_i}, so the standard
    error follows from the same weights.
    """
    x = 1.0 / np.asarray(n_grid, dtype=float)
    X = np.column_stack([np.ones_like(x), x])
    # weights of the least-squares solution for the intercept
    M = np.linalg.inv(X.T @ X) @ X.T
    w = M[0]
    A = float(np.dot(w, row))
    se = float(np.sqrt(np.dot(w * w, row_se * row_se)))
    return A, se


def build_moment_curve(d, beta, law, p_grid, n_grid, reps, base_seed=0,
                       stream=0, n_boot=300):
    """Sample one batch of environments per n and estimate the (p, n) grid.

    The same log W samples serve every p at a given n, which makes the curve
    smooth in p (shared noise) and keeps the cost at one DP pass per
    replica per n.
    """
    p_grid = np.asarray(sorted(p_grid), dtype=float)
    n_grid = tuple(sorted(n_grid))
    P, N = len(p_grid), len(n_grid)
    rates = np.empty((P, N))
    ses = np.empty((P, N))
    heavy = np.zeros((P, N), dtype=bool)
    for j, n in enumerate(n_grid):
        cfg = PolymerConfig(d, n, beta, law)
        logw = sample_log_partitions(cfg, reps, base_seed,
                                     stream * len(n_grid) + j)
        for i, p in enumerate(p_grid):
            est = mc_moment(cfg, p, reps=reps, base_seed=base_seed,
                            logw=logw, n_boot=n_boot)
            rates[i, j] = est.rate
            ses[i, j] = est.se
            heavy[i, j] = est.heavy_tail
    a_hat = np.empty(P)
    a_se = np.empty(P)
    for i in range(P):
        a_hat[i], a_se[i] = _extrapolate_rates(n_grid, rates[i], ses[i])
    return MomentCurve(d, beta, law, p_grid, n_grid, rates, ses, heavy,
                       a_hat, a_se, reps, base_seed, streams_used=stream + 1)


def synthetic_moment_curve(p_grid, a_values, a_se=None):
    """Curve built from given a(p) values, for self-tests and dry runs."""
    p_grid = np.asarray(p_grid, dtype=float)
    a = np.asarray(a_values, dtype=float)
    se = np.zeros_like(a) if a_se is None else np.asarray(a_se, dtype=float)
    P = len(p_grid)
    return MomentCurve(0, 0.0, None, p_grid, (0,),
                       a.reshape(P, 1), se.reshape(P, 1),
                       np.zeros((P, 1), dtype=bool), a.copy(), se.copy())


@dataclasses.dataclass(frozen=True)
class QStarEstimate:
    """Onset of exponential p-th moment growth."""

    q_hat: float
    ci: tuple
    bracket: tuple
    above_grid: bool          # a(p) never exceeded tol: q* beyond max p
    below_grid: bool          # already growing at the smallest p
    refined_points: tuple     # (p, a, se) triples added by bisection


def estimate_qstar(curve, tol=1e-3, refine_steps=4, z=2.0,
                   refine_reps=None):
    """Smallest p with extrapolated a(p) > tol, refined by bisection.

    Refinement draws fresh environments (new seed streams) at each probed p
    when the curve carries a sampling context; synthetic curves interpolate
    linearly instead.  The CI comes from where the z-se band around the
    estimated a(p) crosses tol.
    """
    p = curve.p_grid
    a = curve.a_hat
    se = curve.a_se
    above = np.where(a > tol)[0]
    if len(above) == 0:
        return QStarEstimate(float("nan"), (float(p[-1]), float("inf")),
                             (float(p[-1]), float("inf")), True, False, ())
    k = int(above[0])
    if k == 0:
        return QStarEstimate(float(p[0]), (0.0, float(p[0])),
                             (0.0, float(p[0])), False, True, ())
    lo, hi = float(p[k - 1]), float(p[k])
    pts = [(float(pi), float(ai), float(si))
           for pi, ai, si in zip(p, a, se)]
    added = []
    if curve.law is not None and curve.reps > 0:
        reps = refine_reps or curve.reps
        stream0 = curve.streams_used
        for step in range(refine_steps):
            mid = 0.5 * (lo + hi)
            sub = build_moment_curve(
                curve.d, curve.beta, curve.law, [mid], curve.n_grid, reps,
                curve.base_seed, stream=stream0 + step)
            a_mid, se_mid = float(sub.a_hat[0]), float(sub.a_se[0])
            added.append((mid, a_mid, se_mid))
            if a_mid > tol:
                hi = mid
            else:
                lo = mid
        q_hat = 0.5 * (lo + hi)
    else:
        # linear interpolation of the grid segment
        a_lo, a_hi = float(a[k - 1]), float(a[k])
        if a_hi > a_lo:
            q_hat = lo + (tol - a_lo) * (hi - lo) / (a_hi - a_lo)
        else:
            q_hat = 0.5 * (lo + hi)
    pts = sorted(pts + added)
    ps = np.array([q[0] for q in pts])
    av = np.array([q[1] for q in pts])
    sv = np.array([q[2] for q in pts])
    # band crossings: lower edge (a - z se) crossing tol bounds q from above
    ci_lo = _first_crossing(ps, av + z * sv, tol)
    ci_hi = _first_crossing(ps, av - z * sv, tol)
    if math.isnan(ci_lo):
        ci_lo = float(p[0])
    if math.isnan(ci_hi):
        ci_hi = float(p[-1])
    return QStarEstimate(float(q_hat), (ci_lo, ci_hi), (lo, hi),
                         False, False, tuple(added))


def _first_crossing(xs, ys, level):
    """First x where the piecewise-linear ys crosses above level."""
    for i in range(len(xs)):
        if ys[i] > level:
            if i == 0:
                return float(xs[0])
            x0, x1 = xs[i - 1], xs[i]
            y0, y1 = ys[i - 1], ys[i]
            if y1 == y0:
                return float(x1)
            return float(x0 + (level - y0) * (x1 - x0) / (y1 - y0))
    return float("nan")


# ---------------------------------------------------------------------------
# tail exponent p* and the rate xi
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PStarEstimate:
    """Tail exponent of sup_k W_k from log-log regression."""

    p_hat: float
    ci: tuple
    p_hat_half: float          # same regression at horizon n_max/2
    t_grid: tuple
    counts: tuple
    tail_probs: tuple
    floor_ok: Optional[bool]   # None when the law is unbounded
    floor_margin: tuple        # per t: p_hat_tail + z se - floor
    unestimable: bool
    reps: int
    n_max: int


def _tail_slope(log_sups, t_grid, reps):
    """-slope of log P(sup > t) against log t; nan if under 3 live cells."""
    logt = np.log(np.asarray(t_grid, dtype=float))
    counts = np.array([(log_sups > lt).sum() for lt in logt], dtype=float)
    live = counts > 0
    if live.sum() < 3:
        return float("nan"), counts
    x = logt[live]
    y = np.log(counts[live] / reps)
    slope = np.polyfit(x, y, 1)[0]
    return -float(slope), counts


def estimate_pstar(config, t_grid, reps, n_max=None, base_seed=0, stream=0,
                   n_boot=400, z=2.0, sup_samples=None):
    """Estimate p* from the tail of sup_{k <= n_max} W_k.

    Regresses log empirical tail probability on log t over t_grid; the
    negative slope is p_hat.  Reports the same slope computed at horizon
    n_max/2 as a finite-size diagnostic, a bootstrap CI, and for bounded
    laws the check that every empirical tail sits above the proved floor
    (e^{-2 beta K} / 2) t^{-p_hat} within z binomial standard errors.
    Fewer than 3 nonzero tail cells marks the estimate unestimable.

    sup_samples injects precomputed log-scale suprema (synthetic
    validation); the half-horizon diagnostic is skipped then.
    """
    n_max = n_max or config.n
    if n_max != config.n:
        config = dataclasses.replace(config, n=n_max)
    t_grid = tuple(sorted(float(t) for t in t_grid))
    if min(t_grid) <= 0:
        raise ValueError("thresholds must be positive")
    if sup_samples is not None:
        sups = np.asarray(sup_samples, dtype=float)
        reps = len(sups)
        sups_half = None
    else:
        _, sups, sups_half = sample_log_partitions(
            config, reps, base_seed, stream, want="sup")
    p_hat, counts = _tail_slope(sups, t_grid, reps)
    p_half = float("nan") if sups_half is None \
        else _tail_slope(sups_half, t_grid, reps)[0]
    tail_probs = tuple(float(c) / reps for c in counts)
    if math.isnan(p_hat):
        return PStarEstimate(float("nan"), (float("nan"), float("nan")),
                             p_half, t_grid, tuple(int(c) for c in counts),
                             tail_probs, None, (), True, reps, n_max)
    rng = np.random.default_rng((int(base_seed), 0xA5A5A5A5))
    boots = []
    for _ in range(n_boot):
        sample = sups[rng.integers(0, reps, size=reps)]
        b, _ = _tail_slope(sample, t_grid, reps)
        if not math.isnan(b):
            boots.append(b)
    if len(boots) >= max(20, n_boot // 2):
        lo, hi = np.percentile(boots, [2.5, 97.5])
        ci = (float(lo), float(hi))
    else:
        ci = (float("nan"), float("nan"))
    floor_ok = None
    margins = ()
    if config.law.upper_bound is not None:
        K = config.law.upper_bound
        floor = 0.5 * math.exp(-2.0 * config.beta * K) \
            * np.asarray(t_grid) ** (-p_hat)
        phat = np.asarray(tail_probs)
        se = np.sqrt(np.maximum(phat * (1 - phat), 1.0 / reps) / reps)
        margin = phat + z * se - floor
        margins = tuple(float(m) for m in margin)
        floor_ok = bool((margin >= 0).all())
    return PStarEstimate(p_hat, ci, p_half, t_grid,
                         tuple(int(c) for c in counts), tail_probs,
                         floor_ok, margins, False, reps, n_max)


def xi_from_pstar(d, p_star):
    """xi = d/2 - (d+2)/(2 p*), the rate exponent implied by the tail.

    Exact at representable inputs: returns 0.0 exactly when p* sits at the
    boundary value 1 + 2/d (up to 4 ulps), and 0.25 exactly at (d, p*) =
    (3, 2).
    """
    if not p_star >= 1.0:
        raise ValueError("p* must be >= 1")
    edge = 1.0 + 2.0 / d
    if abs(p_star - edge) <= 4.0 * math.ulp(edge):
        return 0.0
    return d / 2.0 - (d + 2.0) / (2.0 * p_star)


# ---------------------------------------------------------------------------
# limit intensity of the second-moment field
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class GFFIntensity:
    """gamma = c1 * E[W_infinity^2] with c1 the one-site variance factor."""

    gamma: Optional[float]
    diverged: bool
    converged: bool
    T_used: int
    p_return: float
    second_moment_limit: Optional[float]


def gff_intensity(d, beta, law, T0=2048, T_cap=65536, rel_tol=1e-4):
    """Intensity of the fluctuation field in the L2 region.

    E[W_infinity^2] = (1 - p) / (1 - m2 p) with p the return probability of
    the difference walk's embedded SRW and m2 the collision multiplier; the
    factor c1 = e^{lmgf(2b) - 2 lmgf(b)} - 1 converts squared mass into
    variance.  The horizon T doubles until the extrapolated p moves the
    answer by less than rel_tol.  Diverges (flagged) when m2 p >= 1.
    """
    if beta == 0.0:
        return GFFIntensity(0.0, False, True, T0, 1.0 if d <= 2 else
                            return_probability(d, T0).extrapolated, 1.0)
    if d <= 2:
        return GFFIntensity(None, True, True, T0, 1.0, None)
    m2 = _pair_multiplier(beta, law)
    c1 = law.compensator(beta)
    prev = None
    T = T0
    while True:
        p = return_probability(d, T).extrapolated
        if m2 * p >= 1.0 - 1e-9:
            return GFFIntensity(None, True, True, T, p, None)
        limit = (1.0 - p) / (1.0 - m2 * p)
        val = c1 * limit
        if prev is not None and abs(val - prev) <= rel_tol * max(abs(val), 1e-300):
            return GFFIntensity(val, False, True, T, p, limit)
        if T >= T_cap:
            return GFFIntensity(val, False, False, T, p, limit)
        prev = val
        T *= 2


# ---------------------------------------------------------------------------
# phase-point summary
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class PhasePoint:
    """Everything the pipeline measures at one (d, beta, law) point."""

    d: int
    beta: float
    law: DisorderLaw
    beta_crit_l2: float
    a2_exact: float
    p_return_table: dict
    p_star: Optional[PStarEstimate]
    q_star: Optional[QStarEstimate]
    xi_hat: Optional[float]
    gff: GFFIntensity


def exact_a2(d, beta, law, T=4096):
    """Exact growth rate a(2) = lim (1/n) log E[W_n^2].

    Zero iff m2 * p_return <= 1 (the renewal sum stays finite).  In the
    growing phase a(2) = -log z* where z* solves m2 * Fhat(z) = 1 and Fhat
    is the generating function of the difference walk's first-return law;
    the truncation of Fhat at T is immaterial once z* is bounded away from
    1 because the coefficients decay geometrically in the sum.
    """
    m2 = _pair_multiplier(beta, law)
    if d >= 3:
        p = return_probability(d, T).extrapolated
    else:
        p = 1.0
    if m2 * p <= 1.0:
        return 0.0
    _, f = _walk_tables(d, T)
    # m2 * Fhat(0) - 1 = -1 < 0 and m2 * Fhat(1^-) ~ m2 p_T - 1 > 0 away
    # from criticality.  Near criticality the truncated sum can miss the
    # root inside (0, 1); fall back to the finite-n growth rate there.
    if m2 * float(f[1:].sum()) <= 1.0:
        return second_moment_growth_rate(d, beta, law, n=8192)["rate"]
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if m2 * float(npoly.polyval(mid, f)) > 1.0:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-15:
            break
    return -math.log(0.5 * (lo + hi))


def compute_phase_point(d, beta, law, *, reps=2000, n_grid=(8, 16, 32),
                        p_grid=(1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5),
                        t_grid=(2.0, 4.0, 8.0), base_seed=0, qstar_tol=1e-3,
                        pstar_reps=None, n_max=32):
    """Run the full estimation pipeline at one parameter point."""
    bc = beta_crit_L2(d, law) if d >= 3 else None
    curve = build_moment_curve(d, beta, law, p_grid, n_grid, reps, base_seed)
    qs = estimate_qstar(curve, tol=qstar_tol)
    cfg = PolymerConfig(d, n_max, beta, law)
    ps = estimate_pstar(cfg, t_grid, pstar_reps or reps, n_max,
                        base_seed, stream=97)
    xi = None
    if not ps.unestimable and ps.p_hat >= 1.0:
        xi = xi_from_pstar(d, ps.p_hat)
    table = {}
    for T in (256, 1024, 2048):
        rp = return_probability(d, T)
        table[T] = (rp.truncated, rp.extrapolated)
    return PhasePoint(d, beta, law,
                      bc.beta_hat if bc else float("nan"),
                      exact_a2(d, beta, law), table, ps, qs, xi,
                      gff_intensity(d, beta, law))
