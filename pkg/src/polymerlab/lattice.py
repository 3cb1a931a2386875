"""Exact transfer-matrix evolution of polymer partition fields.

The forward object is the unnormalized field

    U_0 = seed,   U_t(x) = w_t(x) * (2d)^{-1} sum_{|y-x|_1 = 1} U_{t-1}(y),

with w_t(x) = exp(beta * omega(t, x) - lambda(beta)). Disorder weights sit at
arrival sites, times 1..t; time 0 carries none. With a point seed at the
origin, sum_x U_n(x) is the normalized point-to-plane partition function,
a mean-one positive martingale in n.

Fields live on a centered box with the active window growing one site per
step, so under the exact policy every reachable site is represented and no
probability mass is ever dropped. The truncate policy caps the window at the
box radius with a killed boundary: mass stepping outside is discarded, which
makes the computed field the partition function of the polymer restricted to
the box. Slices carry a separate log scale so long horizons cannot overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .environment import DisorderLaw
from .errors import CapacityError, ConfigError

RENORM_HI = 1e100
RENORM_LO = 1e-100


@dataclass(frozen=True)
class PolymerConfig:
    """Model parameters plus the finite-box policy for one experiment."""

    d: int
    n: int
    beta: float
    law: DisorderLaw
    policy: str = "exact"
    box_radius: Optional[int] = None

    def __post_init__(self):
        if not 1 <= self.d <= 4:
            raise ConfigError(f"d = {self.d} outside supported range 1..4")
        if self.n < 0:
            raise ConfigError(f"n = {self.n} must be nonnegative")
        if self.policy not in ("exact", "truncate"):
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.policy == "truncate" and self.box_radius is None:
            raise ConfigError("truncate policy needs an explicit box_radius")
        if self.box_radius is not None and self.box_radius < 1:
            raise ConfigError("box_radius must be >= 1")

    def log_mgf(self) -> float:
        return self.law.log_mgf(self.beta)


@dataclass
class FieldSlice:
    """A spatial field at one time, values * exp(log_scale).

    origin is the coordinate of values[0, ..., 0].
    """

    values: np.ndarray
    origin: tuple
    log_scale: float
    t: int

    @property
    def total(self) -> float:
        return float(self.values.sum()) * math.exp(self.log_scale)

    @property
    def log_total(self) -> float:
        s = float(self.values.sum())
        if s <= 0.0:
            raise ValueError("log_total needs a positive field sum")
        return math.log(s) + self.log_scale

    def value_at(self, x) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=np.int64))
        idx = tuple(int(c - o) for c, o in zip(x, self.origin))
        for i, size in zip(idx, self.values.shape):
            if not 0 <= i < size:
                return 0.0
        return float(self.values[idx]) * math.exp(self.log_scale)

    def axis_coords(self, ax: int) -> np.ndarray:
        return self.origin[ax] + np.arange(self.values.shape[ax])


def _stencil(dst, src, d):
    """dst = nearest-neighbor average of src (same shape, zero outside)."""
    dst[...] = 0.0
    for ax in range(d):
        lo = tuple(slice(0, -1) if a == ax else slice(None) for a in range(d))
        hi = tuple(slice(1, None) if a == ax else slice(None) for a in range(d))
        dst[lo] += src[hi]
        dst[hi] += src[lo]
    dst *= 1.0 / (2 * d)


@dataclass
class StepStats:
    """Per-step scalar reductions of an evolution.

    Index t holds quantities of step t; index 0 describes the seed. Sums at
    step t are mantissas in the scale scale_pre[t] (the scale of U_{t-1} in
    which V_t and the pre-renormalization U_t are expressed); sum_u and the
    post arrays use scale_post[t].
    """

    scale_pre: np.ndarray
    scale_post: np.ndarray
    sum_v: np.ndarray
    sum_v_sq: np.ndarray
    sum_u_pre: np.ndarray
    rhs: np.ndarray
    abs_mass: np.ndarray
    sum_u: np.ndarray
    sum_u_sq: np.ndarray
    max_abs_u: np.ndarray

    @classmethod
    def empty(cls, n):
        z = lambda: np.full(n + 1, np.nan)
        return cls(z(), z(), z(), z(), z(), z(), z(), z(), z(), z())

    def log_mass(self, t: int) -> float:
        """log of sum_x U_t(x); requires a positive sum."""
        s = self.sum_u[t]
        if not s > 0.0:
            raise ValueError(f"field sum at t = {t} is not positive")
        return math.log(s) + self.scale_post[t]

    @property
    def log_mass_trace(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.log(self.sum_u) + self.scale_post


@dataclass
class Evolution:
    """Result of one forward evolution."""

    config: PolymerConfig
    final: FieldSlice
    stats: StepStats
    v_slices: list = field(default_factory=list)
    u_slices: list = field(default_factory=list)
    renorm_count: int = 0


def delta_seed(d: int, x=None) -> FieldSlice:
    """Point seed at x (default: the origin)."""
    if x is None:
        x = (0,) * d
    x = tuple(int(c) for c in np.atleast_1d(np.asarray(x, dtype=np.int64)))
    values = np.ones((1,) * d)
    return FieldSlice(values=values, origin=x, log_scale=0.0, t=0)


def function_seed(f: Callable, d: int, n_scale: int, radius: int) -> FieldSlice:
    """Seed values f(x / sqrt(n_scale)) on the centered box of given radius.

    f takes an (m, d) array of points and returns m values.
    """
    side = 2 * radius + 1
    grids = np.indices((side,) * d).reshape(d, -1).T - radius
    pts = grids.astype(np.float64) / math.sqrt(n_scale)
    vals = np.asarray(f(pts), dtype=np.float64).reshape((side,) * d)
    return FieldSlice(values=vals, origin=(-radius,) * d, log_scale=0.0, t=0)


def _seed_radius(seed: FieldSlice) -> int:
    corners = []
    for o, s in zip(seed.origin, seed.values.shape):
        corners.append(max(abs(o), abs(o + s - 1)))
    return max(corners)


def evolve(config: PolymerConfig, env, seed: Optional[FieldSlice] = None, *,
           t_end: Optional[int] = None, collect_v_slices: bool = False,
           collect_u_slices: bool = False, crop_radius: Optional[int] = None,
           constraint: Optional[Callable] = None,
           force_renorm: bool = False) -> Evolution:
    """Run the forward recursion to t_end (default config.n).

    constraint, when given, is called as constraint(t, coords) with coords an
    (m, d) int array for every step including t = 0 and must return a boolean
    keep-mask; violating sites are zeroed after weighting, which computes the
    partition function restricted to admissible paths.
    """
    if t_end is None:
        t_end = config.n
    if seed is None:
        seed = delta_seed(config.d)
    d = config.d
    r0 = _seed_radius(seed)
    if config.policy == "exact":
        radius = r0 + t_end if config.box_radius is None else config.box_radius
        if radius < r0 + t_end:
            raise CapacityError(
                f"exact policy needs box_radius >= {r0 + t_end}, "
                f"got {radius}; use policy='truncate' to allow mass loss")
    else:
        radius = config.box_radius
        if radius < r0:
            raise CapacityError("box_radius smaller than the seed extent")
    side = 2 * radius + 1
    if side ** d > 250_000_000:
        raise CapacityError(
            f"box with {side ** d} sites per slice exceeds the memory guard")
    lam = config.log_mgf()
    beta = config.beta

    cur = np.zeros((side,) * d)
    nxt = np.zeros((side,) * d)
    seed_idx = tuple(
        slice(o + radius, o + radius + s)
        for o, s in zip(seed.origin, seed.values.shape))
    cur[seed_idx] = seed.values
    ls = float(seed.log_scale)

    stats = StepStats.empty(t_end)
    if constraint is not None:
        _apply_constraint(cur, constraint, 0, radius, d)
    stats.scale_pre[0] = ls
    stats.scale_post[0] = ls
    stats.sum_u_pre[0] = cur.sum()
    stats.sum_u[0] = stats.sum_u_pre[0]
    stats.sum_u_sq[0] = (cur ** 2).sum()
    stats.max_abs_u[0] = np.abs(cur).max()

    ev = Evolution(config=config, final=None, stats=stats)
    r_prev = r0
    for t in range(1, t_end + 1):
        r = min(r_prev + 1, radius)
        win = tuple(slice(radius - r, radius + r + 1) for _ in range(d))
        u_prev = cur[win]
        v = nxt[win]
        _stencil(v, u_prev, d)
        stats.scale_pre[t] = ls
        stats.sum_v[t] = v.sum()
        stats.sum_v_sq[t] = (v ** 2).sum()
        if collect_v_slices:
            ev.v_slices.append(_crop_copy(v, r, ls, t, crop_radius))
        w = env.weight_box(t, (-r,) * d, (2 * r + 1,) * d, beta, lam)
        wm1 = w - 1.0
        stats.rhs[t] = float((wm1 * v).sum())
        stats.abs_mass[t] = float((np.abs(wm1) * np.abs(v)).sum())
        v *= w
        if constraint is not None:
            _apply_constraint(v, constraint, t, r, d)
        stats.sum_u_pre[t] = v.sum()
        m = float(np.abs(v).max())
        if m > 0.0 and (force_renorm or m > RENORM_HI or m < RENORM_LO):
            v /= m
            ls += math.log(m)
            ev.renorm_count += 1
        stats.scale_post[t] = ls
        stats.sum_u[t] = v.sum()
        stats.sum_u_sq[t] = (v ** 2).sum()
        stats.max_abs_u[t] = np.abs(v).max()
        if collect_u_slices:
            ev.u_slices.append(_crop_copy(v, r, ls, t, crop_radius))
        cur, nxt = nxt, cur
        r_prev = r

    win = tuple(slice(radius - r_prev, radius + r_prev + 1) for _ in range(d))
    ev.final = FieldSlice(values=cur[win].copy(), origin=(-r_prev,) * d,
                          log_scale=ls, t=t_end)
    return ev


def _apply_constraint(arr, constraint, t, r, d):
    side = 2 * r + 1
    coords = np.indices((side,) * d).reshape(d, -1).T - r
    keep = np.asarray(constraint(t, coords), dtype=bool).reshape((side,) * d)
    arr[~keep] = 0.0


def _crop_copy(window_arr, r, ls, t, crop_radius):
    if crop_radius is None or crop_radius >= r:
        return FieldSlice(values=window_arr.copy(),
                          origin=(-r,) * window_arr.ndim, log_scale=ls, t=t)
    c = crop_radius
    d = window_arr.ndim
    sl = tuple(slice(r - c, r + c + 1) for _ in range(d))
    return FieldSlice(values=window_arr[sl].copy(), origin=(-c,) * d,
                      log_scale=ls, t=t)


# ---------------------------------------------------------------------------
# Public operations built on the engine


def forward_field(config: PolymerConfig, env, seed: Optional[FieldSlice] = None,
                  **kw) -> Evolution:
    """Evolve a seed to the horizon; see ``evolve`` for keywords."""
    return evolve(config, env, seed, **kw)


def log_partition(config: PolymerConfig, env) -> float:
    """log W_n for the point-to-plane polymer started at the origin."""
    ev = evolve(config, env)
    return ev.stats.log_mass(config.n)


def partition_trace(config: PolymerConfig, env) -> np.ndarray:
    """W_m for m = 0..n in linear scale (overflows honestly if huge)."""
    ev = evolve(config, env)
    return np.exp(ev.stats.log_mass_trace)


def restricted_partition(config: PolymerConfig, env,
                         constraint: Callable) -> float:
    """Partition function over paths with constraint(t, X_t) true for all t.

    Returns the value in linear scale. Zero when no path is admissible.
    """
    ev = evolve(config, env, constraint=constraint)
    return ev.final.total


def endpoint_measure(config: PolymerConfig, env) -> FieldSlice:
    """The polymer endpoint distribution mu_n(x) = U_n(x) / sum U_n."""
    ev = evolve(config, env)
    out = ev.final
    s = out.values.sum()
    if not s > 0:
        raise ValueError("endpoint field has nonpositive mass")
    return FieldSlice(values=out.values / s, origin=out.origin,
                      log_scale=0.0, t=out.t)


def backward_field(config: PolymerConfig, env, t: int, x, s: int,
                   f: Optional[Callable] = None,
                   n_scale: Optional[int] = None) -> float:
    """Partition of the reversed polymer pinned at (t, x), weights on [s, t).

    Walks from x at time t down to time s, multiplying the disorder weight of
    the arrival site at each of the times t-1, ..., s. With f given, the walk
    continues weight-free down to time 0 and the result is the inner product
    with f(X_0 / sqrt(n_scale)); without f it is the plain backward partition
    (the two agree for f identical to one).

    Only disorder in the cone |y - x|_inf <= t - u, u in [s, t), is ever
    read, so the value depends on exactly that block of the environment.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.int64))
    if len(x) != config.d:
        raise ConfigError(f"site has dimension {len(x)}, config.d = {config.d}")
    if not 0 <= s <= t:
        raise ConfigError(f"need 0 <= s <= t, got s = {s}, t = {t}")
    if t == s:
        if f is None:
            return 1.0
        # no weights at all: plain SRW average of f from (t, x) down to 0
    if s < 1 and t > s:
        raise ConfigError("weighted backward steps need s >= 1")
    d = config.d
    beta = config.beta
    lam = config.log_mgf()
    depth = t - s if f is None else t
    side = 2 * depth + 1
    cur = np.zeros((side,) * d)
    nxt = np.zeros((side,) * d)
    center = (depth,) * d
    cur[center] = 1.0
    ls = 0.0
    r = 0
    for u in range(t - 1, s - 1, -1):
        r += 1
        win = tuple(slice(depth - r, depth + r + 1) for _ in range(d))
        v = nxt[win]
        _stencil(v, cur[win], d)
        w = env.weight_box(u, tuple(int(c) - r for c in x),
                           (2 * r + 1,) * d, beta, lam)
        v *= w
        m = float(v.max())
        if m > 0.0 and (m > RENORM_HI or m < RENORM_LO):
            v /= m
            ls += math.log(m)
        cur, nxt = nxt, cur
    if f is None:
        win = tuple(slice(depth - r, depth + r + 1) for _ in range(d))
        return float(cur[win].sum()) * math.exp(ls)
    for u in range(s - 1, -1, -1):
        r += 1
        win = tuple(slice(depth - r, depth + r + 1) for _ in range(d))
        v = nxt[win]
        _stencil(v, cur[win], d)
        cur, nxt = nxt, cur
    win = tuple(slice(depth - r, depth + r + 1) for _ in range(d))
    vals = cur[win]
    grids = np.indices(vals.shape).reshape(d, -1).T - r + x[None, :]
    if n_scale is None:
        n_scale = config.n
    fv = np.asarray(f(grids.astype(np.float64) / math.sqrt(n_scale)))
    return float((vals.reshape(-1) * fv).sum()) * math.exp(ls)


def backward_sweep(config: PolymerConfig, env, f: Optional[Callable] = None,
                   crop_radius: Optional[int] = None,
                   seed_radius: Optional[int] = None,
                   n_scale: Optional[int] = None) -> Evolution:
    """All backward partitions with left end free, in one forward pass.

    The pre-weight slice V_t of a forward evolution seeded with
    f(x / sqrt(n_scale)) equals, site by site, the reversed-polymer value
    pinned at (t, x) with weights on [1, t) and endpoint functional f; with
    f None (seed identical to one) it is the plain backward partition. The
    seed must cover the full dependence cone of every requested site, which
    is what seed_radius controls: it defaults to crop_radius + n so that all
    reported slices are exact.
    """
    if n_scale is None:
        n_scale = config.n
    if crop_radius is None:
        crop_radius = config.n
    if seed_radius is None:
        seed_radius = crop_radius + config.n
    if f is None:
        seed_fn = lambda pts: np.ones(pts.shape[0])
    else:
        seed_fn = f
    seed = function_seed(seed_fn, config.d, n_scale, seed_radius)
    return evolve(config, env, seed, collect_v_slices=True,
                  crop_radius=crop_radius)


def srw_exit_mass(d: int, n: int, radius: int, seed_radius: int = 0) -> float:
    """Probability that simple random walk leaves the box within n steps.

    This is the exact mass killed by the truncate policy at beta = 0, and
    the reported leak indicator for truncated runs.
    """
    side = 2 * radius + 1
    cur = np.zeros((side,) * d)
    if seed_radius == 0:
        cur[(radius,) * d] = 1.0
    else:
        sl = tuple(slice(radius - seed_radius, radius + seed_radius + 1)
                   for _ in range(d))
        cur[sl] = 1.0 / (2 * seed_radius + 1) ** d
    nxt = np.zeros_like(cur)
    for _ in range(n):
        _stencil(nxt, cur, d)
        cur, nxt = nxt, cur
    return max(0.0, 1.0 - float(cur.sum()))
