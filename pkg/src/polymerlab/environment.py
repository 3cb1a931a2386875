"""Disorder laws and the site-addressable random environment.

The environment is an i.i.d. field omega(t, x) over time-space sites. Values
come from a counter-based generator (Philox2x64, ten rounds) keyed by the
environment seed, with (t, x) packed into the 128-bit counter. A sampled
value is therefore a pure function of (seed, t, x, law): query order, box
extents and replica scheduling cannot change it, and "resample outside a
region" is literally a seed swap on the complement, exact by construction.

Counter layout (low word | high word):

    lo:  t (21 bits) | x1+2^20 (21 bits) | x2+2^20 (21 bits)
    hi:  x3+2^20 (21 bits) | x4+2^20 (21 bits) | stream tag (22 bits)

Unused spatial slots carry the bias value 2^20 (coordinate zero). The stream
tag equals the spatial dimension for environment draws; tags above 4 are
reserved for auxiliary streams (tie-breaking, replica seed derivation) so
auxiliary draws can never collide with field values under the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtri

from .errors import CapacityError, UnsupportedLawError

try:
    from . import _kernels

    _HAVE_KERNELS = True
except ImportError:  # pragma: no cover - numba is a hard dependency normally
    _HAVE_KERNELS = False

TIME_LIMIT = 1 << 21
COORD_LIMIT = 1 << 20
MAX_DIM = 4

STREAM_TIE = 5
STREAM_SEED = 6

_M = np.uint64(0xD2B74407B1CE6E93)
_BUMP = np.uint64(0x9E3779B97F4A7C15)
_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)


# ---------------------------------------------------------------------------
# Philox, plain-numpy reference implementation


def _mulhilo(b):
    """128-bit product of the Philox multiplier with uint64 array b."""
    lo = _M * b
    a_hi = _M >> _S32
    a_lo = _M & _MASK32
    b_hi = b >> _S32
    b_lo = b & _MASK32
    t = a_lo * b_lo
    w1 = a_hi * b_lo + (t >> _S32)
    t2 = a_lo * b_hi + (w1 & _MASK32)
    hi = a_hi * b_hi + (w1 >> _S32) + (t2 >> _S32)
    return hi, lo


def philox_words(c_hi, c_lo, seed):
    """Both output words of Philox2x64-10 for uint64 counter arrays."""
    x0 = np.asarray(c_lo, dtype=np.uint64).copy()
    x1 = np.asarray(c_hi, dtype=np.uint64).copy()
    key = np.uint64(seed)
    with np.errstate(over="ignore"):  # uint64 arithmetic wraps by design
        for _ in range(10):
            hi, lo = _mulhilo(x0)
            x0 = hi ^ key ^ x1
            x1 = lo
            key = key + _BUMP
    return x0, x1


def _words_to_u01(words):
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def pack_counters(t, coords, tag):
    """Pack time t and integer coordinates (m, d) into counter words.

    One Philox evaluation serves two cells adjacent along the last axis: the
    last coordinate is biased, halved, then packed, and the returned parity
    says which output word belongs to the cell. Raises CapacityError when t
    or any coordinate leaves the addressable range; the generator never
    wraps silently.
    """
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim == 1:
        coords = coords[:, None]
    m, d = coords.shape
    if d > MAX_DIM:
        raise CapacityError(f"dimension {d} exceeds addressable limit {MAX_DIM}")
    if not 1 <= t < TIME_LIMIT:
        raise CapacityError(f"time index {t} outside [1, {TIME_LIMIT})")
    if m and int(np.abs(coords).max(initial=0)) >= COORD_LIMIT:
        raise CapacityError(
            f"coordinate magnitude >= {COORD_LIMIT} is not addressable")
    biased_last = (coords[:, d - 1] + COORD_LIMIT).astype(np.uint64)
    parity = biased_last & np.uint64(1)
    cols = []
    for j in range(MAX_DIM):
        if j == d - 1:
            cols.append(biased_last >> np.uint64(1))
        elif j < d:
            cols.append((coords[:, j] + COORD_LIMIT).astype(np.uint64))
        else:
            cols.append(np.full(m, COORD_LIMIT, dtype=np.uint64))
    c_lo = (np.uint64(t)
            | (cols[0] << np.uint64(21))
            | (cols[1] << np.uint64(42)))
    c_hi = (cols[2]
            | (cols[3] << np.uint64(21))
            | (np.uint64(tag) << np.uint64(42)))
    return c_hi, c_lo, parity


def _box_coords(origin, shape):
    """All integer coordinates of a box, row-major, as an (m, d) array."""
    grids = np.indices(shape).reshape(len(shape), -1)
    return (grids.T + np.asarray(origin, dtype=np.int64)).astype(np.int64)


def uniforms_at(seed, t, coords, tag):
    """Reference path: u in (0,1) at the given sites, one per row."""
    c_hi, c_lo, parity = pack_counters(t, coords, tag)
    y0, y1 = philox_words(c_hi, c_lo, seed)
    return _words_to_u01(np.where(parity == 0, y0, y1))


def derive_seed(base_seed, index, stream=0):
    """Child seed for replica ``index``, from a reserved counter stream.

    stream separates independent batches drawn from one base seed (fresh
    refinement samples, negative controls) without any bookkeeping beyond
    picking distinct stream numbers.
    """
    if index < 0 or index + 1 >= TIME_LIMIT:
        raise CapacityError(f"replica index {index} outside addressable range")
    if not 0 <= stream < COORD_LIMIT:
        raise CapacityError(f"stream {stream} outside addressable range")
    c_hi, c_lo, parity = pack_counters(index + 1,
                                       np.full((1, 1), stream, np.int64),
                                       STREAM_SEED)
    words = philox_words(c_hi, c_lo, base_seed)
    return int(words[int(parity[0])][0])


def tie_break_uniform(tie_seed, block_index):
    """Uniform in (0,1] used to pick among tied detection sites."""
    c_hi, c_lo, _ = pack_counters(block_index + 1, np.zeros((1, 1), np.int64),
                                  STREAM_TIE)
    u = float(_words_to_u01(philox_words(c_hi, c_lo, tie_seed)[0])[0])
    # map (0,1) draws onto (0,1]; the ceil-based rank needs u > 0
    return 1.0 - u


# ---------------------------------------------------------------------------
# Disorder laws


@dataclass(frozen=True)
class DisorderLaw:
    """A one-dimensional disorder distribution with closed-form log-MGF.

    kind is one of "two_point", "uniform", "gaussian"; params holds the
    law-specific parameters. Use the classmethod constructors.
    """

    kind: str
    params: tuple

    @classmethod
    def two_point(cls, p: float, lo: float, hi: float) -> "DisorderLaw":
        """P(omega = hi) = p, P(omega = lo) = 1 - p."""
        if not 0.0 < p <= 1.0:
            raise ValueError(f"two_point needs p in (0, 1], got {p}")
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError("two_point needs finite support points")
        return cls("two_point", (float(p), float(lo), float(hi)))

    @classmethod
    def uniform(cls, a: float, b: float) -> "DisorderLaw":
        if not a < b:
            raise ValueError(f"uniform needs a < b, got [{a}, {b}]")
        return cls("uniform", (float(a), float(b)))

    @classmethod
    def gaussian(cls, mean: float = 0.0, sd: float = 1.0) -> "DisorderLaw":
        if not sd > 0:
            raise ValueError(f"gaussian needs sd > 0, got {sd}")
        return cls("gaussian", (float(mean), float(sd)))

    # -- summary quantities -------------------------------------------------

    @property
    def mean(self) -> float:
        if self.kind == "two_point":
            p, lo, hi = self.params
            return p * hi + (1.0 - p) * lo
        if self.kind == "uniform":
            a, b = self.params
            return 0.5 * (a + b)
        return self.params[0]

    @property
    def upper_bound(self) -> Optional[float]:
        """Essential supremum, or None for unbounded laws."""
        if self.kind == "two_point":
            p, lo, hi = self.params
            return hi if p == 1.0 else max(lo, hi)
        if self.kind == "uniform":
            return self.params[1]
        return None

    def require_bounded(self, what: str) -> float:
        k = self.upper_bound
        if k is None:
            raise UnsupportedLawError(
                f"{what} needs a bounded disorder law, {self.kind} is not")
        return k

    def log_mgf(self, beta: float) -> float:
        """lambda(beta) = log E[exp(beta * omega)], stable for all beta."""
        if beta == 0.0:
            return 0.0
        if self.kind == "two_point":
            p, lo, hi = self.params
            if p == 1.0:
                return beta * hi
            a, b = beta * hi, beta * lo
            m = a if a > b else b
            return m + math.log(p * math.exp(a - m)
                                + (1.0 - p) * math.exp(b - m))
        if self.kind == "uniform":
            a, b = self.params
            x = beta * (b - a)
            if abs(x) < 0.1:
                # log(sinh(h)/h), h = x/2, via a factored series; the direct
                # formula cancels badly for centered laws at small beta
                h2 = 0.25 * x * x
                y = h2 / 6.0 * (1.0 + h2 / 20.0 * (1.0 + h2 / 42.0
                                                   * (1.0 + h2 / 72.0)))
                return beta * 0.5 * (a + b) + math.log1p(y)
            top = max(beta * a, beta * b)
            bot = min(beta * a, beta * b)
            return top + math.log(-math.expm1(bot - top)) - math.log(abs(x))
        mu, sd = self.params
        return beta * mu + 0.5 * beta * beta * sd * sd

    def compensator(self, beta: float) -> float:
        """Var(exp(beta omega - lambda(beta))) = e^{lambda(2b)-2lambda(b)} - 1."""
        return math.expm1(self.log_mgf(2.0 * beta) - 2.0 * self.log_mgf(beta))

    # -- sampling -----------------------------------------------------------

    def transform(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms in (0,1) to law samples, elementwise."""
        if self.kind == "two_point":
            p, lo, hi = self.params
            return np.where(u < p, hi, lo)
        if self.kind == "uniform":
            a, b = self.params
            return a + (b - a) * u
        mu, sd = self.params
        return mu + sd * ndtri(u)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "DisorderLaw":
        kind = d["kind"]
        params = d["params"]
        ctor = {"two_point": cls.two_point, "uniform": cls.uniform,
                "gaussian": cls.gaussian}
        if kind not in ctor:
            raise ValueError(f"unknown law kind {kind!r}")
        return ctor[kind](*params)


def reference_law() -> DisorderLaw:
    """Default bounded law used throughout the test suite.

    Centered two-point law with P(1) = 0.15, P(-3/17) = 0.85. It is bounded
    by K = 1, has mean zero, and in d = 3 its annealed second-moment equation
    has a root near beta = 1.99, which the phase-diagram experiments need.
    """
    return DisorderLaw.two_point(0.15, -3.0 / 17.0, 1.0)


# ---------------------------------------------------------------------------
# Environments


@dataclass(frozen=True)
class SeededEnvironment:
    """The canonical pure environment: (seed, law) defines every value."""

    seed: int
    law: DisorderLaw

    def omega_at(self, t: int, coords) -> np.ndarray:
        """omega values at rows of ``coords`` ((m, d) or (m,) for d = 1)."""
        coords = np.asarray(coords, dtype=np.int64)
        if coords.ndim == 1:
            coords = coords[:, None]
        u = uniforms_at(self.seed, t, coords, coords.shape[1])
        return self.law.transform(u)

    def omega_box(self, t: int, origin, shape) -> np.ndarray:
        """omega over the box origin + [0, shape), as a d-dim array."""
        origin = tuple(int(v) for v in origin)
        shape = tuple(int(v) for v in shape)
        u = self._uniform_box(t, origin, shape)
        return self.law.transform(u).reshape(shape)

    def weight_box(self, t: int, origin, shape, beta: float,
                   log_mgf: float) -> np.ndarray:
        """exp(beta * omega - lambda) over a box, using the compiled path."""
        origin = tuple(int(v) for v in origin)
        shape = tuple(int(v) for v in shape)
        d = len(shape)
        size = int(np.prod(shape))
        self._check_box(t, origin, shape)
        if _HAVE_KERNELS and self.kind_has_kernel():
            o = np.asarray(origin, dtype=np.int64)
            s = np.asarray(shape, dtype=np.int64)
            out = np.empty(size, dtype=np.float64)
            if self.law.kind == "two_point":
                p, lo, hi = self.law.params
                w_hi = math.exp(beta * hi - log_mgf)
                w_lo = math.exp(beta * lo - log_mgf)
                _kernels.twopoint_weight_box(
                    np.uint64(self.seed), np.int64(t), o, s, np.uint64(d),
                    p, w_hi, w_lo, out)
            else:
                a, b = self.law.params
                c0 = beta * a - log_mgf
                c1 = beta * (b - a)
                _kernels.uniform_weight_box(
                    np.uint64(self.seed), np.int64(t), o, s, np.uint64(d),
                    c0, c1, out)
            return out.reshape(shape)
        omega = self.omega_box(t, origin, shape)
        return np.exp(beta * omega - log_mgf)

    def kind_has_kernel(self) -> bool:
        return self.law.kind in ("two_point", "uniform")

    def uniform_probe(self, t: int, coords) -> np.ndarray:
        """Raw uniforms at sites; used by audits to prove two seeds differ."""
        coords = np.asarray(coords, dtype=np.int64)
        if coords.ndim == 1:
            coords = coords[:, None]
        return uniforms_at(self.seed, t, coords, coords.shape[1])

    def _uniform_box(self, t, origin, shape):
        coords = _box_coords(origin, shape)
        return uniforms_at(self.seed, t, coords, len(shape))

    @staticmethod
    def _check_box(t, origin, shape):
        if not 1 <= t < TIME_LIMIT:
            raise CapacityError(f"time index {t} outside [1, {TIME_LIMIT})")
        for o, s in zip(origin, shape):
            if abs(o) >= COORD_LIMIT or abs(o + s - 1) >= COORD_LIMIT:
                raise CapacityError("box leaves the addressable range")


def sample_omega(seed: int, t: int, x, law: DisorderLaw) -> float:
    """Single-site disorder value; pure in (seed, t, x, law).

    t must be >= 1: time zero carries no disorder.
    """
    if t <= 0:
        raise ValueError(f"environment is indexed by t >= 1, got {t}")
    x = np.atleast_1d(np.asarray(x, dtype=np.int64))
    env = SeededEnvironment(seed, law)
    return float(env.omega_at(t, x[None, :])[0])


@dataclass(frozen=True)
class Region:
    """Axis-aligned block [t_lo, t_hi) x prod_i [x_lo[i], x_hi[i]]."""

    t_lo: int
    t_hi: int
    x_lo: tuple
    x_hi: tuple

    def contains_time(self, t: int) -> bool:
        return self.t_lo <= t < self.t_hi

    def mask_box(self, t: int, origin, shape) -> np.ndarray:
        """Boolean mask of box cells lying inside the region."""
        if not self.contains_time(t):
            return np.zeros(shape, dtype=bool)
        mask = np.ones(shape, dtype=bool)
        for ax, (o, s) in enumerate(zip(origin, shape)):
            ax_coords = o + np.arange(s)
            ax_ok = (ax_coords >= self.x_lo[ax]) & (ax_coords <= self.x_hi[ax])
            shp = [1] * len(shape)
            shp[ax] = s
            mask &= ax_ok.reshape(shp)
        return mask


@dataclass(frozen=True)
class CompositeEnvironment:
    """Environment equal to ``inside`` on a region and ``outside`` elsewhere.

    Selection happens by np.where on identically shaped boxes, so values on
    the region are bit-for-bit those of the inside environment.
    """

    inside: SeededEnvironment
    outside: SeededEnvironment
    region: Region

    def __post_init__(self):
        if self.inside.law != self.outside.law:
            raise ValueError("composite parts must share one disorder law")

    @property
    def law(self) -> DisorderLaw:
        return self.inside.law

    def omega_at(self, t, coords):
        coords = np.asarray(coords, dtype=np.int64)
        if coords.ndim == 1:
            coords = coords[:, None]
        inside_vals = self.inside.omega_at(t, coords)
        outside_vals = self.outside.omega_at(t, coords)
        return np.where(self._mask_coords(t, coords), inside_vals,
                        outside_vals)

    def omega_box(self, t, origin, shape):
        mask = self.region.mask_box(t, origin, shape)
        return np.where(mask, self.inside.omega_box(t, origin, shape),
                        self.outside.omega_box(t, origin, shape))

    def weight_box(self, t, origin, shape, beta, log_mgf):
        mask = self.region.mask_box(t, origin, shape)
        return np.where(mask,
                        self.inside.weight_box(t, origin, shape, beta,
                                               log_mgf),
                        self.outside.weight_box(t, origin, shape, beta,
                                                log_mgf))

    def _mask_coords(self, t, coords):
        if not self.region.contains_time(t):
            return np.zeros(coords.shape[0], dtype=bool)
        ok = np.ones(coords.shape[0], dtype=bool)
        for ax in range(coords.shape[1]):
            ok &= ((coords[:, ax] >= self.region.x_lo[ax])
                   & (coords[:, ax] <= self.region.x_hi[ax]))
        return ok


class TabulatedEnvironment:
    """Environment with hand-fixed omega values, zero elsewhere.

    table maps (t, x) with x an int (d = 1) or coordinate tuple to omega.
    Intended for tiny closed-form checks, not for performance.
    """

    def __init__(self, table: dict, law: DisorderLaw, d: int = 1):
        self.law = law
        self.d = d
        self.table = {}
        for (t, x), v in table.items():
            key = (int(t), (int(x),) if np.isscalar(x) else tuple(int(c) for c in x))
            self.table[key] = float(v)

    def omega_at(self, t, coords):
        coords = np.asarray(coords, dtype=np.int64)
        if coords.ndim == 1:
            coords = coords[:, None]
        return np.array([self.table.get((int(t), tuple(int(c) for c in row)), 0.0)
                         for row in coords])

    def omega_box(self, t, origin, shape):
        coords = _box_coords(origin, shape)
        return self.omega_at(t, coords).reshape(shape)

    def weight_box(self, t, origin, shape, beta, log_mgf):
        return np.exp(beta * self.omega_box(t, origin, shape) - log_mgf)


@dataclass(frozen=True)
class EnvironmentBox:
    """A declared finite extent of a seeded environment.

    box is a per-axis (lo, hi) tuple, hi inclusive. The declared extent is
    advisory: values are pure in (seed, t, x, law), so enlarging the box
    never changes the overlap (tested property).
    """

    seed: int
    d: int
    horizon: int
    box: tuple
    law: DisorderLaw

    def __post_init__(self):
        if not 1 <= self.d <= MAX_DIM:
            raise CapacityError(f"d = {self.d} outside 1..{MAX_DIM}")
        if len(self.box) != self.d:
            raise ValueError("box must give one (lo, hi) pair per axis")

    @property
    def env(self) -> SeededEnvironment:
        return SeededEnvironment(self.seed, self.law)

    def omega_slice(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.horizon:
            raise ValueError(f"t = {t} outside declared horizon")
        origin = tuple(lo for lo, _ in self.box)
        shape = tuple(hi - lo + 1 for lo, hi in self.box)
        return self.env.omega_box(t, origin, shape)
