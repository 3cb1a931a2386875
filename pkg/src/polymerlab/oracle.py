"""Brute-force enumeration oracles for small polymer instances.

Everything here trades exponential cost for total transparency: partition
functions as literal sums over all (2d)^n nearest-neighbor paths, moments as
sums over path tuples with the disorder expectation taken analytically site
by site. These values anchor the transfer-matrix engine; none of the code
below shares logic with it.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from .environment import DisorderLaw
from .errors import CapacityError

MAX_PATHS = 10_000_000
_CHUNK = 1 << 14


def _step_table(d: int) -> np.ndarray:
    """The 2d unit steps, axis-major: +e1, -e1, +e2, -e2, ..."""
    steps = np.zeros((2 * d, d), dtype=np.int64)
    for ax in range(d):
        steps[2 * ax, ax] = 1
        steps[2 * ax + 1, ax] = -1
    return steps


def _path_count(d: int, n: int, k: int = 1) -> int:
    if n * k * math.log(2 * d) > math.log(MAX_PATHS) + 1e-9:
        raise CapacityError(
            f"(2d)^(n*k) = ({2*d})^{n*k} exceeds the enumeration "
            f"guard of {MAX_PATHS}")
    return (2 * d) ** (n * k)


def _digit_steps(indices: np.ndarray, n: int, d: int) -> np.ndarray:
    """Decode path indices to step sequences; shape (m, n, d)."""
    steps = _step_table(d)
    m = indices.shape[0]
    out = np.empty((m, n, d), dtype=np.int64)
    rem = indices.copy()
    base = 2 * d
    for t in range(n - 1, -1, -1):
        out[:, t, :] = steps[rem % base]
        rem //= base
    return out


def enumerate_partition(config, env, start=None,
                        constraint: Optional[Callable] = None,
                        endpoint: Optional[Callable] = None) -> float:
    """Sum over all (2d)^n paths of exp(beta H - n lambda), normalized.

    H collects omega at arrival sites, times 1..n. constraint(t, coords)
    must hold at every time 0..n for a path to count; endpoint(coords)
    reweights the final position. Matches the forward field contract of
    the lattice module but shares no code with it.
    """
    d, n, beta = config.d, config.n, config.beta
    lam = config.law.log_mgf(beta)
    total_paths = _path_count(d, n)
    if start is None:
        start = np.zeros(d, dtype=np.int64)
    start = np.asarray(start, dtype=np.int64)
    acc = 0.0
    for lo in range(0, total_paths, _CHUNK):
        idx = np.arange(lo, min(lo + _CHUNK, total_paths), dtype=np.int64)
        steps = _digit_steps(idx, n, d)
        pos = np.cumsum(steps, axis=1) + start[None, None, :]
        keep = np.ones(idx.shape[0], dtype=bool)
        if constraint is not None:
            keep &= np.asarray(constraint(0, np.tile(start, (idx.shape[0], 1))),
                               dtype=bool)
            for t in range(1, n + 1):
                keep &= np.asarray(constraint(t, pos[:, t - 1, :]), dtype=bool)
        h = np.zeros(idx.shape[0])
        for t in range(1, n + 1):
            h += env.omega_at(t, pos[:, t - 1, :])
        w = np.exp(beta * h - n * lam)
        if endpoint is not None:
            w = w * np.asarray(endpoint(pos[:, n - 1, :]), dtype=np.float64)
        w[~keep] = 0.0
        acc += float(w.sum())
    return acc / total_paths


def enumerate_backward(config, env, t: int, x, s: int,
                       f: Optional[Callable] = None,
                       n_scale: Optional[int] = None) -> float:
    """Brute-force reversed-polymer partition pinned at (t, x).

    Paths run from x at time t down to time s (down to 0 when f is given,
    with the extra steps weight-free); the disorder weight applies at the
    arrival site for times t-1, ..., s.
    """
    d, beta = config.d, config.beta
    lam = config.law.log_mgf(beta)
    depth = (t - s) if f is None else t
    if depth == 0:
        if f is None:
            return 1.0
    total_paths = _path_count(d, max(depth, 1)) if depth else 1
    x = np.asarray(x, dtype=np.int64).reshape(1, -1)
    acc = 0.0
    for lo in range(0, total_paths, _CHUNK):
        idx = np.arange(lo, min(lo + _CHUNK, total_paths), dtype=np.int64)
        if depth:
            steps = _digit_steps(idx, depth, d)
            pos = np.cumsum(steps, axis=1) + x.reshape(1, 1, d)
        else:
            pos = np.zeros((idx.shape[0], 0, d), dtype=np.int64)
        # pos[:, j, :] is the location at time t - 1 - j
        h = np.zeros(idx.shape[0])
        for j in range(depth):
            u = t - 1 - j
            if u >= s:
                h += env.omega_at(u, pos[:, j, :])
        w = np.exp(beta * h - (t - s) * lam)
        if f is not None:
            ns = n_scale if n_scale is not None else config.n
            final = pos[:, depth - 1, :] if depth else np.tile(x, (idx.shape[0], 1))
            w = w * np.asarray(f(final.astype(np.float64) / math.sqrt(ns)))
        acc += float(w.sum())
    return acc / total_paths


def enumerate_moments(d: int, n: int, beta: float, law: DisorderLaw,
                      k: int) -> float:
    """E[W_n^k] by enumerating k-tuples of paths.

    The disorder expectation factorizes over sites: a site visited by m of
    the k walks at one time contributes exp(lambda(m beta) - m lambda(beta)).
    Supported k: 1, 2, 3.
    """
    if k not in (1, 2, 3):
        raise CapacityError(f"moment order k = {k} not supported, use 1..3")
    total = _path_count(d, n, k)
    lam1 = law.log_mgf(beta)
    a2 = law.log_mgf(2 * beta) - 2 * lam1
    a3 = law.log_mgf(3 * beta) - 3 * lam1
    acc = 0.0
    base = (2 * d) ** n
    for lo in range(0, total, _CHUNK):
        idx = np.arange(lo, min(lo + _CHUNK, total), dtype=np.int64)
        walks = []
        rem = idx.copy()
        for _ in range(k):
            walks.append(np.cumsum(_digit_steps(rem % base, n, d), axis=1))
            rem //= base
        if k == 1:
            acc += float(idx.shape[0])
            continue
        logw = np.zeros(idx.shape[0])
        for t in range(n):
            if k == 2:
                eq = np.all(walks[0][:, t, :] == walks[1][:, t, :], axis=1)
                logw += a2 * eq
            else:
                eq01 = np.all(walks[0][:, t, :] == walks[1][:, t, :], axis=1)
                eq02 = np.all(walks[0][:, t, :] == walks[2][:, t, :], axis=1)
                eq12 = np.all(walks[1][:, t, :] == walks[2][:, t, :], axis=1)
                npairs = (eq01.astype(np.int64) + eq02.astype(np.int64)
                          + eq12.astype(np.int64))
                # 0 pairs: distinct; 1 pair: one coincidence; 3 pairs: all equal
                logw += np.where(npairs == 3, a3, 0.0)
                logw += np.where(npairs == 1, a2, 0.0)
        acc += float(np.exp(logw).sum())
    return acc / total


def concentration_function(samples, lam: float) -> float:
    """Empirical concentration: max over x of the fraction in [x, x + lam].

    The maximum is attained with the window's left edge at a sample point,
    so sorting plus a binary search per point is exact.
    """
    if lam < 0:
        raise ValueError("window width must be nonnegative")
    s = np.sort(np.asarray(samples, dtype=np.float64))
    m = s.shape[0]
    if m == 0:
        raise ValueError("need at least one sample")
    hi = np.searchsorted(s, s + lam, side="right")
    return float((hi - np.arange(m)).max()) / m


def rogozin_diagnostic(sample_sets, lam: float) -> dict:
    """Concentration of a sum against the spread of its summands.

    Returns the empirical concentration of the elementwise sum, the
    scale-free comparison quantity (sum over parts of one minus their
    concentration) to the power -1/2, and their ratio. The first is at most
    an absolute constant times the second; the ratio makes that checkable
    without fixing the constant.
    """
    sets = [np.asarray(s, dtype=np.float64) for s in sample_sets]
    if len(sets) == 0:
        raise ValueError("need at least one sample set")
    m = sets[0].shape[0]
    if any(s.shape[0] != m for s in sets):
        raise ValueError("sample sets must have equal length")
    q_parts = [concentration_function(s, lam) for s in sets]
    spread = sum(1.0 - q for q in q_parts)
    q_sum = concentration_function(np.sum(sets, axis=0), lam)
    rhs = math.inf if spread == 0.0 else spread ** -0.5
    return {"q_sum": q_sum, "rhs": rhs, "parts": q_parts,
            "ratio": q_sum / rhs if math.isfinite(rhs) else 0.0}
