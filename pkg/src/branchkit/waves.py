"""Vectorized population waves for the two desk-scale showcase models.

These engines drop the genealogy and keep only the per-individual state
arrays, which is what the local-density and extremal-particle experiments
need. The cell-division model tracks infected cells only: an uninfected cell
begets uninfected cells forever, so the infected-cell counts are unaffected
and the array stays near its expected size instead of doubling every step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .errors import PopulationExceededCap

DEFAULT_CAP = 10_000_000


def kimmel_wave(lam: float, x0: int, n: int, rng,
                cap: int = DEFAULT_CAP) -> tuple:
    """Infected-cell wave of the cell-division model.

    Returns (counts, final), where counts[k] is the number of infected cells
    at generation k and final is the parasite-count array at generation n.
    Cells split in two; each daughter receives an independent
    Poisson(lam/2 * x) parasite load from a parent carrying x.
    """
    if x0 < 1:
        raise ValueError("start the wave from an infected cell (x0 >= 1)")
    x = np.array([x0], dtype=np.int64)
    counts = np.zeros(n + 1, dtype=np.int64)
    counts[0] = 1
    for g in range(n):
        if len(x) == 0:
            break
        lam_vec = 0.5 * lam * x
        daughters = rng.poisson(np.concatenate([lam_vec, lam_vec]))
        x = daughters[daughters > 0]
        if len(x) > cap:
            raise PopulationExceededCap(g + 1, len(x), cap)
        counts[g + 1] = len(x)
    return counts, x


@dataclass
class CoupledRun:
    """Per-generation counts of a coupled replicate: the infected-cell wave,
    the tube population, the children-in-tube of the currently coupled
    parents (selected), and the lower branching process built on the same
    randomness."""

    n_star: np.ndarray      # infected-cell counts (>= 1 parasite)
    tube_count: np.ndarray  # cells meeting the tube threshold (>= b)
    selected: np.ndarray    # tube children of the first bpve[g] parents
    bpve: np.ndarray        # coupled lower-process counts
    mu_bar: float           # mean of the one-step tube measure

    def dominance_holds(self) -> bool:
        return bool(np.all(self.tube_count >= self.selected)
                    and np.all(self.selected >= self.bpve)
                    and np.all(self.bpve >= 0))


def kimmel_coupled_wave(lam: float, n: int, rng, b: int = 1,
                        cap: int = DEFAULT_CAP) -> CoupledRun:
    """Infected-cell wave coupled with a lower branching process.

    The tube keeps, at every generation, cells with at least b parasites.
    The one-step tube count of a parent with x parasites is Binomial(2, q_x)
    with q_x = P(Poisson(lam x / 2) >= b), increasing in x, so the tube
    measure is the x = b law and each coupled parent's lower offspring count
    is drawn by inverse-CDF from the same uniform that locates its true
    count: xi <= count surely, yet xi is i.i.d. from the tube measure. The
    lower process therefore never overtakes the selected subpopulation.

    The coupled parents are always the leading cells of the wave array; the
    array is reordered each step (tube children of coupled parents first) so
    that invariant is maintained. Reordering is harmless: a cell's future
    depends only on its own parasite count and fresh randomness.
    """
    if b < 1:
        raise ValueError("tube threshold must be >= 1")
    x = np.array([b], dtype=np.int64)
    n_star = np.zeros(n + 1, dtype=np.int64)
    tube_count = np.zeros(n + 1, dtype=np.int64)
    selected = np.zeros(n + 1, dtype=np.int64)
    bpve = np.zeros(n + 1, dtype=np.int64)
    n_star[0] = tube_count[0] = selected[0] = bpve[0] = 1

    def tail(xs):  # P(Poisson(lam x / 2) >= b) for integer b >= 1
        mean = 0.5 * lam * xs
        p_lt = np.zeros(len(xs))
        term = np.exp(-mean)
        for k in range(b):
            p_lt += term
            term = term * mean / (k + 1)
        return 1.0 - p_lt

    q_floor = float(tail(np.array([b]))[0])
    mu_bar = 2.0 * q_floor
    f_mu0 = (1.0 - q_floor) ** 2
    f_mu1 = 1.0 - q_floor ** 2

    for g in range(n):
        if len(x) == 0:
            break
        lam_vec = 0.5 * lam * x
        d1 = rng.poisson(lam_vec)
        d2 = rng.poisson(lam_vec)
        c = (d1 >= b).astype(np.int64) + (d2 >= b).astype(np.int64)

        B = int(bpve[g])
        if B > 0:
            qs = tail(x[:B])
            zero = np.zeros(B)
            one = np.ones(B)
            cdf = np.stack([zero, (1 - qs) ** 2, 1 - qs ** 2, one])
            cb = c[:B]
            cols = np.arange(B)
            lo = cdf[cb, cols]
            hi = cdf[cb + 1, cols]
            u = lo + rng.random(B) * (hi - lo)
            xi = (u > f_mu0).astype(np.int64) + (u > f_mu1).astype(np.int64)
            selected[g + 1] = int(cb.sum())
            bpve[g + 1] = int(xi.sum())

        pairs = np.column_stack([d1, d2]).ravel()  # parent-major child order
        lead = pairs[:2 * B]
        rest = pairs[2 * B:]
        x = np.concatenate([
            lead[lead >= b],                    # tube children of coupled parents
            lead[(lead > 0) & (lead < b)],
            rest[rest > 0],
        ])
        if len(x) > cap:
            raise PopulationExceededCap(g + 1, len(x), cap)
        n_star[g + 1] = len(x)
        tube_count[g + 1] = int((x >= b).sum())
    return CoupledRun(n_star, tube_count, selected, bpve, mu_bar)


def kimmel_tail_curve(lam: float, x0: int, n: int) -> np.ndarray:
    """P(Y_k > 0) for k = 0..n, where Y is the parasite line along one fixed
    cell lineage: a Galton-Watson chain with Poisson(lam/2) offspring started
    from x0. Computed by iterating the extinction-probability recursion, so
    it is exact with no truncation."""
    half = 0.5 * lam
    s = 0.0
    out = np.empty(n + 1)
    for k in range(n + 1):
        out[k] = 1.0 - s ** x0
        s = math.exp(half * (s - 1.0))
    return out


def _increment_fn(descriptor):
    if descriptor == "rademacher":
        return lambda rng, size: rng.choice((-1.0, 1.0), size=size)
    if isinstance(descriptor, tuple) and descriptor[0] == "normal":
        _, mu, sd = descriptor
        return lambda rng, size: mu + sd * rng.standard_normal(size)
    if isinstance(descriptor, tuple) and descriptor[0] == "drift":
        _, step = descriptor
        return lambda rng, size: np.full(size, float(step))
    raise ValueError(f"unknown increment descriptor {descriptor!r}")


def brw_extremes(n: int, rng, offspring: int = 2,
                 increment=("normal", 0.0, 1.0), beam: Optional[int] = 30000,
                 x0: float = 0.0, cap: int = DEFAULT_CAP) -> np.ndarray:
    """Per-generation maximum position of a branching random walk.

    With a beam, only the top `beam` positions survive each generation. The
    beam can only discard particles, so every recorded maximum is a lower
    bound for the true maximum; it can depress the front, never inflate it.
    """
    inc = _increment_fn(increment)
    pos = np.array([x0])
    maxima = np.empty(n + 1)
    maxima[0] = x0
    for g in range(n):
        pos = np.repeat(pos, offspring) + inc(rng, len(pos) * offspring)
        if beam is not None and len(pos) > beam:
            keep = np.argpartition(pos, len(pos) - beam)[len(pos) - beam:]
            pos = pos[keep]
        if len(pos) > cap:
            raise PopulationExceededCap(g + 1, len(pos), cap)
        maxima[g + 1] = float(pos.max())
    return maxima


def brw_local_counts(ladder, a: float, rng, offspring: int = 2,
                     increment=("normal", 0.0, 1.0), x0: float = 0.0,
                     cap: int = DEFAULT_CAP) -> dict:
    """Exact counts Z_k([a*k, inf)) at each k in the ladder, full population.

    No beam: the whole wave is kept, so the horizon is limited by the cap
    (offspring^max(ladder) particles).
    """
    ladder = sorted(int(k) for k in ladder)
    inc = _increment_fn(increment)
    pos = np.array([x0])
    counts = {}
    if ladder and ladder[0] == 0:
        counts[0] = int((pos >= 0.0).sum())
    for g in range(ladder[-1]):
        pos = np.repeat(pos, offspring) + inc(rng, len(pos) * offspring)
        if len(pos) > cap:
            raise PopulationExceededCap(g + 1, len(pos), cap)
        k = g + 1
        if k in ladder:
            counts[k] = int((pos >= a * k).sum())
    return counts
