"""Mean semigroup and auxiliary-chain kernels, exact on finite trait spaces.

The mean semigroup is the family of matrices m_n(x, e, {y}) obtained by
multiplying the one-step mean matrices in environment order. The auxiliary
chain reweights each step by the ratio of forward totals; its n-step marginal
recovers m_n(x, e, {y}) / m_n(x, e, X) by telescoping, which is the identity
behind every many-to-one computation here.

Products are carried with a per-row log scale throughout, so horizons far
beyond float overflow are exact up to rounding. Ratios, kernels and slopes
never leave the representable range.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product as iter_product
from typing import Callable, Dict, List, Tuple

import numpy as np

from .environments import EnvironmentSequence
from .errors import EnumerationBudgetExceeded
from .models import FiniteModel

ROW_SUM_TOL = 1e-10
PATH_BUDGET = 1_000_000


@dataclass
class KernelTable:
    """Square nonnegative table over trait atoms, optionally row-stochastic."""

    array: np.ndarray
    row_stochastic: bool = False

    def __post_init__(self):
        a = np.asarray(self.array, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("kernel table must be a square matrix")
        if (a < 0).any():
            raise ValueError("kernel entries must be nonnegative")
        if self.row_stochastic:
            gap = float(np.abs(a.sum(axis=1) - 1.0).max())
            if gap > ROW_SUM_TOL:
                raise ValueError(f"row sums deviate from 1 by {gap:.3e}")
        self.array = a

    @property
    def d(self) -> int:
        return self.array.shape[0]

    def compose(self, other: "KernelTable") -> "KernelTable":
        return KernelTable(self.array @ other.array,
                           self.row_stochastic and other.row_stochastic)

    def row(self, i: int) -> np.ndarray:
        return self.array[i]

    def tv_gap(self) -> float:
        """Largest total-variation distance between two rows (half L1)."""
        a = self.array
        worst = 0.0
        for x in range(self.d):
            for y in range(x + 1, self.d):
                worst = max(worst, 0.5 * float(np.abs(a[x] - a[y]).sum()))
        return worst


class MeanSemigroup:
    """Cached products of one-step mean matrices along an environment sequence.

    A product over steps i..n-1 is stored as (L, R): row x of the true matrix
    equals exp(L[x]) * R[x, :] with max(R[x, :]) = 1. All public accessors are
    derived from this scaled form.
    """

    def __init__(self, fm: FiniteModel, env: EnvironmentSequence):
        if not isinstance(fm, FiniteModel):
            raise TypeError("mean semigroup requires a FiniteModel")
        self.model = fm
        self.env = env
        self.d = fm.space.size
        self._steps: Dict[int, np.ndarray] = {}
        self._prods: Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]] = {}

    def step_matrix(self, i: int) -> np.ndarray:
        if i not in self._steps:
            self._steps[i] = self.model.m1(self.env.token_at(i))
        return self._steps[i]

    def _product(self, i: int, n: int):
        if not 0 <= i <= n:
            raise ValueError(f"need 0 <= i <= n, got i={i}, n={n}")
        if n == i:
            return np.zeros(self.d), np.eye(self.d)
        key = (i, n)
        if key in self._prods:
            return self._prods[key]
        k = n
        while k > i and (i, k) not in self._prods:
            k -= 1
        L, R = (np.zeros(self.d), np.eye(self.d)) if k == i else self._prods[(i, k)]
        for j in range(k, n):
            R = R @ self.step_matrix(j)
            scale = R.max(axis=1)
            safe = np.where(scale > 0, scale, 1.0)
            L = L + np.log(safe)
            R = R / safe[:, None]
            self._prods[(i, j + 1)] = (L, R)
        return self._prods[(i, n)]

    def log_matrix(self, i: int, n: int) -> np.ndarray:
        """log m_{n-i}(x, T^i e, {y}); -inf where the mean measure vanishes."""
        L, R = self._product(i, n)
        with np.errstate(divide="ignore"):
            return L[:, None] + np.log(R)

    def log_totals(self, i: int, n: int) -> np.ndarray:
        """log m_{n-i}(x, T^i e, X) for every atom x."""
        L, R = self._product(i, n)
        return L + np.log(R.sum(axis=1))

    def matrix(self, i: int, n: int) -> np.ndarray:
        """Linear-domain product; entries overflow to inf past ~1e308."""
        L, R = self._product(i, n)
        with np.errstate(over="ignore"):
            return np.exp(L)[:, None] * R

    def totals(self, i: int, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_totals(i, n))


def mean_matrix_n(ms: MeanSemigroup, x, n: int):
    """Mean measure of generation n from one ancestor of trait x.

    Returns (vector over atoms, total). n = 0 gives the indicator at x.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    xi = ms.model.space.index(x)
    row = ms.matrix(0, n)[xi]
    return row, float(row.sum())


def biased_kernel(fm: FiniteModel, e) -> KernelTable:
    """One-step trait kernel of the auxiliary chain: the mean offspring
    measure normalized by the offspring mean (children-count biased)."""
    m1 = fm.m1(e)
    totals = m1.sum(axis=1)
    if (totals <= 0).any():
        raise ValueError("offspring means must be positive for every trait")
    return KernelTable(m1 / totals[:, None], row_stochastic=True)


def q_kernel(ms: MeanSemigroup, n: int, i: int) -> KernelTable:
    """One-step auxiliary kernel at position i under horizon n.

    S[x, y] = m_1(x, T^i e, {y}) * m_{n-i-1}(y, T^{i+1} e, X)
                                 / m_{n-i}(x, T^i e, X),
    which is row-stochastic by the branching property.
    """
    if n < 1:
        raise ValueError("horizon n must be >= 1")
    if not 0 <= i < n:
        raise ValueError(f"step index must satisfy 0 <= i < n, got {i}")
    m1 = ms.step_matrix(i)
    log_ahead = ms.log_totals(i + 1, n)
    log_here = ms.log_totals(i, n)
    s = m1 * np.exp(log_ahead[None, :] - log_here[:, None])
    return KernelTable(s, row_stochastic=True)


def q_compose(ms: MeanSemigroup, i: int, n: int) -> KernelTable:
    """Composition of the auxiliary one-step kernels between generations i
    and n; i = n gives the identity."""
    if not 0 <= i <= n:
        raise ValueError(f"need 0 <= i <= n, got i={i}, n={n}")
    out = np.eye(ms.d)
    for j in range(i, n):
        out = out @ q_kernel(ms, n, j).array
    return KernelTable(out, row_stochastic=True)


@dataclass
class ManyToOneReport:
    lhs: float
    rhs: float
    gap: float
    budget_used: int


def _check_budget(d: int, n: int) -> int:
    budget = d ** (n + 1)
    if budget > PATH_BUDGET:
        raise EnumerationBudgetExceeded(budget, PATH_BUDGET)
    return budget


def many_to_one_check(fm: FiniteModel, env: EnvironmentSequence, x0, n: int,
                      F: Callable) -> ManyToOneReport:
    """Exact check of the many-to-one identity for a path functional F.

    lhs sums F over every length-n trait path weighted by its mean count of
    individuals (the product of one-step mean-matrix entries); rhs is the
    total mean population times the expectation of F under the auxiliary
    chain. Both sides are exact enumerations; the gap is pure float error.
    """
    d = fm.space.size
    budget = _check_budget(d, n)
    ms = MeanSemigroup(fm, env)
    atoms = fm.space.atoms
    x0i = fm.space.index(x0)
    steps = [ms.step_matrix(j) for j in range(n)]
    qs = [q_kernel(ms, n, j).array for j in range(n)]

    lhs = 0.0
    ef = 0.0
    for tail in iter_product(range(d), repeat=n):
        path = (x0i,) + tail
        w = 1.0
        p = 1.0
        for j in range(n):
            w *= steps[j][path[j], path[j + 1]]
            p *= qs[j][path[j], path[j + 1]]
            if w == 0.0 and p == 0.0:
                break
        if w == 0.0 and p == 0.0:
            continue
        val = F(tuple(atoms[k] for k in path))
        lhs += w * val
        ef += p * val
    rhs = float(ms.totals(0, n)[x0i]) * ef
    return ManyToOneReport(lhs, rhs, abs(lhs - rhs), budget)


def biased_path_expectation(fm: FiniteModel, env: EnvironmentSequence, x0,
                            n: int, F: Callable) -> float:
    """E[F(X_0..X_n) * prod_j m(X_j, T^j e)] along the biased chain.

    A reordering of the many-to-one lhs sum: each path's probability under
    the biased kernels times the product of offspring means recovers the
    product of mean-matrix entries factor by factor.
    """
    d = fm.space.size
    _check_budget(d, n)
    atoms = fm.space.atoms
    x0i = fm.space.index(x0)
    ps = [biased_kernel(fm, env.token_at(j)).array for j in range(n)]
    means = [fm.m1(env.token_at(j)).sum(axis=1) for j in range(n)]
    out = 0.0
    for tail in iter_product(range(d), repeat=n):
        path = (x0i,) + tail
        w = 1.0
        for j in range(n):
            w *= ps[j][path[j], path[j + 1]] * means[j][path[j]]
            if w == 0.0:
                break
        if w:
            out += w * F(tuple(atoms[k] for k in path))
    return out


def doeblin_constant(fm: FiniteModel, e) -> float:
    """M(e) = max over target atoms z and trait pairs x, y of the ratio
    m_1(x, e, {z}) / m_1(y, e, {z}). Infinity is a valid value."""
    return _doeblin_of_matrix(fm.m1(e))


def _doeblin_of_matrix(a: np.ndarray) -> float:
    worst = 1.0
    for z in range(a.shape[1]):
        col = a[:, z]
        mx = float(col.max())
        if mx == 0.0:
            continue  # no trait reaches z; the comparison is vacuous there
        mn = float(col.min())
        if mn == 0.0:
            return math.inf
        worst = max(worst, mx / mn)
    return worst


def doeblin_constant_bstep(ms: MeanSemigroup, i: int, b: int) -> float:
    """Doeblin constant of the b-step mean matrix starting at position i."""
    if b < 1:
        raise ValueError("b must be >= 1")
    logm = ms.log_matrix(i, i + b)
    worst = 0.0
    for z in range(ms.d):
        col = logm[:, z]
        mx = float(col.max())
        if mx == -math.inf:
            continue
        mn = float(col.min())
        if mn == -math.inf:
            return math.inf
        worst = max(worst, mx - mn)
    return math.exp(worst)


@dataclass
class DoeblinReport:
    horizon: int
    m_values: List[float]          # one-step constants M(T^j e), j < horizon
    ratio_ok: bool
    worst_ratio_slack: float       # how far any total ratio strays outside [1/M, M]
    q_ok: bool
    worst_q_slack: float           # how far any Q_n comparison exceeds M^2
    tv_table: List[Tuple[int, int, float, float]]  # (i, n, tv gap, product bound)
    tv_ok: bool


def doeblin_consequences(fm: FiniteModel, env: EnvironmentSequence,
                         n: int, tol: float = 1e-9) -> DoeblinReport:
    """Verify the comparison consequences of the one-step Doeblin constant.

    Checks, for every horizon k <= n: total ratios m_k(x)/m_k(y) within
    [1/M, M] for M = M(e_0); the auxiliary marginals Q_k(x, {z}) bounded by
    M^2 Q_k(y, {z}); and the row total-variation gap of Q_{i,n} against the
    step-product contraction bound prod_j (1 - 1/M(T^j e)^2).
    """
    if n < 1:
        raise ValueError("horizon must be >= 1")
    ms = MeanSemigroup(fm, env)
    m_values = [_doeblin_of_matrix(ms.step_matrix(j)) for j in range(n)]
    m0 = m_values[0]
    if not math.isfinite(m0):
        raise ValueError("one-step Doeblin constant is infinite at position 0")

    worst_ratio = 0.0
    worst_q = 0.0
    for k in range(1, n + 1):
        lt = ms.log_totals(0, k)
        for x in range(ms.d):
            for y in range(ms.d):
                r = math.exp(lt[x] - lt[y])
                worst_ratio = max(worst_ratio, r - m0, 1.0 / m0 - r)
        q = q_compose(ms, 0, k).array
        for x in range(ms.d):
            for y in range(ms.d):
                worst_q = max(worst_q, float((q[x] - m0 * m0 * q[y]).max()))

    tv_table = []
    tv_ok = True
    for i in range(n):
        gap = q_compose(ms, i, n).tv_gap()
        bound = 1.0
        for j in range(i, n):
            mj = m_values[j]
            factor = 1.0 if not math.isfinite(mj) else 1.0 - 1.0 / (mj * mj)
            bound *= factor
        tv_table.append((i, n, gap, bound))
        if gap > bound + tol:
            tv_ok = False

    return DoeblinReport(
        horizon=n,
        m_values=m_values,
        ratio_ok=worst_ratio <= tol,
        worst_ratio_slack=max(0.0, worst_ratio),
        q_ok=worst_q <= tol,
        worst_q_slack=max(0.0, worst_q),
        tv_table=tv_table,
        tv_ok=tv_ok,
    )
