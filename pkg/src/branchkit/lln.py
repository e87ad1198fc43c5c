"""Law-of-large-numbers diagnostics: ergodicity and genealogy separation.

Everything exact lives on finite models: auxiliary-chain ergodicity profiles,
the summability conditions controlling almost-sure convergence, the V_i
second-moment bounds, and closed recursions for second moments of population
functionals. The Monte Carlo side (separation profiles, the LLN experiment
itself) runs on the tree or count engines and is checked against the exact
quantities in the test suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .counts import CountPath, simulate_counts
from .environments import EnvironmentSequence
from .errors import ExtinctEverywhere
from .kernels import MeanSemigroup, _doeblin_of_matrix, q_compose
from .models import BranchingModel, FiniteModel
from .rng import replicate_generator
from .simulate import mrca_pair_counts, simulate

T_RATIO = 1.05   # survival-regularity surrogate: median last-half step ratio


# ---------------------------------------------------------------------------
# ergodicity (Assumption 1 side)
# ---------------------------------------------------------------------------

@dataclass
class ErgodicityDiagnostic:
    """sup over starting atoms and test functions of the gap to mu_n."""

    values: Dict[Tuple[int, int], float]
    references: Dict[int, np.ndarray]   # mu_n as a vector over atoms
    family_size: int

    def profile_by_gap(self) -> Dict[int, float]:
        out: Dict[int, float] = {}
        for (i, n), v in self.values.items():
            g = n - i
            out[g] = max(out.get(g, 0.0), v)
        return out


def ergodicity_profile(ms: MeanSemigroup,
                       horizons: Sequence[Tuple[int, int]],
                       f_family: Optional[Sequence[Callable]] = None,
                       f_n: Optional[Callable] = None,
                       x0=None) -> ErgodicityDiagnostic:
    """Exact sup_{atom starts, f} |Q_{i,n}(x, f o f_n) - mu_n(f)|.

    The supremum over initial laws is attained at point masses because the
    objective is affine in the law, so atoms suffice on a finite space.
    mu_n defaults to the auxiliary marginal started at x0 (first atom when
    omitted); the test family defaults to all atom indicators.
    """
    atoms = ms.model.space.atoms
    d = len(atoms)
    if f_n is None:
        f_n = lambda z: z
    if f_family is None:
        f_family = [lambda z, a=a: 1.0 if z == a else 0.0 for a in atoms]
    x0i = 0 if x0 is None else ms.model.space.index(x0)

    values: Dict[Tuple[int, int], float] = {}
    references: Dict[int, np.ndarray] = {}
    fvecs_cache: Dict[int, np.ndarray] = {}

    def fmatrix(n):  # rows: functions, cols: atoms, entries f(f_n(atom))
        if n not in fvecs_cache:
            fvecs_cache[n] = np.array(
                [[f(f_n(a)) for a in atoms] for f in f_family], dtype=float)
        return fvecs_cache[n]

    for i, n in horizons:
        if not 0 <= i <= n:
            raise ValueError(f"bad horizon pair (i={i}, n={n})")
        if n not in references:
            references[n] = q_compose(ms, 0, n).array[x0i]
        fa = fmatrix(n)
        mu_f = fa @ references[n]
        q = q_compose(ms, i, n).array
        gaps = np.abs(q @ fa.T - mu_f[None, :])   # (start atom, function)
        values[(i, n)] = float(gaps.max())
    return ErgodicityDiagnostic(values, references, len(f_family))


# ---------------------------------------------------------------------------
# exact second-moment recursions
# ---------------------------------------------------------------------------

def _pair_tensors(fm: FiniteModel, env: EnvironmentSequence, n: int):
    return [np.stack([fm.pair_matrix(x, env.token_at(j))
                      for x in fm.space.atoms]) for j in range(n)]


def exact_second_moment_total(fm: FiniteModel, env: EnvironmentSequence,
                              x0, n: int) -> float:
    """E[Z_n(X)^2] from one ancestor, by the branching pair recursion.

    Linear-domain floats: valid while m_n^2 stays below ~1e300.
    """
    return exact_functional_second_moment(
        fm, env, x0, np.ones(fm.space.size), n)


def exact_functional_second_moment(fm: FiniteModel, env: EnvironmentSequence,
                                   x0, g: np.ndarray, n: int) -> float:
    """E[Z_n(g)^2] for a vector g over atoms.

    Conditioning on the first brood splits Z_n(g) into independent subtree
    contributions; squaring leaves a same-child term (the recursion) plus a
    distinct-children term paid by the exact ordered-pair matrix.
    """
    d = fm.space.size
    g = np.asarray(g, dtype=float)
    pair = _pair_tensors(fm, env, n)
    s = g * g                      # second moments at depth 0
    w = g.copy()                   # first moments  at depth 0
    for j in range(n - 1, -1, -1):
        m1 = fm.m1(env.token_at(j))
        cross = np.einsum("xyz,y,z->x", pair[j], w, w)
        s = m1 @ s + cross
        w = m1 @ w
    return float(s[fm.space.index(x0)])


def exact_disc_second_moment(fm: FiniteModel, env: EnvironmentSequence,
                             x0, f_vec: np.ndarray, n: int) -> float:
    """E[((Z_n(f) - mu_n(f) Z_n(X)) / m_n)^2], all pieces exact."""
    ms = MeanSemigroup(fm, env)
    x0i = fm.space.index(x0)
    mu_f = float(q_compose(ms, 0, n).array[x0i] @ np.asarray(f_vec, float))
    g = np.asarray(f_vec, float) - mu_f
    num = exact_functional_second_moment(fm, env, x0, g, n)
    log_m = float(ms.log_totals(0, n)[x0i])
    return num * math.exp(-2.0 * log_m)


def exact_mrca_pair_profile(fm: FiniteModel, env: EnvironmentSequence,
                            x0, n: int) -> np.ndarray:
    """E[# ordered pairs of distinct generation-n individuals whose MRCA
    lives at generation g], for g = 0..n-1.

    A pair coalescing at g passes through distinct children of one node:
    mean node count at g, times the ordered-pair brood matrix, times the
    two independent descendant totals.
    """
    ms = MeanSemigroup(fm, env)
    x0i = fm.space.index(x0)
    out = np.zeros(n)
    for g in range(n):
        node_means = ms.matrix(0, g)[x0i]
        tails = ms.totals(g + 1, n)
        acc = 0.0
        for xi, x in enumerate(fm.space.atoms):
            if node_means[xi] == 0:
                continue
            pm = fm.pair_matrix(x, env.token_at(g))
            acc += node_means[xi] * float(tails @ pm @ tails)
        out[g] = acc
    return out


# ---------------------------------------------------------------------------
# separation (Assumption 2 side)
# ---------------------------------------------------------------------------

@dataclass
class SeparationDiagnostic:
    n: int
    k_list: List[int]
    fractions: Dict[int, float]       # K -> mean normalized pair fraction
    fraction_se: Dict[int, float]
    z2_over_m2: float                 # mean of (Z_n / m_n)^2
    z2_se: float
    replicates: int
    survivors: int


def separation_profile(model: BranchingModel, env: EnvironmentSequence, x0,
                       n: int, k_list: Sequence[int], replicates: int,
                       seed: int, cap: int = 10_000_000) -> SeparationDiagnostic:
    """Monte Carlo pair-coalescence fractions, normalized by exact m_n."""
    if isinstance(model, FiniteModel):
        ms = MeanSemigroup(model, env)
        m_n = float(ms.totals(0, n)[model.space.index(x0)])
    else:
        raise ValueError("separation profile needs a finite model for exact m_n")
    k_list = sorted(int(k) for k in k_list)
    frac_samples: Dict[int, List[float]] = {k: [] for k in k_list}
    z2_samples: List[float] = []
    survivors = 0
    for r in range(replicates):
        tree = simulate(model, env, x0, n, int(replicate_generator(
            seed, r, 0x5E9A12).integers(2 ** 62)), cap=cap)
        z = tree.size(n)
        z2_samples.append((z / m_n) ** 2)
        if z > 0:
            survivors += 1
        rep = mrca_pair_counts(tree, n)
        cum = np.concatenate([np.cumsum(rep.pairs_by_generation[::-1])[::-1],
                              [0]])
        for k in k_list:
            kk = min(max(k, 0), n)
            frac_samples[k].append(float(cum[kk]) / (m_n * m_n))
    if survivors == 0:
        raise ExtinctEverywhere(f"all {replicates} replicates extinct at n={n}")
    fr = {k: float(np.mean(v)) for k, v in frac_samples.items()}
    fr_se = {k: float(np.std(v, ddof=1) / math.sqrt(replicates))
             for k, v in frac_samples.items()}
    z2 = float(np.mean(z2_samples))
    z2_se = float(np.std(z2_samples, ddof=1) / math.sqrt(replicates))
    return SeparationDiagnostic(n, k_list, fr, fr_se, z2, z2_se,
                                replicates, survivors)


# ---------------------------------------------------------------------------
# summability conditions
# ---------------------------------------------------------------------------

@dataclass
class CorollaryDReport:
    n_max: int
    series1_partial: float
    series1_tail_bound: Optional[float]
    series1_verdict: str
    series2_partial: float
    series2_tail_bound: Optional[float]
    series2_verdict: str
    verdict: str                      # summable | diverging | inconclusive | not-applicable
    d_values: List[float]


def _series_verdict(terms: np.ndarray) -> Tuple[str, Optional[float]]:
    """Geometric-tail classification from the last observed term ratios."""
    tail = terms[-min(10, len(terms)):]
    if np.any(tail <= 0):
        return "summable", 0.0  # terms hit exact zero; nothing left to add
    ratios = tail[1:] / tail[:-1]
    r = float(ratios.max())
    if r < 1.0 - 1e-9:
        t = float(terms[-1])
        return "summable", t * r / (1.0 - r)
    if float(ratios.min()) >= 1.0 - 1e-12:
        return "diverging", None
    return "inconclusive", None


def corollary_d_conditions(fm: FiniteModel, env: EnvironmentSequence, x0,
                           n_max: int) -> CorollaryDReport:
    """Partial sums and tail classification of the two summability series.

    Series 1: sum over n >= 1 of (1 + D(T^{n-1} e)) / m_n(x0, e, X) with
    D(e) = sigma(e) M(e) M(Te)^2 / m(x0, Te). Series 2: sum over n >= 0 of
    the products prod_{k=0..n} (1 - 1/M(T^k e)^2). An infinite one-step
    constant anywhere in the horizon makes the whole check not-applicable.
    """
    ms = MeanSemigroup(fm, env)
    x0i = fm.space.index(x0)
    m_vals = [_doeblin_of_matrix(ms.step_matrix(j)) for j in range(n_max + 2)]
    if any(not math.isfinite(m) for m in m_vals):
        return CorollaryDReport(n_max, math.nan, None, "not-applicable",
                                math.nan, None, "not-applicable",
                                "not-applicable", [])

    sigmas = [fm.sigma(env.token_at(j)) for j in range(n_max + 1)]
    d_values = []
    for j in range(n_max):
        m_next_x0 = float(fm.m1(env.token_at(j + 1))[x0i].sum())
        d_values.append(sigmas[j] * m_vals[j] * m_vals[j + 1] ** 2 / m_next_x0)

    log_totals = [float(ms.log_totals(0, k)[x0i]) for k in range(n_max + 1)]
    terms1 = np.array([(1.0 + d_values[k - 1]) * math.exp(-log_totals[k])
                       for k in range(1, n_max + 1)])
    verdict1, tail1 = _series_verdict(terms1)

    prods = np.cumprod([1.0 - 1.0 / (m * m) for m in m_vals[:n_max + 1]])
    verdict2, tail2 = _series_verdict(prods)

    if verdict1 == "summable" and verdict2 == "summable":
        verdict = "summable"
    elif "diverging" in (verdict1, verdict2):
        verdict = "diverging"
    else:
        verdict = "inconclusive"
    return CorollaryDReport(n_max, float(terms1.sum()), tail1, verdict1,
                            float(prods.sum()), tail2, verdict2, verdict,
                            d_values)


# ---------------------------------------------------------------------------
# the LLN experiment
# ---------------------------------------------------------------------------

def in_regular_growth_event(cp: CountPath) -> bool:
    """Finite-horizon surrogate for the geometric-growth survival event:
    positive at every generation, and the median step ratio over the last
    half exceeds 1.05."""
    totals = cp.counts.sum(axis=1)
    if np.any(totals <= 0):
        return False
    n = cp.horizon
    start = max(1, n // 2)
    ratios = [cp.total(k + 1) / cp.total(k) for k in range(start, n)]
    if not ratios:
        return False
    return float(np.median(ratios)) > T_RATIO


@dataclass
class LLNRecord:
    replicate: int
    n: int
    discrepancy: float
    prop_gap: Optional[float]
    survived: bool
    in_t: bool


@dataclass
class LLNReport:
    ladder: List[int]
    records: List[LLNRecord]
    mean_square: Dict[int, float]
    prop_gap_median: Dict[int, float]
    strong_max_median: float
    mu_values: Dict[int, float]
    t_fraction: float

    def mean_square_decreasing(self) -> bool:
        vals = [self.mean_square[k] for k in self.ladder]
        return all(b < a for a, b in zip(vals, vals[1:]))


def lln_experiment(fm: FiniteModel, env: EnvironmentSequence, x0,
                   f: Callable, f_n: Optional[Callable], ladder: Sequence[int],
                   replicates: int, seed: int) -> LLNReport:
    """Normalized discrepancy and conditional proportion gap along a ladder.

    discrepancy = (Z_n(f o f_n) - mu_n(f) Z_n(X)) / m_n, recorded for every
    replicate (zero when extinct); the proportion gap |Z_n(f)/Z_n - mu_n(f)|
    only on the regular-growth event. mu_n comes from the exact auxiliary
    marginal, m_n from the exact semigroup.
    """
    if f_n is None:
        f_n = lambda z: z
    ladder = sorted(set(int(k) for k in ladder))
    n_top = ladder[-1]
    ms = MeanSemigroup(fm, env)
    x0i = fm.space.index(x0)
    atoms = fm.space.atoms
    f_vec = np.array([f(f_n(a)) for a in atoms], dtype=float)
    mu_values = {k: float(q_compose(ms, 0, k).array[x0i] @ f_vec)
                 for k in ladder}
    log_m = {k: float(ms.log_totals(0, k)[x0i]) for k in ladder}

    records: List[LLNRecord] = []
    sq: Dict[int, List[float]] = {k: [] for k in ladder}
    gaps: Dict[int, List[float]] = {k: [] for k in ladder}
    strong: List[float] = []
    burn_in = ladder[len(ladder) // 2]
    t_count = 0
    any_survivor = False
    for r in range(replicates):
        rng = replicate_generator(seed, r, 0x11A9)
        cp = simulate_counts(fm, env, x0, n_top, rng)
        survived = cp.survived()
        any_survivor = any_survivor or survived
        in_t = in_regular_growth_event(cp)
        t_count += in_t
        rep_max = 0.0
        for k in ladder:
            z_vec = cp.counts[k] * math.exp(cp.log_scale[k])
            z_tot = float(z_vec.sum())
            z_f = float(z_vec @ f_vec)
            disc = (z_f - mu_values[k] * z_tot) * math.exp(-log_m[k])
            sq[k].append(disc * disc)
            gap = None
            if in_t and z_tot > 0:
                gap = abs(z_f / z_tot - mu_values[k])
                gaps[k].append(gap)
            if k >= burn_in:
                rep_max = max(rep_max, abs(disc))
            records.append(LLNRecord(r, k, disc, gap,
                                     survived, in_t))
        strong.append(rep_max)
    if not any_survivor:
        raise ExtinctEverywhere(
            f"all {replicates} replicates extinct by generation {n_top}")
    return LLNReport(
        ladder=list(ladder),
        records=records,
        mean_square={k: float(np.mean(v)) for k, v in sq.items()},
        prop_gap_median={k: (float(np.median(v)) if v else math.nan)
                         for k, v in gaps.items()},
        strong_max_median=float(np.median(strong)),
        mu_values=mu_values,
        t_fraction=t_count / replicates,
    )


# ---------------------------------------------------------------------------
# V_i bound (second-moment lemma)
# ---------------------------------------------------------------------------

@dataclass
class ViReport:
    i_max: int
    k_max: int
    vi: Dict[int, np.ndarray]         # i -> matrix over (y0, y1)
    vi_argmax_k: Dict[int, int]
    truncation_flag: bool             # sup still rising near k_max somewhere
    bound_ok: bool                    # V_i <= M(T^i e)^2 / m_i(x0)^2
    worst_bound_slack: float
    hyp_partial: float                # partial double sum, diagonal included
    hyp_terms: np.ndarray
    z2_over_m2_horizon: Dict[int, float]
    bounded_corroborated: bool


def vi_bound(fm: FiniteModel, env: EnvironmentSequence, x0,
             i_max: int, k_max: int = 200) -> ViReport:
    """Evaluate V_i(y0, y1) = sup_k m_k(y0) m_k(y1) / m_{i+k}(x0)^2 (shifted
    environments as displayed) and the associated summability double sum.

    The sup over all k is truncated at k_max; if the running argmax still
    sits in the last decade for some i, the report carries a truncation flag
    instead of claiming the bound. The double sum weights ordered child
    pairs including the same-child diagonal.
    """
    ms = MeanSemigroup(fm, env)
    d = fm.space.size
    x0i = fm.space.index(x0)
    vi: Dict[int, np.ndarray] = {}
    argmax: Dict[int, int] = {}
    flag = False
    for i in range(1, i_max + 1):
        best = np.full((d, d), -np.inf)
        best_k = 0
        for k in range(k_max + 1):
            a = ms.log_totals(i, i + k)
            denom = 2.0 * float(ms.log_totals(0, i + k)[x0i])
            cand = a[:, None] + a[None, :] - denom
            if cand.max() > best.max():
                best_k = k
            best = np.maximum(best, cand)
        vi[i] = np.exp(best)
        argmax[i] = best_k
        if best_k >= k_max - max(1, k_max // 10):
            flag = True

    worst_slack = -math.inf
    for i in range(1, i_max + 1):
        m_i = _doeblin_of_matrix(ms.step_matrix(i))
        if not math.isfinite(m_i):
            continue
        log_mi = float(ms.log_totals(0, i)[x0i])
        bound = m_i * m_i * math.exp(-2.0 * log_mi)
        worst_slack = max(worst_slack, float(vi[i].max()) - bound)
    bound_ok = worst_slack <= 1e-9

    terms = np.zeros(i_max)
    for i in range(1, i_max + 1):
        node_means = ms.matrix(0, i - 1)[x0i]
        tok = env.token_at(i - 1)
        acc = 0.0
        for xi, x in enumerate(fm.space.atoms):
            if node_means[xi] == 0:
                continue
            pm = fm.pair_matrix_with_diagonal(x, tok)
            acc += node_means[xi] * float(np.sum(pm * vi[i]))
        terms[i - 1] = acc

    horizon = {n: exact_second_moment_total(fm, env, x0, n)
               * math.exp(-2.0 * float(ms.log_totals(0, n)[x0i]))
               for n in (max(2, i_max // 2), i_max)}
    vals = list(horizon.values())
    bounded = vals[-1] <= vals[0] * 1.5 + 1e-9
    return ViReport(i_max, k_max, vi, argmax, flag, bound_ok,
                    max(0.0, worst_slack), float(terms.sum()), terms,
                    horizon, bounded)
