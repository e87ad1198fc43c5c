"""Tube measures, lower-bound couplings, and the local-density and
extremal-particle experiments.

A tube is a sequence of checkpoint generations, each with a trait set. The
tube measure of a stretch is the law of the number of checkpoint descendants
inside the target set, minimized over starting traits; the couplings built
from these measures bound the population inside the tube from below by a
branching process in varying environment whose step-i offspring law is
exactly the step-i tube measure.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .counts import simulate_counts
from .environments import EnvironmentSequence
from .errors import (EnumerationBudgetExceeded, ExtinctEverywhere,
                     SupercriticalityUnmet)
from .kernels import MeanSemigroup
from .models import BranchingModel, FiniteModel
from .rng import replicate_generator
from .simulate import simulate
from .waves import (brw_extremes, brw_local_counts, kimmel_coupled_wave,
                    kimmel_tail_curve, kimmel_wave)

TAIL_TOL = 1e-10
SUPPORT_LIMIT = 4096
MARKOV_SLACK = math.log(20.0)
DEFAULT_CAP = 10_000_000

_TUBE_TAG = 0x7B3E
_COUPLE_TAG = 0xB4E5
_DENSITY_TAG = 0x10CD
_EXTREME_TAG = 0xE874
_BOOT_TAG = 0xB007


# ------------------------------------------------------------- trait sets

def _as_traitset(spec):
    """A trait-set argument: a number means the half-line [b, inf), any
    iterable an explicit atom collection."""
    if isinstance(spec, bool):
        raise ValueError("a trait set cannot be a bool")
    if isinstance(spec, (int, float, np.integer, np.floating)):
        return "ge", float(spec)
    return "atoms", tuple(spec)


def _atom_indices(fm: FiniteModel, spec) -> list:
    kind, val = _as_traitset(spec)
    atoms = fm.space.atoms
    if kind == "ge":
        return [i for i, a in enumerate(atoms) if a >= val]
    idx = set()
    for a in val:
        if not fm.space.contains(a):
            raise ValueError(f"{a!r} is not an atom of the trait space")
        idx.add(fm.space.index(a))
    return sorted(idx)


# --------------------------------------------------- model parameter recovery

def _kimmel_rate_of(model: BranchingModel) -> float:
    lam = model.env_alphabet[0].get("lam")
    if lam is None:
        raise ValueError("the cell-division token does not carry lam")
    return float(lam)


def _brw_increment(model: BranchingModel):
    e = model.env_alphabet[0]
    if e.get("sd") is not None:
        return ("normal", float(e.get("mu")), float(e.get("sd")))
    if e.get("step") is not None:
        return ("drift", float(e.get("step")))
    if e.get("rad") is not None:
        return "rademacher"
    raise ValueError("the walk's token does not carry its increment parameters")


def _fixed_offspring(model: BranchingModel) -> int:
    # wave engines and closed-form tails need a deterministic brood size
    if model.count.pmf is not None:
        pmf = model.count.pmf(1 if model.space.kind == "integer" else 0.0,
                              model.env_alphabet[0])
        live = [k for k, p in pmf.items() if p > 0]
        if len(live) == 1:
            return int(live[0])
    raise ValueError("this engine needs a deterministic brood size")


# ------------------------------------------------------------ closed tails

def _normal_tail(t: float) -> float:
    return 0.5 * math.erfc(t / math.sqrt(2.0))


def _rademacher_tail(k: int, t: float) -> float:
    """P(sum of k independent signs >= t)."""
    need = math.ceil((k + t) / 2.0)
    if need <= 0:
        return 1.0
    if need > k:
        return 0.0
    return sum(math.comb(k, j) for j in range(need, k + 1)) / 2.0 ** k


def _child_tail(model: BranchingModel, x, b: float) -> float:
    """P(one child of a parent at x lands in [b, inf)), single step."""
    if model.name == "kimmel":
        lam = _kimmel_rate_of(model)
        need = max(int(math.ceil(b)), 0)
        if need == 0:
            return 1.0
        mean = 0.5 * lam * float(x)
        term = math.exp(-mean)
        acc = 0.0
        for k in range(need):
            acc += term
            term *= mean / (k + 1)
        return max(1.0 - acc, 0.0)
    if model.name == "brw":
        inc = _brw_increment(model)
        gap = b - float(x)
        if inc == "rademacher":
            if gap <= -1.0:
                return 1.0
            return 0.5 if gap <= 1.0 else 0.0
        if inc[0] == "normal":
            return _normal_tail((gap - inc[1]) / inc[2])
        return 1.0 if inc[1] >= gap - 1e-12 else 0.0
    raise ValueError(f"no closed single-step tail for model {model.name!r}")


# ---------------------------------------------------------------- TubeSpec

@dataclass
class TubeSpec:
    """Checkpoint generations k_0 < k_1 < ... with one trait set each.

    `thresholds` gives half-lines [b_i, inf), the monotone-model case;
    `atom_sets` gives explicit trait collections on finite spaces. Exactly
    one of the two is supplied, aligned with `checkpoints`. For families
    indexed by the horizon, `family` maps n to the TubeSpec of that horizon
    and `phi`/`psi` report the split point and tail length of the curve.
    """

    checkpoints: Sequence[int]
    thresholds: Optional[Sequence[float]] = None
    atom_sets: Optional[Sequence] = None
    phi: Optional[Callable] = None
    psi: Optional[Callable] = None
    family: Optional[Callable] = None

    def __post_init__(self):
        self.checkpoints = tuple(int(k) for k in self.checkpoints)
        if not self.checkpoints:
            raise ValueError("a tube needs at least one checkpoint")
        if self.checkpoints[0] < 0:
            raise ValueError("checkpoints must be nonnegative generations")
        if any(b <= a for a, b in zip(self.checkpoints, self.checkpoints[1:])):
            raise ValueError("checkpoints must be strictly increasing")
        if (self.thresholds is None) == (self.atom_sets is None):
            raise ValueError("give thresholds or atom_sets, exactly one")
        if self.thresholds is not None:
            self.thresholds = tuple(float(b) for b in self.thresholds)
            if len(self.thresholds) != len(self.checkpoints):
                raise ValueError("one threshold per checkpoint")
        else:
            self.atom_sets = tuple(frozenset(s) for s in self.atom_sets)
            if len(self.atom_sets) != len(self.checkpoints):
                raise ValueError("one trait set per checkpoint")
            if any(not s for s in self.atom_sets):
                raise ValueError("checkpoint trait sets must be nonempty")

    @property
    def horizon(self) -> int:
        return self.checkpoints[-1]

    def unit_spaced(self) -> bool:
        ck = self.checkpoints
        return all(b - a == 1 for a, b in zip(ck, ck[1:]))

    def trait_set(self, slot: int):
        if self.thresholds is not None:
            return self.thresholds[slot]
        return self.atom_sets[slot]

    def member(self, slot: int, x) -> bool:
        if self.thresholds is not None:
            return x >= self.thresholds[slot]
        return x in self.atom_sets[slot]

    @staticmethod
    def line(n: int, threshold: float = 1.0) -> "TubeSpec":
        """Unit-spaced constant-threshold tube over generations 0..n."""
        return TubeSpec(tuple(range(n + 1)),
                        thresholds=(float(threshold),) * (n + 1))


# -------------------------------------------------------------- TubeMeasure

@dataclass
class TubeMeasure:
    """Law of a checkpoint count, stored as survival probabilities.

    survival[l] is the mass of [l, inf); beyond the end of the vector the
    mass is zero up to TAIL_TOL, which the constructor enforces. mu_bar is
    the tail sum over l >= 1 (equivalently the mean) and mu_hat the variance
    divided by mu_bar squared.
    """

    survival: np.ndarray
    exact: bool = True

    def __post_init__(self):
        s = np.asarray(self.survival, dtype=float)
        if s.ndim != 1 or len(s) == 0:
            raise ValueError("survival must be a nonempty vector")
        if abs(s[0] - 1.0) > 1e-12:
            raise ValueError("survival starts at 1: every count is >= 0")
        if np.any(np.diff(s) > 1e-12):
            raise ValueError("survival probabilities must be nonincreasing")
        if s[-1] > TAIL_TOL:
            raise ValueError("support truncated above the tail tolerance")
        self.survival = s

    @property
    def pmf(self) -> np.ndarray:
        p = -np.diff(np.append(self.survival, 0.0))
        return np.clip(p, 0.0, None)

    @property
    def mu_bar(self) -> float:
        return float(self.survival[1:].sum())

    @property
    def mu_hat(self) -> float:
        mb = self.mu_bar
        if mb == 0.0:
            return math.nan
        l = np.arange(len(self.survival))
        second = float((l * l * self.pmf).sum())
        return second / (mb * mb) - 1.0

    def tail_identity_gap(self) -> float:
        """|tail-sum mean - pmf mean|; zero in exact arithmetic."""
        l = np.arange(len(self.survival))
        return abs(self.mu_bar - float((l * self.pmf).sum()))


def _survival_from_pmf(pmf: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(pmf)
    return np.clip(np.concatenate([[1.0], 1.0 - cdf]), 0.0, 1.0)


def _binomial_survival(n: int, p: float) -> np.ndarray:
    pmf = np.array([math.comb(n, k) * p ** k * (1 - p) ** (n - k)
                    for k in range(n + 1)])
    return _survival_from_pmf(pmf)


def _min_pad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    size = max(len(a), len(b))
    pa = np.zeros(size)
    pa[:len(a)] = a
    pb = np.zeros(size)
    pb[:len(b)] = b
    return np.minimum(pa, pb)


def _empirical_survival(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    top = int(counts.max(initial=0))
    s = np.array([float((counts >= l).mean()) for l in range(top + 2)])
    s[0] = 1.0
    return s


def _finite_tube_survival(fm: FiniteModel, env: EnvironmentSequence, i: int,
                          steps: int, a_idx, b_idx, support: int) -> np.ndarray:
    """Exact survival of the count in B after `steps` generations, minimized
    over the starting atoms in a_idx, by generating-polynomial recursion.

    Coefficients below the working support are exact; whatever the recursion
    pushes past it is counted as mass at the top, so survival values are
    exact as long as the final entry stays under TAIL_TOL. The support
    doubles until that holds or the budget runs out.
    """
    d = fm.space.size
    in_b = np.zeros(d, dtype=bool)
    in_b[list(b_idx)] = True
    while support <= SUPPORT_LIMIT:
        polys = [np.zeros(support + 1) for _ in range(d)]
        for xi in range(d):
            polys[xi][1 if in_b[xi] else 0] = 1.0
        for j in range(steps - 1, -1, -1):
            tok = env.token_at(i + j)
            nxt = []
            for xi, x in enumerate(fm.space.atoms):
                acc = np.zeros(support + 1)
                for prob, counts in fm.brood_patterns(x, tok):
                    poly = np.array([1.0])
                    for yi in range(d):
                        for _ in range(int(counts[yi])):
                            poly = np.convolve(poly, polys[yi])[:support + 1]
                    acc[:len(poly)] += prob * poly
                nxt.append(acc)
            polys = nxt
        surv = None
        truncated = False
        for xi in a_idx:
            s = _survival_from_pmf(polys[xi])[:support + 2]
            if s[-1] > TAIL_TOL:
                truncated = True
                break
            surv = s if surv is None else _min_pad(surv, s)
        if not truncated:
            surv[0] = 1.0
            return surv
        support *= 2
    raise EnumerationBudgetExceeded(
        f"tube count support exceeds {SUPPORT_LIMIT} before the tail "
        f"drops under {TAIL_TOL}; use replicates instead")


def _subtree_count(model, env_shifted, x, steps, pred, bval, rng, cap) -> int:
    if model.name == "kimmel" and bval is not None:
        lam = _kimmel_rate_of(model)
        _, final = kimmel_wave(lam, int(x), steps, rng, cap)
        return int((final >= bval).sum())
    tree = simulate(model, env_shifted, x, steps,
                    seed=int(rng.integers(1 << 62)), cap=cap)
    traits = tree.traits_at(steps)
    if len(traits) == 0:
        return 0
    return int(np.count_nonzero(pred(traits)))


def _mc_min_survival(model, env, i, steps, starts, pred, bval, replicates,
                     seed, cap) -> np.ndarray:
    shifted = env.shift(i)
    surv = None
    for s_i, x in enumerate(starts):
        counts = np.empty(replicates, dtype=np.int64)
        for r in range(replicates):
            rng = replicate_generator(seed, r, _TUBE_TAG, s_i)
            counts[r] = _subtree_count(model, shifted, x, steps, pred, bval,
                                       rng, cap)
        emp = _empirical_survival(counts)
        surv = emp if surv is None else _min_pad(surv, emp)
    return surv


def tube_measure(model: BranchingModel, env: EnvironmentSequence, i: int,
                 n: int, A, B, replicates: Optional[int] = None, seed: int = 0,
                 support: int = 256, cap: int = DEFAULT_CAP) -> TubeMeasure:
    """Count law of the generation-n descendants in B, under the least
    favourable start in A at generation i.

    The survival function is the pointwise infimum over x in A of
    P(Z_{n-i}(B) >= l) with the environment read from position i onward.
    With replicates=None the law is computed exactly: on finite trait spaces
    for any stretch, elsewhere for single steps (the count of children
    clearing a half-line is binomial in the one-child tail at the lowest
    start, which monotonicity makes the infimum). A positive replicate count
    switches to Monte Carlo estimation instead.
    """
    if not 0 <= i <= n:
        raise ValueError("need 0 <= i <= n")
    steps = n - i
    akind, aval = _as_traitset(A)
    if akind == "atoms" and not aval:
        raise ValueError("A must be nonempty")

    if isinstance(model, FiniteModel):
        a_idx = _atom_indices(model, A)
        b_idx = _atom_indices(model, B)
        if not a_idx:
            raise ValueError("A contains no atom of the trait space")
        if replicates is None:
            surv = _finite_tube_survival(model, env, i, steps, a_idx, b_idx,
                                         support)
            return TubeMeasure(surv, exact=True)
        starts = [model.space.atoms[j] for j in a_idx]
        values = np.array([model.space.atoms[j] for j in b_idx])
        surv = _mc_min_survival(model, env, i, steps, starts,
                                lambda t: np.isin(t, values), None,
                                replicates, seed, cap)
        return TubeMeasure(surv, exact=False)

    bkind, bval = _as_traitset(B)
    if akind != "ge" or bkind != "ge":
        raise ValueError("continuous trait spaces take half-line sets only")
    if not model.monotone_flag:
        raise ValueError(
            "the infimum over a half-line needs a monotone model; "
            "pass a finite A instead")
    if steps == 1 and replicates is None:
        off = _fixed_offspring(model)
        p = _child_tail(model, aval, bval)
        return TubeMeasure(_binomial_survival(off, p), exact=True)
    if replicates is None:
        raise ValueError(
            "multi-step tubes on this trait space need replicates")
    surv = _mc_min_survival(model, env, i, steps, [aval],
                            lambda t: t >= bval, bval, replicates, seed, cap)
    return TubeMeasure(surv, exact=False)


# ----------------------------------------------------------------- coupling

@dataclass
class CoupledTrajectories:
    """One replicate of the tube coupling, sampled on shared randomness."""

    replicate: int
    checkpoints: tuple
    population: np.ndarray   # members of B_i at checkpoint i, whole process
    selected: np.ndarray     # the intermediate tube layer, see bpve_couple
    bpve: np.ndarray         # the coupled lower branching process

    def dominance_holds(self) -> bool:
        return bool(np.all(self.population >= self.selected)
                    and np.all(self.selected >= self.bpve)
                    and np.all(self.bpve >= 0))


@dataclass
class CouplingReport:
    tube: TubeSpec
    runs: List[CoupledTrajectories]
    mu_bars: np.ndarray
    warnings: List[str] = field(default_factory=list)

    @property
    def dominance_fraction(self) -> float:
        return float(np.mean([run.dominance_holds() for run in self.runs]))

    def all_dominant(self) -> bool:
        return all(run.dominance_holds() for run in self.runs)


@dataclass
class _StepLaw:
    mu: TubeMeasure
    mu_cdf: np.ndarray
    atom_cdfs: dict       # atom index -> cdf of the one-step count in B
    b_values: np.ndarray  # trait values of the target set


def _count_in_b_pmf(fm: FiniteModel, x, tok, b_mask: np.ndarray) -> np.ndarray:
    probs: dict = {}
    for prob, counts in fm.brood_patterns(x, tok):
        c = int(counts[b_mask].sum())
        probs[c] = probs.get(c, 0.0) + prob
    pmf = np.zeros(max(probs) + 1)
    for c, p in probs.items():
        pmf[c] = p
    return pmf


def _finite_step_laws(fm: FiniteModel, env: EnvironmentSequence,
                      tube: TubeSpec, ckpts) -> List[_StepLaw]:
    d = fm.space.size
    laws = []
    for g in range(len(ckpts) - 1):
        a_idx = _atom_indices(fm, tube.trait_set(g))
        b_idx = _atom_indices(fm, tube.trait_set(g + 1))
        b_mask = np.zeros(d, dtype=bool)
        b_mask[b_idx] = True
        tok = env.token_at(ckpts[g])
        cdfs = {}
        surv = None
        for xi in a_idx:
            pmf = _count_in_b_pmf(fm, fm.space.atoms[xi], tok, b_mask)
            cdfs[xi] = np.cumsum(pmf)
            s = _survival_from_pmf(pmf)
            surv = s if surv is None else _min_pad(surv, s)
        surv[0] = 1.0
        mu = TubeMeasure(surv, exact=True)
        mu_cdf = np.append(1.0 - mu.survival[1:], 1.0)
        laws.append(_StepLaw(mu, mu_cdf, cdfs,
                             np.array([fm.space.atoms[j] for j in b_idx])))
    return laws


def _finite_coupled_run(fm: FiniteModel, env: EnvironmentSequence,
                        ckpts, x0, seed: int, r: int, laws,
                        cap: int) -> CoupledTrajectories:
    urng = replicate_generator(seed, r, _COUPLE_TAG)
    tree_seed = int(urng.integers(1 << 62))
    n = ckpts[-1]
    tree = simulate(fm, env, x0, n, seed=tree_seed, cap=cap)
    m = len(ckpts)
    pop = np.zeros(m, dtype=np.int64)
    sel = np.zeros(m, dtype=np.int64)
    low = np.zeros(m, dtype=np.int64)
    pop[0] = sel[0] = low[0] = 1
    sel_ids = np.array([0], dtype=np.int64)
    cpl_ids = np.array([0], dtype=np.int64)
    for g in range(n):
        law = laws[g]
        traits = tree.traits_at(g + 1)
        parent = tree.generations[g + 1].parent
        in_b = np.isin(traits, law.b_values)
        pop[g + 1] = int(in_b.sum())
        child_sel = in_b & np.isin(parent, sel_ids)
        sel[g + 1] = int(child_sel.sum())
        if len(cpl_ids):
            child_cpl = in_b & np.isin(parent, cpl_ids)
            kid_idx = np.flatnonzero(child_cpl)
            kid_par = parent[kid_idx]
            slot = np.searchsorted(cpl_ids, kid_par)
            c = np.bincount(slot, minlength=len(cpl_ids))
            ptraits = tree.traits_at(g)[cpl_ids]
            lo = np.empty(len(cpl_ids))
            hi = np.empty(len(cpl_ids))
            for j in range(len(cpl_ids)):
                cdf = law.atom_cdfs[fm.space.index(int(ptraits[j]))]
                cj = int(c[j])
                lo[j] = cdf[cj - 1] if cj > 0 else 0.0
                hi[j] = cdf[cj]
            u = lo + urng.random(len(cpl_ids)) * (hi - lo)
            xi = np.searchsorted(law.mu_cdf, u, side="left")
            low[g + 1] = int(xi.sum())
            # keep, per coupled parent, its first xi children in the tube
            order = np.argsort(kid_par, kind="stable")
            grouped = kid_idx[order]
            starts = np.cumsum(c) - c
            within = np.arange(len(grouped)) - np.repeat(starts, c)
            cpl_ids = np.sort(grouped[within < np.repeat(xi, c)])
        sel_ids = np.flatnonzero(child_sel)
    return CoupledTrajectories(r, tuple(ckpts), pop, sel, low)


def bpve_couple(model: BranchingModel, env: EnvironmentSequence,
                tube: TubeSpec, n: int, seed: int, replicates=1,
                x0=None, cap: int = DEFAULT_CAP) -> CouplingReport:
    """Couple the population with a lower branching process inside the tube.

    Walks unit-spaced checkpoints from 0 to n (n must be a checkpoint). At
    every step each coupled parent's count of children in the next trait
    set is paired, through one shared uniform, with an inverse-CDF draw from
    the step's tube measure; the draw never exceeds the true count, so

        population in B_i  >=  selected  >=  coupled count

    holds pathwise in every replicate, and the coupled counts form a
    branching process in varying environment with the tube measures as
    offspring laws. On finite spaces `selected` is the subpopulation whose
    whole lineage stayed in the tube; the cell-division wave engine records
    the tube children of the coupled parents instead (a subset, so the
    displayed chain still holds). A SupercriticalityUnmet warning is
    attached when a late tube mean is at or below 1; the verdict is then
    uncertified, never false.
    """
    ckpts = [k for k in tube.checkpoints if k <= n]
    if not ckpts or ckpts[-1] != n:
        raise ValueError("n must be one of the tube's checkpoints")
    if ckpts[0] != 0 or ckpts != list(range(n + 1)):
        raise ValueError("the coupling walks unit-spaced checkpoints from 0")
    reps = range(replicates) if isinstance(replicates, int) else list(replicates)

    if model.name == "kimmel" and tube.thresholds is not None:
        if len(set(tube.thresholds[:n + 1])) != 1:
            raise ValueError("the wave coupling needs one constant threshold")
        b = tube.thresholds[0]
        if b < 1 or b != int(b):
            raise ValueError("cell-division tube thresholds are integers >= 1")
        lam = _kimmel_rate_of(model)
        if x0 is None:
            x0 = int(b)
        if not tube.member(0, x0):
            raise ValueError("the start trait must lie in the first trait set")
        if x0 != int(b):
            raise ValueError("the wave coupling starts at the tube threshold")
        runs = []
        mu_bars = np.array([])
        for r in reps:
            rng = replicate_generator(seed, r, _COUPLE_TAG)
            run = kimmel_coupled_wave(lam, n, rng, b=int(b), cap=cap)
            runs.append(CoupledTrajectories(r, tuple(ckpts), run.tube_count,
                                            run.selected, run.bpve))
            mu_bars = np.full(n, run.mu_bar)
    elif isinstance(model, FiniteModel):
        laws = _finite_step_laws(model, env, tube, ckpts)
        mu_bars = np.array([law.mu.mu_bar for law in laws])
        if x0 is None:
            values = sorted(model.space.atoms[j]
                            for j in _atom_indices(model, tube.trait_set(0)))
            x0 = values[0]
        if not tube.member(0, x0):
            raise ValueError("the start trait must lie in the first trait set")
        runs = [_finite_coupled_run(model, env, ckpts, x0, seed, r, laws, cap)
                for r in reps]
    else:
        raise ValueError(f"no coupling engine for model {model.name!r}")

    notes = []
    late = mu_bars[len(mu_bars) // 2:]
    if len(late) and np.any(late <= 1.0 + 1e-12):
        msg = ("tube means at or below 1 on late checkpoints; "
               "the lower bound certifies nothing there")
        warnings.warn(msg, SupercriticalityUnmet)
        notes.append(msg)
    return CouplingReport(tube, runs, mu_bars, notes)


# ----------------------------------------------------------- local density

def _check_ladder(ladder) -> list:
    lad = [int(k) for k in ladder]
    if not lad or lad[0] < 1 or any(b <= a for a, b in zip(lad, lad[1:])):
        raise ValueError("the ladder must be strictly increasing, all >= 1")
    return lad


def _schedule(a_n):
    """Threshold schedule: ("const", b), ("linear", a), or callable k -> b."""
    if callable(a_n):
        return "callable", None, a_n
    kind, val = a_n
    val = float(val)
    if kind == "const":
        return "const", val, lambda k: val
    if kind == "linear":
        return "linear", val, lambda k: val * k
    raise ValueError(f"unknown threshold schedule {a_n!r}")


def _markov_rate(model, env, x0, k: int, threshold: float,
                 ms: Optional[MeanSemigroup]) -> float:
    """(1/k) log m_k(x0, e, [threshold, inf)), exact for every engine here."""
    if isinstance(model, FiniteModel):
        row = ms.log_matrix(0, k)[model.space.index(x0)]
        mask = [i for i, a in enumerate(model.space.atoms) if a >= threshold]
        if not mask:
            return -math.inf
        return float(logsumexp(row[mask])) / k
    if model.name == "kimmel":
        if threshold != 1:
            raise ValueError("exact cell tails are wired for threshold 1 only")
        lam = _kimmel_rate_of(model)
        tail = float(kimmel_tail_curve(lam, int(x0), k)[k])
        if tail <= 0.0:
            return -math.inf
        return math.log(2.0) + math.log(tail) / k
    if model.name == "brw":
        off = _fixed_offspring(model)
        inc = _brw_increment(model)
        if inc == "rademacher":
            p = _rademacher_tail(k, threshold - x0)
        elif inc[0] == "normal":
            p = _normal_tail((threshold - x0 - k * inc[1])
                             / (inc[2] * math.sqrt(k)))
        else:
            p = 1.0 if x0 + k * inc[1] >= threshold - 1e-12 else 0.0
        if p <= 0.0:
            return -math.inf
        return math.log(off) + math.log(p) / k
    raise ValueError(f"no exact mean tail for model {model.name!r}")


def _total_rate(model, env, x0, k: int, ms: Optional[MeanSemigroup]) -> float:
    if isinstance(model, FiniteModel):
        return float(ms.log_totals(0, k)[model.space.index(x0)]) / k
    return math.log(_fixed_offspring(model))


@dataclass
class DensityRecord:
    replicate: int
    n: int
    count: float
    log_count_over_n: float   # nan when the count is zero
    markov_bound: float       # (1/n) log m_n(x0, e, [a_n, inf))
    survived: bool


@dataclass
class LocalDensityReport:
    ladder: tuple
    records: List[DensityRecord]
    slope: float
    slope_se: float
    slopes_used: int
    alpha: Optional[float]        # exact auxiliary tail rate at the horizon
    total_rate: Optional[float]   # (1/n) log m_n(x0, e, X) at the horizon
    certificate: Optional[dict] = None
    notes: List[str] = field(default_factory=list)

    def markov_violation_fraction(self, slack: float = MARKOV_SLACK) -> float:
        """Fraction of records with count above exp(slack) times the mean."""
        bad = sum(rec.count > math.exp(rec.n * rec.markov_bound + slack)
                  for rec in self.records)
        return bad / len(self.records)

    def decomposition_gap(self) -> float:
        """Median of (1/n) log Z_n([a_n,inf)) minus (total rate - alpha) at
        the horizon, over surviving replicates."""
        horizon = self.ladder[-1]
        vals = [rec.log_count_over_n for rec in self.records
                if rec.n == horizon and rec.survived]
        if not vals or self.alpha is None:
            return math.nan
        return float(np.median(vals) - (self.total_rate - self.alpha))


def _ladder_counts(model, env, x0, kind, param, thresh, ladder, rng, cap):
    """Per-ladder (count, log count) for one replicate."""
    horizon = ladder[-1]
    if isinstance(model, FiniteModel):
        cp = simulate_counts(model, env, x0, horizon, rng)
        out = {}
        for k in ladder:
            mask = np.array([a >= thresh(k) for a in model.space.atoms])
            mass = float(cp.counts[k][mask].sum())
            if mass > 0.0:
                logc = math.log(mass) + float(cp.log_scale[k])
                out[k] = (math.exp(min(logc, 700.0)), logc)
            else:
                out[k] = (0.0, -math.inf)
        return out
    if model.name == "kimmel":
        if kind != "const" or param != 1.0:
            raise ValueError(
                "cell-division densities are wired for the constant "
                "threshold 1 (infected cells)")
        lam = _kimmel_rate_of(model)
        counts, _ = kimmel_wave(lam, int(x0), horizon, rng, cap)
        return {k: (float(counts[k]),
                    math.log(counts[k]) if counts[k] > 0 else -math.inf)
                for k in ladder}
    if model.name == "brw":
        if kind != "linear":
            raise ValueError("walk densities need a linear schedule a*k")
        raw = brw_local_counts(ladder, param, rng, _fixed_offspring(model),
                               _brw_increment(model), float(x0), cap)
        return {k: (float(v), math.log(v) if v > 0 else -math.inf)
                for k, v in raw.items()}
    raise ValueError(f"no local-density engine for model {model.name!r}")


def density_records(model, env, x0, a_n, ladder, indices, seed: int,
                    cap: int = DEFAULT_CAP) -> List[DensityRecord]:
    """Per-replicate records; deterministic in (seed, replicate index)."""
    kind, param, thresh = _schedule(a_n)
    ladder = _check_ladder(ladder)
    ms = MeanSemigroup(model, env) if isinstance(model, FiniteModel) else None
    rates = {k: _markov_rate(model, env, x0, k, thresh(k), ms) for k in ladder}
    out = []
    for r in indices:
        rng = replicate_generator(seed, r, _DENSITY_TAG)
        counts = _ladder_counts(model, env, x0, kind, param, thresh, ladder,
                                rng, cap)
        for k in ladder:
            cnt, logc = counts[k]
            lcn = logc / k if cnt > 0 else math.nan
            out.append(DensityRecord(r, k, cnt, lcn, rates[k], cnt > 0))
    return out


def _slope_records(records, ladder) -> dict:
    """Per-replicate least-squares slope of log count over the back half of
    the ladder; replicates extinct anywhere on that stretch are skipped."""
    cut = (ladder[0] + ladder[-1]) / 2.0
    tail = [k for k in ladder if k >= cut]
    by_rep: dict = {}
    for rec in records:
        by_rep.setdefault(rec.replicate, {})[rec.n] = rec
    slopes = {}
    for r in sorted(by_rep):
        recs = by_rep[r]
        if any(k not in recs or not recs[k].survived for k in tail):
            continue
        xs = np.array(tail, dtype=float)
        ys = np.array([recs[k].log_count_over_n * k for k in tail])
        slopes[r] = float(np.polyfit(xs, ys, 1)[0])
    return slopes


def summarize_density(model, env, x0, a_n, records, ladder, seed: int,
                      tube: Optional[TubeSpec] = None) -> LocalDensityReport:
    """Aggregate density records into the slope report. Splitting records
    across workers and summarizing once is byte-equivalent to a serial run."""
    ladder = _check_ladder(ladder)
    slopes = _slope_records(records, ladder)
    if not slopes:
        raise ExtinctEverywhere(
            "no replicate survived the back half of the ladder")
    vals = np.array([slopes[r] for r in sorted(slopes)])
    slope = float(np.median(vals))
    rng = replicate_generator(seed, 0, _DENSITY_TAG, _BOOT_TAG)
    boots = [float(np.median(vals[rng.integers(0, len(vals), len(vals))]))
             for _ in range(200)]
    se = float(np.std(boots))

    _, _, thresh = _schedule(a_n)
    horizon = ladder[-1]
    ms = MeanSemigroup(model, env) if isinstance(model, FiniteModel) else None
    total = _total_rate(model, env, x0, horizon, ms)
    markov = _markov_rate(model, env, x0, horizon, thresh(horizon), ms)
    alpha = total - markov if math.isfinite(markov) else math.inf

    notes: List[str] = []
    certificate = None
    if tube is not None:
        try:
            certificate = _tube_certificate(model, env, tube)
        except (ValueError, EnumerationBudgetExceeded) as exc:
            notes.append(f"tube certificate unavailable: {exc}")
    return LocalDensityReport(tuple(ladder), records, slope, se, len(vals),
                              alpha, total, certificate, notes)


def _tube_certificate(model, env, tube: TubeSpec) -> dict:
    if not tube.unit_spaced():
        raise ValueError("tube certificates need unit-spaced checkpoints")
    mus = []
    for g in range(len(tube.checkpoints) - 1):
        mu = tube_measure(model, env, tube.checkpoints[g],
                          tube.checkpoints[g] + 1,
                          tube.trait_set(g), tube.trait_set(g + 1))
        mus.append(mu.mu_bar)
    mus = np.array(mus)
    return {"mu_bars": mus, "supercritical_prefix": bool(np.all(mus > 1.0))}


def local_density_experiment(model, env, x0, a_n,
                             tube: Optional[TubeSpec] = None,
                             ladder=(10, 20, 30, 40), replicates=200,
                             seed: int = 0,
                             cap: int = DEFAULT_CAP) -> LocalDensityReport:
    """Growth of the population above a threshold schedule.

    Simulates `replicates` runs, records (1/n) log Z_n([a_n, inf)) along the
    ladder together with the exact mean bound (1/n) log m_n(x0, e, [a_n,
    inf)), and fits per-replicate least-squares slopes over the back half of
    the ladder; the report carries their median with a bootstrap standard
    error, plus the exact total growth rate and auxiliary tail rate alpha at
    the horizon. A tube, when given, is certified on the side (one-step
    means along its checkpoints).
    """
    indices = (list(range(replicates)) if isinstance(replicates, int)
               else [int(i) for i in replicates])
    records = density_records(model, env, x0, a_n, ladder, indices, seed, cap)
    return summarize_density(model, env, x0, a_n, records, ladder, seed, tube)


# ------------------------------------------------------- extremal particles

@dataclass
class ExtremeRecord:
    replicate: int
    n: int
    max_trait: float
    max_over_n: float


@dataclass
class ExtremesReport:
    ladder: tuple
    records: List[ExtremeRecord]
    predicted: Optional[float]
    beam: Optional[int]

    @property
    def median_speed(self) -> float:
        horizon = self.ladder[-1]
        vals = [rec.max_over_n for rec in self.records
                if rec.n == horizon and not math.isnan(rec.max_over_n)]
        if not vals:
            raise ExtinctEverywhere("no replicate reached the horizon")
        return float(np.median(vals))

    def exceed_fraction(self, margin: float = 0.1) -> float:
        """Fraction of horizon replicates beating the predicted speed by more
        than the margin."""
        if self.predicted is None:
            raise ValueError("no predicted speed for this model")
        horizon = self.ladder[-1]
        vals = [rec.max_over_n for rec in self.records if rec.n == horizon]
        return float(np.mean([v > self.predicted + margin for v in vals]))


def predicted_speed(model: BranchingModel) -> Optional[float]:
    """Crossing point where the mean of particles beyond speed a stops
    growing: increment rate function equal to log brood size."""
    if model.name != "brw":
        return None
    off = _fixed_offspring(model)
    lm = math.log(off)
    inc = _brw_increment(model)
    if inc == "rademacher":
        def rate(a):
            return (0.5 * (1 + a) * math.log1p(a)
                    + 0.5 * (1 - a) * math.log1p(-a))
        if rate(1.0 - 1e-12) < lm:
            return 1.0
        from scipy.optimize import brentq
        return float(brentq(lambda a: rate(a) - lm, 0.0, 1.0 - 1e-12))
    if inc[0] == "normal":
        return inc[1] + inc[2] * math.sqrt(2.0 * lm)
    return inc[1]


def extreme_records(model, env, x0, ladder, indices, seed: int,
                    beam: Optional[int] = 30000,
                    cap: int = DEFAULT_CAP) -> List[ExtremeRecord]:
    ladder = _check_ladder(ladder)
    horizon = ladder[-1]
    out = []
    for r in indices:
        rng = replicate_generator(seed, r, _EXTREME_TAG)
        if model.name == "brw":
            maxima = brw_extremes(horizon, rng, _fixed_offspring(model),
                                  _brw_increment(model), beam, float(x0), cap)
            vals = {k: float(maxima[k]) for k in ladder}
        elif isinstance(model, FiniteModel):
            cp = simulate_counts(model, env, x0, horizon, rng)
            vals = {}
            for k in ladder:
                occ = [a for i, a in enumerate(model.space.atoms)
                       if cp.counts[k][i] > 0]
                vals[k] = float(max(occ)) if occ else math.nan
        else:
            raise ValueError(f"no extremes engine for model {model.name!r}")
        for k in ladder:
            out.append(ExtremeRecord(r, k, vals[k], vals[k] / k))
    return out


def extremal_particle_experiment(model, env, x0, ladder=(15, 30, 60),
                                 replicates=500, seed: int = 0,
                                 beam: Optional[int] = 30000,
                                 cap: int = DEFAULT_CAP) -> ExtremesReport:
    """Front speed of the maximal trait.

    Records max trait / n along the ladder and compares the horizon median
    with the calibrated speed (rate function crossing log brood size). The
    walk engine runs under a beam that can only discard particles, so every
    recorded maximum is a lower bound for the true front.
    """
    indices = (list(range(replicates)) if isinstance(replicates, int)
               else [int(i) for i in replicates])
    records = extreme_records(model, env, x0, ladder, indices, seed, beam, cap)
    return ExtremesReport(tuple(_check_ladder(ladder)), records,
                          predicted_speed(model),
                          beam if model.name == "brw" else None)


# ------------------------------------------------------ growth certification

@dataclass
class GrowthProbeReport:
    block: int
    thresholds: tuple
    prefix_masses: np.ndarray
    prefix_certified: bool        # every observed block mean above 1
    q: Optional[int] = None
    horizon: Optional[int] = None
    average: Optional[float] = None
    target_rate: Optional[float] = None
    epsilon: float = 0.05
    certified: Optional[bool] = None
    aux_average: Optional[float] = None
    aux_rate: Optional[float] = None
    aux_certified: Optional[bool] = None
    notes: List[str] = field(default_factory=list)


def _block_mass(model, env, shift: int, steps: int, start, threshold,
                ms: Optional[MeanSemigroup]) -> float:
    """m_steps(start, T^shift e, [threshold, inf)), exact per engine."""
    if isinstance(model, FiniteModel):
        row = ms.log_matrix(shift, shift + steps)[model.space.index(start)]
        mask = [i for i, a in enumerate(model.space.atoms) if a >= threshold]
        if not mask:
            return 0.0
        return float(np.exp(logsumexp(row[mask])))
    if model.name == "kimmel":
        if threshold != 1:
            raise ValueError("exact cell tails are wired for threshold 1 only")
        lam = _kimmel_rate_of(model)
        tail = float(kimmel_tail_curve(lam, int(start), steps)[steps])
        return 2.0 ** steps * tail
    if model.name == "brw":
        off = _fixed_offspring(model)
        inc = _brw_increment(model)
        if inc == "rademacher":
            p = _rademacher_tail(steps, threshold - start)
        elif inc[0] == "normal":
            p = _normal_tail((threshold - start - steps * inc[1])
                             / (inc[2] * math.sqrt(steps)))
        else:
            p = 1.0 if start + steps * inc[1] >= threshold - 1e-12 else 0.0
        return off ** steps * p
    raise ValueError(f"no exact block mass for model {model.name!r}")


def _block_total(model, env, shift: int, steps: int, start,
                 ms: Optional[MeanSemigroup]) -> float:
    if isinstance(model, FiniteModel):
        return float(np.exp(ms.log_totals(shift, shift + steps)
                            [model.space.index(start)]))
    return float(_fixed_offspring(model)) ** steps


def assumption_mg_probe(model, env, curve, horizon: Optional[int] = None,
                        target_rate: Optional[float] = None,
                        epsilon: float = 0.05,
                        aux_rate: Optional[float] = None,
                        x0=None) -> GrowthProbeReport:
    """Mean-growth certification along a trait curve, on finite horizons.

    `curve` is (p, [b_0, ..., b_I]), optionally paired as
    ((p, [b_0, ..., b_I]), (q, line)) where `line` is a constant threshold
    or a callable j -> b_j for the horizon blocks. The probe evaluates the
    block means m_p(b_i, T^{ip} e, [b_{i+1}, inf)) on the supplied prefix
    (certified when every observed mean exceeds 1; the limit inferior is not
    observable, so the boundary verdict is uncertified, never false) and,
    given a horizon, the averaged log block masses over blocks of length q
    starting where the prefix ends, against target_rate - epsilon. The same
    average over the auxiliary-kernel masses, block mass divided by block
    total, is compared against -aux_rate - epsilon exactly as displayed;
    structural sign oddities are flagged in the notes rather than resolved.
    """
    if isinstance(curve[0], (int, np.integer)):
        prefix, fam = curve, None
    else:
        prefix, fam = curve
    p = int(prefix[0])
    bs = [float(b) for b in prefix[1]]
    if p < 1 or len(bs) < 2:
        raise ValueError("the prefix needs p >= 1 and at least two levels")
    ms = MeanSemigroup(model, env) if isinstance(model, FiniteModel) else None
    masses = np.array([_block_mass(model, env, i * p, p, bs[i], bs[i + 1], ms)
                       for i in range(len(bs) - 1)])
    report = GrowthProbeReport(p, tuple(bs), masses,
                               bool(np.all(masses > 1.0)), epsilon=epsilon)
    if x0 is not None and x0 < bs[0]:
        report.notes.append("the start trait sits below b_0")
    if fam is None or horizon is None:
        return report

    q = int(fam[0])
    line = fam[1]
    bfn = line if callable(line) else (lambda j, v=float(line): v)
    consumed = (len(bs) - 1) * p
    blocks = (horizon - consumed) // q
    if blocks < 1:
        report.notes.append("the horizon leaves no room for the q-blocks")
        return report
    logs = []
    aux_logs = []
    for j in range(blocks):
        shift = consumed + j * q
        mass = _block_mass(model, env, shift, q, bfn(j), bfn(j + 1), ms)
        total = _block_total(model, env, shift, q, bfn(j), ms)
        logs.append(math.log(mass) if mass > 0 else -math.inf)
        aux = mass / total if total > 0 else 0.0
        aux_logs.append(math.log(aux) if aux > 0 else -math.inf)
    report.q = q
    report.horizon = horizon
    report.average = float(sum(logs) / horizon)
    report.aux_average = float(sum(aux_logs) / horizon)
    report.target_rate = target_rate
    if target_rate is not None:
        report.certified = bool(report.average >= target_rate - epsilon)
    report.aux_rate = aux_rate
    if aux_rate is not None:
        if aux_rate < 0:
            report.notes.append(
                "aux rate below 0 puts the displayed bound above every "
                "achievable log-mass average")
        report.aux_certified = bool(report.aux_average >= -aux_rate - epsilon)
    if report.aux_average > 1e-12:
        report.notes.append(
            "auxiliary average is positive, which no mass fraction allows")
    return report
