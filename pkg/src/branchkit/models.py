"""Branching-model specifications.

A model couples an offspring-count law N(x, e) with an offspring-trait kernel:
an individual of trait x under environment token e produces k ~ N(x, e)
children whose traits follow the kernel given (x, e, k). Finite-trait-space
models additionally expose exact per-atom structure (mean measures, brood
patterns) that the kernel and moment machinery consumes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .environments import EnvironmentToken, constant
from .rng import replicate_generator

PMF_TOL = 1e-12      # offspring pmfs must sum to 1 within this
MEAN_TOL = 1e-10     # pmf mean must match the declared mean within this


@dataclass(frozen=True)
class TraitSpace:
    """Trait state space with a total order.

    kind is one of "finite" (explicit ordered atoms), "integer" (nonnegative
    lattice) or "real". The order is the natural one; finite atoms are ordered
    as listed.
    """

    kind: str
    atoms: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("finite", "integer", "real"):
            raise ValueError(f"unknown trait space kind {self.kind!r}")
        if self.kind == "finite":
            if not self.atoms or len(set(self.atoms)) != len(self.atoms):
                raise ValueError("finite trait space needs >= 1 distinct atom")

    @property
    def size(self) -> int:
        if self.atoms is None:
            raise ValueError(f"{self.kind} trait space has no atom count")
        return len(self.atoms)

    def index(self, x) -> int:
        return self.atoms.index(x)

    def contains(self, x) -> bool:
        if self.kind == "finite":
            return x in self.atoms
        if self.kind == "integer":
            return float(x).is_integer() and x >= 0
        return isinstance(x, (int, float)) and math.isfinite(x)


@dataclass
class OffspringCountLaw:
    """Law of the brood size N(x, e).

    mean must be > 0 everywhere. pmf is required for exact (finite-model)
    work and optional otherwise; second_moment is optional and experiments
    that need it refuse to run without it.
    """

    sampler: Callable  # (x, e, rng) -> int
    mean: Callable     # (x, e) -> float
    pmf: Optional[Callable] = None            # (x, e) -> dict k -> prob
    second_moment: Optional[Callable] = None  # (x, e) -> float

    @staticmethod
    def deterministic(k: int) -> "OffspringCountLaw":
        if k < 1:
            raise ValueError("deterministic brood size must be >= 1 (mean > 0)")
        return OffspringCountLaw(
            sampler=lambda x, e, rng: k,
            mean=lambda x, e: float(k),
            pmf=lambda x, e: {k: 1.0},
            second_moment=lambda x, e: float(k * k),
        )

    @staticmethod
    def poisson(lam: float) -> "OffspringCountLaw":
        if lam <= 0:
            raise ValueError("poisson rate must be > 0")
        return OffspringCountLaw(
            sampler=lambda x, e, rng: int(rng.poisson(lam)),
            mean=lambda x, e: lam,
            pmf=lambda x, e: _poisson_pmf(lam),
            second_moment=lambda x, e: lam + lam * lam,
        )

    @staticmethod
    def geometric(p: float) -> "OffspringCountLaw":
        """Counts on {0,1,...} with P(k) = p (1-p)^k; mean (1-p)/p."""
        if not 0 < p < 1:
            raise ValueError("geometric parameter must lie in (0,1)")
        mean = (1 - p) / p
        if mean <= 0:
            raise ValueError("geometric mean must be > 0")
        m2 = (1 - p) * (2 - p) / (p * p)
        return OffspringCountLaw(
            sampler=lambda x, e, rng: int(rng.geometric(p) - 1),
            mean=lambda x, e: mean,
            pmf=lambda x, e: _geometric_pmf(p),
            second_moment=lambda x, e: m2,
        )

    @staticmethod
    def table(entries: Sequence[tuple]) -> "OffspringCountLaw":
        ks = np.array([k for k, _ in entries], dtype=np.int64)
        ps = np.array([p for _, p in entries], dtype=float)
        if abs(ps.sum() - 1.0) > PMF_TOL or (ps < 0).any():
            raise ValueError("table probabilities must be nonnegative and sum to 1")
        mean = float(ks @ ps)
        if mean <= 0:
            raise ValueError("offspring mean must be > 0")
        m2 = float((ks.astype(float) ** 2) @ ps)
        pmf = {int(k): float(p) for k, p in entries if p > 0}
        return OffspringCountLaw(
            sampler=lambda x, e, rng: int(rng.choice(ks, p=ps)),
            mean=lambda x, e: mean,
            pmf=lambda x, e: pmf,
            second_moment=lambda x, e: m2,
        )


def _poisson_pmf(lam: float, tail: float = 1e-14) -> dict:
    out, k, p = {}, 0, math.exp(-lam)
    cum = 0.0
    while cum < 1.0 - tail:
        if p > 0:
            out[k] = p
        cum += p
        k += 1
        p *= lam / k
    return out


def _geometric_pmf(p: float, tail: float = 1e-14) -> dict:
    out, k, q = {}, 0, p
    cum = 0.0
    while cum < 1.0 - tail:
        out[k] = q
        cum += q
        k += 1
        q *= 1 - p
    return out


@dataclass
class OffspringTraitKernel:
    """Joint law of the k child traits given (parent trait, token, k).

    sampler returns a length-k vector. marginal (finite spaces) returns the
    law of child i as a vector over atoms. joint, when present, enumerates
    the full brood-trait law as {tuple of child traits: prob}; built-ins
    use conditionally independent children but the interface permits any
    exchangeable or non-product joint law.
    """

    sampler: Callable  # (x, e, k, rng) -> sequence of traits
    marginal: Optional[Callable] = None  # (x, e, k, i) -> np.ndarray over atoms
    joint: Optional[Callable] = None     # (x, e, k) -> dict[tuple, float]

    @staticmethod
    def iid_finite(space: TraitSpace, row: Callable) -> "OffspringTraitKernel":
        """Children drawn i.i.d. from row(x, e), a probability vector over atoms."""
        atoms = np.array(space.atoms)

        def sampler(x, e, k, rng):
            p = np.asarray(row(x, e), dtype=float)
            return atoms[rng.choice(len(atoms), size=k, p=p)]

        def marginal(x, e, k, i):
            return np.asarray(row(x, e), dtype=float)

        # no joint: independent children are exactly what the marginal DP
        # assumes, and an explicit product law would enumerate d^k tuples
        return OffspringTraitKernel(sampler, marginal)

    @staticmethod
    def additive(increment_sampler: Callable) -> "OffspringTraitKernel":
        """Each child trait = parent trait + an independent increment."""

        def sampler(x, e, k, rng):
            return x + increment_sampler(e, k, rng)

        return OffspringTraitKernel(sampler)


@dataclass
class BranchingModel:
    """Full model: trait space, environment alphabet, count law, trait kernel."""

    name: str
    space: TraitSpace
    env_alphabet: tuple
    count: OffspringCountLaw
    kernel: OffspringTraitKernel
    monotone_flag: bool = False

    def mean_offspring(self, x, e: EnvironmentToken) -> float:
        if not self.space.contains(x):
            raise ValueError(f"trait {x!r} is outside the model's trait space")
        m = float(self.count.mean(x, e))
        if m <= 0:
            raise ValueError(f"offspring mean must be positive, got {m} at {x!r}")
        return m

    def sample_brood(self, x, e: EnvironmentToken, rng) -> tuple:
        if not self.space.contains(x):
            raise ValueError(f"trait {x!r} is outside the model's trait space")
        k = int(self.count.sampler(x, e, rng))
        if k == 0:
            return 0, ()
        traits = self.kernel.sampler(x, e, k, rng)
        traits = tuple(traits) if not np.isscalar(traits) else (traits,)
        if len(traits) != k:
            raise ValueError("trait kernel returned a vector of the wrong length")
        return k, traits


class FiniteModel(BranchingModel):
    """Finite-trait-space model with exact per-atom structure.

    Beyond the sampling interface it provides, per environment token:
      - m1(e): d x d matrix with m1[x][y] = m(x,e) P(one child lands on y)
        summed over child slots, i.e. the mean per-atom offspring measure;
      - brood_patterns(x, e): the exact law of the brood's trait-count
        vector, as [(prob, counts over atoms)];
      - pair_matrix(x, e): E[# ordered pairs of distinct children (i, j)
        with traits (y, z)], the ingredient of all second-moment recursions.
    """

    def __init__(self, base: BranchingModel, brood_bound: int = 64):
        super().__init__(
            name=base.name,
            space=base.space,
            env_alphabet=base.env_alphabet,
            count=base.count,
            kernel=base.kernel,
            monotone_flag=base.monotone_flag,
        )
        if base.space.kind != "finite":
            raise ValueError("FiniteModel requires a finite trait space")
        if base.count.pmf is None:
            raise ValueError("FiniteModel requires an exact offspring pmf")
        self.brood_bound = brood_bound
        self._patterns: dict = {}
        self._m1: dict = {}
        self._pair: dict = {}
        for e in self.env_alphabet:
            self._wire_token(e)

    def _wire_token(self, e: EnvironmentToken):
        d = self.space.size
        pats_by_x = []
        m1 = np.zeros((d, d))
        pair = np.zeros((d, d, d))
        for xi, x in enumerate(self.space.atoms):
            pmf = self.count.pmf(x, e)
            if abs(sum(pmf.values()) - 1.0) > PMF_TOL:
                raise ValueError(f"offspring pmf at {x!r} does not sum to 1")
            mean_from_pmf = sum(k * p for k, p in pmf.items())
            if abs(mean_from_pmf - self.count.mean(x, e)) > MEAN_TOL:
                raise ValueError(f"offspring pmf mean mismatch at {x!r}")
            pats: dict = {}
            for k, pk in pmf.items():
                if pk <= 0:
                    continue
                if k > self.brood_bound:
                    raise ValueError(
                        f"brood size {k} exceeds enumeration bound {self.brood_bound}"
                    )
                if k == 0:
                    pats[(0,) * d] = pats.get((0,) * d, 0.0) + pk
                    continue
                for counts, q in self._joint_counts(x, e, k).items():
                    pats[counts] = pats.get(counts, 0.0) + pk * q
            plist = [(p, np.array(c, dtype=np.int64)) for c, p in sorted(pats.items())]
            pats_by_x.append(plist)
            for p, c in plist:
                cf = c.astype(float)
                m1[xi] += p * cf
                pair[xi] += p * (np.outer(cf, cf) - np.diag(cf))
        self._patterns[e.id] = pats_by_x
        self._m1[e.id] = m1
        self._pair[e.id] = pair

    def _joint_counts(self, x, e, k) -> dict:
        """Exact law of the brood's trait-count vector for brood size k.

        User-supplied joint laws are aggregated tuple by tuple; otherwise
        children are independent (that is what giving marginals means) and
        the count law follows from a DP over count vectors, which stays
        polynomial in k where the ordered enumeration would be d^k.
        """
        d = self.space.size
        if self.kernel.joint is not None:
            out: dict = {}
            for traits, q in self.kernel.joint(x, e, k).items():
                counts = [0] * d
                for t in traits:
                    counts[self.space.index(t)] += 1
                key = tuple(counts)
                out[key] = out.get(key, 0.0) + q
            return out
        if self.kernel.marginal is None:
            raise ValueError("finite model kernel needs a joint law or marginals")
        out = {(0,) * d: 1.0}
        for i in range(k):
            p = np.asarray(self.kernel.marginal(x, e, k, i), dtype=float)
            nxt: dict = {}
            for counts, q in out.items():
                for j in range(d):
                    if p[j] > 0:
                        key = counts[:j] + (counts[j] + 1,) + counts[j + 1:]
                        nxt[key] = nxt.get(key, 0.0) + q * p[j]
            out = nxt
        return out

    def m1(self, e: EnvironmentToken) -> np.ndarray:
        return self._m1[e.id]

    def brood_patterns(self, x, e: EnvironmentToken):
        return self._patterns[e.id][self.space.index(x)]

    def pair_matrix(self, x, e: EnvironmentToken) -> np.ndarray:
        """E[# ordered pairs i != j with child traits (y, z)], d x d."""
        return self._pair[e.id][self.space.index(x)]

    def pair_matrix_with_diagonal(self, x, e: EnvironmentToken) -> np.ndarray:
        """Same, with i = j included: adds the mean measure on the diagonal."""
        xi = self.space.index(x)
        return self._pair[e.id][xi] + np.diag(self._m1[e.id][xi])

    def mean_offspring(self, x, e: EnvironmentToken) -> float:
        return float(self._m1[e.id][self.space.index(x)].sum())

    def sigma(self, e: EnvironmentToken) -> float:
        """sup over traits of E[N(x, e)^2]; needs second moments."""
        if self.count.second_moment is None:
            raise ValueError("model does not declare offspring second moments")
        return max(float(self.count.second_moment(x, e)) for x in self.space.atoms)


# ---------------------------------------------------------------------------
# built-in models
# ---------------------------------------------------------------------------

def two_type_m2() -> FiniteModel:
    """Two-type test model on {0, 1} under a fixed environment.

    Type 0 always has two children, each independently of type 0 with
    probability 3/4; type 1 has one child, of uniform type. Mean matrix
    [[1.5, 0.5], [0.5, 0.5]].
    """
    e = EnvironmentToken.make("fixed")
    space = TraitSpace("finite", (0, 1))
    rows = {0: np.array([0.75, 0.25]), 1: np.array([0.5, 0.5])}

    def count_sampler(x, e_, rng):
        return 2 if x == 0 else 1

    count = OffspringCountLaw(
        sampler=count_sampler,
        mean=lambda x, e_: 2.0 if x == 0 else 1.0,
        pmf=lambda x, e_: {2: 1.0} if x == 0 else {1: 1.0},
        second_moment=lambda x, e_: 4.0 if x == 0 else 1.0,
    )
    kernel = OffspringTraitKernel.iid_finite(space, lambda x, e_: rows[x])
    base = BranchingModel("two-type-m2", space, (e,), count, kernel, monotone_flag=False)
    return FiniteModel(base)


def kimmel(lam: float) -> BranchingModel:
    """Cell-division model: every cell splits in two; a cell with x parasites
    passes an independent Poisson(lam/2 * x) count to each daughter.

    The per-daughter law follows from thinning the per-parasite Poisson(lam)
    broods uniformly over the two daughters. Reproduction is trait-free
    (always two daughters), so the biased child kernel equals the trait
    kernel itself.
    """
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    e = EnvironmentToken.make("fixed", lam=lam)
    space = TraitSpace("integer")
    count = OffspringCountLaw.deterministic(2)

    def sampler(x, e_, k, rng):
        return rng.poisson(0.5 * lam * x, size=k)

    kernel = OffspringTraitKernel(sampler)
    return BranchingModel("kimmel", space, (e,), count, kernel, monotone_flag=True)


def brw(offspring="binary", increment=("normal", 0.0, 1.0)) -> BranchingModel:
    """Branching random walk: trait-free reproduction, children displaced from
    the parent by i.i.d. increments.

    The environment token records the increment parameters so downstream
    experiments can recover the displacement law (exact tail bounds, wave
    engines) from the model alone."""
    if increment == "rademacher":
        e = EnvironmentToken.make("fixed", rad=1.0)
    elif isinstance(increment, tuple) and increment[0] == "normal":
        e = EnvironmentToken.make("fixed", mu=increment[1], sd=increment[2])
    elif isinstance(increment, tuple) and increment[0] == "drift":
        e = EnvironmentToken.make("fixed", step=increment[1])
    else:
        raise ValueError(f"unknown increment descriptor {increment!r}")
    space = TraitSpace("real")
    if offspring == "binary":
        count = OffspringCountLaw.deterministic(2)
    elif isinstance(offspring, int):
        count = OffspringCountLaw.deterministic(offspring)
    elif isinstance(offspring, OffspringCountLaw):
        count = offspring
    else:
        raise ValueError(f"unknown offspring descriptor {offspring!r}")

    if increment == "rademacher":
        def inc(e_, k, rng):
            return rng.choice((-1.0, 1.0), size=k)
    elif isinstance(increment, tuple) and increment[0] == "normal":
        _, mu, sd = increment
        def inc(e_, k, rng):
            return mu + sd * rng.standard_normal(k)
    elif isinstance(increment, tuple) and increment[0] == "drift":
        _, step = increment
        def inc(e_, k, rng):
            return np.full(k, float(step))
    else:
        raise ValueError(f"unknown increment descriptor {increment!r}")

    kernel = OffspringTraitKernel.additive(inc)
    return BranchingModel("brw", space, (e,), count, kernel, monotone_flag=True)


def neutral_gw(count_law: OffspringCountLaw, atoms, chain: np.ndarray,
               tokens=None) -> FiniteModel:
    """Neutral model: brood size independent of trait, each child's trait drawn
    independently from a user-supplied chain row at the parent's trait."""
    chain = np.asarray(chain, dtype=float)
    atoms = tuple(atoms)
    if chain.shape != (len(atoms), len(atoms)):
        raise ValueError("chain must be square over the atom list")
    if np.any(np.abs(chain.sum(axis=1) - 1.0) > PMF_TOL):
        raise ValueError("chain rows must sum to 1")
    if tokens is None:
        tokens = (EnvironmentToken.make("fixed"),)
    space = TraitSpace("finite", atoms)
    idx = {a: i for i, a in enumerate(atoms)}
    kernel = OffspringTraitKernel.iid_finite(space, lambda x, e_: chain[idx[x]])
    base = BranchingModel("neutral-gw", space, tuple(tokens), count_law, kernel)
    return FiniteModel(base)


_BUILTINS = {
    "two-type-m2": lambda params: two_type_m2(),
    "kimmel": lambda params: kimmel(params["lam"]),
    "brw": lambda params: brw(params.get("offspring", "binary"),
                              params.get("increment", ("normal", 0.0, 1.0))),
}


def builtin(name: str, **params) -> BranchingModel:
    if name not in _BUILTINS and name != "neutral-gw":
        raise ValueError(
            f"unknown model {name!r}; expected one of "
            "two-type-m2, kimmel, brw, neutral-gw"
        )
    if name == "neutral-gw":
        return neutral_gw(**params)
    return _BUILTINS[name](params)


def check_monotone(model: BranchingModel, e: EnvironmentToken, trait_pairs,
                   thresholds, replicates: int = 2000, seed: int = 0) -> dict:
    """Empirical check of stochastic monotonicity in the initial trait.

    For each pair x <= y and threshold a, compares the empirical survival
    functions of the one-step count in [a, infinity) started from x and y.
    A violation beyond three binomial standard errors at any count level
    flags the pair. Returns {pair: worst_violation} with max over levels.
    """
    report = {}
    for pi, (x, y) in enumerate(trait_pairs):
        if not x <= y:
            raise ValueError("pairs must be ordered x <= y")
        rng = replicate_generator(seed, pi, 0xA11)
        for a in thresholds:
            cx = _one_step_counts(model, x, e, a, replicates, rng)
            cy = _one_step_counts(model, y, e, a, replicates, rng)
            worst = 0.0
            top = max(cx.max(initial=0), cy.max(initial=0))
            for level in range(1, int(top) + 1):
                sx = float((cx >= level).mean())
                sy = float((cy >= level).mean())
                se = math.sqrt((sx * (1 - sx) + sy * (1 - sy)) / replicates + 1e-12)
                worst = max(worst, sx - sy - 3.0 * se)
            report[(x, y, a)] = worst
    return report


def _one_step_counts(model, x, e, a, replicates, rng):
    out = np.empty(replicates, dtype=np.int64)
    for r in range(replicates):
        _, traits = model.sample_brood(x, e, rng)
        out[r] = sum(1 for t in traits if t >= a)
    return out
