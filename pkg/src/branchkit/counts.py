"""Aggregated simulation of finite-trait populations by per-trait counts.

Tracks only the count vector per generation plus the parent-to-child flow
matrices, which is enough to reconstruct the trait path of a uniformly
chosen individual: pick its trait from the final counts, then walk back one
generation at a time choosing the parent trait with probability proportional
to the flow into the chosen trait. Conditionally on counts and flows, every
assignment of actual parents consistent with the flows is equally likely, so
this backward walk has exactly the law of a uniform individual's lineage.

Brood draws are exact multinomials over the model's brood patterns while
counts stay within integer-exact float range; past that the step switches to
deterministic mean propagation with a per-generation log scale, which is the
almost-sure multiplicative regime (relative fluctuations below 1e-8 at the
switch point).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .environments import EnvironmentSequence
from .models import FiniteModel

EXACT_LIMIT = 2.0 ** 53   # largest count kept on the exact-multinomial path
STEP_GUARD = 2.0 ** 62    # total * max brood size must stay below this


@dataclass
class CountPath:
    """Counts and flows of one replicate.

    True counts at generation i are counts[i] * exp(log_scale[i]); while the
    run is exact the scale is 0 and counts are integers. flows[i][x, y] is
    the number of generation-(i+1) individuals of trait y born to parents of
    trait x, carried at generation i+1's scale.
    """

    atoms: tuple
    start_gen: int
    counts: np.ndarray            # (n+1, d) float64
    log_scale: np.ndarray         # (n+1,)
    flows: List[np.ndarray]       # n matrices, (d, d) float64
    exact_through: int            # last generation with exact integer counts

    @property
    def horizon(self) -> int:
        return len(self.counts) - 1

    def total(self, i: int) -> float:
        return float(self.counts[i].sum() * math.exp(self.log_scale[i]))

    def log_total(self, i: int) -> float:
        s = self.counts[i].sum()
        if s <= 0:
            return -math.inf
        return float(self.log_scale[i] + math.log(s))

    def survived(self, i: Optional[int] = None) -> bool:
        i = self.horizon if i is None else i
        return self.counts[i].sum() > 0

    def proportions(self, i: int) -> np.ndarray:
        s = self.counts[i].sum()
        if s <= 0:
            raise ValueError(f"generation {i} is empty")
        return self.counts[i] / s


def simulate_counts(fm: FiniteModel, env: EnvironmentSequence, x0, n: int,
                    rng) -> CountPath:
    """Run n generations from one individual of trait x0, tracking counts
    and flows only."""
    d = fm.space.size
    atoms = fm.space.atoms
    counts = np.zeros((n + 1, d))
    log_scale = np.zeros(n + 1)
    counts[0, fm.space.index(x0)] = 1.0
    flows: List[np.ndarray] = []
    max_brood = _max_brood(fm)
    exact = True
    exact_through = 0

    for i in range(n):
        e = env.token_at(i)
        cur = counts[i]
        total = cur.sum()
        if total == 0:
            flows.append(np.zeros((d, d)))
            log_scale[i + 1] = log_scale[i]
            continue
        if exact and total * max_brood < STEP_GUARD:
            fl = np.zeros((d, d))
            for xi, atom in enumerate(atoms):
                c = int(cur[xi])
                if c == 0:
                    continue
                pats = fm.brood_patterns(atom, e)
                probs = np.array([p for p, _ in pats])
                draws = rng.multinomial(c, probs / probs.sum())
                for cnt, (_, vec) in zip(draws, pats):
                    if cnt:
                        fl[xi] += cnt * vec
            counts[i + 1] = fl.sum(axis=0)
            log_scale[i + 1] = log_scale[i]
            flows.append(fl)
            if counts[i + 1].sum() > EXACT_LIMIT:
                exact = False
            else:
                exact_through = i + 1
        else:
            exact = False
            m1 = fm.m1(e)
            fl = cur[:, None] * m1
            nxt = fl.sum(axis=0)
            scale = nxt.max()
            if scale <= 0:
                counts[i + 1] = 0.0
                log_scale[i + 1] = log_scale[i]
                flows.append(fl)
                continue
            counts[i + 1] = nxt / scale
            log_scale[i + 1] = log_scale[i] + math.log(scale)
            flows.append(fl / scale)
    return CountPath(atoms, 0, counts, log_scale, flows, exact_through)


def _max_brood(fm: FiniteModel) -> int:
    worst = 1
    for e in fm.env_alphabet:
        for x in fm.space.atoms:
            for _, vec in fm.brood_patterns(x, e):
                worst = max(worst, int(vec.sum()))
    return worst


def backward_lineage(cp: CountPath, rng, upto: Optional[int] = None) -> Optional[list]:
    """Trait-index path of a uniformly chosen individual of generation
    `upto` (default: the horizon), or None if that generation is empty."""
    n = cp.horizon if upto is None else int(upto)
    if not 0 <= n <= cp.horizon:
        raise ValueError(f"generation {n} outside the simulated range")
    w = cp.counts[n]
    if w.sum() <= 0:
        return None
    y = int(rng.choice(len(w), p=w / w.sum()))
    path = [y]
    for i in range(n - 1, -1, -1):
        col = cp.flows[i][:, y]
        tot = col.sum()
        if tot <= 0:
            raise RuntimeError("flow column empty below an occupied trait")
        y = int(rng.choice(len(col), p=col / tot))
        path.append(y)
    path.reverse()
    return path
