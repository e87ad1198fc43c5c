"""Forward simulation of the population as an explicit tree.

Every node carries a 64-bit key; the root key is derived from the run seed
and child keys from (parent key, birth rank). A node's brood is drawn from a
generator seeded by its own key, so any subtree can be re-simulated in
isolation from its root's (trait, key) pair and must reproduce the original
nodes exactly. That reproducibility is the engine's correctness handle for
the branching decomposition.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .environments import EnvironmentSequence
from .errors import PopulationExceededCap
from .measures import EmpiricalMeasure
from .models import BranchingModel
from .rng import child_key, node_generator, root_key

DEFAULT_CAP = 10_000_000


@dataclass
class Generation:
    """One level of the tree, in birth order (parents' order, then rank)."""

    traits: np.ndarray
    keys: np.ndarray    # uint64 node keys
    parent: np.ndarray  # local index into the previous level, -1 at the top


@dataclass
class PopulationTree:
    model_name: str
    start_gen: int            # absolute generation of generations[0]
    generations: List[Generation]
    broods: List[np.ndarray]  # brood sizes, aligned with generations[:-1]

    @property
    def last_gen(self) -> int:
        return self.start_gen + len(self.generations) - 1

    def _idx(self, g: int) -> int:
        i = g - self.start_gen
        if not 0 <= i < len(self.generations):
            raise IndexError(f"generation {g} outside [{self.start_gen}, {self.last_gen}]")
        return i

    def size(self, g: int) -> int:
        return len(self.generations[self._idx(g)].traits)

    def sizes(self) -> np.ndarray:
        return np.array([len(gen.traits) for gen in self.generations], dtype=np.int64)

    def traits_at(self, g: int) -> np.ndarray:
        return self.generations[self._idx(g)].traits

    def census(self, g: int) -> EmpiricalMeasure:
        vals = [_plain(t) for t in self.traits_at(g)]
        return EmpiricalMeasure.from_values(vals)

    def rescaled_measure(self, g: int, scale: float) -> EmpiricalMeasure:
        """Census divided by a deterministic normalizer (the mean total)."""
        if scale <= 0:
            raise ValueError("scale must be positive")
        c = self.census(g)
        return EmpiricalMeasure({a: w / scale for a, w in c.atoms.items()},
                                c.total_mass / scale)

    def lineage(self, g: int, i: int) -> list:
        """Trait path from the tree root down to individual i of generation g."""
        idx = self._idx(g)
        path = []
        j = i
        for level in range(idx, -1, -1):
            gen = self.generations[level]
            path.append(_plain(gen.traits[j]))
            j = int(gen.parent[j])
        path.reverse()
        return path


def _plain(t):
    return t.item() if hasattr(t, "item") else t


def simulate(model: BranchingModel, env: EnvironmentSequence, x0, n: int,
             seed: int, cap: int = DEFAULT_CAP,
             prune: Optional[Callable] = None) -> PopulationTree:
    """Run n generations from a single individual of trait x0.

    Raises PopulationExceededCap as soon as a generation's size passes cap.
    prune, when given, drops children with prune(trait) true from the tree;
    they still count toward the parent's recorded brood size. Use it only for
    traits whose whole subtree is irrelevant to the quantities being measured
    (absorbing states with no way back).
    """
    return _grow(model, env, [x0], [root_key(seed)], start_gen=0, depth=n,
                 cap=cap, prune=prune)


def resimulate_subtree(model: BranchingModel, env: EnvironmentSequence,
                       g: int, trait, key: int, depth: int,
                       cap: int = DEFAULT_CAP,
                       prune: Optional[Callable] = None) -> PopulationTree:
    """Re-run the subtree rooted at a node of generation g with the given key.

    Environment tokens are read from the same (unshifted) sequence at absolute
    positions g, g+1, ..., so the result matches the corresponding slice of
    the original tree node for node.
    """
    return _grow(model, env, [trait], [key], start_gen=g, depth=depth,
                 cap=cap, prune=prune)


def _grow(model, env, traits0, keys0, start_gen, depth, cap, prune):
    if len(traits0) > cap:
        raise PopulationExceededCap(start_gen, len(traits0), cap)
    gens = [Generation(
        traits=np.asarray(traits0),
        keys=np.asarray(keys0, dtype=np.uint64),
        parent=np.full(len(traits0), -1, dtype=np.int64),
    )]
    broods: List[np.ndarray] = []
    for step in range(depth):
        g = start_gen + step
        e = env.token_at(g)
        cur = gens[-1]
        new_traits: list = []
        new_keys: list = []
        new_parent: list = []
        bro = np.zeros(len(cur.traits), dtype=np.int64)
        for i in range(len(cur.traits)):
            key = int(cur.keys[i])
            rng = node_generator(key)
            k, traits = model.sample_brood(cur.traits[i], e, rng)
            bro[i] = k
            for rank in range(1, k + 1):
                t = traits[rank - 1]
                if prune is not None and prune(t):
                    continue
                new_traits.append(t)
                new_keys.append(child_key(key, rank))
                new_parent.append(i)
        broods.append(bro)
        if len(new_traits) > cap:
            raise PopulationExceededCap(g + 1, len(new_traits), cap)
        gens.append(Generation(
            traits=np.asarray(new_traits),
            keys=np.asarray(new_keys, dtype=np.uint64),
            parent=np.asarray(new_parent, dtype=np.int64),
        ))
    return PopulationTree(model.name, start_gen, gens, broods)


def lineage_occupation(tree: PopulationTree, g: int, rng) -> Optional[list]:
    """Trait path of a uniformly chosen individual of generation g, or None
    if that generation is empty."""
    z = tree.size(g)
    if z == 0:
        return None
    return tree.lineage(g, int(rng.integers(z)))


@dataclass
class MRCAReport:
    """Ordered-pair coalescence profile at one generation.

    pairs_by_generation[k] counts ordered pairs (i, j), i != j, of
    generation-g individuals whose most recent common ancestor lives at
    absolute generation start_gen + k. diagonal counts the i = j pairs
    (one per individual) and is kept out of the profile.
    """

    generation: int
    start_gen: int
    pairs_by_generation: np.ndarray
    diagonal: int

    @property
    def total_ordered_pairs(self) -> int:
        return int(self.pairs_by_generation.sum())


def mrca_pair_counts(tree: PopulationTree, g: int) -> MRCAReport:
    """Exact MRCA depth histogram in one backward sweep.

    For a node with child subtree leaf counts s_1..s_k, the ordered pairs of
    distinct leaves that coalesce exactly there number (sum s)^2 - sum s^2.
    """
    idx = tree._idx(g)
    s = np.ones(tree.size(g), dtype=np.int64)
    pairs = np.zeros(idx, dtype=np.int64)
    for j in range(idx, 0, -1):
        par = tree.generations[j].parent
        m = len(tree.generations[j - 1].traits)
        tot = np.zeros(m, dtype=np.int64)
        sq = np.zeros(m, dtype=np.int64)
        np.add.at(tot, par, s)
        np.add.at(sq, par, s * s)
        pairs[j - 1] = int((tot * tot - sq).sum())
        s = tot
    return MRCAReport(generation=g, start_gen=tree.start_gen,
                      pairs_by_generation=pairs, diagonal=tree.size(g))


def extract_subtree(tree: PopulationTree, g: int, i: int, depth: int) -> PopulationTree:
    """Slice out the subtree below individual i of generation g (inclusive)."""
    idx = tree._idx(g)
    top = min(idx + depth, len(tree.generations) - 1)
    sel = np.array([i], dtype=np.int64)
    src = tree.generations[idx]
    gens = [Generation(src.traits[sel], src.keys[sel],
                       np.full(1, -1, dtype=np.int64))]
    broods: List[np.ndarray] = []
    for j in range(idx + 1, top + 1):
        if j - 1 < len(tree.broods):
            broods.append(tree.broods[j - 1][sel])
        src = tree.generations[j]
        mask = np.isin(src.parent, sel)
        child_old = np.nonzero(mask)[0]
        new_parent = np.searchsorted(sel, src.parent[child_old])
        gens.append(Generation(src.traits[child_old], src.keys[child_old],
                               new_parent.astype(np.int64)))
        sel = child_old
    return PopulationTree(tree.model_name, g, gens, broods)


def trees_equal(a: PopulationTree, b: PopulationTree) -> bool:
    """Node-for-node equality of traits and keys, level by level."""
    if len(a.generations) != len(b.generations):
        return False
    for ga, gb in zip(a.generations, b.generations):
        if len(ga.traits) != len(gb.traits):
            return False
        if not np.array_equal(ga.keys, gb.keys):
            return False
        if not np.array_equal(ga.parent, gb.parent):
            return False
        if ga.traits.dtype.kind == "f" or gb.traits.dtype.kind == "f":
            if not np.allclose(ga.traits.astype(float),
                               gb.traits.astype(float), rtol=0, atol=0):
                return False
        elif not np.array_equal(ga.traits, gb.traits):
            return False
    return True


def dump_records(tree: PopulationTree, fp) -> int:
    """Write one JSON record per node: {label, gen, parent, trait, brood}.

    Labels are tree-relative: the root is "0" and a child appends its birth
    rank, so the second child of the root's first child is "0.1.2". brood is
    null for the last recorded generation (their children were never drawn).
    Returns the number of records written.
    """
    written = 0
    prev_labels: List[str] = []
    for level, gen in enumerate(tree.generations):
        g_abs = tree.start_gen + level
        labels = []
        if level == 0:
            ranks = np.zeros(len(gen.traits), dtype=np.int64)
        else:
            # children of one parent are contiguous, so the rank is the
            # offset from the first index sharing that parent
            first = np.searchsorted(gen.parent, gen.parent, side="left")
            ranks = np.arange(len(gen.parent)) - first + 1
        for i in range(len(gen.traits)):
            if level == 0:
                lab, par_lab = "0", None
            else:
                par_lab = prev_labels[int(gen.parent[i])]
                lab = f"{par_lab}.{int(ranks[i])}"
            labels.append(lab)
            brood = None
            if level < len(tree.broods):
                brood = int(tree.broods[level][i])
            rec = {"label": lab, "gen": g_abs, "parent": par_lab,
                   "trait": _plain(gen.traits[i]), "brood": brood}
            fp.write(json.dumps(rec) + "\n")
            written += 1
        prev_labels = labels
    return written
