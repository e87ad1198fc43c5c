"""Tree and count-level engines: determinism, caps, pruning, agreement."""

import numpy as np
import pytest

from branchkit.counts import backward_lineage, simulate_counts
from branchkit.environments import constant
from branchkit.errors import PopulationExceededCap
from branchkit.models import OffspringCountLaw, builtin, neutral_gw, two_type_m2
from branchkit.rng import replicate_generator
from branchkit.simulate import simulate


def doubling_model():
    # one atom, always two children: totals are 2^g surely
    return neutral_gw(OffspringCountLaw.deterministic(2), (0,),
                      np.array([[1.0]]))


def test_deterministic_doubling_totals():
    fm = doubling_model()
    env = constant(fm.env_alphabet[0])
    tree = simulate(fm, env, 0, 6, seed=1)
    for g in range(7):
        assert tree.traits_at(g).size == 2 ** g
    cp = simulate_counts(fm, env, 0, 20, replicate_generator(0, 0))
    assert cp.counts[20][0] == 2 ** 20


def test_tree_is_seed_deterministic():
    fm = two_type_m2()
    env = constant(fm.env_alphabet[0])
    one = simulate(fm, env, 0, 8, seed=42)
    two = simulate(fm, env, 0, 8, seed=42)
    for g in range(9):
        assert np.array_equal(one.traits_at(g), two.traits_at(g))
    other = simulate(fm, env, 0, 8, seed=43)
    assert any(not np.array_equal(one.traits_at(g), other.traits_at(g))
               for g in range(9))


def test_cap_enforced():
    fm = doubling_model()
    env = constant(fm.env_alphabet[0])
    with pytest.raises(PopulationExceededCap):
        simulate(fm, env, 0, 30, seed=0, cap=1000)


def test_prune_drops_subtrees_keeps_broods():
    model = builtin("kimmel", lam=1.4)
    env = constant(model.env_alphabet[0])
    tree = simulate(model, env, 1, 6, seed=5, prune=lambda t: t == 0)
    # only infected cells remain, but every parent still records 2 children
    for g in range(7):
        assert np.all(tree.traits_at(g) >= 1)
    for broods in tree.broods:
        assert np.all(broods == 2)


def test_count_engine_matches_semigroup_mean():
    fm = two_type_m2()
    env = constant(fm.env_alphabet[0])
    n = 8
    reps = 400
    totals = np.zeros(reps)
    for r in range(reps):
        cp = simulate_counts(fm, env, 0, n, replicate_generator(11, r))
        totals[r] = cp.counts[n].sum()
    from branchkit.kernels import MeanSemigroup
    exact = float(MeanSemigroup(fm, env).totals(0, n)[0])
    se = totals.std(ddof=1) / np.sqrt(reps)
    assert abs(totals.mean() - exact) < 4 * se + 1e-9


def test_backward_lineage_is_a_valid_path():
    fm = two_type_m2()
    env = constant(fm.env_alphabet[0])
    rng = replicate_generator(3, 0)
    cp = simulate_counts(fm, env, 0, 12, rng)
    path = backward_lineage(cp, rng)
    assert path is not None and len(path) == 13
    assert path[0] == 0  # starts at the root trait index
    for g, j in enumerate(path):
        assert cp.counts[g][j] > 0


def test_count_path_survival_flags():
    fm = two_type_m2()
    env = constant(fm.env_alphabet[0])
    cp = simulate_counts(fm, env, 0, 10, replicate_generator(1, 2))
    assert cp.survived()  # every type has at least one child here
    assert cp.log_total(10) > 0
