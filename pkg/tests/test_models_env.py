import numpy as np
import pytest

from branchkit.environments import (EnvironmentToken, constant, explicit,
                                    iid_seeded, periodic)
from branchkit.models import (FiniteModel, OffspringCountLaw, TraitSpace,
                              builtin, neutral_gw, two_type_m2)


def test_builtin_dispatch_and_unknown():
    assert builtin("two-type-m2").name == "two-type-m2"
    assert builtin("kimmel", lam=1.4).name == "kimmel"
    assert builtin("brw").name == "brw"
    with pytest.raises(ValueError, match="unknown model"):
        builtin("galton")


def test_kimmel_rejects_bad_rate():
    with pytest.raises(ValueError, match="lambda must be > 0"):
        builtin("kimmel", lam=-1.0)
    with pytest.raises(ValueError, match="lambda must be > 0"):
        builtin("kimmel", lam=0.0)


def test_two_type_mean_matrix():
    fm = two_type_m2()
    e = fm.env_alphabet[0]
    expect = np.array([[1.5, 0.5], [0.5, 0.5]])
    assert np.allclose(fm.m1(e), expect)


def test_count_laws():
    det = OffspringCountLaw.deterministic(3)
    e = EnvironmentToken.make("fixed")
    assert det.pmf(0, e) == {3: 1.0}
    assert det.mean(0, e) == 3.0
    with pytest.raises(ValueError):
        OffspringCountLaw.deterministic(0)
    with pytest.raises(ValueError):
        OffspringCountLaw.geometric(1.0)
    pois = OffspringCountLaw.poisson(2.0)
    pmf = pois.pmf(0, e)
    assert abs(sum(pmf.values()) - 1.0) < 1e-9
    assert abs(sum(k * p for k, p in pmf.items()) - 2.0) < 1e-6
    tab = OffspringCountLaw.table([(0, 0.25), (2, 0.75)])
    assert tab.mean(0, e) == pytest.approx(1.5)


def test_trait_space_membership():
    fin = TraitSpace("finite", (0, 1, 5))
    assert fin.contains(5) and not fin.contains(2)
    integer = TraitSpace("integer")
    assert integer.contains(3) and not integer.contains(-1)


def test_neutral_gw_validates_chain():
    law = OffspringCountLaw.deterministic(2)
    with pytest.raises(ValueError, match="rows must sum to 1"):
        neutral_gw(law, (0, 1), np.array([[0.5, 0.4], [0.5, 0.5]]))
    fm = neutral_gw(law, (0, 1), np.array([[0.5, 0.5], [0.1, 0.9]]))
    assert isinstance(fm, FiniteModel)


def test_finite_model_rejects_missing_pmf():
    e = EnvironmentToken.make("fixed")
    space = TraitSpace("finite", (0,))
    from branchkit.models import BranchingModel, OffspringTraitKernel
    count = OffspringCountLaw(sampler=lambda x, e_, rng: 1,
                              mean=lambda x, e_: 1.0)
    kernel = OffspringTraitKernel.iid_finite(space, lambda x, e_: np.array([1.0]))
    base = BranchingModel("bare", space, (e,), count, kernel)
    with pytest.raises(ValueError, match="pmf"):
        FiniteModel(base)


# environment sequences: token_at indexing and the shift T = drop-first

def test_constant_and_periodic_tokens():
    a = EnvironmentToken.make("a")
    b = EnvironmentToken.make("b")
    env = constant(a)
    assert env.token_at(0) is env.token_at(123)
    per = periodic([a, b])
    assert [per.token_at(i).id for i in range(4)] == ["a", "b", "a", "b"]
    assert per.shift(1).token_at(0).id == "b"


def test_shift_consistency():
    a = EnvironmentToken.make("a")
    b = EnvironmentToken.make("b")
    for env in (periodic([a, b]), iid_seeded([a, b], 7),
                explicit([a, b, a, b, a, a])):
        shifted = env.shift(2)
        for i in range(4):
            assert shifted.token_at(i) == env.token_at(i + 2)


def test_explicit_fails_beyond_end():
    a = EnvironmentToken.make("a")
    env = explicit([a, a, a])
    env.token_at(2)
    with pytest.raises(IndexError):
        env.token_at(3)


def test_iid_seeded_deterministic():
    a = EnvironmentToken.make("a")
    b = EnvironmentToken.make("b")
    one = iid_seeded([a, b], 99)
    two = iid_seeded([a, b], 99)
    assert [one.token_at(i) for i in range(20)] == \
        [two.token_at(i) for i in range(20)]
    other = iid_seeded([a, b], 100)
    assert [one.token_at(i) for i in range(50)] != \
        [other.token_at(i) for i in range(50)]


def test_token_params_roundtrip():
    tok = EnvironmentToken.make("fixed", lam=1.4)
    assert tok.get("lam") == 1.4
    assert tok.get("missing", 3.0) == 3.0
