"""Growth rate three ways, plus the typical-lineage concentration trend."""

import math

import numpy as np
import pytest

from branchkit.environments import EnvironmentToken, constant, periodic
from branchkit.growth import (RateFunctionEvaluator, growth_report,
                              growth_slope, rho_eig,
                              typical_lineage_experiment, variational_growth)
from branchkit.kernels import MeanSemigroup
from branchkit.models import (OffspringCountLaw, OffspringTraitKernel,
                              neutral_gw, two_type_m2)

# dominant eigenvalue of [[1.5, .5], [.5, .5]], frozen from an independent
# eigenvalue computation
LOG_LAMBDA_PF = 0.5347999967395703


@pytest.fixture(scope="module")
def m2():
    fm = two_type_m2()
    return fm, constant(fm.env_alphabet[0])


def test_rho_eig_matches_oracle(m2):
    fm, env = m2
    assert rho_eig(fm, env) == pytest.approx(LOG_LAMBDA_PF, abs=1e-12)


def test_growth_slope_converges(m2):
    fm, env = m2
    ms = MeanSemigroup(fm, env)
    assert growth_slope(ms, 0, 200) == pytest.approx(LOG_LAMBDA_PF, abs=1e-3)
    # slope is start-trait independent in the limit
    assert growth_slope(ms, 1, 200) == pytest.approx(LOG_LAMBDA_PF, abs=1e-3)


def test_variational_rate_and_maximizer(m2):
    fm, env = m2
    ev = RateFunctionEvaluator(fm, env)
    rho_var, winner, inner = variational_growth(ev)
    assert rho_var == pytest.approx(LOG_LAMBDA_PF, abs=1e-3)
    # frozen occupation maximizer (0.85355339, 0.14644661)
    assert winner[0] == pytest.approx(0.85355339, abs=1e-4)
    assert winner[1] == pytest.approx(0.14644661, abs=1e-4)
    assert winner.sum() == pytest.approx(1.0, abs=1e-9)


def test_growth_report_triangle(m2):
    fm, env = m2
    report = growth_report(fm, env, 0, n_max=300)
    assert abs(report.rho_slope - report.rho_eig) < 1e-3
    assert abs(report.rho_var - report.rho_eig) < 1e-3


def test_periodic_two_mean_growth():
    # single atom, brood mean alternating 2 then 0.8: rate is 0.5 log 1.6
    toks = (EnvironmentToken.make("hi"), EnvironmentToken.make("lo"))
    means = {"hi": 2.0, "lo": 0.8}
    pmfs = {"hi": {2: 1.0}, "lo": {0: 0.6, 2: 0.4}}
    count = OffspringCountLaw(
        sampler=lambda x, e, rng: int(rng.choice(list(pmfs[e.id]),
                                                 p=list(pmfs[e.id].values()))),
        mean=lambda x, e: means[e.id],
        pmf=lambda x, e: pmfs[e.id],
        second_moment=lambda x, e: sum(k * k * p
                                       for k, p in pmfs[e.id].items()),
    )
    space_row = lambda x, e: np.array([1.0])
    from branchkit.models import BranchingModel, FiniteModel, TraitSpace
    space = TraitSpace("finite", (0,))
    kernel = OffspringTraitKernel.iid_finite(space, space_row)
    fm = FiniteModel(BranchingModel("two-mean", space, toks, count, kernel))
    env = periodic(list(toks))
    ms = MeanSemigroup(fm, env)
    target = 0.5 * math.log(1.6)
    assert growth_slope(ms, 0, 400) == pytest.approx(target, abs=1e-3)
    assert rho_eig(fm, env) == pytest.approx(target, abs=1e-12)


def test_lineage_distance_shrinks(m2):
    fm, env = m2
    report = typical_lineage_experiment(fm, env, 0, 40, replicates=150,
                                        seed=9, ladder=[10, 40])
    assert report.trend_decreasing()
    assert report.medians[40] < report.medians[10]
    # maximizer the lineages concentrate on is the variational winner
    assert report.maximizer[0] == pytest.approx(0.85355339, abs=1e-4)
