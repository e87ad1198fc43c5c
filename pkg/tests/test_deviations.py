"""Tube measures, the pathwise lower coupling, local density and extremes,
and the mean-growth probe.

Exact laws are pinned to closed forms computed inline (binomial survival,
matrix powers, Poisson split tails, Gaussian block masses); Monte Carlo
paths are cross-checked against the exact ones on fixed seeds.
"""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branchkit.deviations import (
    TubeMeasure,
    TubeSpec,
    assumption_mg_probe,
    bpve_couple,
    density_records,
    extremal_particle_experiment,
    extreme_records,
    local_density_experiment,
    predicted_speed,
    tube_measure,
)
from branchkit.environments import constant
from branchkit.errors import SupercriticalityUnmet
from branchkit.kernels import MeanSemigroup
from branchkit.models import OffspringCountLaw, builtin, neutral_gw, two_type_m2


def m2_pair():
    fm = two_type_m2()
    return fm, constant(fm.env_alphabet[0])


def kimmel_pair(lam=1.4):
    model = builtin("kimmel", lam=lam)
    return model, constant(model.env_alphabet[0])


def doubling_pair():
    fm = neutral_gw(OffspringCountLaw.deterministic(2), (0,),
                    np.array([[1.0]]))
    return fm, constant(fm.env_alphabet[0])


# ------------------------------------------------------------ tube measures


def test_one_step_count_law_matches_binomial():
    # from type 0 each of the two children lands back on 0 w.p. 3/4
    fm, env = m2_pair()
    tm = tube_measure(fm, env, 0, 1, {0}, {0})
    assert tm.exact
    assert tm.survival[0] == pytest.approx(1.0, abs=1e-15)
    assert tm.survival[1] == pytest.approx(1 - 0.25 ** 2, abs=1e-15)
    assert tm.survival[2] == pytest.approx(0.75 ** 2, abs=1e-15)
    assert np.all(tm.survival[3:] == 0.0)
    assert tm.mu_bar == pytest.approx(1.5, abs=1e-15)
    # dispersion of Binomial(2, 3/4): variance over squared mean
    assert tm.mu_hat == pytest.approx(1 / 6, abs=1e-12)
    assert tm.pmf.sum() == pytest.approx(1.0, abs=1e-12)
    assert tm.tail_identity_gap() <= 1e-12


def test_multi_step_mean_matches_semigroup_entry():
    fm, env = m2_pair()
    tm = tube_measure(fm, env, 0, 4, {0}, {0})
    entry = MeanSemigroup(fm, env).matrix(0, 4)[0, 0]
    assert entry == pytest.approx(7.25, rel=1e-12)
    assert tm.mu_bar == pytest.approx(entry, rel=1e-12)
    assert tm.tail_identity_gap() <= 1e-10


def test_empty_target_set_gives_null_measure():
    fm, env = m2_pair()
    tm = tube_measure(fm, env, 0, 1, {0}, ())
    assert tm.mu_bar == 0.0
    assert math.isnan(tm.mu_hat)


def test_deterministic_tube_has_zero_dispersion():
    fm, env = doubling_pair()
    tm = tube_measure(fm, env, 0, 5, {0}, {0})
    assert tm.mu_bar == pytest.approx(32.0, abs=1e-12)
    assert tm.mu_hat == pytest.approx(0.0, abs=1e-12)
    assert tm.pmf[32] == pytest.approx(1.0, abs=1e-12)


def test_one_step_cell_tube_closed_form():
    # a cell with one pathogen: each daughter stays infected w.p. 1-e^{-lam/2}
    model, env = kimmel_pair(1.4)
    tm = tube_measure(model, env, 0, 1, 1.0, 1.0)
    assert tm.exact
    assert tm.mu_bar == pytest.approx(2 * (1 - math.exp(-0.7)), abs=1e-12)
    assert tm.mu_bar == pytest.approx(1.006829392417181, abs=1e-12)


def test_monte_carlo_agrees_with_exact_law():
    fm, env = m2_pair()
    ex = tube_measure(fm, env, 0, 3, {0}, {0})
    mc = tube_measure(fm, env, 0, 3, {0}, {0}, replicates=4000, seed=5)
    assert ex.exact and not mc.exact
    width = max(len(ex.survival), len(mc.survival))
    pad = [np.pad(t.survival, (0, width - len(t.survival))) for t in (ex, mc)]
    assert np.max(np.abs(pad[0] - pad[1])) <= 0.03
    assert abs(ex.mu_bar - mc.mu_bar) <= 0.15


def test_tube_spec_validation():
    with pytest.raises(ValueError):
        TubeSpec(())
    with pytest.raises(ValueError):
        TubeSpec((-1, 0), thresholds=(1.0, 1.0))
    with pytest.raises(ValueError):
        TubeSpec((0, 2, 2), thresholds=(1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        TubeSpec((0, 1), thresholds=(1.0, 1.0), atom_sets=({0}, {0}))
    with pytest.raises(ValueError):
        TubeSpec((0, 1))
    with pytest.raises(ValueError):
        TubeSpec((0, 1), thresholds=(1.0,))
    with pytest.raises(ValueError):
        TubeSpec((0, 1), atom_sets=({0}, set()))
    line = TubeSpec.line(5, 2.0)
    assert line.checkpoints == tuple(range(6))
    assert line.horizon == 5 and line.unit_spaced()
    assert line.member(3, 2.0) and not line.member(3, 1.9)
    assert line.trait_set(0) == 2.0


def test_tube_measure_argument_errors():
    fm, env = m2_pair()
    model, kenv = kimmel_pair()
    with pytest.raises(ValueError):
        tube_measure(fm, env, 3, 2, {0}, {0})
    with pytest.raises(ValueError):
        tube_measure(fm, env, 0, 1, (), {0})
    with pytest.raises(ValueError):
        tube_measure(model, kenv, 0, 1, {1}, 1.0)
    with pytest.raises(ValueError):
        tube_measure(model, kenv, 0, 3, 1.0, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
                min_size=1, max_size=8))
def test_dispersion_floor_and_tail_identity(weights):
    total = sum(weights)
    if total < 1e-9:
        return
    pmf = np.asarray(weights, dtype=float) / total
    survival = np.concatenate([np.cumsum(pmf[::-1])[::-1], [0.0]])
    survival[0] = 1.0
    tm = TubeMeasure(survival, exact=False)
    support = [l for l, w in enumerate(pmf) if w > 0]
    if support == [0]:
        assert math.isnan(tm.mu_hat)
        return
    assert tm.mu_hat >= -1.0 - 1e-12
    assert tm.tail_identity_gap() <= 1e-9
    if len(support) == 1:
        # a point mass is the only law with zero dispersion
        assert tm.mu_hat == pytest.approx(0.0, abs=1e-9)


# ----------------------------------------------------------------- coupling


def test_whole_space_coupling_collapses_to_population():
    fm, env = m2_pair()
    n = 6
    tube = TubeSpec(tuple(range(n + 1)), atom_sets=[{0, 1}] * (n + 1))
    # the worst start (type 1) has mean exactly 1, so the verdict is hedged
    with pytest.warns(SupercriticalityUnmet):
        report = bpve_couple(fm, env, tube, n, seed=7, replicates=40)
    assert report.all_dominant()
    assert report.dominance_fraction == 1.0
    assert report.warnings
    for run in report.runs:
        assert np.array_equal(run.population, run.selected)
        assert run.population[0] == 1


def test_deterministic_coupling_is_exact():
    fm, env = doubling_pair()
    n = 10
    tube = TubeSpec(tuple(range(n + 1)), atom_sets=[{0}] * (n + 1))
    report = bpve_couple(fm, env, tube, n, seed=1, replicates=3)
    powers = 2 ** np.arange(n + 1)
    for run in report.runs:
        assert np.array_equal(run.population, powers)
        assert np.array_equal(run.selected, powers)
        assert np.array_equal(run.bpve, powers)


def test_cell_wave_dominance_and_step_means():
    model, env = kimmel_pair(1.4)
    report = bpve_couple(model, env, TubeSpec.line(12, 1.0), 12,
                         seed=3, replicates=60)
    assert report.all_dominant()
    assert not report.warnings
    assert report.mu_bars == pytest.approx(
        np.full(12, 1.006829392417181), abs=1e-12)
    for run in report.runs:
        assert run.checkpoints == tuple(range(13))
        assert run.population[0] == 1


def test_coupling_validation_and_subcritical_warning():
    fm, env = m2_pair()
    gaps = TubeSpec((0, 1, 2, 4), atom_sets=[{0}] * 4)
    with pytest.raises(ValueError):
        bpve_couple(fm, env, gaps, 3, seed=0)
    with pytest.raises(ValueError):
        bpve_couple(fm, env, gaps, 4, seed=0)
    model, kenv = kimmel_pair(1.4)
    with pytest.raises(ValueError):
        bpve_couple(model, kenv, TubeSpec.line(4, 1.5), 4, seed=0)
    varying = TubeSpec((0, 1, 2), thresholds=(1.0, 2.0, 1.0))
    with pytest.raises(ValueError):
        bpve_couple(model, kenv, varying, 2, seed=0)
    sub, senv = kimmel_pair(0.5)
    with pytest.warns(SupercriticalityUnmet):
        report = bpve_couple(sub, senv, TubeSpec.line(8, 1.0), 8,
                             seed=0, replicates=5)
    assert report.warnings
    assert report.all_dominant()


# ------------------------------------------------------------ local density


def test_density_records_are_replicate_deterministic():
    model, env = kimmel_pair(1.4)
    full = density_records(model, env, 1, ("const", 1.0), (4, 8),
                           list(range(6)), seed=5)
    sub = density_records(model, env, 1, ("const", 1.0), (4, 8),
                          [2, 4], seed=5)
    by_key = {(r.replicate, r.n): r for r in full}
    assert all(by_key[(r.replicate, r.n)] == r for r in sub)


def test_cell_density_slope_and_markov_bound():
    model, env = kimmel_pair(1.4)
    report = local_density_experiment(model, env, 1, ("const", 1.0),
                                      ladder=(8, 16, 24), replicates=200,
                                      seed=13)
    assert report.slope == pytest.approx(math.log(1.4), abs=0.02)
    assert report.slope_se < 0.01
    assert report.markov_violation_fraction() <= 0.05
    assert abs(report.decomposition_gap()) < 0.1
    assert report.total_rate == pytest.approx(math.log(2.0), abs=1e-12)
    assert report.alpha > 0


def test_finite_density_decomposition():
    fm, env = m2_pair()
    report = local_density_experiment(fm, env, 0, ("const", 1.0),
                                      ladder=(6, 12, 18), replicates=300,
                                      seed=2)
    assert report.slope == pytest.approx(0.5347999967395703, abs=0.02)
    assert report.markov_violation_fraction() <= 0.05
    assert abs(report.decomposition_gap()) < 0.05
    assert math.isfinite(report.alpha) and math.isfinite(report.total_rate)


# --------------------------------------------------------------- extremes


def test_predicted_front_speeds():
    normal = builtin("brw", offspring=2, increment=("normal", 0.0, 1.0))
    assert predicted_speed(normal) == pytest.approx(
        math.sqrt(2 * math.log(2)), abs=1e-12)
    rade = builtin("brw", offspring=2, increment="rademacher")
    assert predicted_speed(rade) == pytest.approx(1.0, abs=1e-9)
    drift = builtin("brw", offspring=2, increment=("drift", 0.25))
    assert predicted_speed(drift) == pytest.approx(0.25, abs=1e-12)
    assert predicted_speed(two_type_m2()) is None


def test_extreme_records_deterministic_and_bounded():
    brw = builtin("brw", offspring=2, increment=("normal", 0.0, 1.0))
    env = constant(brw.env_alphabet[0])
    one = extreme_records(brw, env, 0.0, (5, 10), [0, 1, 2], seed=11, beam=500)
    two = extreme_records(brw, env, 0.0, (5, 10), [0, 1, 2], seed=11, beam=500)
    sub = extreme_records(brw, env, 0.0, (5, 10), [1], seed=11, beam=500)
    assert one == two
    assert [r for r in one if r.replicate == 1] == sub
    for rec in one:
        assert rec.max_over_n == pytest.approx(rec.max_trait / rec.n)

    fm, fenv = m2_pair()
    occupied = extreme_records(fm, fenv, 0, (3, 6), [0, 1, 2, 3], seed=4)
    values = {r.max_trait for r in occupied if not math.isnan(r.max_trait)}
    assert values <= {0.0, 1.0}


def test_front_speed_report_stays_below_calibrated_speed():
    # the beam only discards particles, so the recorded front is a lower bound
    brw = builtin("brw", offspring=2, increment=("normal", 0.0, 1.0))
    env = constant(brw.env_alphabet[0])
    report = extremal_particle_experiment(brw, env, 0.0, ladder=(5, 10, 20),
                                          replicates=40, seed=9, beam=2000)
    assert report.beam == 2000
    assert report.predicted == pytest.approx(math.sqrt(2 * math.log(2)))
    assert 0.0 < report.median_speed < report.predicted
    assert report.exceed_fraction(margin=0.1) <= 0.1


# ------------------------------------------------------- mean-growth probe


def test_block_mass_probe_matches_gaussian_tail():
    # 2^4 times the N(0, 4) tail beyond 3.2: sixteen mean children, one jump
    brw = builtin("brw", offspring=2, increment=("normal", 0.0, 1.0))
    env = constant(brw.env_alphabet[0])
    report = assumption_mg_probe(brw, env, (4, [0.0, 3.2]), x0=0.0)
    expected = 16 * 0.5 * math.erfc(1.6 / math.sqrt(2))
    assert report.prefix_masses[0] == pytest.approx(expected, rel=1e-12)
    assert report.block == 4 and report.thresholds == (0.0, 3.2)
    # the mass sits below 1, so the probe must refuse the prefix
    assert not report.prefix_certified
    assert report.certified is None


def test_cell_probe_certifies_supercritical_growth():
    model, env = kimmel_pair(1.4)
    target = math.log(1.4)
    report = assumption_mg_probe(model, env, ((1, [1, 1, 1, 1]), (25, 1)),
                                 horizon=1003, target_rate=target,
                                 epsilon=0.05,
                                 aux_rate=math.log(2.0) - target)
    assert report.prefix_certified
    assert report.prefix_masses == pytest.approx(
        np.full(3, 1.006829392417181), abs=1e-12)
    assert report.certified
    assert target - 0.05 <= report.average < target
    assert report.aux_certified
    assert report.aux_average < 0
    assert not report.notes


def test_probe_flags_and_argument_errors():
    model, env = kimmel_pair(1.4)
    with pytest.raises(ValueError):
        assumption_mg_probe(model, env, (0, [1, 1]))
    with pytest.raises(ValueError):
        assumption_mg_probe(model, env, (1, [1]))

    sub, senv = kimmel_pair(0.5)
    weak = assumption_mg_probe(sub, senv, (1, [1, 1, 1]))
    assert weak.prefix_masses[0] == pytest.approx(
        2 * (1 - math.exp(-0.25)), abs=1e-12)
    assert not weak.prefix_certified

    low = assumption_mg_probe(model, env, (1, [1, 1]), x0=0)
    assert any("below b_0" in note for note in low.notes)

    cramped = assumption_mg_probe(model, env, ((1, [1, 1]), (25, 1)),
                                  horizon=4, target_rate=math.log(1.4))
    assert any("no room" in note for note in cramped.notes)
    assert cramped.certified is None

    odd = assumption_mg_probe(model, env, ((1, [1, 1]), (25, 1)),
                              horizon=101, target_rate=math.log(1.4),
                              aux_rate=-0.1)
    assert any("aux rate below 0" in note for note in odd.notes)
