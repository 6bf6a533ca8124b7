import numpy as np
import pytest

from physop import function_spaces as fs


# --------------------------------------------------------------------------
# sine basis


def test_sine_single_mode_midpoint():
    # With coefficients forced to [1,0,0,0,0], f(0.5) = sin(pi/2) = 1.
    sample = fs.sample_sine(0)
    k = np.arange(1, 6)
    values = np.sin(np.pi * np.outer(fs.SENSOR_GRID, k)) @ np.array([1.0, 0, 0, 0, 0])
    forced = fs.FunctionSample(fs.SENSOR_GRID.copy(), values, "sine", 0)
    assert forced.values[50] == pytest.approx(1.0, rel=1e-15)
    assert sample.values.shape == (101,)


def test_sine_vanishes_at_boundary():
    for seed in range(10):
        s = fs.sample_sine(seed)
        assert s.values[0] == 0.0
        assert s.values[-1] == 0.0


def test_sine_midpoint_variance():
    # Var[f(0.5)] = sum_k sin^2(pi k / 2) = 3 for five modes.
    vals = np.array([fs.sample_sine(seed).values[50] for seed in range(20000)])
    assert np.var(vals) == pytest.approx(3.0, rel=0.10)


def test_sine_deterministic():
    a = fs.sample_sine(42)
    b = fs.sample_sine(42)
    assert np.array_equal(a.values, b.values)


# --------------------------------------------------------------------------
# GRF


def test_rbf_kernel_values():
    spec = fs.GrfSpec(length_scale=0.2)
    assert spec.kernel([0.3], [0.3])[0, 0] == 1.0
    assert spec.kernel([0.0], [0.2])[0, 0] == pytest.approx(np.exp(-0.5), rel=1e-12)


def test_grf_empirical_covariance():
    spec = fs.GrfSpec(length_scale=0.2)
    draws = np.array([fs.sample_grf(seed, spec).values for seed in range(20000)])
    cov = np.mean(draws[:, 0] * draws[:, 20])  # zero-mean process
    assert cov == pytest.approx(np.exp(-0.5), rel=0.10)


def test_grf_mean_is_small_everywhere():
    spec = fs.GrfSpec(length_scale=0.2)
    draws = np.array([fs.sample_grf(seed, spec).values for seed in range(20000)])
    assert np.max(np.abs(draws.mean(axis=0))) < 0.05


def test_grf_deterministic_and_seed_sensitive():
    spec = fs.GrfSpec()
    assert np.array_equal(fs.sample_grf(3, spec).values, fs.sample_grf(3, spec).values)
    assert not np.array_equal(fs.sample_grf(3, spec).values, fs.sample_grf(4, spec).values)


def test_grf_long_length_scale_needs_jitter_but_succeeds():
    spec = fs.GrfSpec(length_scale=0.6)
    sample = fs.sample_grf(0, spec)
    assert np.all(np.isfinite(sample.values))


def test_grf_spec_validation():
    with pytest.raises(ValueError):
        fs.GrfSpec(length_scale=0.0)


# --------------------------------------------------------------------------
# modified GRF


def test_modified_grf_boundary_zero_exactly():
    spec = fs.GrfSpec(length_scale=0.2)
    s = fs.sample_modified_grf(7, spec)
    assert s.values[0] == 0.0
    assert s.values[-1] == 0.0


def test_modified_grf_envelope_at_midpoint():
    spec = fs.GrfSpec(length_scale=0.2)
    base = fs.sample_grf(11, spec)
    mod = fs.sample_modified_grf(11, spec, alpha=8.0)
    # 8 * (0.5 - 0.25) = 2, so the midpoint doubles.
    assert mod.values[50] == pytest.approx(2.0 * base.values[50], rel=1e-12)


# --------------------------------------------------------------------------
# off-grid evaluation


def test_spline_evaluation_hits_grid_and_interpolates():
    s = fs.sample_sine(5)
    assert s(fs.SENSOR_GRID[37]) == pytest.approx(s.values[37], abs=1e-14)
    # sine series are smooth; spline error well under the grid scale
    x = 0.4037
    k = np.arange(1, 6)
    coeff = np.linalg.lstsq(np.sin(np.pi * np.outer(fs.SENSOR_GRID, k)),
                            s.values, rcond=None)[0]
    exact = np.sin(np.pi * k * x) @ coeff
    assert s(x) == pytest.approx(exact, abs=1e-5)


# --------------------------------------------------------------------------
# Latin hypercube sampling


def test_lhs_stratification_small():
    ps = fs.lhs_points(0, 4, 4, 4)
    for dim in range(2):
        strata = np.sort(np.floor(ps.coll[:, dim] * 4).astype(int))
        assert np.array_equal(strata, np.arange(4))


def test_lhs_stratification_exact_large():
    ps = fs.lhs_points(3, 2000, 200, 250)
    for arr, n in ((ps.coll[:, 0], 2000), (ps.coll[:, 1], 2000),
                   (ps.ic_x, 200), (ps.bc_t, 250)):
        strata = np.sort(np.minimum((arr * n).astype(int), n - 1))
        assert np.array_equal(strata, np.arange(n))


def test_lhs_fresh_per_seed():
    a = fs.lhs_points(1, 50, 10, 10)
    b = fs.lhs_points(2, 50, 10, 10)
    assert not np.array_equal(a.coll, b.coll)


def test_lhs_marginals_near_uniform_ks():
    # Kolmogorov-Smirnov statistic of the x marginal against U(0,1).
    for seed in range(10):
        ps = fs.lhs_points(seed, 2000, 10, 10)
        xs = np.sort(ps.coll[:, 0])
        ecdf = np.arange(1, 2001) / 2000
        ks = np.max(np.abs(ecdf - xs))
        assert ks < 0.05


def test_lhs_rejects_nonpositive_counts():
    with pytest.raises(ValueError):
        fs.lhs_points(0, 0, 10, 10)
