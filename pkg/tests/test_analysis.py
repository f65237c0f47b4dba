"""Grids, seminorm estimators and step-size constants.

Frozen oracle values (computed independently, by closed form, before the
implementation):
  sewing constant at 3a, a = 0.5 : 1/(1 - 2^{-1/2})  = 3.414213562373095
  sewing constant at 3a, a = 0.4 : 1/(1 - 2^{-0.2})  = 7.725023958872576
  weighted order-0 norm of (t-s)x at alpha=1, b0=1, samples {-2..2}: 2/3
  growth index for beta = (alpha, 0, 0, 0): exactly 1
  growth index for beta = (2, 2, 2, 2), alpha = 0.4: 6/0.4 - 6 + 2 = 11
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roughkit.analysis import (
    MAX_LEVEL,
    PAIR_BUDGET,
    AnalysisParams,
    SampledPath,
    TimeGrid,
    TwoParamField,
    first_window_bounds,
    holder_seminorm,
    k_alpha,
    make_grid,
    sewing_constant,
    step_constants,
    weighted_increment_norm,
)

K_HALF = 3.414213562373095
K_04 = 7.725023958872576


# ---------------------------------------------------------------------------
# params


def test_params_derived_growth_orders():
    p = AnalysisParams(alpha=0.45, beta=(1.0, 2.0, 0.5, 3.0))
    assert p.gamma1 == pytest.approx(max(1, 2) + max(2, 0.5))
    assert p.gamma2 == pytest.approx(max(1, 2, 0.5) + max(2, 0.5, 3) + 2)
    assert p.gamma1 <= p.gamma2


def test_params_validation_lists_all_violations():
    with pytest.raises(ValueError) as err:
        AnalysisParams(alpha=0.7, horizon=-1.0, beta=(-1.0, 0, 0, 0))
    msg = str(err.value)
    assert "alpha" in msg and "horizon" in msg and "beta" in msg


def test_params_alpha_boundaries():
    AnalysisParams(alpha=0.5)  # closed right end
    with pytest.raises(ValueError):
        AnalysisParams(alpha=1.0 / 3.0)  # open left end
    with pytest.raises(ValueError):
        AnalysisParams(alpha=0.51)


# ---------------------------------------------------------------------------
# grids


def test_make_grid_dyadic_times():
    g = make_grid(1.0, 3)
    assert np.array_equal(g.times, np.arange(9) / 8.0)
    g = make_grid(2.0, 1)
    assert np.array_equal(g.times, [0.0, 1.0, 2.0])
    g = make_grid(1.0, 0)
    assert np.array_equal(g.times, [0.0, 1.0])


def test_make_grid_endpoint_exact_for_odd_horizon():
    g = make_grid(0.3, 7)
    assert g.times[-1] == 0.3  # power-of-two scaling is exact
    assert g.times[0] == 0.0


def test_make_grid_level_cap():
    with pytest.raises(ValueError):
        make_grid(1.0, MAX_LEVEL + 1)
    with pytest.raises(ValueError):
        make_grid(-1.0, 3)


def test_grid_rejects_non_monotone():
    with pytest.raises(ValueError):
        TimeGrid(times=np.array([0.0, 0.5, 0.5, 1.0]))


def test_span_pairs_all_and_dyadic():
    g = make_grid(1.0, 3)  # 9 points
    i, j = g.span_pairs("all")
    assert len(i) == 9 * 8 // 2
    i, j = g.span_pairs("dyadic_spans")
    lags = sorted(set(j - i))
    assert lags == [1, 2, 4, 8]
    # auto switches above the budget
    big = make_grid(1.0, 11)  # 2049 > 1025
    i, j = big.span_pairs("auto")
    assert len(i) < 2049 * 2048 // 2
    assert set(np.unique(j - i)) == {1, 2, 4, 8, 16, 32, 64, 128, 256, 512,
                                     1024, 2048}
    small = make_grid(1.0, 5)
    i, j = small.span_pairs("auto")
    assert len(i) == 33 * 32 // 2
    assert PAIR_BUDGET == 1025


# ---------------------------------------------------------------------------
# seminorms


def test_holder_seminorm_linear_path_alpha_one():
    g = make_grid(1.0, 6)
    p = SampledPath(g, g.times.copy())
    assert holder_seminorm(p, 1.0) == pytest.approx(1.0, abs=1e-12)


def test_holder_seminorm_constant_path():
    g = make_grid(1.0, 6)
    p = SampledPath(g, np.full(g.n_points, 2.5))
    assert holder_seminorm(p, 0.45) == 0.0


def test_holder_seminorm_sqrt_path():
    g = make_grid(1.0, 8)
    p = SampledPath(g, np.sqrt(g.times))
    # |sqrt(t) - sqrt(s)| / |t-s|^{1/2} peaks at s = 0 with value 1
    assert holder_seminorm(p, 0.5) == pytest.approx(1.0, abs=1e-12)


def test_holder_seminorm_monotone_under_refinement():
    rng = np.random.default_rng(7)
    w = rng.standard_normal(257)
    coarse_vals = np.cumsum(w)[::4]
    fine_vals = np.cumsum(w)[::2]
    # both grids sample the same underlying path
    coarse = SampledPath(make_grid(1.0, 6), coarse_vals[:65])
    fine = SampledPath(make_grid(1.0, 7), fine_vals[:129])
    assert holder_seminorm(fine, 0.45) >= holder_seminorm(coarse, 0.45) - 1e-12


def test_holder_seminorm_two_param_field():
    g = make_grid(1.0, 5)

    def fn(i, j):
        dt = g.times[j] - g.times[i]
        return dt[:, None] ** 2  # exponent 2 field

    f = TwoParamField.from_callable(g, (1,), fn)
    # |dt^2| / dt = dt, maximal on the full span
    assert holder_seminorm(f, 1.0) == pytest.approx(1.0, abs=1e-12)


def test_two_param_field_dense_matches_callable():
    g = make_grid(1.0, 3)

    def fn(i, j):
        dt = g.times[j] - g.times[i]
        return np.stack([dt, dt**2], axis=-1)

    f = TwoParamField.from_callable(g, (2,), fn)
    dense = TwoParamField.from_dense(g, f.materialize())
    i, j = g.span_pairs("all")
    assert np.allclose(f.eval(i, j), dense.eval(i, j))
    assert np.allclose(f.value(2, 5), fn(np.array([2]), np.array([5]))[0])


# ---------------------------------------------------------------------------
# weighted increment norms (inline field, spec examples)


class _FormulaField:
    """Increment field W_{s,t}(x) from a closed-form map (t, x) -> value."""

    def __init__(self, grid, w, dw=None, d2w=None, d3w=None):
        self.grid = grid
        self._w = w
        self._dw = [None, dw, d2w, d3w]

    def value(self, i, j, x):
        t = self.grid.times
        return self._w(t[j], x) - self._w(t[i], x)

    def deriv(self, i, j, x, k):
        fn = self._dw[k]
        t = self.grid.times
        return fn(t[j], x) - fn(t[i], x)


def test_weighted_norm_time_only_field():
    # W(t, x) = a(t) constant in space: order-0 term is the a-seminorm,
    # order-1 term vanishes
    g = make_grid(1.0, 6)
    p = AnalysisParams(alpha=0.45, beta=(0.0, 0.0, 0.0, 0.0))
    a = lambda t: np.sin(2 * np.pi * t)
    field = _FormulaField(
        g,
        lambda t, x: np.full((x.shape[0], 1), a(t)),
        dw=lambda t, x: np.zeros((x.shape[0], 1, 1)),
    )
    apath = SampledPath(g, a(g.times))
    samples = np.linspace(-2, 2, 9)[:, None]
    per, total = weighted_increment_norm(field, p, samples, [0, 1])
    assert per[0] == pytest.approx(holder_seminorm(apath, 0.45), rel=1e-12)
    assert per[1] == 0.0
    assert total == pytest.approx(per[0])


def test_weighted_norm_linear_space_field_frozen_value():
    # W(t, x) = t*x, exponent 1, b0 = 1: sup |x|/(1+|x|) over {-2..2} = 2/3
    g = make_grid(1.0, 4)
    p = AnalysisParams(alpha=0.5, beta=(1.0, 0.0, 0.0, 0.0))
    field = _FormulaField(
        g,
        lambda t, x: t * x,
        dw=lambda t, x: t * np.ones((x.shape[0], 1, 1)),
    )
    samples = np.arange(-2.0, 3.0)[:, None]
    per, _ = weighted_increment_norm(field, p, samples, [0], exponent=1.0)
    assert per[0] == pytest.approx(2.0 / 3.0, rel=1e-12)


def test_weighted_norm_product_sine_field_bounded_by_sine_seminorm():
    # W(t, x) = sin(t) sin(x): every term is at most the sin(t) seminorm
    g = make_grid(1.0, 6)
    p = AnalysisParams(alpha=0.45, beta=(0.0, 0.0, 0.0, 0.0))
    field = _FormulaField(
        g,
        lambda t, x: math.sin(t) * np.sin(x),
        dw=lambda t, x: math.sin(t) * np.cos(x)[:, :, None],
    )
    sin_path = SampledPath(g, np.sin(g.times))
    cap = holder_seminorm(sin_path, 0.45)
    samples = np.linspace(-3, 3, 13)[:, None]
    per, _ = weighted_increment_norm(field, p, samples, [0, 1])
    assert per[0] <= cap + 1e-12
    assert per[1] <= cap + 1e-12


# ---------------------------------------------------------------------------
# constants


def test_sewing_constant_frozen_values():
    assert k_alpha(0.5) == pytest.approx(K_HALF, abs=1e-12)
    assert k_alpha(0.4) == pytest.approx(K_04, abs=1e-9)
    with pytest.raises(ValueError):
        sewing_constant(1.0)


def test_sewing_constant_decreasing_in_alpha():
    assert k_alpha(0.34) > k_alpha(0.4) > k_alpha(0.45) > k_alpha(0.5)


@given(st.floats(min_value=0.3334, max_value=0.5),
       st.floats(min_value=0.3334, max_value=0.5))
def test_k_alpha_monotone_property(a1, a2):
    lo, hi = min(a1, a2), max(a1, a2)
    assert k_alpha(lo) >= k_alpha(hi) - 1e-12


def test_growth_index_boundary_case_exact():
    # beta = (alpha, 0, 0, 0): gamma2 = alpha, index = 1 exactly
    for alpha in (0.35, 0.4, 0.45, 0.5):
        p = AnalysisParams(alpha=alpha, beta=(alpha, 0.0, 0.0, 0.0))
        rep = step_constants(p, driver_norm=1.0, xi_norm=1.0)
        assert rep.growth_index == pytest.approx(1.0, abs=1e-12)
        assert rep.growth_condition_holds


def test_growth_index_refusal_case():
    p = AnalysisParams(alpha=0.4, beta=(2.0, 2.0, 2.0, 2.0))
    rep = step_constants(p, driver_norm=1.0, xi_norm=1.0)
    assert rep.growth_index == pytest.approx(11.0, abs=1e-12)
    assert not rep.growth_condition_holds


def test_constants_invariants_random_draws():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        alpha = float(rng.uniform(1.0 / 3.0 + 1e-3, 0.5))
        beta = tuple(float(b) for b in rng.uniform(0.0, 3.0, size=4))
        beta = tuple(sorted(beta))  # keeps gamma1 <= gamma2 guaranteed
        p = AnalysisParams(alpha=alpha, beta=beta)
        w = float(rng.uniform(0.0, 5.0))
        xi = float(rng.uniform(0.0, 5.0))
        rep = step_constants(p, w, xi)
        assert rep.k_alpha > 0
        assert 0 < rep.h2 <= rep.h1 <= 1.0
        assert rep.C6 > 0
        assert rep.growth_condition_holds == (rep.growth_index <= 1.0 + 1e-12)


def test_constants_zero_growth_defaults():
    p = AnalysisParams(alpha=0.45, beta=(0.0, 0.0, 0.0, 0.0))
    rep = step_constants(p, driver_norm=1.0, xi_norm=1.0)
    assert rep.gamma1 == 0.0 and rep.gamma2 == 0.0
    assert rep.C6 == pytest.approx(12.0 * k_alpha(0.45), rel=1e-12)
    assert rep.K0 == 0.0
    assert math.isinf(rep.C7)
    assert 0 < rep.h2 <= rep.h1 <= 1.0
    holder_cap, sup_cap = first_window_bounds(rep)
    assert math.isinf(holder_cap) and math.isinf(sup_cap)


def test_constants_zero_driver_norm_gives_unit_local_step():
    p = AnalysisParams(alpha=0.45, beta=(1.0, 1.0, 1.0, 1.0))
    rep = step_constants(p, driver_norm=0.0, xi_norm=0.5)
    assert rep.h1 == 1.0
    assert rep.h2 <= 1.0


def test_first_window_bounds_finite_for_positive_growth():
    p = AnalysisParams(alpha=0.45, beta=(1.0, 1.0, 1.0, 1.0))
    rep = step_constants(p, driver_norm=2.0, xi_norm=1.0)
    holder_cap, sup_cap = first_window_bounds(rep)
    assert np.isfinite(holder_cap) and holder_cap > 0
    assert sup_cap == pytest.approx(1.0 + 1.0 / (6.0 * rep.gamma1))


@settings(max_examples=60)
@given(
    st.floats(min_value=0.34, max_value=0.5),
    st.lists(st.floats(min_value=0.0, max_value=2.5), min_size=4, max_size=4),
)
def test_growth_predicate_property(alpha, beta_list):
    beta = tuple(sorted(beta_list))
    p = AnalysisParams(alpha=alpha, beta=beta)
    rep = step_constants(p, 1.0, 0.0)
    index = p.gamma2 / alpha - p.gamma2 + beta[0]
    assert rep.growth_index == pytest.approx(index, rel=1e-12, abs=1e-12)
    assert rep.growth_condition_holds == (index <= 1.0 + 1e-12)


def test_report_as_dict_round_trip():
    p = AnalysisParams(alpha=0.45, beta=(0.5, 0.5, 0.5, 0.5))
    rep = step_constants(p, 1.5, 0.5)
    d = rep.as_dict()
    assert d["k_alpha"] == rep.k_alpha
    assert d["growth_condition_holds"] == rep.growth_condition_holds
    assert d["beta"] == [0.5, 0.5, 0.5, 0.5]
