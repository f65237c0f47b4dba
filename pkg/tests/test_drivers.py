"""Function bundles and spatially parameterized drivers.

Frozen oracles (computed independently before the implementation):
  bilinear bundle f(x, y) = x y over any one-dim lift:
      WW_{s,t}(x, y) = x * XX_{s,t}; for the line path x(t) = t this gives
      WW_{0,1}(2.0, y) = 2.0 * 1/2 = 1.0 exactly
  quadrature field with rate a'(t) x, a(t) = t:
      WW_{s,t}(x, y) = x (t - s)^2 / 2
  sine envelope g(x) = 1.2 x + 0.4:
      WW_{s,t}(x, y) = 1.2 (1.2 x + 0.4) (sin t - sin s)^2 / 2
  polynomial a(t) = t^3 + t: WW_{s,t}(x, y) = x (a(t) - a(s))^2 / 2
  quadratic autonomous rate x^2 (one dim): Taylor remainder of the
      increment field is exactly (t - s) (y - x)^2
  flattened 2x2 matrix path A together with the linear adapter:
      WW^i_{s,t}(x, y) = sum_{j,c} XX[(j,c),(i,j)] x^c, independent of y
  pure-area lift (X = 0, XX = dt A): per-step pairing reduces to
      dt * (T2 : A^T - Q : A) with T2, Q the second-order coefficient
      tensors of the bundle frozen at path value zero
"""

import numpy as np
import pytest

from roughkit.analysis import (
    AnalysisParams,
    make_grid,
    weighted_driver_norm,
    weighted_increment_norm,
)
from roughkit.drivers import (
    FunctionBundle,
    SmoothField,
    composed_field,
    composition_driver,
    exp_product,
    fd_crosscheck,
    linear_adapter,
    linear_bundle,
    linear_field,
    matrix_linear,
    nl_chen_residual,
    pointwise_product,
    rotation,
    second_field,
    sine_field,
    smooth_driver,
    taylor_remainder,
    time_only_field,
)
from roughkit.linear import SmoothPathSpec, line_path, make_lift, sine_path


def _slow_plane():
    """Gentle planar path; keeps per-step compensation error tiny."""
    return SmoothPathSpec(
        x=lambda t: 0.25 * np.stack([np.sin(t), np.cos(t)], axis=-1),
        xdot=lambda t: 0.25 * np.stack([np.cos(t), -np.sin(t)], axis=-1),
        dim=2,
    )


def _matrix_path():
    """Smooth 2x2 matrix path, flattened row-major to four components."""

    def x(t):
        t = np.asarray(t, dtype=float)
        return np.stack([np.sin(t), 0.3 * t, 0.1 * np.cos(t), t * t],
                        axis=-1)

    def xdot(t):
        t = np.asarray(t, dtype=float)
        return np.stack([np.cos(t), np.full_like(t, 0.3),
                         -0.1 * np.sin(t), 2.0 * t], axis=-1)

    return SmoothPathSpec(x=x, xdot=xdot, dim=4)


# ---------------------------------------------------------------------------
# bilinear bundle: the degenerate case with exact linear-theory answers


def test_bilinear_driver_reduces_to_scaled_second_level():
    rp = make_lift(sine_path(amp=0.8), horizon=1.0, level=7,
                   kind="perturbed_geometric", perturbation=0.15)
    drv = composition_driver(pointwise_product(1), rp)
    x = np.array([0.7])
    y = np.array([-0.4])
    rng = np.random.default_rng(3)
    n = rp.grid.n_points
    ii = rng.integers(0, n - 1, 40)
    jj = ii + 1 + rng.integers(0, n - ii - 1)
    spans = drv.second_prefix(x, y).span(ii, jj)[:, 0]
    expected = 0.7 * rp.second(ii, jj)[:, 0, 0]
    scale = np.max(np.abs(expected))
    assert np.allclose(spans, expected, atol=1e-13 * scale)


def test_bilinear_single_step_and_increment_bitwise():
    rp = make_lift(sine_path(amp=0.8), horizon=1.0, level=6,
                   kind="perturbed_geometric", perturbation=0.2)
    drv = composition_driver(pointwise_product(1), rp)
    x = np.array([0.7])
    y = np.array([1.3])
    ks = np.arange(rp.grid.n_points - 1)
    got = drv.second_step(ks, x, y)[:, 0]
    expected = 0.7 * rp.second(ks, ks + 1)[:, 0, 0]
    assert np.array_equal(got, expected)
    ii = np.arange(0, rp.grid.n_points - 3)
    jj = ii + 3
    assert np.array_equal(drv.increment(ii, jj, x),
                          rp.increments(ii, jj) * 0.7)


def test_frozen_line_path_pairing_value():
    rp = make_lift(line_path([1.0]), horizon=1.0, level=5)
    drv = composition_driver(pointwise_product(1), rp)
    val = drv.second(0, rp.grid.n_points - 1,
                     np.array([2.0]), np.array([0.3]))
    assert float(val[0]) == 1.0


# ---------------------------------------------------------------------------
# composition vs direct quadrature of the same field


def test_composition_matches_quadrature_twin():
    spec = _slow_plane()
    bundle = exp_product(2)
    rp = make_lift(spec, horizon=1.0, level=10)
    drv_c = composition_driver(bundle, rp)
    drv_s = smooth_driver(composed_field(bundle, spec),
                          make_grid(1.0, 10), refine=8)
    rng = np.random.default_rng(11)
    xs = rng.uniform(-0.6, 0.6, (4, 2))
    ys = rng.uniform(-0.6, 0.6, (4, 2))
    pairs = [(0, 1024), (0, 512), (256, 768), (100, 101), (511, 513)]

    for i, j in pairs:
        assert np.allclose(drv_c.increment(i, j, xs),
                           drv_s.increment(i, j, xs), atol=1e-12)
        assert np.allclose(drv_c.d_increment(i, j, xs),
                           drv_s.d_increment(i, j, xs), atol=1e-11)

    pc = drv_c.second_prefix(xs, ys)
    ps = drv_s.second_prefix(xs, ys)
    pc1 = drv_c.second_prefix(xs, ys, "d_inner")
    ps1 = drv_s.second_prefix(xs, ys, "d_inner")
    pcm = drv_c.second_prefix(xs, ys, "mixed")
    psm = drv_s.second_prefix(xs, ys, "mixed")
    for i, j in pairs:
        assert np.allclose(pc.span(i, j), ps.span(i, j), atol=1e-8)
        assert np.allclose(pc1.span(i, j), ps1.span(i, j), atol=1e-7)
        assert np.allclose(pcm.span(i, j), psm.span(i, j), atol=1e-7)


# ---------------------------------------------------------------------------
# quadrature driver closed forms


def test_space_free_field_has_zero_pairing():
    drv = smooth_driver(time_only_field(np.cos, 2), make_grid(1.0, 5))
    x = np.array([0.4, -1.0])
    y = np.array([2.0, 0.1])
    prefix = drv.second_prefix(x, y)
    i, j = drv.grid.span_pairs("auto")
    assert np.max(np.abs(prefix.span(i, j))) == 0.0


def test_linear_field_pairing_closed_form():
    drv = smooth_driver(linear_field(np.ones_like, 2), make_grid(1.0, 6))
    x = np.array([0.8, -0.5])
    times = drv.grid.times
    i, j = drv.grid.span_pairs("auto")
    dt = times[j] - times[i]
    got = drv.second_prefix(x, np.array([5.0, 5.0])).span(i, j)
    expected = 0.5 * dt[:, None] ** 2 * x
    assert np.allclose(got, expected, atol=1e-13)
    alt = drv.second_prefix(x, np.array([-2.0, 0.3])).span(i, j)
    assert np.allclose(got, alt, atol=1e-15)


def test_sine_envelope_pairing_closed_form():
    field = sine_field(lambda x: 1.2 * x + 0.4,
                       lambda x: np.full_like(x, 1.2),
                       gpp=lambda x: np.zeros_like(x),
                       gppp=lambda x: np.zeros_like(x))
    drv = smooth_driver(field, make_grid(1.0, 6), refine=8)
    x = np.array([0.6])
    y = np.array([-0.9])
    times = drv.grid.times
    i, j = drv.grid.span_pairs("auto")
    got = drv.second_prefix(x, y).span(i, j)[:, 0]
    expected = 1.2 * (1.2 * 0.6 + 0.4) * 0.5 * (
        np.sin(times[j]) - np.sin(times[i])) ** 2
    assert np.allclose(got, expected, atol=1e-11)


def test_polynomial_rate_pairing_closed_form():
    drv = smooth_driver(linear_field(lambda t: 3.0 * t**2 + 1.0, 1),
                        make_grid(1.0, 6), refine=16)
    x = np.array([0.7])
    times = drv.grid.times
    a = times**3 + times
    i, j = drv.grid.span_pairs("auto")
    got = drv.second_prefix(x, x).span(i, j)[:, 0]
    expected = 0.7 * 0.5 * (a[j] - a[i]) ** 2
    assert np.allclose(got, expected, atol=1e-11)


def test_step_increment_matches_prefix_difference():
    drv = smooth_driver(linear_field(lambda t: np.cos(t), 2),
                        make_grid(1.0, 5))
    ks = np.arange(drv.grid.n_points - 1)
    x = np.array([0.5, -0.2])
    pw = drv._value_prefix(x)
    got = drv.step_increment(ks, x)
    assert np.allclose(got, pw[1:] - pw[:-1], atol=1e-14)


# ---------------------------------------------------------------------------
# pure-area driver


def test_pure_area_pairing_matches_coefficient_tensors():
    area = np.array([[0.0, 0.3], [-0.3, 0.0]])
    rp = make_lift(None, horizon=1.0, level=5, kind="pure_area", area=area)
    bundle = exp_product(2)
    drv = composition_driver(bundle, rp)
    x = np.array([0.5, -0.3])
    y = np.array([0.2, 0.8])
    zero = np.zeros(2)
    fx = bundle(zero, x)
    q = np.einsum('iabj,j->iab', bundle.partial(2, 1)(zero, y), fx)
    t2 = q + np.einsum('iaj,jb->iab', bundle.partial(1, 1)(zero, y),
                       bundle.partial(1, 0)(zero, x))
    per_time = np.einsum('iab,ba->i', t2, area) - np.einsum(
        'iab,ab->i', q, area)
    times = rp.grid.times
    i, j = rp.grid.span_pairs("auto")
    got = drv.second_prefix(x, y).span(i, j)
    expected = (times[j] - times[i])[:, None] * per_time
    assert np.allclose(got, expected, atol=1e-14)
    assert np.max(np.abs(drv.increment(i, j, x))) == 0.0


# ---------------------------------------------------------------------------
# nonlinear Chen identity


def test_nl_chen_composition_perturbed():
    rp = make_lift(_slow_plane(), horizon=1.0, level=7,
                   kind="perturbed_geometric", perturbation=0.2)
    drv = composition_driver(exp_product(2), rp)
    rng = np.random.default_rng(7)
    xs = rng.uniform(-0.8, 0.8, (12, 2))
    ys = rng.uniform(-0.8, 0.8, (12, 2))
    report = nl_chen_residual(drv, xs, ys)
    assert report.ok()
    assert report.max_residual <= 1e-12 * report.scale


def test_nl_chen_smooth_driver():
    field = sine_field(lambda x: np.sin(x) + 0.5,
                       lambda x: np.cos(x),
                       gpp=lambda x: -np.sin(x),
                       gppp=lambda x: -np.cos(x))
    drv = smooth_driver(field, make_grid(1.0, 6), refine=8)
    rng = np.random.default_rng(8)
    xs = rng.uniform(-1.0, 1.0, (8, 1))
    ys = rng.uniform(-1.0, 1.0, (8, 1))
    report = nl_chen_residual(drv, xs, ys)
    assert report.ok()


def test_nl_chen_midpoint_policy_on_fine_grids():
    rp = make_lift(sine_path(amp=0.5), horizon=1.0, level=9)
    drv = composition_driver(pointwise_product(1), rp)
    rng = np.random.default_rng(9)
    xs = rng.uniform(-1.0, 1.0, (6, 1))
    ys = rng.uniform(-1.0, 1.0, (6, 1))
    # 513 grid points: auto falls back to budgeted midpoint triples
    report = nl_chen_residual(drv, xs, ys)
    assert report.ok()


def test_nl_chen_detects_cache_corruption():
    rp = make_lift(sine_path(amp=0.8), horizon=1.0, level=4)
    drv = composition_driver(pointwise_product(1), rp)
    x = np.array([0.7])
    y = np.array([0.4])
    clean = nl_chen_residual(drv, x[None], y[None])
    assert clean.ok()
    drv.second(3, 11, x, y)
    for key in list(drv._memo):
        drv._memo[key] = drv._memo[key] + 0.1
    corrupted = nl_chen_residual(drv, x[None], y[None])
    assert not corrupted.ok()
    assert abs(corrupted.max_residual - 0.1) < 1e-6


def test_chen_input_validation():
    rp = make_lift(sine_path(), horizon=1.0, level=4)
    drv = composition_driver(pointwise_product(1), rp)
    with pytest.raises(ValueError):
        nl_chen_residual(drv, np.zeros((3, 1)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        nl_chen_residual(drv, np.zeros((2, 1)), np.zeros((2, 1)),
                         triples="every_other")


def test_second_field_wrapper_agrees_with_driver():
    rp = make_lift(sine_path(amp=0.6), horizon=1.0, level=5)
    drv = composition_driver(exp_product(1), rp)
    x = np.array([0.5])
    y = np.array([-0.2])
    fld = second_field(drv, x, y)
    for i, j in [(0, 32), (3, 17), (10, 11)]:
        assert np.allclose(fld.eval(i, j)[0], drv.second(i, j, x, y),
                           atol=1e-15)


# ---------------------------------------------------------------------------
# bundle derivative tables


def test_fd_crosscheck_catalog():
    rng = np.random.default_rng(12)
    cases = [
        (pointwise_product(2), 2, 2),
        (exp_product(2), 2, 2),
        (linear_bundle(rng.uniform(-0.5, 0.5, (2, 3, 2))), 3, 2),
        (matrix_linear(rng.uniform(-0.5, 0.5, (2, 3))), 3, 2),
        (rotation(0.3, [0.2, -0.4]), 2, 2),
    ]
    for bundle, e, m in cases:
        x = rng.uniform(-0.8, 0.8, (4, e))
        y = rng.uniform(-0.8, 0.8, (4, m))
        report = fd_crosscheck(bundle, x, y)
        assert report, bundle.name
        worst = max(report.values())
        assert worst < 1e-5, (bundle.name, report)


def test_fd_fallback_matches_analytic_layout():
    bare = FunctionBundle(
        lambda x, y: np.exp(np.asarray(x, dtype=float)
                            * np.asarray(y, dtype=float)), 2, 2)
    ref = exp_product(2)
    rng = np.random.default_rng(13)
    x = rng.uniform(-0.8, 0.8, (3, 2))
    y = rng.uniform(-0.8, 0.8, (3, 2))
    for key in [(1, 0), (0, 1), (1, 1), (0, 2)]:
        exact = ref.partial(*key)(x, y)
        approx = bare.partial(*key)(x, y)
        scale = np.max(np.abs(exact))
        assert np.max(np.abs(exact - approx)) < 1e-4 * scale, key


# ---------------------------------------------------------------------------
# slot derivatives of the pairing


def _fd_slot(drv, i, j, x, y, slot, base=None):
    base = base or (lambda a, b: drv.second(i, j, a, b))
    ref = x if slot == 1 else y
    cols = []
    for c in range(drv.dim):
        h = 1e-6 * (1.0 + abs(float(ref[c])))
        bump = np.zeros(drv.dim)
        bump[c] = h
        if slot == 1:
            hi, lo = base(x + bump, y), base(x - bump, y)
        else:
            hi, lo = base(x, y + bump), base(x, y - bump)
        cols.append((hi - lo) / (2.0 * h))
    return np.stack(cols, axis=-1)


def test_slot_derivatives_match_differences():
    rp = make_lift(_slow_plane(), horizon=1.0, level=6)
    drv = composition_driver(exp_product(2), rp)
    x = np.array([0.5, -0.3])
    y = np.array([-0.2, 0.6])
    i, j = 5, 49

    for slot in (1, 2):
        exact = drv.d_second(i, j, x, y, slot)
        approx = _fd_slot(drv, i, j, x, y, slot)
        scale = max(np.max(np.abs(exact)), 1e-12)
        assert np.max(np.abs(exact - approx)) < 1e-6 * scale

    inner = lambda a, b: drv.d_second(i, j, a, b, 1)
    mixed = drv.d_second_mixed(i, j, x, y)
    approx = _fd_slot(drv, i, j, x, y, 2, base=inner)
    scale = max(np.max(np.abs(mixed)), 1e-12)
    assert np.max(np.abs(mixed - approx)) < 1e-5 * scale

    d2_in = drv.d_second(i, j, x, y, 1, order=2)
    approx = _fd_slot(drv, i, j, x, y, 1, base=inner)
    scale = max(np.max(np.abs(d2_in)), 1e-12)
    assert np.max(np.abs(d2_in - approx)) < 1e-5 * scale

    outer = lambda a, b: drv.d_second(i, j, a, b, 2)
    d2_out = drv.d_second(i, j, x, y, 2, order=2)
    approx = _fd_slot(drv, i, j, x, y, 2, base=outer)
    scale = max(np.max(np.abs(d2_out)), 1e-12)
    assert np.max(np.abs(d2_out - approx)) < 1e-5 * scale


def test_smooth_slot_derivatives_match_differences():
    field = sine_field(lambda x: np.sin(x) + 0.5,
                       lambda x: np.cos(x),
                       gpp=lambda x: -np.sin(x),
                       gppp=lambda x: -np.cos(x))
    drv = smooth_driver(field, make_grid(1.0, 5), refine=8)
    x = np.array([0.4])
    y = np.array([-0.7])
    i, j = 2, 27
    for slot in (1, 2):
        exact = drv.d_second(i, j, x, y, slot)
        approx = _fd_slot(drv, i, j, x, y, slot)
        scale = max(np.max(np.abs(exact)), 1e-12)
        assert np.max(np.abs(exact - approx)) < 1e-6 * scale


def test_per_step_slot_derivatives_match_span():
    rp = make_lift(_slow_plane(), horizon=1.0, level=5)
    drv = composition_driver(exp_product(2), rp)
    x = np.array([[0.5, -0.3]])
    y = np.array([[-0.2, 0.6]])
    k = 7
    for slot in (1, 2):
        step = drv.d_second_step(np.array([k]), x, y, slot)
        span = drv.second_prefix(x, y,
                                 {1: "d_inner", 2: "d_outer"}[slot]
                                 ).span(k, k + 1)
        assert np.allclose(step, span, atol=1e-15)


# ---------------------------------------------------------------------------
# per-step brackets


def test_step_brackets_bilinear_canonical_vanish():
    rp = make_lift(sine_path(amp=0.8), horizon=1.0, level=6)
    drv = composition_driver(pointwise_product(1), rp)
    ks = np.arange(rp.grid.n_points - 1)
    x = np.array([0.7])
    br = drv.step_brackets(ks, x)
    assert np.max(np.abs(br["quad"])) < 1e-16
    assert np.max(np.abs(br["dw_w"])) < 1e-16
    assert np.max(np.abs(br["w_dw"])) < 1e-16


def test_step_brackets_bilinear_perturbed_values():
    c = 0.2
    rp = make_lift(sine_path(amp=0.8), horizon=1.0, level=6,
                   kind="perturbed_geometric", perturbation=c)
    drv = composition_driver(pointwise_product(1), rp)
    ks = np.arange(rp.grid.n_points - 1)
    dt = np.diff(rp.grid.times)
    x = np.array([0.7])
    y = np.array([0.3])
    br = drv.step_brackets(ks, x, y)
    assert np.allclose(br["quad"][:, 0, 0], -2.0 * c * dt * 0.7**2,
                       atol=1e-15)
    assert np.allclose(br["dw_w"][:, 0], -2.0 * c * dt * 0.7, atol=1e-15)
    assert np.allclose(br["w_dw"][:, 0], -2.0 * c * dt * 0.7, atol=1e-15)


def test_step_brackets_smooth_vanish():
    drv = smooth_driver(linear_field(np.ones_like, 2), make_grid(1.0, 5))
    ks = np.arange(drv.grid.n_points - 1)
    x = np.array([0.8, -0.5])
    br = drv.step_brackets(ks, x)
    for name in ("quad", "dw_w", "w_dw"):
        assert np.max(np.abs(br[name])) < 1e-15, name


# ---------------------------------------------------------------------------
# weighted norms over drivers


def test_weighted_driver_norm_smoke():
    rp = make_lift(_slow_plane(), horizon=1.0, level=5)
    drv = composition_driver(exp_product(2), rp)
    params = AnalysisParams(alpha=0.45)
    rng = np.random.default_rng(14)
    samples = rng.uniform(-0.6, 0.6, (6, 2))
    result = weighted_driver_norm(drv, params, samples, order=2)
    assert len(result["w_terms"]) == 3
    assert len(result["ww_terms"]) == 2
    assert 0.0 < result["total"] < np.inf
    assert result["total"] == result["w_total"] + result["ww_total"]

    field = drv.increment_field()
    n = rp.grid.n_points
    sub, _ = weighted_increment_norm(field, params, samples, [0],
                                     pairs=([0], [n - 1]))
    full, _ = weighted_increment_norm(field, params, samples, [0])
    assert sub[0] <= full[0] + 1e-12


# ---------------------------------------------------------------------------
# spatial Taylor remainders


def test_taylor_increment_linear_field_is_exact():
    drv = smooth_driver(linear_field(np.ones_like, 1), make_grid(1.0, 5))
    params = AnalysisParams(alpha=0.45)
    rng = np.random.default_rng(15)
    n = drv.grid.n_points
    ii = rng.integers(0, n - 1, 20)
    jj = ii + 1 + rng.integers(0, n - ii - 1)
    xs = rng.uniform(-0.5, 0.5, (20, 1))
    ys = rng.uniform(-0.5, 0.5, (20, 1))
    res = taylor_remainder("increment", drv.increment_field(), params,
                           (ii, jj), (xs, ys))
    assert np.max(res["measured"]) < 1e-14
    assert res["ok"]


def test_taylor_increment_quadratic_rate_formula():
    def rate(t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        batch = np.broadcast_shapes(t.shape, x.shape[:-1])
        return np.broadcast_to(x * x, batch + (1,))

    def d1(t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        batch = np.broadcast_shapes(t.shape, x.shape[:-1])
        return np.broadcast_to((2.0 * x)[..., None], batch + (1, 1))

    def d2(t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        batch = np.broadcast_shapes(t.shape, x.shape[:-1])
        return np.broadcast_to(2.0 * np.ones((1, 1, 1)), batch + (1, 1, 1))

    def d3(t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        batch = np.broadcast_shapes(t.shape, x.shape[:-1])
        return np.zeros(batch + (1, 1, 1, 1))

    field = SmoothField(rate, 1, d1=d1, d2=d2, d3=d3, name="square")
    drv = smooth_driver(field, make_grid(1.0, 5))
    params = AnalysisParams(alpha=0.45)
    rng = np.random.default_rng(16)
    n = drv.grid.n_points
    ii = np.concatenate([[0], rng.integers(0, n - 1, 19)])
    jj = np.concatenate([[n - 1],
                         ii[1:] + 1 + rng.integers(0, n - ii[1:] - 1)])
    xs = rng.uniform(-0.5, 0.5, (20, 1))
    ys = rng.uniform(-0.5, 0.5, (20, 1))
    xs[0, 0], ys[0, 0] = -0.5, 0.5
    z1 = rng.uniform(-1.0, 1.0, (20, 1))
    z2 = rng.uniform(-1.0, 1.0, (20, 1))
    res = taylor_remainder("increment", drv.increment_field(), params,
                           (ii, jj), (xs, ys), directions=(z1, z2))
    dt = drv.grid.times[jj] - drv.grid.times[ii]
    oracle = dt * (ys[:, 0] - xs[:, 0]) ** 2
    assert np.allclose(res["measured"], oracle, rtol=1e-10, atol=1e-14)
    assert res["ok"]
    assert np.all(res["ratio"] <= 1.0 + 1e-9)
    assert np.max(res["ratio"]) >= 0.2
    assert res["deriv_ok"]


def test_taylor_pair_bounds_hold():
    rp = make_lift(_slow_plane(), horizon=1.0, level=5)
    drv = composition_driver(exp_product(2), rp)
    params = AnalysisParams(alpha=0.45)
    rng = np.random.default_rng(17)
    n = rp.grid.n_points
    ii = rng.integers(0, n - 1, 40)
    jj = ii + 1 + rng.integers(0, n - ii - 1)
    draws = [rng.uniform(-0.6, 0.6, (40, 2)) for _ in range(4)]
    dirs = [rng.uniform(-1.0, 1.0, (40, 2)) for _ in range(4)]
    res = taylor_remainder(
        "pair", drv.second_level_field(), params, (ii, jj),
        ((draws[0], draws[1]), (draws[2], draws[3])),
        directions=((dirs[0], dirs[1]), (dirs[2], dirs[3])))
    assert res["ok"]
    assert res["deriv_ok"]
    assert np.all(np.isfinite(res["bound"]))


def test_taylor_pair_space_free_driver_is_flat():
    drv = smooth_driver(time_only_field(np.sin, 1), make_grid(1.0, 4))
    params = AnalysisParams(alpha=0.4)
    ii = np.array([0, 2, 5])
    jj = np.array([16, 9, 6])
    pts = [np.full((3, 1), v) for v in (0.1, -0.4, 0.8, 0.2)]
    res = taylor_remainder("pair", drv.second_level_field(), params,
                           (ii, jj), ((pts[0], pts[1]), (pts[2], pts[3])))
    assert np.max(res["measured"]) == 0.0
    assert res["ok"]


def test_taylor_unknown_kind_rejected():
    drv = smooth_driver(time_only_field(np.sin, 1), make_grid(1.0, 3))
    params = AnalysisParams(alpha=0.4)
    with pytest.raises(ValueError):
        taylor_remainder("cubic", drv.increment_field(), params,
                         ([0], [1]), (np.zeros((1, 1)), np.ones((1, 1))))


# ---------------------------------------------------------------------------
# linear adapter over a flattened matrix path


def test_linear_adapter_flat_matrix_path():
    rp = make_lift(_matrix_path(), horizon=1.0, level=6)
    drv = linear_adapter(rp, 2)
    x = np.array([0.7, -0.4])
    y = np.array([1.1, 0.2])
    rng = np.random.default_rng(18)
    n = rp.grid.n_points
    ii = rng.integers(0, n - 1, 30)
    jj = ii + 1 + rng.integers(0, n - ii - 1)

    got_inc = drv.increment(ii, jj, x)
    expected_inc = np.einsum('nrc,c->nr',
                             rp.increments(ii, jj).reshape(-1, 2, 2), x)
    assert np.allclose(got_inc, expected_inc, atol=1e-14)

    got = drv.second_prefix(x, y).span(ii, jj)
    xx4 = rp.second(ii, jj).reshape(-1, 2, 2, 2, 2)
    expected = np.einsum('njcij,c->ni', xx4, x)
    scale = np.max(np.abs(expected))
    assert np.allclose(got, expected, atol=1e-12 * scale)

    alt = drv.second_prefix(x, np.array([-3.0, 0.5])).span(ii, jj)
    assert np.allclose(got, alt, atol=1e-14)


def test_linear_adapter_dimension_check():
    rp = make_lift(sine_path(), horizon=1.0, level=4)
    with pytest.raises(ValueError):
        linear_adapter(rp, 2)
