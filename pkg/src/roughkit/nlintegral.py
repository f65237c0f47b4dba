"""Nonlinear controlled paths and the compensated-sum rough integral.

A path Y is controlled by a driver W when its increments split as
Y_{s,t} = W_{s,t}(Ydot_s) + R_{s,t} with a 2*alpha remainder. Against such
a pair the driver integrates through the compensated germ

    Xi_{s,t} = W_{s,t}(Y_s) + WW_{s,t}(Ydot_s, Y_s),

whose dyadic sums converge at rate 3*alpha; the limit is again controlled,
with derivative Y itself. This module provides that integral with two
per-interval bound reports (a measured sewing constant and an explicit
constant assembled from weighted norms), the left-point Young integral for
drivers that need no second level, stability metrics between controlled
pairs, and the reduction of composition drivers to a linear rough integral
plus a bracket correction.

Index conventions follow the driver layer: WW_{s,t}(x, y) takes the
increment argument first and the derivative-evaluation argument second,
so the integral germ pairs WW(Ydot, Y).
"""

from dataclasses import dataclass

import numpy as np

from .analysis import (
    AnalysisParams,
    SampledPath,
    TimeGrid,
    _flat_norms,
    holder_seminorm,
    k_alpha,
    make_grid,
    weighted_driver_norm,
    weighted_increment_norm,
    weighted_pair_norm,
)
from .drivers import composition_driver
from .linear import (
    ControlledPath,
    SewDivergenceError,
    SewingBoundReport,
    rough_integral,
)

_RTOL_BOUND = 1e-9     # relative slack when checking analytic inequalities
_ABS_GUARD = 1e-13     # roundoff floor per germ magnitude


def _check_same_grid(a: TimeGrid, b: TimeGrid, what="grids"):
    if a.n_points != b.n_points or not np.array_equal(a.times, b.times):
        raise ValueError(f"{what} must share the same time grid")


# ---------------------------------------------------------------------------
# controlled pairs


@dataclass(frozen=True)
class NLControlledPath:
    """Pair (Y, Ydot) of sampled paths on a shared grid.

    Ydot is the derivative of Y with respect to the driver: the remainder
    R_{s,t} = Y_{s,t} - W_{s,t}(Ydot_s) should carry a finite 2*alpha
    seminorm. The driver is not stored; remainder queries take it as an
    argument so one pair can be measured against several drivers.
    """

    y: SampledPath
    ydot: SampledPath

    def __post_init__(self):
        _check_same_grid(self.y.grid, self.ydot.grid, "Y and Ydot")
        if self.y.values.shape != self.ydot.values.shape:
            raise ValueError("Y and Ydot must have matching value shapes")

    @property
    def grid(self) -> TimeGrid:
        return self.y.grid

    @property
    def dim(self) -> int:
        return self.y.values.shape[1]

    def remainder(self, driver, i, j):
        """R_{i,j} = Y_{i,j} - W_{i,j}(Ydot_i) for index arrays i, j."""
        _check_same_grid(self.grid, driver.grid, "path and driver")
        i = np.atleast_1d(np.asarray(i))
        j = np.atleast_1d(np.asarray(j))
        return (self.y.increments(i, j)
                - driver.increment_at(i, j, self.ydot.values[i]))

    def remainder_seminorm(self, driver, exponent, pair_budget="dyadic_spans"):
        """max |R_{s,t}| / (t-s)^exponent over budgeted grid pairs."""
        i, j = self.grid.span_pairs(pair_budget)
        dt = self.grid.times[j] - self.grid.times[i]
        mags = _flat_norms(self.remainder(driver, i, j))
        return float(np.max(mags / dt**exponent))


# ---------------------------------------------------------------------------
# left-point Young integral


@dataclass
class NLYoungResult:
    """Staged left-point sums: value is the extrapolated limit, path the
    prefix of the finest accepted stage, history the raw (level, sum)
    sequence."""

    value: np.ndarray
    path: SampledPath
    level: int
    history: list


def _stage_sum(w, y: SampledPath, idx):
    il, jr = idx[:-1], idx[1:]
    left = y.values[il]
    if callable(w):
        times = y.grid.times
        inc = np.asarray(w(times[il], times[jr], left), dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
    else:
        inc = w.increment_at(il, jr, left)
    if inc.shape[0] != il.size:
        raise ValueError("field increments must align with the grid pairs")
    return inc


def nl_young_integral(w, y: SampledPath, base_level=6, refine=2,
                      rtol=1e-5, extrapolate=True) -> NLYoungResult:
    """Integral of a field against time along Y by left-point sums.

    w is either a callable (s, t, y_left) -> increments W_{s,t}(y_left)
    with 1-d time arrays and an aligned point batch, or a driver exposing
    increment_at on the same grid as y. Sums are taken over dyadic
    subgrids of y, refining by the given factor per stage up to y's native
    level. Successive stage values are Richardson-extrapolated (the decay
    order estimated from the last three stages) and the run stops once two
    consecutive extrapolated values agree to rtol. Diverging stage
    differences, or exhaustion of the native grid without stabilizing,
    raise SewDivergenceError.
    """
    native = y.grid.level
    if native is None:
        raise ValueError("Young sums need a dyadic grid with a level")
    if not callable(w):
        _check_same_grid(y.grid, w.grid, "path and field")
    lstep = int(np.log2(refine))
    if 2**lstep != refine or refine < 2:
        raise ValueError("refine must be a power of two >= 2")
    if base_level < 1 or base_level + 2 * lstep > native:
        raise ValueError("need at least three refinement stages up to the "
                         "native level")
    n = y.grid.n_points
    history = []
    sums = []
    extr = []
    diffs = []
    settled = 0
    for level in range(base_level, native + 1, lstep):
        stride = 2 ** (native - level)
        idx = np.arange(0, n, stride)
        inc = _stage_sum(w, y, idx)
        s = inc.sum(axis=0)
        sums.append(s)
        history.append((level, s.copy()))
        r = s
        if len(sums) >= 3 and extrapolate:
            d1 = sums[-2] - sums[-3]
            d2 = sums[-1] - sums[-2]
            m1 = float(np.max(np.abs(d1)))
            m2 = float(np.max(np.abs(d2)))
            if 0.0 < m2 < m1:
                rho = m1 / m2
                # only accelerate for a sane decay order per stage
                if refine**0.25 < rho < refine**4.5:
                    r = s + d2 / (rho - 1.0)
        extr.append(r)
        if len(sums) >= 2:
            diffs.append(float(np.max(np.abs(sums[-1] - sums[-2]))))
            if len(diffs) >= 3 and diffs[-1] > diffs[-2] > diffs[-3]:
                raise SewDivergenceError(
                    f"left-point sums diverge: level diffs {diffs[-3:]}")
        if len(extr) >= 2:
            gap = float(np.max(np.abs(extr[-1] - extr[-2])))
            if gap <= rtol * max(1.0, float(np.max(np.abs(r)))):
                settled += 1
            else:
                settled = 0
            if settled >= 2:
                prefix = np.concatenate(
                    [np.zeros_like(inc[:1]), np.cumsum(inc, axis=0)], axis=0)
                out_grid = TimeGrid(y.grid.times[idx], level=level)
                return NLYoungResult(value=r, level=level, history=history,
                                     path=SampledPath(out_grid, prefix))
    raise SewDivergenceError(
        "left-point sums did not stabilize by the native grid level")


def oscillator_young_case(n: int, level=19, rtol=1e-5) -> NLYoungResult:
    """Fast oscillation test family on [0, 1].

    The field increments exp(x_t y) - exp(x_s y) with x_t = cos(2 pi n^2
    t)/n are summed along y_t = sin(2 pi n^2 t)/n. Both paths shrink like
    1/n, yet the sums approach -pi as n grows: the limit integral retains
    the averaged product of the vanishing factors. The starting level
    resolves each of the n^2 periods by at least four steps."""
    if n < 1:
        raise ValueError("n must be a positive integer")
    freq = 2.0 * np.pi * n * n
    grid = make_grid(1.0, level)
    yv = np.sin(freq * grid.times) / n
    y = SampledPath(grid, yv[:, None])

    def w(s, t, yl):
        xs = np.cos(freq * s) / n
        xt = np.cos(freq * t) / n
        return np.exp(xt * yl[:, 0]) - np.exp(xs * yl[:, 0])

    base = 6 if n == 1 else max(6, 2 + int(np.ceil(2.0 * np.log2(n))))
    return nl_young_integral(w, y, base_level=base, rtol=rtol)


# ---------------------------------------------------------------------------
# compensated-sum rough integral


@dataclass
class DefectBoundReport:
    """Per-interval check of |J_{s,t} - Xi_{s,t}| <= constant * dt^gamma
    with the constant assembled from weighted norm estimates."""

    gamma: float
    constant: float
    norms: dict
    worst_ratio: float
    n_intervals: int
    n_ok: int

    @property
    def all_ok(self):
        return self.n_ok == self.n_intervals


@dataclass
class NLIntegralResult:
    """Output of the compensated-sum integral with its bound reports."""

    output: NLControlledPath
    level: int
    sewing: SewingBoundReport | None = None
    explicit: DefectBoundReport | None = None
    remainder_norm: float | None = None
    remainder_bound: float | None = None


def _step_w(driver, steps, x):
    fn = getattr(driver, "step_increment", None)
    if fn is not None:
        return fn(steps, x)
    return driver.increment_at(steps, steps + 1, x)


def _xi_at(driver, yv, ydv, i, j):
    """Compensated germ on aligned native index pairs."""
    return (driver.increment_at(i, j, yv[i])
            + driver.second_at(i, j, ydv[i], yv[i]))


def _norm_samples(ctrl: NLControlledPath, per_block=9):
    """Spatial sample set covering both path components and consecutive
    midpoints (segment interiors matter for derivative sup estimates)."""
    yv, ydv = ctrl.y.values, ctrl.ydot.values
    blocks = [yv, ydv, 0.5 * (yv[1:] + yv[:-1]), 0.5 * (ydv[1:] + ydv[:-1])]
    out = []
    for b in blocks:
        if len(b) > per_block:
            b = b[np.linspace(0, len(b) - 1, per_block).astype(int)]
        out.append(b)
    return np.unique(np.concatenate(out, axis=0), axis=0)


def _ctrl_norms(ctrl: NLControlledPath, driver, params: AnalysisParams,
                pair_budget):
    a = params.alpha
    return {
        "y_alpha": holder_seminorm(ctrl.y, a, pair_budget),
        "ydot_alpha": holder_seminorm(ctrl.ydot, a, pair_budget),
        "y_sup": float(np.max(_flat_norms(ctrl.y.values))),
        "ydot_sup": float(np.max(_flat_norms(ctrl.ydot.values))),
        "remainder": ctrl.remainder_seminorm(driver, 2.0 * a, pair_budget),
    }


def _defect_constant(norms, wnorm, params: AnalysisParams):
    b = params.beta
    ka = k_alpha(params.alpha)
    weights = ((1.0 + 2.0 * norms["ydot_sup"]) ** max(b[0], b[1])
               * (1.0 + 2.0 * norms["y_sup"]) ** max(b[1], b[2]))
    activity = norms["y_alpha"] + norms["ydot_alpha"] + norms["remainder"]
    return ka * wnorm * weights * activity


def _remainder_cap(norms, wnorm, params: AnalysisParams, horizon):
    b = params.beta
    ka = k_alpha(params.alpha)
    weights = ((1.0 + 2.0 * norms["ydot_sup"]) ** max(b[0], b[1])
               * (1.0 + 2.0 * norms["y_sup"]) ** max(b[1], b[2]))
    activity = norms["y_alpha"] + norms["ydot_alpha"] + norms["remainder"]
    return ka * wnorm * weights * (1.0 + horizon**params.alpha * activity)


def nl_rough_integral(ctrl: NLControlledPath, driver, params=None,
                      level=None, report=True,
                      pair_budget="dyadic_spans") -> NLIntegralResult:
    """Compensated-sum integral of the driver along a controlled pair.

    Per-step atoms W(Y_k) + WW(Ydot_k, Y_k) are accumulated over the
    dyadic subgrid at the requested level (native grid by default); the
    output is controlled with derivative Y restricted to that subgrid.
    With report=True the germ is re-evaluated on every aligned dyadic
    span and the prefix gap J_{s,t} - Xi_{s,t} is checked against two
    3*alpha bounds: the sewing bound with the worst observed midpoint
    defect constant, and the explicit constant built from weighted driver
    and path norms at the native resolution. The output remainder
    seminorm is measured and compared with its own weighted-norm cap.
    Reports need params (or a driver carrying them).
    """
    for attr in ("grid", "increment_at", "second_at"):
        if not hasattr(driver, attr):
            raise TypeError("driver must expose grid, increment_at and "
                            "second_at")
    _check_same_grid(ctrl.grid, driver.grid, "path and driver")
    native = ctrl.grid.level
    if native is None:
        raise ValueError("compensated sums need a dyadic grid with a level")
    if level is None:
        level = native
    if not 1 <= level <= native:
        raise ValueError(f"level must lie in [1, {native}], got {level}")
    if params is None:
        params = getattr(driver, "params", None)
    if report and params is None:
        raise ValueError("bound reports need analysis parameters")

    n = ctrl.grid.n_points
    stride = 2 ** (native - level)
    idx = np.arange(0, n, stride)
    yv = ctrl.y.values
    ydv = ctrl.ydot.values

    if stride == 1:
        steps = np.arange(n - 1)
        atoms = (_step_w(driver, steps, yv[:-1])
                 + driver.second_step(steps, ydv[:-1], yv[:-1]))
    else:
        atoms = _xi_at(driver, yv, ydv, idx[:-1], idx[1:])
    if not np.all(np.isfinite(atoms)):
        raise FloatingPointError("non-finite compensated-sum atoms")
    prefix = np.concatenate(
        [np.zeros_like(atoms[:1]), np.cumsum(atoms, axis=0)], axis=0)

    if stride == 1:
        out_grid = ctrl.grid
    else:
        out_grid = TimeGrid(ctrl.grid.times[idx], level=level)
    output = NLControlledPath(y=SampledPath(out_grid, prefix),
                              ydot=SampledPath(out_grid, yv[idx]))
    result = NLIntegralResult(output=output, level=level)
    if not report:
        return result

    # germ tables per aligned dyadic lag on the output grid
    xi_levels = [atoms]
    for q in range(1, level + 1):
        lag = 2**q
        io = np.arange(0, 2**level, lag)
        xi_levels.append(_xi_at(driver, yv, ydv, idx[io], idx[io + lag]))

    gamma = 3.0 * params.alpha
    out_dt = out_grid.horizon / 2**level
    c_obs = 0.0
    for q in range(1, level + 1):
        delta = xi_levels[q] - xi_levels[q - 1][0::2] - xi_levels[q - 1][1::2]
        dtq = out_dt * 2**q
        c_obs = max(c_obs, float(np.max(_flat_norms(delta)) / dtq**gamma))

    norms = _ctrl_norms(ctrl, driver, params, pair_budget)
    wn = weighted_driver_norm(driver, params, _norm_samples(ctrl),
                              order=2, pair_budget=pair_budget)
    norms["driver"] = wn["total"]
    c_explicit = _defect_constant(norms, wn["total"], params)

    ka = k_alpha(params.alpha)
    stats = np.zeros(4)  # ok counts and worst ratios for the two bounds
    n_total = 0
    for q, xi in enumerate(xi_levels):
        lag = 2**q
        io = np.arange(0, 2**level, lag)
        gaps = _flat_norms(prefix[io + lag] - prefix[io] - xi)
        guard = _ABS_GUARD * np.maximum(1.0, _flat_norms(xi))
        dtq = out_dt * lag
        for pos, const in enumerate((ka * c_obs, c_explicit)):
            bound = const * dtq**gamma
            ok = gaps <= bound + guard
            stats[pos] += int(np.sum(ok))
            ratio = np.where(gaps <= guard, 0.0,
                             gaps / max(bound, 1e-300))
            stats[2 + pos] = max(stats[2 + pos], float(np.max(ratio)))
        n_total += io.size
    result.sewing = SewingBoundReport(
        gamma=gamma, c_observed=c_obs, worst_ratio=stats[2],
        n_intervals=n_total, n_ok=int(stats[0]))
    result.explicit = DefectBoundReport(
        gamma=gamma, constant=c_explicit, norms=norms,
        worst_ratio=stats[3], n_intervals=n_total, n_ok=int(stats[1]))

    # measured output remainder against its weighted-norm cap
    iv, jv = out_grid.span_pairs("dyadic_spans")
    wvals = driver.increment_at(idx[iv], idx[jv], yv[idx[iv]])
    rem = prefix[jv] - prefix[iv] - wvals
    dt = out_grid.times[jv] - out_grid.times[iv]
    result.remainder_norm = float(np.max(
        _flat_norms(rem) / dt ** (2.0 * params.alpha)))
    result.remainder_bound = _remainder_cap(norms, wn["total"], params,
                                            out_grid.horizon)
    return result


# ---------------------------------------------------------------------------
# stability metrics


class _FieldDifference:
    """Increment-field difference for the weighted norm protocol."""

    def __init__(self, a, b):
        self._a = a
        self._b = b
        self.grid = a.grid

    def value(self, i, j, x):
        return self._a.value(i, j, x) - self._b.value(i, j, x)

    def deriv(self, i, j, x, k):
        return self._a.deriv(i, j, x, k) - self._b.deriv(i, j, x, k)


class _PairFieldDifference:
    """Second-level field difference for the weighted norm protocol."""

    def __init__(self, a, b):
        self._a = a
        self._b = b
        self.grid = a.grid

    def value(self, i, j, x, y):
        return self._a.value(i, j, x, y) - self._b.value(i, j, x, y)

    def deriv(self, i, j, x, y, slot, k=1):
        return (self._a.deriv(i, j, x, y, slot, k)
                - self._b.deriv(i, j, x, y, slot, k))

    def deriv_mixed(self, i, j, x, y):
        return (self._a.deriv_mixed(i, j, x, y)
                - self._b.deriv_mixed(i, j, x, y))


def driver_distance(a, b, params: AnalysisParams, samples,
                    pair_budget="dyadic_spans") -> float:
    """Weighted distance between two drivers: the order-0..3 increment
    difference norm plus the order-0..2 second-level difference norm."""
    _check_same_grid(a.grid, b.grid, "drivers")
    beta = params.beta
    _, wd = weighted_increment_norm(
        _FieldDifference(a.increment_field(), b.increment_field()),
        params, samples, orders=[0, 1, 2, 3], pair_budget=pair_budget)
    orders = [0, 1, 2]
    wx = [max(beta[: k + 1]) for k in orders]
    wy = [max(beta[1: k + 2]) for k in orders]
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    _, wwd = weighted_pair_norm(
        _PairFieldDifference(a.second_level_field(), b.second_level_field()),
        params, x, x, orders, wx, wy, pair_budget=pair_budget)
    return wd + wwd


@dataclass
class IntegralStabilityReport:
    """Continuity bound for integral outputs: the output distance against
    c3 * rho + c4 * initial gap + c5 * input distance."""

    rho: float
    c3: float
    c4: float
    c5: float
    input_distance: float
    init_gap: float
    bound: float
    ok: bool


@dataclass
class StabilityReport:
    """Distance between controlled pairs with its analytic cross-checks."""

    distance: float
    ydot_gap: float
    remainder_gap: float
    y_gap: float
    lemma_bound: float
    lemma_ok: bool
    integral: IntegralStabilityReport | None = None


def _pair_samples(a: NLControlledPath, b: NLControlledPath, per_block=6):
    blocks = [a.y.values, a.ydot.values, b.y.values, b.ydot.values,
              0.5 * (a.y.values + b.y.values),
              0.5 * (a.ydot.values + b.ydot.values)]
    out = []
    for blk in blocks:
        if len(blk) > per_block:
            blk = blk[np.linspace(0, len(blk) - 1, per_block).astype(int)]
        out.append(blk)
    return np.unique(np.concatenate(out, axis=0), axis=0)


def stability_distance(a: NLControlledPath, b: NLControlledPath, drivers,
                       params: AnalysisParams, inputs=None,
                       pair_budget="dyadic_spans") -> StabilityReport:
    """Distance |Ydot - Ydot~|_alpha + |R - R~|_{2 alpha} with checks.

    drivers is the pair the two paths are controlled by (a single driver
    is used for both). The alpha-seminorm of Y - Y~ is compared with its
    bound in terms of the distance, the driver difference and the initial
    derivative gap. When the paths are integral outputs, pass the input
    pair via inputs to also evaluate the integral continuity inequality
    with constants c3, c4, c5 from estimated norms.
    """
    if not isinstance(drivers, (tuple, list)):
        drivers = (drivers, drivers)
    da, db = drivers
    _check_same_grid(a.grid, b.grid, "controlled pairs")
    if a.y.values.shape != b.y.values.shape:
        raise ValueError("controlled pairs must have matching shapes")
    grid = a.grid
    alpha = params.alpha
    ydot_gap = holder_seminorm(
        SampledPath(grid, a.ydot.values - b.ydot.values), alpha, pair_budget)
    i, j = grid.span_pairs(pair_budget)
    dt = grid.times[j] - grid.times[i]
    rgap = _flat_norms(a.remainder(da, i, j) - b.remainder(db, i, j))
    remainder_gap = float(np.max(rgap / dt ** (2.0 * alpha)))
    distance = ydot_gap + remainder_gap

    y_gap = holder_seminorm(
        SampledPath(grid, a.y.values - b.y.values), alpha, pair_budget)
    samples = _pair_samples(a, b)
    beta = params.beta
    _, wd1 = weighted_increment_norm(
        _FieldDifference(da.increment_field(), db.increment_field()),
        params, samples, orders=[0, 1], pair_budget=pair_budget)
    _, wt1 = weighted_increment_norm(
        db.increment_field(), params, samples, orders=[0, 1],
        pair_budget=pair_budget)
    sup_a = float(np.max(_flat_norms(a.ydot.values)))
    sup_b = float(np.max(_flat_norms(b.ydot.values)))
    init_dot = float(_flat_norms(
        a.ydot.values[:1] - b.ydot.values[:1])[0])
    t_pow = grid.horizon**alpha
    lemma_bound = ((1.0 + sup_a) ** beta[0] * wd1
                   + wt1 * (1.0 + sup_a + sup_b) ** beta[1] * init_dot
                   + t_pow * (1.0 + wt1)
                   * (1.0 + sup_a + sup_b) ** beta[1] * distance)
    lemma_ok = bool(y_gap <= lemma_bound * (1.0 + _RTOL_BOUND) + 1e-12)
    rep = StabilityReport(distance=distance, ydot_gap=ydot_gap,
                          remainder_gap=remainder_gap, y_gap=y_gap,
                          lemma_bound=lemma_bound, lemma_ok=lemma_ok)
    if inputs is None:
        return rep

    in_a, in_b = inputs
    rho = driver_distance(da, db, params, samples, pair_budget)
    wt3 = weighted_driver_norm(db, params, samples, order=3,
                               pair_budget=pair_budget)["total"]
    na = _ctrl_norms(in_a, da, params, pair_budget)
    nb = _ctrl_norms(in_b, db, params, pair_budget)
    bs2 = max(beta[0], beta[1], beta[2])
    bss2 = max(beta[1], beta[2], beta[3])
    ka = k_alpha(alpha)
    t1 = 1.0 + t_pow
    wy = (1.0 + 2.0 * na["y_sup"] + 2.0 * nb["y_sup"]) ** bss2
    wd_base = 1.0 + 2.0 * na["ydot_sup"] + 2.0 * nb["ydot_sup"]
    ya, yb = na["y_alpha"], nb["y_alpha"]
    da_, db_ = na["ydot_alpha"], nb["ydot_alpha"]
    ry = na["remainder"]
    c3 = (2.0 * ka * t1**2 * (1.0 + wt3) * wy
          * wd_base ** (bs2 + max(beta[0], beta[1]))
          * (1.0 + ya + yb + (ya + yb) ** 2 + ry))
    c4 = (5.0 * ka * t1**2 * (wt3 + wt3**2) * wy
          * wd_base ** (bs2 + beta[1])
          * (1.0 + ya + da_ + yb + db_ + (ya + yb) ** 2 + ry))
    c5 = (6.0 * ka * t_pow * t1 * (1.0 + wt3) ** 2 * wy
          * wd_base ** (bs2 + beta[1])
          * (1.0 + t_pow * (ya + da_ + yb + db_)
             + t_pow**2 * ((ya + yb) ** 2 + ry)))
    ii, jj = in_a.grid.span_pairs(pair_budget)
    din_dot = holder_seminorm(
        SampledPath(in_a.grid, in_a.ydot.values - in_b.ydot.values),
        alpha, pair_budget)
    dtin = in_a.grid.times[jj] - in_a.grid.times[ii]
    din_rem = float(np.max(
        _flat_norms(in_a.remainder(da, ii, jj) - in_b.remainder(db, ii, jj))
        / dtin ** (2.0 * alpha)))
    input_distance = din_dot + din_rem
    init_gap = float(_flat_norms(in_a.y.values[:1] - in_b.y.values[:1])[0]
                     + _flat_norms(in_a.ydot.values[:1]
                                   - in_b.ydot.values[:1])[0])
    bound = c3 * rho + c4 * init_gap + c5 * input_distance
    rep.integral = IntegralStabilityReport(
        rho=rho, c3=c3, c4=c4, c5=c5, input_distance=input_distance,
        init_gap=init_gap, bound=bound,
        ok=bool(distance <= bound * (1.0 + _RTOL_BOUND) + 1e-12))
    return rep


# ---------------------------------------------------------------------------
# reduction to the linear pipeline


@dataclass
class ReductionReport:
    """Two routes to the same integral: the compensated nonlinear sums,
    and the linear rough integral of the path-slope against the lifted
    path plus half the second path-derivative against the bracket."""

    sup_gap: float
    nonlinear_path: SampledPath
    linear_path: SampledPath
    young_path: SampledPath
    integral: NLIntegralResult
    linear_report: SewingBoundReport | None = None


def reduction_to_linear(bundle, rp, ctrl: NLControlledPath, params=None,
                        report=False) -> ReductionReport:
    """Check that composing a bundle with a lifted path integrates the
    same both ways.

    Left route: compensated sums of the composition driver along ctrl.
    Right route: linear rough integral of G_t = D_x f(X_t, Y_t) with
    Gubinelli slope D_xx f(X, Y) + D_xy f(X, Y) . D_x f(X, Ydot), plus a
    left-point Young integral of half D_xx f(X, Y) against the bracket
    of X. Returns the sup gap over grid times.
    """
    _check_same_grid(rp.grid, ctrl.grid, "path and lift")
    drv = composition_driver(bundle, rp, params)
    left = nl_rough_integral(ctrl, drv, params=params, report=report)

    grid = ctrl.grid
    xv = rp.x.values
    yv = ctrl.y.values
    ydv = ctrl.ydot.values
    g = bundle.partial(1, 0)(xv, yv)
    p20 = bundle.partial(2, 0)(xv, yv)
    gp = p20 + np.einsum('nial,nlb->niab',
                         bundle.partial(1, 1)(xv, yv),
                         bundle.partial(1, 0)(xv, ydv))
    gamma = 3.0 * params.alpha if (report and params is not None) else None
    lin, lin_report = rough_integral(
        ControlledPath(SampledPath(grid, g), gp), rp, gamma=gamma)

    steps = np.arange(grid.n_points - 1)
    br = rp.bracket(steps, steps + 1)
    young_atoms = 0.5 * np.einsum('niab,nab->ni', p20[:-1], br)
    young = np.concatenate(
        [np.zeros_like(young_atoms[:1]), np.cumsum(young_atoms, axis=0)],
        axis=0)
    right = lin.y.values + young
    gap = float(np.max(_flat_norms(left.output.y.values - right)))
    return ReductionReport(
        sup_gap=gap,
        nonlinear_path=left.output.y,
        linear_path=lin.y,
        young_path=SampledPath(grid, young),
        integral=left,
        linear_report=lin_report)
