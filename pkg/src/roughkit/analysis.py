"""Grids, sampled paths, seminorm estimators and solver step-size constants.

Everything downstream works on dyadic grids over [0, T] with a Hölder
exponent alpha in (1/3, 1/2] and a weight multi-index beta = (b0, b1, b2, b3).
Norm estimators here are grid estimators: maxima over sampled pairs, hence
lower bounds of the continuum quantities, monotone under grid refinement.
All reductions are deterministic (fixed summation order, numpy maxima).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MAX_LEVEL = 24
# above this many grid points, pair scans switch to dyadic-multiple spans
PAIR_BUDGET = 1025


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class AnalysisParams:
    """Analytic context: Hölder exponent, horizon and spatial growth weights.

    beta holds the growth orders (b0, b1, b2, b3) of a driver and its first
    three spatial derivatives. gamma1 and gamma2 are the derived growth
    aggregates used by the step-size constants.
    """

    alpha: float
    horizon: float = 1.0
    beta: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        problems = validate_params(self.alpha, self.horizon, self.beta)
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def gamma1(self) -> float:
        b = self.beta
        return max(b[0], b[1]) + max(b[1], b[2])

    @property
    def gamma2(self) -> float:
        b = self.beta
        return max(b[0], b[1], b[2]) + max(b[1], b[2], b[3]) + b[1]


def validate_params(alpha, horizon, beta):
    """Collects every violation instead of stopping at the first."""
    problems = []
    if not (1.0 / 3.0 < alpha <= 0.5):
        problems.append(f"alpha must lie in (1/3, 1/2], got {alpha}")
    if not horizon > 0:
        problems.append(f"horizon must be positive, got {horizon}")
    if len(beta) != 4:
        problems.append(f"beta needs four orders, got {len(beta)}")
    elif any(b < 0 for b in beta):
        problems.append(f"beta orders must be nonnegative, got {beta}")
    if not problems and len(beta) == 4:
        b = beta
        g1 = max(b[0], b[1]) + max(b[1], b[2])
        g2 = max(b[0], b[1], b[2]) + max(b[1], b[2], b[3]) + b[1]
        if g1 > g2 + 1e-15:
            problems.append(f"gamma1={g1} exceeds gamma2={g2}")
    return problems


# ---------------------------------------------------------------------------
# grids and sampled data


@dataclass(frozen=True)
class TimeGrid:
    """Increasing times on [0, T]; dyadic grids carry their level."""

    times: np.ndarray
    level: int | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("grid needs at least two times")
        if np.any(np.diff(t) <= 0):
            raise ValueError("grid times must be strictly increasing")

    @property
    def n_points(self) -> int:
        return self.times.size

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def mesh(self) -> float:
        return float(np.max(np.diff(self.times)))

    def span_pairs(self, budget="auto"):
        """Index pairs (i, j), i < j, honoring the pair budget.

        budget "all" forces every pair, "dyadic_spans" forces spans that are
        dyadic multiples of the mesh, "auto" picks by PAIR_BUDGET.
        """
        n = self.n_points
        if budget == "auto":
            budget = "all" if n <= PAIR_BUDGET else "dyadic_spans"
        if budget == "all":
            lags = range(1, n)
        elif budget == "dyadic_spans":
            lags = []
            lag = 1
            while lag < n:
                lags.append(lag)
                lag *= 2
            if (n - 1) not in lags:
                lags.append(n - 1)  # keep the full span
        else:
            raise ValueError(f"unknown pair budget {budget!r}")
        out_i, out_j = [], []
        for lag in lags:
            i = np.arange(0, n - lag)
            out_i.append(i)
            out_j.append(i + lag)
        return np.concatenate(out_i), np.concatenate(out_j)


def make_grid(horizon: float, level: int) -> TimeGrid:
    """Dyadic grid t_k = k * horizon / 2^level."""
    if not (0 <= level <= MAX_LEVEL):
        raise ValueError(f"level must lie in [0, {MAX_LEVEL}], got {level}")
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    step = horizon * 2.0 ** (-level)  # exact scaling by a power of two
    times = np.arange(2**level + 1, dtype=float) * step
    return TimeGrid(times=times, level=level)


@dataclass(frozen=True)
class SampledPath:
    """Values on a grid; values[k] belongs to grid.times[k].

    values has shape (n_points, ...); vector paths use (n, d), matrix paths
    (n, p, q) and so on. Trailing axes are the value shape.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        object.__setattr__(self, "values", v)
        if v.shape[0] != self.grid.n_points:
            raise ValueError(
                f"{v.shape[0]} samples for {self.grid.n_points} grid points"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("path values must be finite")

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def increments(self, i, j):
        return self.values[j] - self.values[i]


class TwoParamField:
    """Two-parameter grid field A_{s,t}: lazy pairwise evaluation.

    Backed either by a dense (n, n, ...) array or by a vectorized callable
    (i_array, j_array) -> (npairs, ...). Constructed lifts use the callable
    form (prefix sums, O(1) per pair); corrupted/custom data uses dense.
    """

    def __init__(self, grid: TimeGrid, shape: tuple, eval_fn=None, dense=None):
        self.grid = grid
        self.shape = tuple(shape)
        self._fn = eval_fn
        self._dense = dense
        if (eval_fn is None) == (dense is None):
            raise ValueError("exactly one of eval_fn/dense required")
        if dense is not None:
            dense = np.asarray(dense, dtype=float)
            n = grid.n_points
            if dense.shape[: 2] != (n, n) or dense.shape[2:] != self.shape:
                raise ValueError("dense field shape mismatch")
            self._dense = dense

    @classmethod
    def from_dense(cls, grid, dense):
        dense = np.asarray(dense, dtype=float)
        return cls(grid, dense.shape[2:], dense=dense)

    @classmethod
    def from_callable(cls, grid, shape, fn):
        return cls(grid, shape, eval_fn=fn)

    def eval(self, i, j):
        i = np.atleast_1d(np.asarray(i, dtype=int))
        j = np.atleast_1d(np.asarray(j, dtype=int))
        if self._dense is not None:
            return self._dense[i, j]
        return self._fn(i, j)

    def value(self, i: int, j: int):
        return self.eval([i], [j])[0]

    def materialize(self) -> np.ndarray:
        if self._dense is not None:
            return self._dense.copy()
        n = self.grid.n_points
        out = np.zeros((n, n) + self.shape)
        jj = np.arange(n)
        for i in range(n):
            out[i] = self.eval(np.full(n, i), jj)
        return out


# ---------------------------------------------------------------------------
# seminorm estimators


def _flat_norms(values, batch_ndim=1):
    """Frobenius norm over all axes past the first batch_ndim."""
    v = np.asarray(values, dtype=float)
    flat = v.reshape(v.shape[:batch_ndim] + (-1,))
    return np.sqrt(np.sum(flat * flat, axis=-1))


def holder_seminorm(subject, alpha: float, pair_budget="auto") -> float:
    """Grid Hölder seminorm: max |A_{s,t}| / |t-s|^alpha over sampled pairs.

    subject is a SampledPath (increments) or TwoParamField (direct values).
    A lower bound of the continuum seminorm; refining the grid can only
    increase it.
    """
    if isinstance(subject, SampledPath):
        grid = subject.grid
        i, j = grid.span_pairs(pair_budget)
        vals = subject.increments(i, j)
    elif isinstance(subject, TwoParamField):
        grid = subject.grid
        i, j = grid.span_pairs(pair_budget)
        vals = subject.eval(i, j)
    else:
        raise TypeError(f"cannot take a seminorm of {type(subject).__name__}")
    dt = grid.times[j] - grid.times[i]
    ratios = _flat_norms(vals) / dt**alpha
    return float(np.max(ratios))


def weighted_increment_norm(field, params: AnalysisParams, samples,
                            orders, exponent=None, pair_budget="auto",
                            pairs=None):
    """Weighted time-Hölder norms of a one-slot increment field.

    field exposes value(i, j, x) -> (npts, d) and deriv(i, j, x, k) ->
    (npts, d, d, ...) for k <= max(orders). For each order k the estimator is

        max over pairs, samples of |D^k field_{s,t}(x)| / (dt^a (1+|x|)^b_k)

    Returns (per_order_list, total) with total the left-to-right sum.
    pairs overrides the budgeted span scan with explicit index arrays.
    """
    if exponent is None:
        exponent = params.alpha
    grid = field.grid
    if pairs is None:
        i, j = grid.span_pairs(pair_budget)
    else:
        i = np.asarray(pairs[0], dtype=int)
        j = np.asarray(pairs[1], dtype=int)
    dt = grid.times[j] - grid.times[i]
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    weights = (1.0 + _flat_norms(x)) ** np.asarray(
        [params.beta[k] for k in orders]
    )[:, None]
    per_order = []
    for pos, k in enumerate(orders):
        best = 0.0
        for a, b, h in zip(i, j, dt):
            if k == 0:
                vals = field.value(a, b, x)
            else:
                vals = field.deriv(a, b, x, k)
            ratios = _flat_norms(vals) / (h**exponent * weights[pos])
            best = max(best, float(np.max(ratios)))
        per_order.append(best)
    total = 0.0
    for v in per_order:
        total += v
    return per_order, total


def weighted_pair_norm(field2, params: AnalysisParams, samples_x, samples_y,
                       orders, weights_x, weights_y, exponent=None,
                       pair_budget="auto", pairs=None):
    """Weighted norms of a two-slot increment field (second-level data).

    field2 exposes value(i, j, x, y) and deriv(i, j, x, y, slot) with slot in
    {1, 2}. Order-k joint derivative norms are estimated by the max over the
    slot-wise derivative blocks; at order 2 a deriv_mixed(i, j, x, y) hook is
    included when the field provides one. weights_x/weights_y give the growth
    order per requested order. pairs overrides the budgeted span scan.
    """
    if exponent is None:
        exponent = 2.0 * params.alpha
    grid = field2.grid
    if pairs is None:
        i, j = grid.span_pairs(pair_budget)
    else:
        i = np.asarray(pairs[0], dtype=int)
        j = np.asarray(pairs[1], dtype=int)
    dt = grid.times[j] - grid.times[i]
    x = np.atleast_2d(np.asarray(samples_x, dtype=float))
    y = np.atleast_2d(np.asarray(samples_y, dtype=float))
    if x.shape != y.shape:
        raise ValueError("paired sample sets must match in shape")
    per_order = []
    for pos, k in enumerate(orders):
        wx = (1.0 + _flat_norms(x)) ** weights_x[pos]
        wy = (1.0 + _flat_norms(y)) ** weights_y[pos]
        best = 0.0
        for a, b, h in zip(i, j, dt):
            if k == 0:
                cands = [field2.value(a, b, x, y)]
            else:
                cands = [field2.deriv(a, b, x, y, slot, k) for slot in (1, 2)]
                mixed = getattr(field2, "deriv_mixed", None)
                if k == 2 and mixed is not None:
                    cands.append(mixed(a, b, x, y))
            for vals in cands:
                ratios = _flat_norms(vals) / (h**exponent * wx * wy)
                best = max(best, float(np.max(ratios)))
        per_order.append(best)
    total = 0.0
    for v in per_order:
        total += v
    return per_order, total


def weighted_driver_norm(driver, params: AnalysisParams, samples,
                         order: int = 2, pair_budget="auto", pairs=None):
    """Estimate of the full driver norm up to the given derivative order.

    Combines the weighted Hölder norm of the increments W_{s,t} (orders
    0..order, weights beta) with the weighted 2*alpha norm of the second
    level (orders 0..order-1, weights max(b0..bk) and max(b1..b_{k+1})).
    Returns a dict with the per-order terms and the combined total.
    """
    orders_w = list(range(order + 1))
    w_field = driver.increment_field()
    per_w, tot_w = weighted_increment_norm(
        w_field, params, samples, orders_w, pair_budget=pair_budget,
        pairs=pairs,
    )
    result = {
        "w_terms": per_w,
        "w_total": tot_w,
        "ww_terms": [],
        "ww_total": 0.0,
    }
    ww_field = getattr(driver, "second_level_field", None)
    if ww_field is not None and order >= 1:
        b = params.beta
        orders_ww = list(range(order))
        wx = [max(b[: k + 1]) for k in orders_ww]          # max(b0..bk)
        wy = [max(b[1: k + 2]) for k in orders_ww]         # max(b1..b_{k+1})
        x = np.atleast_2d(np.asarray(samples, dtype=float))
        per_ww, tot_ww = weighted_pair_norm(
            driver.second_level_field(), params, x, x,
            orders_ww, wx, wy, pair_budget=pair_budget, pairs=pairs,
        )
        result["ww_terms"] = per_ww
        result["ww_total"] = tot_ww
    result["total"] = result["w_total"] + result["ww_total"]
    return result


# ---------------------------------------------------------------------------
# step-size constants


def sewing_constant(gamma: float) -> float:
    """(1 - 2^{1-gamma})^{-1}; finite for gamma > 1."""
    if gamma <= 1:
        raise ValueError(f"sewing needs gamma > 1, got {gamma}")
    return 1.0 / (1.0 - 2.0 ** (1.0 - gamma))


def k_alpha(alpha: float) -> float:
    """Sewing constant at regularity 3*alpha; decreasing in alpha."""
    return sewing_constant(3.0 * alpha)


@dataclass(frozen=True)
class ConstantsReport:
    """Step-size and growth constants for the compensated-sum solvers.

    k_alpha: sewing constant at exponent 3*alpha.
    C1: integral defect constant per unit controlled-path norm.
    C6: contraction constant; h2 = [2 C6 (1+|W|)^2 (1+|xi|)^g2]^{-1/alpha},
        capped at h1, is the window length with contraction rate <= 1/2.
    h1: local existence step (capped at 1).
    C7, K0: global window-recursion constants (eps_{n+1} >= 1/(1/eps_n + K0)).
    growth_index: gamma2/alpha - gamma2 + beta0; global solvability needs <= 1.
    """

    alpha: float
    beta: tuple
    driver_norm: float
    xi_norm: float
    k_alpha: float
    C1: float
    C6: float
    C7: float
    K0: float
    h1: float
    h2: float
    gamma1: float
    gamma2: float
    growth_index: float
    growth_condition_holds: bool

    def as_dict(self):
        out = {}
        for name in (
            "alpha", "driver_norm", "xi_norm", "k_alpha", "C1", "C6", "C7",
            "K0", "h1", "h2", "gamma1", "gamma2", "growth_index",
        ):
            out[name] = float(getattr(self, name))
        out["beta"] = [float(b) for b in self.beta]
        out["growth_condition_holds"] = bool(self.growth_condition_holds)
        return out


def step_constants(params: AnalysisParams, driver_norm: float,
                   xi_norm: float) -> ConstantsReport:
    """Solver constants from the analytic context and measured norms.

    Conventions: 0^0 := 1 in the gamma1^{-gamma1} factor; the gamma1 floor
    max(gamma1, 1) applies only inside the 1/(3 gamma1^2) and 1/(3 gamma1)
    factors of C6; h2 is capped at h1. With gamma1 = 0 the first-window
    bounds degenerate and C7, K0 may be infinite (handled downstream).
    """
    a = params.alpha
    b = params.beta
    # float64 semantics so extreme exponents saturate to inf instead of
    # raising; infinities are meaningful in the report (no usable window)
    g1 = np.float64(params.gamma1)
    g2 = np.float64(params.gamma2)
    ka = np.float64(k_alpha(a))
    w = np.float64(driver_norm)
    xi = np.float64(xi_norm)

    with np.errstate(over="ignore"):
        c1 = ka * w * (1.0 + 2.0 * xi) ** max(b[0], b[1]) \
            * (1.0 + 2.0 * xi) ** max(b[1], b[2])

        # local existence step, 0^0 := 1
        g1_pow = np.float64(1.0) if g1 == 0.0 else g1 ** (-g1)
        denom = 12.0 * ka * w * (1.0 + g1) ** (1.0 + g1) * g1_pow \
            * (1.0 + 2.0 * xi) ** g1
        h1 = 1.0 if denom == 0.0 else min(1.0, float(denom ** (-1.0 / a)))

        g1f = max(g1, 1.0)  # floor only inside the two reciprocal factors
        arm1 = 2.0 * (18.0 * g1 * g1 + 15.0 * g1 + 2.0) / (3.0 * g1f * g1f) \
            * ka * ((3.0 * g1 + 2.0) / (3.0 * g1f) + 4.0) ** g2
        arm2 = 12.0 * ka * (1.0 + g1) ** (1.0 + g1) * g1_pow
        c6 = max(arm1, arm2)

        if g1 == 0.0:
            c7 = np.float64(np.inf)
        else:
            c7 = (1.0 + 1.0 / (6.0 * g1)) ** (1.0 + b[0]) / (2.0 * c6)
        if g2 == 0.0:
            k0 = np.float64(0.0)  # windows do not shrink
        elif not math.isfinite(c7):
            k0 = np.float64(np.inf)
        else:
            k0 = (2.0 * c6 * (1.0 + w) ** 2) ** (1.0 / a) * (g2 / a) \
                * c7 * (1.0 + c7) ** (g2 / a)

        h2_raw = (2.0 * c6 * (1.0 + w) ** 2 * (1.0 + xi) ** g2) ** (-1.0 / a)
        h2 = min(float(h2_raw), h1)

    index = float(g2) / a - float(g2) + b[0]
    return ConstantsReport(
        alpha=float(a), beta=tuple(float(v) for v in b),
        driver_norm=float(w), xi_norm=float(xi), k_alpha=float(ka),
        C1=float(c1), C6=float(c6), C7=float(c7), K0=float(k0),
        h1=float(h1), h2=float(h2), gamma1=float(g1), gamma2=float(g2),
        growth_index=index,
        growth_condition_holds=bool(index <= 1.0 + 1e-12),
    )


def first_window_bounds(report: ConstantsReport):
    """A-priori bounds on the first window [0, h1].

    Returns (holder_cap, sup_cap): the Hölder-seminorm cap
    min{(1 + 1/(6 g1))^{1+b0} (1+|W|)(1+|xi|)^{b0},
        2 k_a ((1+g1)/g1)^{1+g1} |W| (1+2|xi|)^{g1}}
    and the sup cap |xi| + 1/(6 g1). Both are inf when gamma1 = 0.
    """
    g1 = report.gamma1
    b0 = report.beta[0]
    if g1 == 0.0:
        return math.inf, math.inf
    holder_a = (1.0 + 1.0 / (6.0 * g1)) ** (1.0 + b0) \
        * (1.0 + report.driver_norm) * (1.0 + report.xi_norm) ** b0
    holder_b = 2.0 * report.k_alpha * ((1.0 + g1) / g1) ** (1.0 + g1) \
        * report.driver_norm * (1.0 + 2.0 * report.xi_norm) ** g1
    sup_cap = report.xi_norm + 1.0 / (6.0 * g1)
    return min(holder_a, holder_b), sup_cap
