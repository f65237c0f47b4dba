"""Spatially parameterized flows and the rough transport equation.

Solving dY = W(dt, Y) from every point of a box grid gives a flow map
x -> Y_t(x). This module differentiates that map in its starting
point, inverts it between the base points by Newton iteration, and
transports an initial profile h along the inverse characteristics,
u(t, x) = h(Z_t(x)), together with a per-step residual certificate for
the compensated transport identity.

The derivative flow is linear in a rough driver built from the spatial
gradient of W along the solution: per step, f stacks the DW increment
at the running state plus the outer-derivative pairing germ, ff stacks
the pairing of the DW increments with themselves. The Jacobian DY
solves the left equation dDY = dF DY from the identity; its inverse M
solves dM = -M dF plus the Young bracket term [M]^L d<F> with
<F> = f (x) f - 2 ff. Both use the shared second-order linear scheme,
so the product DY * M stays within the scheme's own defect of the
identity instead of requiring a matrix inversion per node.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .analysis import TimeGrid
from .linear import solve_linear_rde
from .rde import measure_driver_norm, solve_rde

__all__ = [
    "FlowField",
    "FlowInversionError",
    "InverseFlow",
    "RPDESolution",
    "SpatialFunction",
    "TransportReport",
    "box_points",
    "fd_jacobian_gap",
    "forward_gap",
    "inverse_expansion_gap",
    "invert_flow",
    "jacobians",
    "roundtrip_gap",
    "rpde_residual",
    "rpde_solution",
    "solve_flow",
    "spatial_function",
]

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50


class FlowInversionError(RuntimeError):
    """Newton inversion failed or left the solved spatial hull."""


def box_points(axes):
    """Cartesian product of per-dimension coordinate arrays, C order,
    as an (m, d) array of base points."""
    axes = tuple(np.asarray(a, dtype=float).reshape(-1) for a in axes)
    for a in axes:
        if a.size < 2 or np.any(np.diff(a) <= 0.0):
            raise ValueError("each axis needs >= 2 strictly increasing "
                             "coordinates")
        if not np.all(np.isfinite(a)):
            raise ValueError("axis coordinates must be finite")
    mesh = np.meshgrid(*axes, indexing="ij")
    return axes, np.stack([g.reshape(-1) for g in mesh], axis=-1)


@dataclass
class FlowField:
    """Forward flow on a box of starting points, plus (after
    jacobians) the derivative flow DY, its inverse M, and the per-step
    linear-driver tables used by both."""

    driver: object
    axes: tuple
    points: np.ndarray
    grid: TimeGrid
    y: np.ndarray
    t_solved: float
    mode: str
    constants: object
    reference: object
    batch_gap: float
    dy: np.ndarray | None = None
    m: np.ndarray | None = None
    f_steps: np.ndarray | None = None
    ff_steps: np.ndarray | None = None
    bracket_steps: np.ndarray | None = None
    inverse_gap: float | None = None

    @property
    def dim(self):
        return self.points.shape[-1]

    @property
    def n_times(self):
        return self.y.shape[0]


def _w_steps(driver, ks, pts):
    """Per-step increments W_{t_k, t_{k+1}} at aligned points."""
    if hasattr(driver, "step_increment"):
        return driver.step_increment(ks, pts)
    return driver.increment(ks, ks + 1, pts)


def solve_flow(driver, axes, params=None, mode="onestep", scope="global",
               horizon=None, tol=1e-10, max_iter=60):
    """Solve dY = W(dt, Y) from every point of the box grid.

    mode onestep advances the whole point batch at once with the
    compensated per-step recurrence (identical arithmetic to the
    per-point solver; the first point is cross-checked against an
    actual solve_rde call and the gap is stored). mode picard
    delegates every point to solve_rde. The driver norm is measured
    once at the box centroid and shared across points.
    """
    axes, points = box_points(axes)
    m = points.shape[0]
    d = points.shape[1]
    if d != driver.dim:
        raise ValueError(f"axes give dimension {d}, driver acts on "
                         f"dimension {driver.dim}")
    if params is None:
        params = getattr(driver, "params", None)
    norm = measure_driver_norm(driver, params, points.mean(axis=0)) \
        if params is not None else None
    ref = solve_rde(driver, points[0], params=params, mode=mode,
                    scope=scope, horizon=horizon, tol=tol,
                    max_iter=max_iter, driver_norm=norm)
    nt = ref.values.shape[0]
    vals = np.empty((nt, m, d))
    vals[0] = points
    if mode == "picard":
        vals[:, 0] = ref.values
        for p in range(1, m):
            sol = solve_rde(driver, points[p], params=params, mode=mode,
                            scope=scope, horizon=horizon, tol=tol,
                            max_iter=max_iter, driver_norm=norm)
            if sol.t_solved != ref.t_solved:
                raise FloatingPointError(
                    "per-point existence windows disagree: "
                    f"{sol.t_solved} vs {ref.t_solved}")
            vals[:, p] = sol.values
        gap = 0.0
    else:
        for k in range(nt - 1):
            ka = np.array([k])
            step = (_w_steps(driver, ka, vals[k])
                    + driver.second_step(ka, vals[k], vals[k]))
            vals[k + 1] = vals[k] + step
            if not np.all(np.isfinite(vals[k + 1])):
                raise FloatingPointError(
                    f"non-finite flow state at step {k + 1}")
        gap = float(np.max(np.abs(vals[:, 0] - ref.values)))
        if gap > 1e-10:
            raise FloatingPointError(
                f"batched recurrence drifted {gap:.3e} from the "
                "per-point solver")
    return FlowField(driver=driver, axes=axes, points=points,
                     grid=ref.y.grid, y=vals, t_solved=ref.t_solved,
                     mode=mode, constants=ref.constants, reference=ref,
                     batch_gap=gap)


def jacobians(flow):
    """Populate DY, M and the derivative-driver tables on the flow.

    Per base point and step, f is the DW increment at the running
    state corrected by the outer-derivative pairing germ; ff pairs the
    DW increments with themselves through the path's second level.
    DY solves the left linear equation from I; M solves the right
    equation with the Young bracket increments f (x) f - 2 ff. The sup
    of |DY M - I| over all stored nodes lands in inverse_gap.
    """
    drv = flow.driver
    nt, m, d = flow.y.shape
    n_steps = nt - 1
    ks = np.arange(n_steps)
    f = np.empty((n_steps, m, d, d))
    ff = np.empty((n_steps, m, d, d, d, d))
    for p in range(m):
        ys = flow.y[:-1, p]
        f[:, p] = (drv.d_step_increment(ks, ys)
                   + drv.d_second_step(ks, ys, ys, slot=2))
        ff[:, p] = drv.d_pair_step(ks, ys)
    br = np.einsum('...pq,...rs->...pqrs', f, f) - 2.0 * ff
    init = np.broadcast_to(np.eye(d), (m, d, d)).copy()
    dy_ops = (lambda z, g: np.einsum('...ij,...jk->...ik', g, z),
              lambda z, gg: np.einsum('...mjim,...jk->...ik', gg, z))
    m_ops = (lambda z, g: -np.einsum('...ip,...pj->...ij', z, g),
             lambda z, gg: np.einsum('...ip,...pmmj->...ij', z, gg))
    y_apply = lambda z, b: np.einsum('...ip,...pqqj->...ij', z, b)
    flow.dy = solve_linear_rde(dy_ops, (f, ff), init,
                               grid=flow.grid).values
    flow.m = solve_linear_rde(m_ops, (f, ff), init, young=(br, y_apply),
                              grid=flow.grid).values
    flow.f_steps = f
    flow.ff_steps = ff
    flow.bracket_steps = br
    prod = np.einsum('...ij,...jk->...ik', flow.dy, flow.m)
    flow.inverse_gap = float(np.max(np.abs(prod - np.eye(d))))
    return flow


class _BoxInterp:
    """Multilinear interpolation of per-point tables over the box grid
    (exact for values that are affine in the coordinates)."""

    def __init__(self, axes, values):
        self.axes = axes
        shape = tuple(a.size for a in axes)
        self.values = np.asarray(values).reshape(shape + values.shape[1:])
        self.d = len(axes)

    def _locate(self, q):
        cells, weights, spans = [], [], []
        for a, ax in enumerate(self.axes):
            c = np.clip(np.searchsorted(ax, q[:, a], side="right") - 1,
                        0, ax.size - 2)
            h = ax[c + 1] - ax[c]
            cells.append(c)
            weights.append((q[:, a] - ax[c]) / h)
            spans.append(h)
        return cells, weights, spans

    def __call__(self, q):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        cells, weights, _ = self._locate(q)
        tail = self.values.shape[self.d:]
        acc = np.zeros((q.shape[0],) + tail)
        for corner in itertools.product((0, 1), repeat=self.d):
            wgt = np.ones(q.shape[0])
            sel = []
            for a, bit in enumerate(corner):
                wgt = wgt * (weights[a] if bit else 1.0 - weights[a])
                sel.append(cells[a] + bit)
            acc += wgt.reshape((-1,) + (1,) * len(tail)) \
                * self.values[tuple(sel)]
        return acc

    def gradient(self, q):
        """Interpolant slope in each coordinate, stacked on a new last
        axis: (batch, tail..., d)."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        cells, weights, spans = self._locate(q)
        tail = self.values.shape[self.d:]
        out = np.zeros((q.shape[0],) + tail + (self.d,))
        for corner in itertools.product((0, 1), repeat=self.d):
            sel = [cells[a] + bit for a, bit in enumerate(corner)]
            vals = self.values[tuple(sel)]
            for g in range(self.d):
                wgt = np.ones(q.shape[0])
                for a, bit in enumerate(corner):
                    if a == g:
                        wgt = wgt * ((1.0 if bit else -1.0) / spans[a])
                    else:
                        wgt = wgt * (weights[a] if bit else 1.0 - weights[a])
                out[..., g] += wgt.reshape((-1,) + (1,) * len(tail)) * vals
        return out


def _check_hull(axes, q, label):
    for a, ax in enumerate(axes):
        slack = 1e-12 * (ax[-1] - ax[0])
        bad = (q[:, a] < ax[0] - slack) | (q[:, a] > ax[-1] + slack)
        if np.any(bad):
            k = int(np.argmax(bad))
            raise FlowInversionError(
                f"{label} {q[k]} leaves the solved box on axis {a} "
                f"[{ax[0]}, {ax[-1]}]")


def _newton_time_slice(axes, y_interp, dy_interp, targets, start, tol,
                       max_iter, when):
    """Solve y_interp(z) = target for each row, Newton from start."""
    z = np.array(start, dtype=float)
    done = np.zeros(z.shape[0], dtype=bool)
    iters = np.zeros(z.shape[0], dtype=int)
    for it in range(max_iter + 1):
        resid = y_interp(z) - targets
        done = np.max(np.abs(resid), axis=-1) <= tol
        if np.all(done):
            break
        if it == max_iter:
            worst = int(np.argmax(np.max(np.abs(resid), axis=-1)))
            raise FlowInversionError(
                f"Newton stalled at t={when:.6g} on query {targets[worst]} "
                f"(residual {np.max(np.abs(resid[worst])):.3e} after "
                f"{max_iter} iterations)")
        jac = dy_interp(z[~done])
        delta = np.linalg.solve(jac, resid[~done][..., None])[..., 0]
        z[~done] = z[~done] - delta
        iters[~done] += 1
        _check_hull(axes, z, f"Newton iterate at t={when:.6g} for query")
    return z, iters


@dataclass
class InverseFlow:
    """Inverse characteristics Z_t at fixed query points, with
    DZ = M(Z) and the interpolant slope of M at Z."""

    flow: FlowField
    queries: np.ndarray
    z: np.ndarray
    dz: np.ndarray
    dm: np.ndarray
    newton_iters: np.ndarray
    tol: float


def invert_flow(flow, queries, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Invert the flow map at each stored time: Newton on
    z -> Y_t(z) - x with the interpolated Jacobian, warm-started from
    the previous time. At t = 0 the interpolated map is the identity,
    so z equals the query bitwise and no iteration runs."""
    if flow.dy is None:
        jacobians(flow)
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    if q.ndim != 2 or q.shape[1] != flow.dim or not np.all(np.isfinite(q)):
        raise ValueError("queries must be a finite (n, d) array matching "
                         "the flow dimension")
    _check_hull(flow.axes, q, "query")
    nt = flow.n_times
    b = q.shape[0]
    d = flow.dim
    z = np.empty((nt, b, d))
    dz = np.empty((nt, b, d, d))
    dm = np.empty((nt, b, d, d, d))
    iters = np.zeros((nt, b), dtype=int)
    cur = q.copy()
    for n in range(nt):
        yv = _BoxInterp(flow.axes, flow.y[n])
        dyv = _BoxInterp(flow.axes, flow.dy[n])
        cur, iters[n] = _newton_time_slice(
            flow.axes, yv, dyv, q, cur, tol, max_iter,
            when=flow.grid.times[n])
        z[n] = cur
        mv = _BoxInterp(flow.axes, flow.m[n])
        dz[n] = mv(cur)
        dm[n] = mv.gradient(cur)
    return InverseFlow(flow=flow, queries=q, z=z, dz=dz, dm=dm,
                       newton_iters=iters, tol=tol)


def roundtrip_gap(flow, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Max over times and base points of |Z_t(Y_t(x)) - x|: Newton at
    the forward images, warm-started from the base points."""
    if flow.dy is None:
        jacobians(flow)
    worst = 0.0
    cur = flow.points.copy()
    for n in range(flow.n_times):
        yv = _BoxInterp(flow.axes, flow.y[n])
        dyv = _BoxInterp(flow.axes, flow.dy[n])
        cur, _ = _newton_time_slice(
            flow.axes, yv, dyv, flow.y[n], cur, tol, max_iter,
            when=flow.grid.times[n])
        worst = max(worst, float(np.max(np.abs(cur - flow.points))))
    return worst


def forward_gap(flow, inverse, time_index=-1):
    """|Y_t(Z_t(x)) - x| at one stored time via fresh per-point solves
    from the inverted starting points (the honest composition, not the
    interpolant that Newton already zeroed)."""
    idx = range(flow.n_times)[time_index]
    if idx == 0:
        return float(np.max(np.abs(inverse.z[0] - inverse.queries)))
    t = flow.grid.times[idx]
    worst = 0.0
    for start, target in zip(inverse.z[idx], inverse.queries):
        sol = solve_rde(flow.driver, start, mode=flow.mode, horizon=t)
        worst = max(worst, float(np.max(np.abs(sol.values[-1] - target))))
    return worst


def fd_jacobian_gap(flow, probe=None, step=1e-4):
    """Max gap between DY and centered differences of fresh flow
    solves started from coordinate-shifted base points."""
    if flow.dy is None:
        jacobians(flow)
    drv = flow.driver
    nt, m, d = flow.y.shape
    probe = range(m) if probe is None else list(probe)
    shifts = []
    for p in probe:
        for a in range(d):
            e = np.zeros(d)
            e[a] = step
            shifts.append(flow.points[p] + e)
            shifts.append(flow.points[p] - e)
    pts = np.array(shifts)
    vals = np.empty((nt,) + pts.shape)
    vals[0] = pts
    for k in range(nt - 1):
        ka = np.array([k])
        vals[k + 1] = vals[k] + _w_steps(drv, ka, vals[k]) \
            + drv.second_step(ka, vals[k], vals[k])
    worst = 0.0
    col = 0
    for p in probe:
        for a in range(d):
            fd = (vals[:, col] - vals[:, col + 1]) / (2.0 * step)
            worst = max(worst, float(np.max(np.abs(fd - flow.dy[:, p, :, a]))))
            col += 2
    return worst


def inverse_expansion_gap(inverse, max_level=6):
    """Second-order expansion check for the inverse characteristics:
    sup over coarse dyadic spans and queries of

        |Z_{s,t}(x) + M W_{s,t}(x) + M WW_{s,t}(x,x)
         - (1/2) (DM M)(W (x) W) - M DW_{s,t}(x) W_{s,t}(x)|
        / |t - s|^(3 alpha)

    with M, DM read at Z_s(x). Bounded ratios certify the 3 alpha
    remainder of the inverse-increment expansion."""
    flow = inverse.flow
    drv = flow.driver
    params = getattr(drv, "params", None)
    if params is None:
        raise ValueError("expansion check needs driver params")
    level = flow.grid.level
    if level is None:
        raise ValueError("expansion check needs a dyadic grid")
    iv, jv = [], []
    for lev in range(1, min(max_level, level) + 1):
        stride = 2 ** (level - lev)
        left = np.arange(0, 2 ** level, stride)
        iv.append(left)
        jv.append(left + stride)
    iv = np.concatenate(iv)
    jv = np.concatenate(jv)
    spans = flow.grid.times[jv] - flow.grid.times[iv]
    worst = 0.0
    for b, x in enumerate(inverse.queries):
        w = drv.increment(iv, jv, x)
        ww = drv.second(iv, jv, x, x)
        dw = drv.d_increment(iv, jv, x)
        ms = inverse.dz[iv, b]
        dms = inverse.dm[iv, b]
        dz_span = inverse.z[jv, b] - inverse.z[iv, b]
        resid = (dz_span
                 + np.einsum('...ij,...j->...i', ms, w)
                 + np.einsum('...ij,...j->...i', ms, ww)
                 - 0.5 * np.einsum('...abc,...cd,...b,...d->...a',
                                   dms, ms, w, w)
                 - np.einsum('...ij,...jk,...k->...i', ms, dw, w))
        ratio = np.max(np.abs(resid), axis=-1) / spans ** (3.0 * params.alpha)
        worst = max(worst, float(np.max(ratio)))
    return worst


# ---------------------------------------------------------------------------
# transport solution u(t, x) = h(Z_t(x))


@dataclass
class SpatialFunction:
    """Initial profile with derivative callables: value maps (..., d)
    points to scalars (...) or vectors (..., r); grad and hess append
    one and two coordinate axes."""

    value: callable
    grad: callable
    hess: callable


def _fd_columns(fn, step):
    def out(x):
        x = np.asarray(x, dtype=float)
        cols = []
        for c in range(x.shape[-1]):
            e = np.zeros(x.shape[-1])
            e[c] = step
            cols.append((np.asarray(fn(x + e), dtype=float)
                         - np.asarray(fn(x - e), dtype=float))
                        / (2.0 * step))
        return np.stack(cols, axis=-1)
    return out


def spatial_function(value, grad=None, hess=None, step=1e-5):
    """Wrap a profile callable, filling missing derivatives by central
    differences with the given step."""
    if grad is None:
        grad = _fd_columns(value, step)
    if hess is None:
        hess = _fd_columns(grad, step)
    return SpatialFunction(value=value, grad=grad, hess=hess)


@dataclass
class RPDESolution:
    """Transport solution u(t, x) = h(Z_t(x)) on fixed query points,
    with spatial derivatives assembled by the chain rule
    Du = Dh(Z) M(Z) and D2u = D2h(Z)[M, M] + Dh(Z) DM(Z) M(Z)."""

    flow: FlowField
    inverse: InverseFlow
    h: SpatialFunction
    u: np.ndarray
    du: np.ndarray
    d2u: np.ndarray
    scalar: bool

    @property
    def queries(self):
        return self.inverse.queries


def _profile_tables(h, z):
    """h, Dh, D2h at the given points with a component axis inserted
    (scalar profiles get a singleton component)."""
    hv = np.asarray(h.value(z), dtype=float)
    gh = np.asarray(h.grad(z), dtype=float)
    hs = np.asarray(h.hess(z), dtype=float)
    scalar = hv.ndim == z.ndim - 1
    if scalar:
        hv = hv[..., None]
        gh = gh[..., None, :]
        hs = hs[..., None, :, :]
    return hv, gh, hs, scalar


def rpde_solution(h, flow, queries, tol=NEWTON_TOL,
                  max_iter=NEWTON_MAX_ITER):
    """Transport the profile h along the inverse characteristics of
    the flow. At t = 0 the inverse is the query itself, so u(0, x)
    reproduces h(x) bitwise."""
    if not isinstance(h, SpatialFunction):
        h = spatial_function(h)
    inverse = invert_flow(flow, queries, tol=tol, max_iter=max_iter)
    hv, gh, hs, scalar = _profile_tables(h, inverse.z)
    du = np.einsum('...rk,...ki->...ri', gh, inverse.dz)
    d2u = (np.einsum('...rkl,...ki,...lj->...rij', hs, inverse.dz,
                     inverse.dz)
           + np.einsum('...rk,...kil,...lj->...rij', gh, inverse.dm,
                       inverse.dz))
    return RPDESolution(flow=flow, inverse=inverse, h=h,
                        u=hv, du=du, d2u=d2u, scalar=scalar)


@dataclass
class TransportReport:
    """Residuals of the compensated transport identity.

    defect/naive hold, per query, the sup over partial sums of the
    per-step defects with and without the bracket corrections;
    bracket_terms holds the sup of each accumulated Young bracket
    integral; constancy is the sup over base points of the
    germ-propagated drift of u along its own characteristics."""

    level: int | None
    alpha: float
    defect: np.ndarray
    naive: np.ndarray
    bracket_terms: dict
    constancy: float
    defect_sup: float
    naive_sup: float


def _bracket_steps_at(drv, ks, pts):
    br = drv.step_brackets(ks, pts)
    return br["quad"], br["dw_w"], br["w_dw"]


def rpde_residual(sol):
    """Evaluate every term of the transport identity per time step.

    At fixed x the compensated germ of the rough integral of Du is
    du w - du (int DW dW) - d2u : (int W (x) dW); the defect adds the
    increment of u and subtracts half of each bracket term. Partial
    sums of the defect give the identity's failure at (t_n, x); the
    naive variant drops the brackets. Constancy propagates u along the
    flow from each base point with the same germs and reports the
    worst accumulated drift from its starting value."""
    flow = sol.flow
    drv = flow.driver
    params = getattr(drv, "params", None)
    if params is None:
        raise ValueError("residuals need driver params")
    nt = flow.n_times
    n_steps = nt - 1
    ks = np.arange(n_steps)
    nq = sol.queries.shape[0]
    r = sol.u.shape[-1]
    defect = np.zeros((nq,))
    naive = np.zeros((nq,))
    terms = {"quad": 0.0, "dw_w": 0.0, "w_dw": 0.0}
    for b in range(nq):
        xs = np.broadcast_to(sol.queries[b], (n_steps, flow.dim))
        w = _w_steps(drv, ks, xs)
        star = drv.grad_pair_step(ks, xs)
        pair = drv.pair_step(ks, xs)
        quad, dww, wdw = _bracket_steps_at(drv, ks, xs)
        du = sol.du[:-1, b]
        d2u = sol.d2u[:-1, b]
        rough = (np.einsum('kri,ki->kr', du, w - star)
                 - np.einsum('krij,kij->kr', d2u, pair))
        half_young = 0.5 * (np.einsum('kri,ki->kr', du, dww + wdw)
                            + np.einsum('krij,kij->kr', d2u, quad))
        u_steps = sol.u[1:, b] - sol.u[:-1, b]
        d_full = u_steps + rough - half_young
        d_naive = u_steps + rough
        defect[b] = np.max(np.abs(np.cumsum(d_full, axis=0)))
        naive[b] = np.max(np.abs(np.cumsum(d_naive, axis=0)))
        terms["quad"] = max(terms["quad"], 0.5 * float(np.max(np.abs(
            np.cumsum(np.einsum('krij,kij->kr', d2u, quad), axis=0)))))
        terms["dw_w"] = max(terms["dw_w"], 0.5 * float(np.max(np.abs(
            np.cumsum(np.einsum('kri,ki->kr', du, dww), axis=0)))))
        terms["w_dw"] = max(terms["w_dw"], 0.5 * float(np.max(np.abs(
            np.cumsum(np.einsum('kri,ki->kr', du, wdw), axis=0)))))
    constancy = _constancy_drift(sol)
    return TransportReport(
        level=flow.grid.level, alpha=params.alpha, defect=defect,
        naive=naive, bracket_terms=terms, constancy=constancy,
        defect_sup=float(np.max(defect)), naive_sup=float(np.max(naive)))


def _constancy_drift(sol):
    """Germ-propagated drift of u along the flow's own characteristics.

    Along x_k = Y_{t_k}(p) the exact solution is constant, u = h(p),
    and Z(x_k) = p, so Du(t_k, x_k) = Dh(p) M_{t_k}(p) needs no
    inversion. Stepping u by the transport germ plus the second-order
    spatial shift along the realized step leaves per-step residue
    d2u : (ww (x) w - w (x) ww) / 2 + O(dt^(4 alpha)): the du part
    cancels against the bracket definitions identically."""
    flow = sol.flow
    drv = flow.driver
    if flow.m is None:
        jacobians(flow)
    nt, m, d = flow.y.shape
    n_steps = nt - 1
    ks = np.arange(n_steps)
    hv, gh, hs, _ = _profile_tables(sol.h, flow.points)
    if _m_varies(flow):
        dm_all = np.stack([_BoxInterp(flow.axes, flow.m[n])
                           .gradient(flow.points) for n in range(n_steps)])
    else:
        dm_all = np.zeros((n_steps, m, d, d, d))
    worst = 0.0
    for p in range(m):
        ys = flow.y[:-1, p]
        dy_step = flow.y[1:, p] - flow.y[:-1, p]
        w = _w_steps(drv, ks, ys)
        dw = drv.d_step_increment(ks, ys)
        star = drv.grad_pair_step(ks, ys)
        pair = drv.pair_step(ks, ys)
        quad, dww, wdw = _bracket_steps_at(drv, ks, ys)
        mk = flow.m[:-1, p]
        du = np.einsum('rk,nki->nri', gh[p], mk)
        d2u = (np.einsum('rkl,nki,nlj->nrij', hs[p], mk, mk)
               + np.einsum('rk,nkil,nlj->nrij', gh[p], dm_all[:, p], mk))
        g_du = (np.einsum('nri,ni->nr', du,
                          dy_step - w + star
                          - np.einsum('nij,nj->ni', dw, w)
                          + 0.5 * (dww + wdw)))
        g_d2u = np.einsum('nrij,nij->nr', d2u,
                          pair - np.einsum('ni,nj->nij', w, dy_step)
                          + 0.5 * np.einsum('ni,nj->nij', dy_step, dy_step)
                          + 0.5 * quad)
        drift = np.max(np.abs(np.cumsum(g_du + g_d2u, axis=0)))
        worst = max(worst, float(drift))
    return worst


def _m_varies(flow):
    """Whether M varies across base points (if not, its interpolant
    slope is exactly zero and the gradient calls can be skipped)."""
    return bool(np.max(np.abs(flow.m - flow.m[:, :1])) > 0.0)
