"""Spatially parameterized rough drivers.

A driver is a pair (W, WW): W_{s,t}(x) is a time-increment field depending
nonlinearly on a spatial argument x, and WW_{s,t}(x, y) is the second-order
pairing playing the role of int_s^t DW(dr, y)(W_{s,r}(x)). The pair must
satisfy the nonlinear Chen identity

    WW_{s,t}(x,y) - WW_{s,u}(x,y) - WW_{u,t}(x,y) = DW_{u,t}(y)(W_{s,u}(x)).

Two representations are provided: composition of a two-argument function
with a linear rough path, and direct quadrature of a field differentiable
in time. Both assemble WW as span(i, j) = pa[j] - pa[i] - (g[j] - g[i]).h[i]
from prefix arrays; with that structure the prefix parts telescope and the
boundary parts reassemble into DW(y)(W(x)) identically, so the Chen residual
measures only floating-point noise (or injected cache corruption).

Index conventions (shared with the linear layer): the second level of the
underlying path stores XX[a, b] = int X^a dX^b with the expansion slot
first; function partial derivatives are laid out value axis first, then
path-derivative axes, then spatial-derivative axes; WW slot derivatives
order trailing axes (inner, outer).
"""

import numpy as np

from .analysis import (
    AnalysisParams,
    TimeGrid,
    TwoParamField,
    _flat_norms,
    weighted_increment_norm,
    weighted_pair_norm,
)
from .linear import ChenReport, RoughPath

CBRT_EPS = float(np.finfo(float).eps) ** (1.0 / 3.0)

# element budget for intermediate tables in aligned per-pair queries;
# larger batches are processed in chunks of this many array elements
_AT_BUDGET = 4_000_000

# slot-derivative variants of WW and the einsum applied to the boundary
# correction (g increment against the frozen left operand h)
_BOUNDARY = {
    "value": '...ij,...j->...i',
    "d_inner": '...ij,...jl->...il',
    "d_outer": '...ijl,...j->...il',
    "d2_inner": '...ij,...jlk->...ilk',
    "d2_outer": '...ijlk,...j->...ilk',
    "mixed": '...ijk,...jl->...ilk',
}

_EXTRA_AXES = {"value": '', "d_inner": 'l', "d_outer": 'l',
               "d2_inner": 'lk', "d2_outer": 'lk', "mixed": 'lk'}

_VARIANT_BY_SLOT = {(1, 1): "d_inner", (2, 1): "d_outer",
                    (1, 2): "d2_inner", (2, 2): "d2_outer"}


# ---------------------------------------------------------------------------
# function bundles f(x, y)


def _multi_eye(dim: int, k: int):
    """k-fold diagonal tensor: 1 where all k indices agree, else 0."""
    out = np.ones(dim)
    eye = np.eye(dim)
    for _ in range(k - 1):
        out = out[..., None] * eye
    return out


def _diag_partial(poly, order: int):
    """Componentwise partial poly(x, y) per coordinate, embedded on the
    order-fold diagonal (order = 1 + number of derivative axes)."""

    def fn(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        vals = poly(x, y)
        dim = vals.shape[-1]
        eye = _multi_eye(dim, order)
        return vals.reshape(vals.shape + (1,) * (order - 1)) * eye

    return fn


def _zero_partial(path_dim, space_dim, i, j):
    def fn(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        shape = batch + (space_dim,) + (path_dim,) * i + (space_dim,) * j
        return np.zeros(shape)

    return fn


def _const_partial(arr):
    arr = np.asarray(arr, dtype=float)

    def fn(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        return np.broadcast_to(arr, batch + arr.shape)

    return fn


class FunctionBundle:
    """Two-argument function f: R^e x R^m -> R^m with partial derivatives.

    partials maps (i, j) -> callable giving the i-th path / j-th spatial
    mixed partial with layout (batch..., m, e * i, m * j). Missing orders
    are filled recursively by central differences with per-coordinate step
    eps^(1/3) * (1 + |arg|), differentiating the spatial slot first so the
    axis layout is preserved. path_increment, when given, evaluates
    f(x2, .) - f(x1, .) directly from the path increment; it is exact for
    bundles affine in the path argument and avoids cancellation error.
    """

    def __init__(self, value, path_dim, space_dim, partials=None,
                 path_increment=None, name="custom"):
        self.path_dim = int(path_dim)
        self.space_dim = int(space_dim)
        self.name = name
        self.path_increment = path_increment
        self._partials = dict(partials or {})
        self._partials[(0, 0)] = value
        self._resolved = {}

    def __call__(self, x, y):
        return self.partial(0, 0)(x, y)

    def has_analytic(self, i, j) -> bool:
        return (i, j) in self._partials

    def partial(self, i, j):
        key = (int(i), int(j))
        if key in self._resolved:
            return self._resolved[key]
        if key in self._partials:
            fn = self._partials[key]
        elif key[1] > 0:
            fn = self._fd(self.partial(key[0], key[1] - 1), 1)
        else:
            fn = self._fd(self.partial(key[0] - 1, 0), 0)
        self._resolved[key] = fn
        return fn

    def _fd(self, base, slot):
        """Central difference in the path (slot 0) or spatial (slot 1)
        argument, stacking the new axis last."""
        dim = self.path_dim if slot == 0 else self.space_dim

        def fn(x, y):
            x = np.asarray(x, dtype=float)
            y = np.asarray(y, dtype=float)
            ref = x if slot == 0 else y
            cols = []
            for c in range(dim):
                h = CBRT_EPS * (1.0 + np.abs(ref[..., c]))
                bump = np.zeros(ref.shape)
                bump[..., c] = h
                if slot == 0:
                    hi = base(x + bump, y)
                    lo = base(x - bump, y)
                else:
                    hi = base(x, y + bump)
                    lo = base(x, y - bump)
                denom = 2.0 * h
                denom = denom.reshape(denom.shape + (1,) * (hi.ndim - h.ndim))
                cols.append((hi - lo) / denom)
            return np.stack(cols, axis=-1)

        return fn


def fd_crosscheck(bundle: FunctionBundle, points_x, points_y):
    """Relative gap between each analytic partial of order >= 1 and a
    central difference of a neighboring analytic order, on the given
    points. Returns {(i, j): relative error} for the caller to assert on.
    """
    x = np.atleast_2d(np.asarray(points_x, dtype=float))
    y = np.atleast_2d(np.asarray(points_y, dtype=float))
    report = {}
    for (i, j) in sorted(k for k in bundle._partials if k != (0, 0)):
        if j > 0 and bundle.has_analytic(i, j - 1):
            approx = bundle._fd(bundle.partial(i, j - 1), 1)(x, y)
        elif i > 0 and bundle.has_analytic(i - 1, j):
            raw = bundle._fd(bundle.partial(i - 1, j), 0)(x, y)
            # the new path axis lands last; move it behind the existing
            # path axes, ahead of the j spatial axes
            approx = np.moveaxis(raw, -1, raw.ndim - 1 - j)
        else:
            continue
        exact = bundle.partial(i, j)(x, y)
        scale = max(float(np.max(np.abs(exact))), 1e-12)
        report[(i, j)] = float(np.max(np.abs(exact - approx))) / scale
    return report


# ---------------------------------------------------------------------------
# bundle catalog


_HIGHER_ZERO = [(2, 0), (0, 2), (2, 1), (1, 2), (2, 2),
                (0, 3), (1, 3), (2, 3)]


def pointwise_product(dim: int) -> FunctionBundle:
    """f_i(x, y) = x_i y_i. In one dimension this is the bilinear case
    whose driver reduces to the linear theory."""
    partials = {
        (1, 0): _diag_partial(lambda x, y: (x * 0.0 + 1.0) * y, 2),
        (0, 1): _diag_partial(lambda x, y: x * (y * 0.0 + 1.0), 2),
        (1, 1): _diag_partial(
            lambda x, y: np.ones(np.broadcast_shapes(x.shape, y.shape)), 3),
    }
    partials.update({(i, j): _zero_partial(dim, dim, i, j)
                     for (i, j) in _HIGHER_ZERO})
    return FunctionBundle(
        lambda x, y: np.asarray(x, dtype=float) * np.asarray(y, dtype=float),
        dim, dim, partials,
        path_increment=lambda dx, y: np.asarray(dx, dtype=float)
        * np.asarray(y, dtype=float),
        name="pointwise_product",
    )


def exp_product(dim: int) -> FunctionBundle:
    """f_i(x, y) = exp(x_i y_i), componentwise. All partials are
    polynomial multiples of the value; analytic through third order."""

    def term(px):
        def poly(x, y):
            x = np.asarray(x, dtype=float)
            y = np.asarray(y, dtype=float)
            return px(x, y) * np.exp(x * y)
        return poly

    partials = {
        (1, 0): _diag_partial(term(lambda x, y: y), 2),
        (0, 1): _diag_partial(term(lambda x, y: x), 2),
        (2, 0): _diag_partial(term(lambda x, y: y ** 2), 3),
        (1, 1): _diag_partial(term(lambda x, y: 1.0 + x * y), 3),
        (0, 2): _diag_partial(term(lambda x, y: x ** 2), 3),
        (2, 1): _diag_partial(term(lambda x, y: 2.0 * y + x * y ** 2), 4),
        (1, 2): _diag_partial(term(lambda x, y: 2.0 * x + x ** 2 * y), 4),
        (2, 2): _diag_partial(
            term(lambda x, y: 2.0 + 4.0 * x * y + x ** 2 * y ** 2), 5),
        (0, 3): _diag_partial(term(lambda x, y: x ** 3), 4),
        (1, 3): _diag_partial(
            term(lambda x, y: 3.0 * x ** 2 + x ** 3 * y), 5),
        (2, 3): _diag_partial(
            term(lambda x, y: 6.0 * x + 6.0 * x ** 2 * y
                 + x ** 3 * y ** 2), 6),
    }
    return FunctionBundle(
        lambda x, y: np.exp(np.asarray(x, dtype=float)
                            * np.asarray(y, dtype=float)),
        dim, dim, partials, name="exp_product",
    )


def linear_bundle(a_op) -> FunctionBundle:
    """f(x, y)^i = a[i, p, n] y^n x^p, linear in both arguments.
    Composition with a rough path gives the operator-driven linear case."""
    a = np.asarray(a_op, dtype=float)
    m, p, n = a.shape
    if m != n:
        raise ValueError("operator must map the state space to itself")

    def value(x, y):
        return np.einsum('ipn,...n,...p->...i', a,
                         np.asarray(y, dtype=float),
                         np.asarray(x, dtype=float))

    def d10(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        return np.broadcast_to(
            np.einsum('ian,...n->...ia', a, y), batch + (m, p))

    def d01(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        return np.broadcast_to(
            np.einsum('ipj,...p->...ij', a, x), batch + (m, m))

    partials = {(1, 0): d10, (0, 1): d01, (1, 1): _const_partial(a)}
    partials.update({(i, j): _zero_partial(p, m, i, j)
                     for (i, j) in _HIGHER_ZERO})
    return FunctionBundle(
        value, p, m, partials,
        path_increment=lambda dx, y: np.einsum(
            'ipn,...n,...p->...i', a, np.asarray(y, dtype=float),
            np.asarray(dx, dtype=float)),
        name="linear_bundle",
    )


def matrix_linear(mat) -> FunctionBundle:
    """f_i(x, y) = tanh(y_i) (M x)_i: linear in the path, bounded and
    smooth in space."""
    mat = np.asarray(mat, dtype=float)
    m, e = mat.shape

    def mx(x):
        return np.einsum('ia,...a->...i', mat, np.asarray(x, dtype=float))

    def t_ladder(y, order):
        t0 = np.tanh(np.asarray(y, dtype=float))
        t1 = 1.0 - t0 ** 2
        if order == 0:
            return t0
        if order == 1:
            return t1
        if order == 2:
            return -2.0 * t0 * t1
        return -2.0 * t1 * (t1 - 2.0 * t0 ** 2)

    def spatial_only(k):
        # partial (0, k): tanh ladder on the k-fold spatial diagonal
        def fn(x, y):
            vals = t_ladder(y, k) * mx(x)
            eye = _multi_eye(m, 1 + k)
            return vals.reshape(vals.shape + (1,) * k) * eye
        return fn

    def with_path(k):
        # partial (1, k): ladder times M rows, diagonal across spatial axes
        def fn(x, y):
            x = np.asarray(x, dtype=float)
            y = np.asarray(y, dtype=float)
            batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
            tk = np.broadcast_to(t_ladder(y, k), batch + (m,))
            core = tk[..., :, None] * mat
            eye = _multi_eye(m, 1 + k)
            return (core.reshape(core.shape + (1,) * k)
                    * eye.reshape((m,) + (1,) + (m,) * k))
        return fn

    partials = {
        (1, 0): with_path(0),
        (0, 1): spatial_only(1),
        (1, 1): with_path(1),
        (0, 2): spatial_only(2),
        (1, 2): with_path(2),
        (0, 3): spatial_only(3),
        (1, 3): with_path(3),
    }
    partials.update({(i, j): _zero_partial(e, m, i, j)
                     for (i, j) in [(2, 0), (2, 1), (2, 2), (2, 3)]})
    return FunctionBundle(
        lambda x, y: np.tanh(np.asarray(y, dtype=float)) * mx(x),
        e, m, partials,
        path_increment=lambda dx, y: np.tanh(
            np.asarray(y, dtype=float)) * mx(dx),
        name="matrix_linear",
    )


def rotation(c0: float, a_vec) -> FunctionBundle:
    """f(x, y) = (c0 + <a, x>) J y with J the quarter turn in the plane."""
    a = np.asarray(a_vec, dtype=float)
    e = a.shape[0]
    jmat = np.array([[0.0, -1.0], [1.0, 0.0]])

    def jy(y):
        return np.einsum('ij,...j->...i', jmat, np.asarray(y, dtype=float))

    def coeff(x):
        return c0 + np.einsum('a,...a->...', a, np.asarray(x, dtype=float))

    def d10(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        return np.broadcast_to(jy(y)[..., :, None] * a, batch + (2, e))

    def d01(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        return np.broadcast_to(coeff(x)[..., None, None] * jmat,
                               batch + (2, 2))

    partials = {
        (1, 0): d10,
        (0, 1): d01,
        (1, 1): _const_partial(np.einsum('ij,a->iaj', jmat, a)),
    }
    partials.update({(i, j): _zero_partial(e, 2, i, j)
                     for (i, j) in _HIGHER_ZERO})
    return FunctionBundle(
        lambda x, y: coeff(np.asarray(x, dtype=float))[..., None] * jy(y),
        e, 2, partials,
        path_increment=lambda dx, y: np.einsum(
            'a,...a->...', a, np.asarray(dx, dtype=float))[..., None]
        * jy(y),
        name="rotation",
    )


# ---------------------------------------------------------------------------
# shared span structure


class SpanPrefix:
    """Two-parameter field span(i, j) = pa[j] - pa[i] - (g[j] - g[i]).h[i].

    pa, g, h are prefix/node arrays with the grid axis first; rule is the
    einsum contracting the g increment against the frozen operand h.
    """

    __slots__ = ("pa", "g", "h", "rule")

    def __init__(self, pa, g, h, rule):
        self.pa = pa
        self.g = g
        self.h = h
        self.rule = rule

    def span(self, i, j):
        return (self.pa[j] - self.pa[i]
                - np.einsum(self.rule, self.g[j] - self.g[i], self.h[i]))

    def span_diag(self, i, j):
        """Aligned spans: pair k reads batch row k of the prefix arrays."""
        rows = np.arange(len(i))
        return (self.pa[j, rows] - self.pa[i, rows]
                - np.einsum(self.rule, self.g[j, rows] - self.g[i, rows],
                            self.h[i, rows]))


def _as_points(x, dim, label):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (dim,):
        raise ValueError(f"{label} must have trailing dimension {dim}")
    return x


def _aligned_query(dim, i, j, *points):
    """Normalize an aligned per-pair query: 1-d index arrays plus 2-d
    point batches, broadcast to a common number of rows."""
    i = np.atleast_1d(np.asarray(i))
    j = np.atleast_1d(np.asarray(j))
    pts = [np.atleast_2d(_as_points(p, dim, "spatial point"))
           for p in points]
    n = max([i.shape[0], j.shape[0]] + [p.shape[0] for p in pts])
    i = np.broadcast_to(i, (n,))
    j = np.broadcast_to(j, (n,))
    pts = [np.broadcast_to(p, (n, dim)) for p in pts]
    return (i, j, *pts)


# ---------------------------------------------------------------------------
# composition driver


class CompositionDriver:
    """Driver W_{s,t}(x) = f(X_t, x) - f(X_s, x) over a lifted path X.

    The second-order pairing integrates the mixed partial of f at the
    outer point against f at the inner point, compensated to second order
    in the path: per-step atoms combine the first-order germ against dX,
    the second-order germ against XX (expansion slot contracted), and a
    half bracket term; the boundary correction freezes f(X_s, x) under
    the increment of the spatial-derivative prefix. Scalar second-level
    queries are memoized per (interval, point pair); evaluation is pure,
    so the memo contents do not depend on insertion order.
    """

    kind = "composition"

    def __init__(self, bundle: FunctionBundle, rough: RoughPath,
                 params: AnalysisParams | None = None, name=None):
        if bundle.path_dim != rough.dim:
            raise ValueError("bundle path dimension does not match the path")
        self.bundle = bundle
        self.rough = rough
        self.params = params
        self.grid: TimeGrid = rough.grid
        self.dim = bundle.space_dim
        self.path_dim = rough.dim
        self.name = name or f"composition({bundle.name})"
        self.nodes = rough.x.values
        self.dx = self.nodes[1:] - self.nodes[:-1]
        ks = np.arange(self.grid.n_points - 1)
        self.xx_steps = rough.second(ks, ks + 1)
        self.br_steps = rough.bracket(ks, ks + 1)
        self._memo = {}

    # -- first level --------------------------------------------------------

    def increment(self, i, j, x):
        """W_{i,j}(x); i, j scalars or index arrays broadcasting against
        the leading axes of x."""
        x = _as_points(x, self.dim, "spatial point")
        xi = self.nodes[np.asarray(i)]
        xj = self.nodes[np.asarray(j)]
        if self.bundle.path_increment is not None:
            return self.bundle.path_increment(xj - xi, x)
        return self.bundle(xj, x) - self.bundle(xi, x)

    def d_increment(self, i, j, x, order=1):
        """Spatial derivative of W_{i,j} at x, to the given order."""
        x = _as_points(x, self.dim, "spatial point")
        fn = self.bundle.partial(0, order)
        return (fn(self.nodes[np.asarray(j)], x)
                - fn(self.nodes[np.asarray(i)], x))

    def increment_at(self, i, j, x):
        """Aligned per-pair W_{i[k], j[k]}(x[k]) as a (pairs, dim) array."""
        i, j, x = _aligned_query(self.dim, i, j, x)
        return self.increment(i, j, x)

    # -- second-level germs per node -----------------------------------------

    def _pieces(self, nodes, x, y, variant):
        """Atom ingredients at path values `nodes`: t1 pairs with dX,
        t2 with XX (as '...iab,...ba'), q with the half bracket."""
        b = self.bundle
        if variant == "value":
            fx = b(nodes, x)
            a11 = b.partial(1, 1)(nodes, y)
            t1 = np.einsum('...iaj,...j->...ia', a11, fx)
            q = np.einsum('...iabj,...j->...iab',
                          b.partial(2, 1)(nodes, y), fx)
            t2 = q + np.einsum('...iaj,...jb->...iab',
                               a11, b.partial(1, 0)(nodes, x))
        elif variant == "d_outer":
            fx = b(nodes, x)
            a12 = b.partial(1, 2)(nodes, y)
            t1 = np.einsum('...iajl,...j->...ial', a12, fx)
            q = np.einsum('...iabjl,...j->...iabl',
                          b.partial(2, 2)(nodes, y), fx)
            t2 = q + np.einsum('...iajl,...jb->...iabl',
                               a12, b.partial(1, 0)(nodes, x))
        elif variant == "d_inner":
            gx = b.partial(0, 1)(nodes, x)
            a11 = b.partial(1, 1)(nodes, y)
            t1 = np.einsum('...iaj,...jl->...ial', a11, gx)
            q = np.einsum('...iabj,...jl->...iabl',
                          b.partial(2, 1)(nodes, y), gx)
            t2 = q + np.einsum('...iaj,...jbl->...iabl',
                               a11, b.partial(1, 1)(nodes, x))
        elif variant == "d2_outer":
            fx = b(nodes, x)
            a13 = b.partial(1, 3)(nodes, y)
            t1 = np.einsum('...iajlk,...j->...ialk', a13, fx)
            q = np.einsum('...iabjlk,...j->...iablk',
                          b.partial(2, 3)(nodes, y), fx)
            t2 = q + np.einsum('...iajlk,...jb->...iablk',
                               a13, b.partial(1, 0)(nodes, x))
        elif variant == "d2_inner":
            hx = b.partial(0, 2)(nodes, x)
            a11 = b.partial(1, 1)(nodes, y)
            t1 = np.einsum('...iaj,...jlk->...ialk', a11, hx)
            q = np.einsum('...iabj,...jlk->...iablk',
                          b.partial(2, 1)(nodes, y), hx)
            t2 = q + np.einsum('...iaj,...jblk->...iablk',
                               a11, b.partial(1, 2)(nodes, x))
        elif variant == "mixed":
            gx = b.partial(0, 1)(nodes, x)
            a12 = b.partial(1, 2)(nodes, y)
            t1 = np.einsum('...iajk,...jl->...ialk', a12, gx)
            q = np.einsum('...iabjk,...jl->...iablk',
                          b.partial(2, 2)(nodes, y), gx)
            t2 = q + np.einsum('...iajk,...jbl->...iablk',
                               a12, b.partial(1, 1)(nodes, x))
        else:
            raise ValueError(f"unknown variant {variant!r}")
        return t1, t2, q

    def _boundary_nodes(self, nodes, x, y, variant):
        b = self.bundle
        if variant == "value":
            return b.partial(0, 1)(nodes, y), b(nodes, x)
        if variant == "d_outer":
            return b.partial(0, 2)(nodes, y), b(nodes, x)
        if variant == "d_inner":
            return b.partial(0, 1)(nodes, y), b.partial(0, 1)(nodes, x)
        if variant == "d2_outer":
            return b.partial(0, 3)(nodes, y), b(nodes, x)
        if variant == "d2_inner":
            return b.partial(0, 1)(nodes, y), b.partial(0, 2)(nodes, x)
        if variant == "mixed":
            return b.partial(0, 2)(nodes, y), b.partial(0, 1)(nodes, x)
        raise ValueError(f"unknown variant {variant!r}")

    # -- second level ---------------------------------------------------------

    def second_prefix(self, x, y, variant="value") -> SpanPrefix:
        """Prefix representation of WW (or a slot derivative) for frozen
        spatial arguments, vectorized over a batch of point pairs."""
        x = _as_points(x, self.dim, "inner point")
        y = _as_points(y, self.dim, "outer point")
        nb = len(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]))
        nodes = self.nodes.reshape(
            (self.nodes.shape[0],) + (1,) * nb + (self.path_dim,))
        xb, yb = x[None], y[None]
        t1, t2, q = self._pieces(nodes, xb, yb, variant)
        extra = _EXTRA_AXES[variant]
        shp = (self.dx.shape[0],) + (1,) * nb
        dxb = self.dx.reshape(shp + (self.path_dim,))
        xxb = self.xx_steps.reshape(shp + (self.path_dim,) * 2)
        brb = self.br_steps.reshape(shp + (self.path_dim,) * 2)
        atoms = (np.einsum(f'...ia{extra},...a->...i{extra}', t1[:-1], dxb)
                 + np.einsum(f'...iab{extra},...ba->...i{extra}',
                             t2[:-1], xxb)
                 + 0.5 * np.einsum(f'...iab{extra},...ab->...i{extra}',
                                   q[:-1], brb))
        pa = np.concatenate([np.zeros_like(atoms[:1]),
                             np.cumsum(atoms, axis=0)], axis=0)
        g, h = self._boundary_nodes(nodes, xb, yb, variant)
        return SpanPrefix(pa, g, h, _BOUNDARY[variant])

    def second(self, i, j, x, y):
        """WW_{i,j}(x, y); scalar queries are memoized."""
        x = _as_points(x, self.dim, "inner point")
        y = _as_points(y, self.dim, "outer point")
        scalar = np.ndim(i) == 0 and np.ndim(j) == 0 \
            and x.ndim == 1 and y.ndim == 1
        if scalar:
            key = (int(i), int(j), x.tobytes(), y.tobytes())
            hit = self._memo.get(key)
            if hit is not None:
                return hit.copy()
        out = self.second_prefix(x, y).span(np.asarray(i), np.asarray(j))
        if scalar:
            self._memo[key] = out.copy()
        return out

    def d_second(self, i, j, x, y, slot, order=1):
        """Slot derivative of WW: slot 1 differentiates the inner
        (increment) argument, slot 2 the outer (operator) argument."""
        variant = _VARIANT_BY_SLOT[(slot, order)]
        return self.second_prefix(x, y, variant).span(
            np.asarray(i), np.asarray(j))

    def d_second_mixed(self, i, j, x, y):
        """Mixed slot derivative, trailing axes (inner, outer)."""
        return self.second_prefix(x, y, "mixed").span(
            np.asarray(i), np.asarray(j))

    def second_at(self, i, j, x, y):
        """Aligned per-pair WW_{i[k], j[k]}(x[k], y[k]), chunked so the
        intermediate germ tables stay within a fixed element budget."""
        i, j, x, y = _aligned_query(self.dim, i, j, x, y)
        n = i.shape[0]
        chunk = max(1, _AT_BUDGET // (self.grid.n_points * self.dim
                                      * self.path_dim * self.path_dim))
        out = np.empty((n, self.dim))
        for a in range(0, n, chunk):
            b = min(n, a + chunk)
            sp = self.second_prefix(x[a:b], y[a:b])
            out[a:b] = sp.span_diag(i[a:b], j[a:b])
        return out

    # -- per-step evaluation ----------------------------------------------------

    def _step_eval(self, k, x, y, variant):
        k = np.asarray(k)
        x = _as_points(x, self.dim, "inner point")
        y = _as_points(y, self.dim, "outer point")
        nodes_l = self.nodes[k]
        nodes_r = self.nodes[k + 1]
        t1, t2, q = self._pieces(nodes_l, x, y, variant)
        extra = _EXTRA_AXES[variant]
        g_l, h_l = self._boundary_nodes(nodes_l, x, y, variant)
        g_r, _ = self._boundary_nodes(nodes_r, x, y, variant)
        t1c = np.einsum(f'...ia{extra},...a->...i{extra}', t1, self.dx[k])
        bnd = np.einsum(_BOUNDARY[variant], g_r - g_l, h_l)
        # the germ-vs-boundary difference cancels first; for the bilinear
        # bundle it cancels bitwise, leaving exactly the XX contraction
        return (np.einsum(f'...iab{extra},...ba->...i{extra}',
                          t2, self.xx_steps[k])
                + 0.5 * np.einsum(f'...iab{extra},...ab->...i{extra}',
                                  q, self.br_steps[k])
                + (t1c - bnd))

    def second_step(self, k, x, y):
        """Single-step WW over [t_k, t_{k+1}], vectorized over k with a
        broadcasting batch of points."""
        return self._step_eval(k, x, y, "value")

    def d_second_step(self, k, x, y, slot):
        return self._step_eval(k, x, y, _VARIANT_BY_SLOT[(slot, 1)])

    def step_brackets(self, k, x, y=None):
        """Per-step quadratic compensators at frozen points: 'quad' is
        the bracket of W(x) with itself, 'dw_w' pairs (DW(y), W(x)),
        'w_dw' pairs (W(x), DW(y))."""
        k = np.asarray(k)
        x = _as_points(x, self.dim, "inner point")
        y = x if y is None else _as_points(y, self.dim, "outer point")
        nodes_l = self.nodes[k]
        nodes_r = self.nodes[k + 1]
        dv = self.increment(k, k + 1, x)
        vp = self.bundle.partial(1, 0)(nodes_l, x)
        xxk = self.xx_steps[k]
        quad = (np.einsum('...p,...q->...pq', dv, dv)
                - 2.0 * np.einsum('...pa,...qb,...ab->...pq', vp, vp, xxk))
        dg = (self.bundle.partial(0, 1)(nodes_r, y)
              - self.bundle.partial(0, 1)(nodes_l, y))
        gp = np.moveaxis(self.bundle.partial(1, 1)(nodes_l, y), -2, -1)
        dw_w = (np.einsum('...pq,...q->...p', dg, dv)
                - 2.0 * np.einsum('...pqa,...ab,...qb->...p', gp, xxk, vp))
        w_dw = (np.einsum('...pq,...q->...p', dg, dv)
                - 2.0 * self.second_step(k, x, y))
        return {"quad": quad, "dw_w": dw_w, "w_dw": w_dw}

    def d_step_increment(self, k, x, order=1):
        """Spatial derivative of the single-step increments W_{t_k,t_{k+1}}."""
        k = np.asarray(k)
        return self.d_increment(k, k + 1, x, order)

    def pair_step(self, k, x, y=None):
        """Per-step matrix pairing of frozen-point values,
        int W_{t_k,r}(x) (tensor) W(dr, y), germ through the path's
        second level."""
        k = np.asarray(k)
        x = _as_points(x, self.dim, "inner point")
        y = x if y is None else _as_points(y, self.dim, "outer point")
        vx = self.bundle.partial(1, 0)(self.nodes[k], x)
        vy = vx if y is x else self.bundle.partial(1, 0)(self.nodes[k], y)
        return np.einsum('...pa,...qb,...ab->...pq', vx, vy,
                         self.xx_steps[k])

    def grad_pair_step(self, k, x):
        """Per-step int DW_{t_k,r}(x) W(dr, x): the derivative sits on the
        increment factor and contracts with the differential."""
        k = np.asarray(k)
        x = _as_points(x, self.dim, "spatial point")
        gp = self.bundle.partial(1, 1)(self.nodes[k], x)
        vp = self.bundle.partial(1, 0)(self.nodes[k], x)
        return np.einsum('...paq,...qb,...ab->...p', gp, vp,
                         self.xx_steps[k])

    def d_pair_step(self, k, x):
        """Per-step pairing of the spatial-derivative increments with
        themselves: int DW_{t_k,r}(x) (tensor) DW(dr, x), shape
        (..., d, d, d, d) with axes (comp, deriv, comp, deriv)."""
        k = np.asarray(k)
        x = _as_points(x, self.dim, "spatial point")
        gp = self.bundle.partial(1, 1)(self.nodes[k], x)
        return np.einsum('...paq,...rbs,...ab->...pqrs', gp, gp,
                         self.xx_steps[k])

    # -- norm protocol ----------------------------------------------------------

    def increment_field(self):
        return _OneSlotAdapter(self)

    def second_level_field(self):
        return _TwoSlotAdapter(self)


# ---------------------------------------------------------------------------
# smooth driver


def _fd_space(base, dim):
    """Central difference in the spatial argument of a rate callable
    (t, x) -> array, stacking the new axis last."""

    def fn(t, x):
        x = np.asarray(x, dtype=float)
        cols = []
        for c in range(dim):
            h = CBRT_EPS * (1.0 + np.abs(x[..., c]))
            bump = np.zeros(x.shape)
            bump[..., c] = h
            hi = base(t, x + bump)
            lo = base(t, x - bump)
            denom = 2.0 * h
            denom = denom.reshape(denom.shape + (1,) * (hi.ndim - h.ndim))
            cols.append((hi - lo) / denom)
        return np.stack(cols, axis=-1)

    return fn


class SmoothField:
    """Time-derivative field rate(t, x) = d/dt W(t, x), with spatial
    derivatives to third order given analytically or by differences.

    rate(t, x) must broadcast: t with shape broadcastable against
    x.shape[:-1], output batch + (dim,); each derivative order appends
    one spatial axis.
    """

    def __init__(self, rate, dim, d1=None, d2=None, d3=None, name="smooth"):
        self.rate = rate
        self.dim = int(dim)
        self.name = name
        self.d1 = d1 if d1 is not None else _fd_space(rate, dim)
        self.d2 = d2 if d2 is not None else _fd_space(self.d1, dim)
        self.d3 = d3 if d3 is not None else _fd_space(self.d2, dim)

    def deriv(self, order):
        return (self.rate, self.d1, self.d2, self.d3)[order]


class SmoothDriver:
    """Driver built by composite-Simpson quadrature of a smooth rate.

    W_{s,t}(x) integrates the rate; the second-order pairing integrates
    the spatial derivative of the rate at the outer point against the
    running increment from the left endpoint, assembled as prefix minus
    boundary so the Chen identity is exact despite quadrature error.
    """

    kind = "smooth"

    def __init__(self, field: SmoothField, grid: TimeGrid, refine: int = 8,
                 params: AnalysisParams | None = None, name=None):
        if refine < 2 or refine % 2:
            raise ValueError("refine must be an even integer >= 2")
        self.field = field
        self.grid = grid
        self.refine = int(refine)
        self.params = params
        self.dim = field.dim
        self.name = name or f"smooth({field.name})"
        times = grid.times
        self.dt = times[1:] - times[:-1]
        frac = np.linspace(0.0, 1.0, refine + 1)
        self.tt = times[:-1, None] + self.dt[:, None] * frac[None, :]
        w = np.ones(refine + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        self._weights = w / (3.0 * refine)
        self._memo = {}

    # -- quadrature ------------------------------------------------------------

    def _grid_vals(self, order, x):
        """Rate (or spatial derivative) at all refined nodes against an
        independent point batch: (steps, refine+1, batch..., dim, ...)."""
        x = _as_points(x, self.dim, "spatial point")
        nb = x.ndim - 1
        tb = self.tt.reshape(self.tt.shape + (1,) * nb)
        return self.field.deriv(order)(tb, x[None, None])

    def _integrate(self, dts, vals):
        """Composite Simpson per step: (steps, refine+1, ...) -> (steps, ...)."""
        w = self._weights.reshape((1, -1) + (1,) * (vals.ndim - 2))
        d = dts.reshape((-1,) + (1,) * (vals.ndim - 2))
        return (vals * w).sum(axis=1) * d

    def _cumulate(self, dts, vals):
        """Running integral from the step's left node to each refined
        node: even targets by paired Simpson panels, odd targets by the
        half-panel rule h/12 (5 f0 + 8 f1 - f2), exact to degree two."""
        r = self.refine
        h = (dts / r).reshape((-1,) + (1,) * (vals.ndim - 2))
        out = np.zeros_like(vals)
        for p in range(1, r // 2 + 1):
            seg = h / 3.0 * (vals[:, 2 * p - 2] + 4.0 * vals[:, 2 * p - 1]
                             + vals[:, 2 * p])
            out[:, 2 * p] = out[:, 2 * p - 2] + seg
        for p in range(r // 2):
            seg = h / 12.0 * (5.0 * vals[:, 2 * p] + 8.0 * vals[:, 2 * p + 1]
                              - vals[:, 2 * p + 2])
            out[:, 2 * p + 1] = out[:, 2 * p] + seg
        return out

    @staticmethod
    def _prefix(atoms):
        return np.concatenate([np.zeros_like(atoms[:1]),
                               np.cumsum(atoms, axis=0)], axis=0)

    # -- first level -------------------------------------------------------------

    def _value_prefix(self, x, order=0):
        return self._prefix(self._integrate(self.dt,
                                            self._grid_vals(order, x)))

    def increment(self, i, j, x):
        pw = self._value_prefix(x)
        return pw[np.asarray(j)] - pw[np.asarray(i)]

    def d_increment(self, i, j, x, order=1):
        pw = self._value_prefix(x, order)
        return pw[np.asarray(j)] - pw[np.asarray(i)]

    def step_increment(self, k, x):
        """W over single steps k with a per-step point batch."""
        k = np.atleast_1d(np.asarray(k))
        x = np.atleast_2d(_as_points(x, self.dim, "spatial point"))
        return self._integrate(self.dt[k], self._step_vals(k, 0, x))

    def increment_at(self, i, j, x):
        """Aligned per-pair W_{i[k], j[k]}(x[k]), chunked to bound the
        size of the refined-node tables."""
        i, j, x = _aligned_query(self.dim, i, j, x)
        n = i.shape[0]
        steps = self.grid.n_points - 1
        chunk = max(1, _AT_BUDGET // (steps * (self.refine + 1) * self.dim))
        out = np.empty((n, self.dim))
        for a in range(0, n, chunk):
            b = min(n, a + chunk)
            pw = self._value_prefix(x[a:b])
            rows = np.arange(b - a)
            out[a:b] = pw[j[a:b], rows] - pw[i[a:b], rows]
        return out

    # -- second level --------------------------------------------------------------

    _INNER_ORDER = {"value": 0, "d_outer": 0, "d2_outer": 0,
                    "d_inner": 1, "mixed": 1, "d2_inner": 2}
    _OUTER_ORDER = {"value": 1, "d_inner": 1, "d2_inner": 1,
                    "d_outer": 2, "mixed": 2, "d2_outer": 3}

    def second_prefix(self, x, y, variant="value") -> SpanPrefix:
        x = _as_points(x, self.dim, "inner point")
        y = _as_points(y, self.dim, "outer point")
        vals = self._grid_vals(self._INNER_ORDER[variant], x)
        pw = self._prefix(self._integrate(self.dt, vals))
        kc = self._cumulate(self.dt, vals)
        kref = pw[:-1].reshape((pw.shape[0] - 1, 1) + pw.shape[1:]) + kc
        gv = self._grid_vals(self._OUTER_ORDER[variant], y)
        rule = _BOUNDARY[variant]
        pa = self._prefix(self._integrate(self.dt,
                                          np.einsum(rule, gv, kref)))
        g = self._prefix(self._integrate(self.dt, gv))
        return SpanPrefix(pa, g, pw, rule)

    def second(self, i, j, x, y):
        x = _as_points(x, self.dim, "inner point")
        y = _as_points(y, self.dim, "outer point")
        scalar = np.ndim(i) == 0 and np.ndim(j) == 0 \
            and x.ndim == 1 and y.ndim == 1
        if scalar:
            key = (int(i), int(j), x.tobytes(), y.tobytes())
            hit = self._memo.get(key)
            if hit is not None:
                return hit.copy()
        out = self.second_prefix(x, y).span(np.asarray(i), np.asarray(j))
        if scalar:
            self._memo[key] = out.copy()
        return out

    def d_second(self, i, j, x, y, slot, order=1):
        variant = _VARIANT_BY_SLOT[(slot, order)]
        return self.second_prefix(x, y, variant).span(
            np.asarray(i), np.asarray(j))

    def d_second_mixed(self, i, j, x, y):
        return self.second_prefix(x, y, "mixed").span(
            np.asarray(i), np.asarray(j))

    def second_at(self, i, j, x, y):
        """Aligned per-pair WW_{i[k], j[k]}(x[k], y[k]), chunked to bound
        the size of the refined-node tables."""
        i, j, x, y = _aligned_query(self.dim, i, j, x, y)
        n = i.shape[0]
        steps = self.grid.n_points - 1
        chunk = max(1, _AT_BUDGET // (steps * (self.refine + 1)
                                      * self.dim * self.dim))
        out = np.empty((n, self.dim))
        for a in range(0, n, chunk):
            b = min(n, a + chunk)
            sp = self.second_prefix(x[a:b], y[a:b])
            out[a:b] = sp.span_diag(i[a:b], j[a:b])
        return out

    # -- per-step evaluation ---------------------------------------------------------

    def _step_vals(self, k, order, pts):
        """Rate values on the refined nodes of steps k against per-step
        points (aligned or broadcastable): (nk, refine+1, ..., dim)."""
        return self.field.deriv(order)(self.tt[k], pts[:, None])

    def second_step(self, k, x, y):
        k = np.atleast_1d(np.asarray(k))
        x = np.atleast_2d(_as_points(x, self.dim, "inner point"))
        y = np.atleast_2d(_as_points(y, self.dim, "outer point"))
        kc = self._cumulate(self.dt[k], self._step_vals(k, 0, x))
        gv = self._step_vals(k, 1, y)
        return self._integrate(self.dt[k],
                               np.einsum('...ij,...j->...i', gv, kc))

    def d_second_step(self, k, x, y, slot):
        k = np.atleast_1d(np.asarray(k))
        x = np.atleast_2d(_as_points(x, self.dim, "inner point"))
        y = np.atleast_2d(_as_points(y, self.dim, "outer point"))
        if slot == 2:
            kc = self._cumulate(self.dt[k], self._step_vals(k, 0, x))
            vals = np.einsum('...ijl,...j->...il',
                             self._step_vals(k, 2, y), kc)
        else:
            kc = self._cumulate(self.dt[k], self._step_vals(k, 1, x))
            vals = np.einsum('...ij,...jl->...il',
                             self._step_vals(k, 1, y), kc)
        return self._integrate(self.dt[k], vals)

    def step_brackets(self, k, x, y=None):
        k = np.atleast_1d(np.asarray(k))
        x = np.atleast_2d(_as_points(x, self.dim, "inner point"))
        y = x if y is None else np.atleast_2d(
            _as_points(y, self.dim, "outer point"))
        rate_x = self._step_vals(k, 0, x)
        kc = self._cumulate(self.dt[k], rate_x)
        dv = self._integrate(self.dt[k], rate_x)
        quad = (np.einsum('...p,...q->...pq', dv, dv)
                - 2.0 * self._integrate(
                    self.dt[k], np.einsum('...p,...q->...pq', kc, rate_x)))
        g_vals = self._step_vals(k, 1, y)
        gc = self._cumulate(self.dt[k], g_vals)
        dg = self._integrate(self.dt[k], g_vals)
        dw_w = (np.einsum('...pq,...q->...p', dg, dv)
                - 2.0 * self._integrate(
                    self.dt[k], np.einsum('...pq,...q->...p', gc, rate_x)))
        w_dw = (np.einsum('...pq,...q->...p', dg, dv)
                - 2.0 * self._integrate(
                    self.dt[k], np.einsum('...pq,...q->...p', g_vals, kc)))
        return {"quad": quad, "dw_w": dw_w, "w_dw": w_dw}

    def d_step_increment(self, k, x, order=1):
        """Spatial derivative of the single-step increments W_{t_k,t_{k+1}}."""
        k = np.atleast_1d(np.asarray(k))
        x = np.atleast_2d(_as_points(x, self.dim, "spatial point"))
        return self._integrate(self.dt[k], self._step_vals(k, order, x))

    def pair_step(self, k, x, y=None):
        """Per-step matrix pairing of frozen-point values,
        int W_{t_k,r}(x) (tensor) W(dr, y)."""
        k = np.atleast_1d(np.asarray(k))
        x = np.atleast_2d(_as_points(x, self.dim, "inner point"))
        y = x if y is None else np.atleast_2d(
            _as_points(y, self.dim, "outer point"))
        kc = self._cumulate(self.dt[k], self._step_vals(k, 0, x))
        rate_y = self._step_vals(k, 0, y)
        return self._integrate(self.dt[k],
                               np.einsum('...p,...q->...pq', kc, rate_y))

    def grad_pair_step(self, k, x):
        """Per-step int DW_{t_k,r}(x) W(dr, x): the derivative sits on the
        increment factor and contracts with the differential."""
        k = np.atleast_1d(np.asarray(k))
        x = np.atleast_2d(_as_points(x, self.dim, "spatial point"))
        gc = self._cumulate(self.dt[k], self._step_vals(k, 1, x))
        rate_x = self._step_vals(k, 0, x)
        return self._integrate(self.dt[k],
                               np.einsum('...pq,...q->...p', gc, rate_x))

    def d_pair_step(self, k, x):
        """Per-step pairing of the spatial-derivative increments with
        themselves: int DW_{t_k,r}(x) (tensor) DW(dr, x), shape
        (..., d, d, d, d) with axes (comp, deriv, comp, deriv)."""
        k = np.atleast_1d(np.asarray(k))
        x = np.atleast_2d(_as_points(x, self.dim, "spatial point"))
        g_vals = self._step_vals(k, 1, x)
        gc = self._cumulate(self.dt[k], g_vals)
        return self._integrate(self.dt[k],
                               np.einsum('...pq,...rs->...pqrs', gc, g_vals))

    def increment_field(self):
        return _OneSlotAdapter(self)

    def second_level_field(self):
        return _TwoSlotAdapter(self)


# ---------------------------------------------------------------------------
# norm protocol adapters


class _OneSlotAdapter:
    """Increment-field protocol for the weighted norms, with per-sample
    node tables cached so repeated index pairs cost only gathers."""

    def __init__(self, drv):
        self._drv = drv
        self.grid = drv.grid
        self._cache = {}

    def _node_table(self, x, order):
        key = (x.tobytes(), x.shape, order)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        drv = self._drv
        if isinstance(drv, CompositionDriver):
            nb = x.ndim - 1
            nodes = drv.nodes.reshape(
                (drv.nodes.shape[0],) + (1,) * nb + (drv.path_dim,))
            table = drv.bundle.partial(0, order)(nodes, x[None])
        else:
            table = drv._value_prefix(x, order)
        self._cache[key] = table
        return table

    def value(self, i, j, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        table = self._node_table(x, 0)
        return table[j] - table[i]

    def deriv(self, i, j, x, k):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        table = self._node_table(x, k)
        return table[j] - table[i]


class _TwoSlotAdapter:
    """Pair-field protocol for the weighted norms, with the span prefix
    cached per (sample pair set, variant)."""

    def __init__(self, drv):
        self._drv = drv
        self.grid = drv.grid
        self._cache = {}

    def _span_prefix(self, x, y, variant):
        key = (x.tobytes(), y.tobytes(), x.shape, y.shape, variant)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._drv.second_prefix(x, y, variant)
            self._cache[key] = hit
        return hit

    def value(self, i, j, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return self._span_prefix(x, y, "value").span(i, j)

    def deriv(self, i, j, x, y, slot, k=1):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return self._span_prefix(x, y, _VARIANT_BY_SLOT[(slot, k)]).span(i, j)

    def deriv_mixed(self, i, j, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return self._span_prefix(x, y, "mixed").span(i, j)


# ---------------------------------------------------------------------------
# constructors


def composition_driver(bundle: FunctionBundle, rp: RoughPath,
                       params: AnalysisParams | None = None
                       ) -> CompositionDriver:
    """Driver W_{s,t}(x) = f(X_t, x) - f(X_s, x) over a lifted path."""
    return CompositionDriver(bundle, rp, params)


def smooth_driver(field: SmoothField, grid: TimeGrid, refine: int = 8,
                  params: AnalysisParams | None = None) -> SmoothDriver:
    """Quadrature-backed driver for a field smooth in time."""
    return SmoothDriver(field, grid, refine, params)


def linear_adapter(rp: RoughPath, dim: int,
                   params: AnalysisParams | None = None
                   ) -> CompositionDriver:
    """Driver for the degenerate linear case W_t(x) = A_t x, with the
    matrix path A carried by the rough path flattened row-major. The
    second-order pairing is then independent of the outer argument."""
    if rp.dim != dim * dim:
        raise ValueError("flattened matrix path must have dimension dim^2")
    a = np.zeros((dim, dim * dim, dim))
    for r in range(dim):
        for c in range(dim):
            a[r, r * dim + c, c] = 1.0
    return CompositionDriver(linear_bundle(a), rp, params,
                             name="linear_adapter")


# ---------------------------------------------------------------------------
# smooth field catalog


def _zero_rate(dim, order):
    def fn(t, x):
        batch = np.broadcast_shapes(np.shape(t), np.shape(x)[:-1])
        return np.zeros(batch + (dim,) * (1 + order))
    return fn


def time_only_field(rate_of_t, dim: int) -> SmoothField:
    """W(t, x) = a(t): constant in space, so the second level vanishes.

    rate_of_t returns shape t.shape (applied to every component) or
    t.shape + (dim,).
    """

    def rate(t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        vals = np.asarray(rate_of_t(t), dtype=float)
        if vals.shape == t.shape:
            vals = vals[..., None]
        batch = np.broadcast_shapes(t.shape, x.shape[:-1])
        return np.broadcast_to(vals, batch + (dim,))

    return SmoothField(rate, dim, d1=_zero_rate(dim, 1),
                       d2=_zero_rate(dim, 2), d3=_zero_rate(dim, 3),
                       name="time_only")


def linear_field(coeff_rate, dim: int) -> SmoothField:
    """W(t, x) = a(t) x with scalar a; the rate is a'(t) x."""

    def rate(t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        return np.asarray(coeff_rate(t), dtype=float)[..., None] * x

    def d1(t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        batch = np.broadcast_shapes(t.shape, x.shape[:-1])
        c = np.broadcast_to(np.asarray(coeff_rate(t), dtype=float), batch)
        return c[..., None, None] * np.eye(dim)

    return SmoothField(rate, dim, d1=d1, d2=_zero_rate(dim, 2),
                       d3=_zero_rate(dim, 3), name="linear_in_space")


def sine_field(g, gp, gpp=None, gppp=None, dim: int = 1) -> SmoothField:
    """W(t, x) = sin(t) g(x) componentwise; the rate is cos(t) g(x)."""

    def wrap(fn, order):
        if fn is None:
            return None

        def deriv(t, x):
            t = np.asarray(t, dtype=float)
            x = np.asarray(x, dtype=float)
            vals = np.asarray(fn(x), dtype=float)
            if order:
                eye = _multi_eye(dim, 1 + order)
                vals = vals.reshape(vals.shape + (1,) * order) * eye
            return np.cos(t).reshape(t.shape + (1,) * (1 + order)) * vals

        return deriv

    return SmoothField(wrap(g, 0), dim, d1=wrap(gp, 1), d2=wrap(gpp, 2),
                       d3=wrap(gppp, 3), name="sine_envelope")


_PATH_CONTRACT = {
    0: '...ia,...a->...i',
    1: '...ial,...a->...il',
    2: '...ialk,...a->...ilk',
    3: '...ialkm,...a->...ilkm',
}


def composed_field(bundle: FunctionBundle, pathspec) -> SmoothField:
    """Rate of W(t, x) = f(X_t, x) along a smooth path: the path partial
    of f contracted with the velocity. Oracle twin of the composition
    driver over the canonical lift of the same path."""

    def make(order):
        fn = bundle.partial(1, order)

        def deriv(t, x):
            t = np.asarray(t, dtype=float)
            flat = np.ravel(t)
            xt = pathspec.x(flat).reshape(t.shape + (bundle.path_dim,))
            vt = pathspec.xdot(flat).reshape(t.shape + (bundle.path_dim,))
            vals = fn(xt, np.asarray(x, dtype=float))
            return np.einsum(_PATH_CONTRACT[order], vals, vt)

        return deriv

    return SmoothField(make(0), bundle.space_dim, d1=make(1), d2=make(2),
                       d3=make(3), name=f"composed({bundle.name})")


# ---------------------------------------------------------------------------
# consistency checks


def nl_chen_residual(driver, xs, ys, triples="auto") -> ChenReport:
    """Max over grid triples and spatial pairs of the nonlinear Chen
    defect |WW_{s,t} - WW_{s,u} - WW_{u,t} - DW_{u,t}(y)(W_{s,u}(x))|.

    triples "all" scans every s < u < t (chunked by the middle index),
    "midpoint" uses budgeted dyadic spans with u at the midpoint; "auto"
    picks all-triples up to 257 grid points. Values memoized through
    driver.second() overlay the scan, so injected corruption of the memo
    shows up as residual.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if xs.shape != ys.shape:
        raise ValueError("spatial points must come in matching batches")
    n = driver.grid.n_points
    if triples == "auto":
        triples = "all" if n <= 257 else "midpoint"
    prefix = driver.second_prefix(xs, ys)
    tables = driver.increment_field()
    inc_table = tables._node_table(xs, 0)
    dinc_table = tables._node_table(ys, 1)

    overlays = {}
    for key, val in getattr(driver, "_memo", {}).items():
        i0, j0, xb, yb = key
        for b in range(xs.shape[0]):
            if xs[b].tobytes() == xb and ys[b].tobytes() == yb:
                overlays.setdefault((i0, j0), []).append((b, val))

    def ww(i_arr, j_arr):
        out = prefix.span(i_arr, j_arr)
        for (i0, j0), hits in overlays.items():
            mask = (i_arr == i0) & (j_arr == j0)
            if np.any(mask):
                for b, val in hits:
                    out[mask, b] = val
        return out

    worst = 0.0
    scale = 0.0

    def feed(i_f, u_f, t_f):
        nonlocal worst, scale
        w_st = ww(i_f, t_f)
        germ = np.einsum('...ij,...j->...i',
                         dinc_table[t_f] - dinc_table[u_f],
                         inc_table[u_f] - inc_table[i_f])
        res = w_st - ww(i_f, u_f) - ww(u_f, t_f) - germ
        worst = max(worst, float(np.max(_flat_norms(res, batch_ndim=2))))
        scale = max(scale, float(np.max(_flat_norms(w_st, batch_ndim=2))))

    if triples == "all":
        for u in range(1, n - 1):
            ii = np.arange(0, u)
            kk = np.arange(u + 1, n)
            i_f = np.repeat(ii, kk.size)
            t_f = np.tile(kk, ii.size)
            feed(i_f, np.full(i_f.size, u), t_f)
    elif triples == "midpoint":
        i, k = driver.grid.span_pairs("auto")
        keep = (k - i) >= 2
        i, k = i[keep], k[keep]
        feed(i, (i + k) // 2, k)
    else:
        raise ValueError(f"unknown triple policy {triples!r}")
    return ChenReport(max_residual=worst, scale=scale)


def second_field(driver, x, y) -> TwoParamField:
    """Frozen-argument view of the second-order pairing as a grid field."""
    prefix = driver.second_prefix(np.asarray(x, dtype=float),
                                  np.asarray(y, dtype=float))
    return TwoParamField(
        driver.grid, (driver.dim,),
        eval_fn=lambda i, j: prefix.span(np.asarray(i), np.asarray(j)),
    )


# ---------------------------------------------------------------------------
# spatial remainder checks with weighted-norm bounds


def _segment_samples(x, y, n_theta=17):
    theta = np.linspace(0.0, 1.0, n_theta)
    seg = (x[None] * (1.0 - theta)[:, None, None]
           + y[None] * theta[:, None, None])
    return seg.reshape(-1, x.shape[-1])


def _inc_norm(field, params, samples, orders, exponent, pairs):
    """Weighted increment norm over the union of the budgeted span scan
    and the draw pairs themselves."""
    per_a, _ = weighted_increment_norm(field, params, samples, orders,
                                       exponent=exponent)
    per_b, _ = weighted_increment_norm(field, params, samples, orders,
                                       exponent=exponent, pairs=pairs)
    per = [max(a, b) for a, b in zip(per_a, per_b)]
    return per, float(sum(per))


def _pair_norm(field2, params, sx, sy, orders, wx, wy, exponent, pairs):
    per_a, _ = weighted_pair_norm(field2, params, sx, sy, orders, wx, wy,
                                  exponent=exponent)
    per_b, _ = weighted_pair_norm(field2, params, sx, sy, orders, wx, wy,
                                  exponent=exponent, pairs=pairs)
    per = [max(a, b) for a, b in zip(per_a, per_b)]
    return per, float(sum(per))


def taylor_remainder(kind, field, params: AnalysisParams, pairs, points,
                     directions=None, exponent=None):
    """Spatial remainders of increment fields against weighted bounds.

    kind "increment": second-order Taylor remainder of a one-slot field,
        F_{s,t}(y) - F_{s,t}(x) - DF_{s,t}(x)(y - x), bounded by
        (1/2) |F| (1 + |x| + |y|)^b2 |y - x|^2 dt^exponent; with
        directions (z1, z2) also the derivative remainder
        DF(y)(z2) - DF(x)(z2) - D2F(x)(y - x, z1) against
        |F| (1 + |x| + |y|)^max(b2, b3) (|y-x|^2 |z2| + |y-x| |z1-z2|).
    kind "pair": shift difference of a two-slot field over argument
        pairs, G(y1, y2) - G(x1, x2), bounded by the order-1 weighted
        norm times (1 + |x1| + |y1|)^w1 (1 + |x2| + |y2|)^w2 times the
        summed gap; directions add the directional difference
        DG(y)(z2) - DG(x)(z1) with its two-term bound.

    pairs is an (i_array, j_array) of grid index pairs, one per draw;
    points holds the spatial draws (x, y) for "increment" or the argument
    pairs ((x1, x2), (y1, y2)) for "pair"; directions likewise. Norms are
    estimated on the draw points, segment interpolants between them, and
    the draw index pairs, so the suprema behind the mean-value bounds are
    represented in the sample set. Returns measured / bound / ratio
    arrays plus 'ok' flags.
    """
    i_arr = np.asarray(pairs[0], dtype=int)
    j_arr = np.asarray(pairs[1], dtype=int)
    dt = field.grid.times[j_arr] - field.grid.times[i_arr]
    b = params.beta
    tol = 1.0 + 1e-9

    if kind == "increment":
        if exponent is None:
            exponent = params.alpha
        x = np.atleast_2d(np.asarray(points[0], dtype=float))
        y = np.atleast_2d(np.asarray(points[1], dtype=float))
        nb = x.shape[0]
        samples = np.concatenate([x, y, _segment_samples(x, y)], axis=0)
        meas = np.zeros(nb)
        for k in range(nb):
            a, c = i_arr[k], j_arr[k]
            val = (field.value(a, c, y)[k] - field.value(a, c, x)[k]
                   - np.einsum('ij,j->i', field.deriv(a, c, x, 1)[k],
                               (y - x)[k]))
            meas[k] = float(np.sqrt(np.sum(val ** 2)))
        _, total2 = _inc_norm(field, params, samples, [0, 1, 2],
                              exponent, (i_arr, j_arr))
        wxy = (1.0 + np.linalg.norm(x, axis=-1)
               + np.linalg.norm(y, axis=-1)) ** b[2]
        gap2 = np.sum((y - x) ** 2, axis=-1)
        bound = 0.5 * total2 * wxy * gap2 * dt ** exponent
        out = {"measured": meas, "bound": bound,
               "ratio": meas / np.maximum(bound, 1e-300),
               "ok": bool(np.all(meas <= bound * tol + 1e-300))}
        if directions is not None:
            z1 = np.atleast_2d(np.asarray(directions[0], dtype=float))
            z2 = np.atleast_2d(np.asarray(directions[1], dtype=float))
            dmeas = np.zeros(nb)
            for k in range(nb):
                a, c = i_arr[k], j_arr[k]
                dgap = (field.deriv(a, c, y, 1)[k]
                        - field.deriv(a, c, x, 1)[k])
                val = (np.einsum('ij,j->i', dgap, z2[k])
                       - np.einsum('ijl,j,l->i',
                                   field.deriv(a, c, x, 2)[k],
                                   (y - x)[k], z1[k]))
                dmeas[k] = float(np.sqrt(np.sum(val ** 2)))
            _, total3 = _inc_norm(field, params, samples, [0, 1, 2, 3],
                                  exponent, (i_arr, j_arr))
            w3 = (1.0 + np.linalg.norm(x, axis=-1)
                  + np.linalg.norm(y, axis=-1)) ** max(b[2], b[3])
            gap = np.linalg.norm(y - x, axis=-1)
            dbound = (total3 * w3
                      * (gap ** 2 * np.linalg.norm(z2, axis=-1)
                         + gap * np.linalg.norm(z1 - z2, axis=-1))
                      * dt ** exponent)
            out.update({
                "deriv_measured": dmeas, "deriv_bound": dbound,
                "deriv_ratio": dmeas / np.maximum(dbound, 1e-300),
                "deriv_ok": bool(np.all(dmeas <= dbound * tol + 1e-300)),
            })
        return out

    if kind == "pair":
        if exponent is None:
            exponent = 2.0 * params.alpha
        x1 = np.atleast_2d(np.asarray(points[0][0], dtype=float))
        x2 = np.atleast_2d(np.asarray(points[0][1], dtype=float))
        y1 = np.atleast_2d(np.asarray(points[1][0], dtype=float))
        y2 = np.atleast_2d(np.asarray(points[1][1], dtype=float))
        nb = x1.shape[0]
        sx = np.concatenate([x1, y1, _segment_samples(x1, y1)], axis=0)
        sy = np.concatenate([x2, y2, _segment_samples(x2, y2)], axis=0)
        wx = [b[0], max(b[0], b[1]), max(b[0], b[1], b[2])]
        wy = [b[1], max(b[1], b[2]), max(b[1], b[2], b[3])]
        meas = np.zeros(nb)
        for k in range(nb):
            a, c = i_arr[k], j_arr[k]
            val = (field.value(a, c, y1, y2)[k]
                   - field.value(a, c, x1, x2)[k])
            meas[k] = float(np.sqrt(np.sum(val ** 2)))
        _, total1 = _pair_norm(field, params, sx, sy, [0, 1], wx[:2],
                               wy[:2], exponent, (i_arr, j_arr))
        w_in = (1.0 + np.linalg.norm(x1, axis=-1)
                + np.linalg.norm(y1, axis=-1)) ** wx[1]
        w_out = (1.0 + np.linalg.norm(x2, axis=-1)
                 + np.linalg.norm(y2, axis=-1)) ** wy[1]
        gap = (np.linalg.norm(y1 - x1, axis=-1)
               + np.linalg.norm(y2 - x2, axis=-1))
        bound = total1 * w_in * w_out * gap * dt ** exponent
        out = {"measured": meas, "bound": bound,
               "ratio": meas / np.maximum(bound, 1e-300),
               "ok": bool(np.all(meas <= bound * tol + 1e-300))}
        if directions is not None:
            z11 = np.atleast_2d(np.asarray(directions[0][0], dtype=float))
            z12 = np.atleast_2d(np.asarray(directions[0][1], dtype=float))
            z21 = np.atleast_2d(np.asarray(directions[1][0], dtype=float))
            z22 = np.atleast_2d(np.asarray(directions[1][1], dtype=float))
            dmeas = np.zeros(nb)
            for k in range(nb):
                a, c = i_arr[k], j_arr[k]
                at_y = (np.einsum('il,l->i',
                                  field.deriv(a, c, y1, y2, 1)[k], z21[k])
                        + np.einsum('il,l->i',
                                    field.deriv(a, c, y1, y2, 2)[k],
                                    z22[k]))
                at_x = (np.einsum('il,l->i',
                                  field.deriv(a, c, x1, x2, 1)[k], z11[k])
                        + np.einsum('il,l->i',
                                    field.deriv(a, c, x1, x2, 2)[k],
                                    z12[k]))
                dmeas[k] = float(np.sqrt(np.sum((at_y - at_x) ** 2)))
            _, total2 = _pair_norm(field, params, sx, sy, [0, 1, 2],
                                   wx, wy, exponent, (i_arr, j_arr))
            w_in2 = (1.0 + np.linalg.norm(x1, axis=-1)
                     + np.linalg.norm(y1, axis=-1)) ** max(wx[1], wx[2])
            w_out2 = (1.0 + np.linalg.norm(x2, axis=-1)
                      + np.linalg.norm(y2, axis=-1)) ** max(wy[1], wy[2])
            znorm = (np.linalg.norm(z21, axis=-1)
                     + np.linalg.norm(z22, axis=-1))
            zgap = (np.linalg.norm(z11 - z21, axis=-1)
                    + np.linalg.norm(z12 - z22, axis=-1))
            dbound = (total2 * w_in2 * w_out2 * (gap * znorm + zgap)
                      * dt ** exponent)
            out.update({
                "deriv_measured": dmeas, "deriv_bound": dbound,
                "deriv_ratio": dmeas / np.maximum(dbound, 1e-300),
                "deriv_ok": bool(np.all(dmeas <= dbound * tol + 1e-300)),
            })
        return out

    raise ValueError(f"unknown remainder kind {kind!r}")
