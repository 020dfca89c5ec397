"""Discrete convex analysis on grids: conjugates, hulls, subdifferentials."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .grids import Grid, GridFn, gradient

AFFINE_TOL = 1e-12


# ---------------------------------------------------------------------------
# Lower convex hulls of scattered graphs


@dataclass(frozen=True, eq=False)
class LowerHull:
    """Lower facets of the convex hull of graph points (y_j, z_j)."""

    points: np.ndarray        # (N, d)
    values: np.ndarray        # (N,)
    slopes: np.ndarray        # (F, d) facet gradients
    offsets: np.ndarray       # (F,) facet intercepts: plane z = slope.y + offset
    facets: np.ndarray        # (F, d+1) vertex indices into points
    vertex_ids: np.ndarray    # indices of points that are lower-hull vertices
    affine: bool = False      # degenerate input: all values on one hyperplane

    def evaluate(self, pts):
        """Value of the hull (max over facet planes) at arbitrary points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.full(pts.shape[0], -np.inf)
        chunk = max(1, int(4e6 // max(len(self.slopes), 1)))
        for k in range(0, pts.shape[0], chunk):
            block = pts[k : k + chunk]
            vals = block @ self.slopes.T + self.offsets
            out[k : k + chunk] = vals.max(axis=1)
        return out


def _affine_fit(points, values):
    A = np.concatenate([points, np.ones((points.shape[0], 1))], axis=1)
    coef, *_ = np.linalg.lstsq(A, values, rcond=None)
    resid = values - A @ coef
    return coef, float(np.max(np.abs(resid))) if values.size else 0.0


def lower_convex_hull(points, values):
    """Lower hull of the lifted points; affine data handled explicitly."""
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    n, d = points.shape
    coef, resid = _affine_fit(points, values)
    scale = 1.0 + float(np.max(np.abs(values))) if n else 1.0
    if resid <= AFFINE_TOL * scale:
        return LowerHull(points=points, values=values,
                         slopes=coef[:d][None, :],
                         offsets=np.array([coef[d]]),
                         facets=np.empty((0, d + 1), dtype=int),
                         vertex_ids=np.arange(n),
                         affine=True)
    # gauge away the affine part: hull facets are unchanged, qhull sees a
    # better-conditioned lift
    gauge = values - (points @ coef[:d] + coef[d])
    lifted = np.concatenate([points, gauge[:, None]], axis=1)
    try:
        hull = ConvexHull(lifted)
    except QhullError:
        hull = ConvexHull(lifted, qhull_options="QJ")
    eq = hull.equations  # rows (a, b, c): a.y + b z + c = 0
    lower = eq[:, d] < -1e-12
    a = eq[lower, :d]
    b = eq[lower, d]
    c = eq[lower, d + 1]
    slopes = -a / b[:, None] + coef[:d]
    offsets = -c / b + coef[d]
    facets = hull.simplices[lower]
    vts = np.unique(facets.ravel())
    return LowerHull(points=points, values=values, slopes=slopes,
                     offsets=offsets, facets=facets, vertex_ids=vts)


def hull_values_at_sites(hull: LowerHull):
    """Hull evaluated at its own sample sites (equals the data at vertices)."""
    out = hull.values.copy()
    if hull.affine:
        return hull.points @ hull.slopes[0] + hull.offsets[0]
    non_vertex = np.setdiff1d(np.arange(len(hull.values)), hull.vertex_ids)
    if non_vertex.size:
        out[non_vertex] = hull.evaluate(hull.points[non_vertex])
    return out


# ---------------------------------------------------------------------------
# Legendre-Fenchel transforms


def _slope_box_grid(fn: GridFn, shape=None):
    grads, valid = gradient(fn)
    sel = valid & fn.mask
    if not np.any(sel):
        raise ValueError("empty mask")
    lo = np.array([g[sel].min() for g in grads])
    hi = np.array([g[sel].max() for g in grads])
    h = (hi - lo) / (np.array(fn.grid.shape) - 1)
    h = np.where(h > 0, h, 1.0)
    return Grid(lo=lo - h, hi=hi + h, shape=shape or fn.grid.shape)


def legendre_transform(fn: GridFn, target: Grid | None = None):
    """Discrete conjugate g(y) = max over masked nodes x of (x.y - f(x)).

    The target grid defaults to the bounding box of the observed gradients
    plus one cell of margin.  Ties in the maximum resolve to the lowest node
    index (np.argmax convention), making the output deterministic.
    """
    if not np.any(fn.mask):
        raise ValueError("empty mask")
    if target is None:
        target = _slope_box_grid(fn)
    X = fn.masked_nodes()
    fX = fn.masked_values()
    Y = target.nodes()
    out = np.empty(Y.shape[0])
    chunk = max(1, int(8e6 // X.shape[0]))
    for k in range(0, Y.shape[0], chunk):
        vals = Y[k : k + chunk] @ X.T - fX
        out[k : k + chunk] = vals.max(axis=1)
    values = out.reshape(target.shape)
    return GridFn(grid=target, values=values,
                  mask=np.ones(target.shape, dtype=bool), convex=True)


def biconjugate(fn: GridFn):
    """Largest convex minorant on the grid (lower hull of the masked graph)."""
    if not np.any(fn.mask):
        raise ValueError("empty mask")
    hull = lower_convex_hull(fn.masked_nodes(), fn.masked_values())
    vals = fn.values.copy()
    vals[fn.mask] = hull_values_at_sites(hull)
    # rounding in the facet planes can leave a marginal midpoint defect;
    # nudging onto the data where the hull touches it keeps the certificate
    vals[fn.mask] = np.minimum(vals[fn.mask], fn.masked_values())
    return GridFn(grid=fn.grid, values=vals, mask=fn.mask, convex=True)


def convexify_values(grid: Grid, values, mask):
    """Hull projection used by solvers to certify convexity of an output."""
    fn = GridFn(grid=grid, values=values, mask=mask, convex=False)
    return biconjugate(fn)


# ---------------------------------------------------------------------------
# Subdifferentials (Oliker-Prussner cells)


def subgradient_cells(fn: GridFn, want_cells=False):
    """Per masked node: the polytope of supporting slopes of the lower hull.

    Returns (volumes array over masked order, diameters array, cells).
    `cells` is a list of slope-vertex arrays when `want_cells`, else None.
    Nodes that are not lower-hull vertices get empty cells of zero volume.
    """
    pts = fn.masked_nodes()
    vals = fn.masked_values()
    hull = lower_convex_hull(pts, vals)
    n, d = pts.shape
    vols = np.zeros(n)
    diam = np.zeros(n)
    if hull.affine:
        cells = [hull.slopes[0][None, :]] * n if want_cells else None
        return vols, diam, cells
    nf = hull.facets.shape[0]
    flat_nodes = hull.facets.ravel()
    flat_facets = np.repeat(np.arange(nf), d + 1)
    order = np.argsort(flat_nodes, kind="stable")
    sorted_nodes = flat_nodes[order]
    sorted_facets = flat_facets[order]
    starts = np.searchsorted(sorted_nodes, np.arange(n), side="left")
    ends = np.searchsorted(sorted_nodes, np.arange(n), side="right")
    counts = ends - starts
    cells = [np.empty((0, d))] * n if want_cells else None
    if d == 2:
        for k in np.unique(counts[counts > 0]):
            sel = np.nonzero(counts == k)[0]
            gather = np.stack(
                [sorted_facets[starts[sel] + j] for j in range(k)], axis=1)
            g = hull.slopes[gather]  # (nsel, k, 2)
            c = g.mean(axis=1, keepdims=True)
            ang = np.arctan2(g[:, :, 1] - c[:, :, 1], g[:, :, 0] - c[:, :, 0])
            idx = np.argsort(ang, axis=1)
            gs = np.take_along_axis(g, idx[:, :, None], axis=1)
            x, y = gs[:, :, 0], gs[:, :, 1]
            xr, yr = np.roll(x, -1, axis=1), np.roll(y, -1, axis=1)
            vols[sel] = 0.5 * np.abs(np.sum(x * yr - y * xr, axis=1))
            span = g.max(axis=1) - g.min(axis=1)
            diam[sel] = np.sqrt(np.sum(span**2, axis=1))
            if want_cells:
                for i, node in enumerate(sel):
                    cells[node] = g[i]
    else:
        for i in range(n):
            if counts[i] == 0:
                continue
            g = hull.slopes[sorted_facets[starts[i]:ends[i]]]
            span = g.max(axis=0) - g.min(axis=0)
            diam[i] = float(np.sqrt(np.sum(span**2)))
            if g.shape[0] >= d + 1:
                try:
                    vols[i] = float(ConvexHull(g).volume)
                except QhullError:
                    vols[i] = 0.0
            if want_cells:
                cells[i] = g
    return vols, diam, cells


def subgradient_cell(fn: GridFn, node_index):
    """Slope polytope at one interior node (multi-index into the grid).

    Returns (vertex array, volume).  Raises for nodes on the mask boundary.
    """
    if not fn.convex:
        raise ValueError("convexity flag not set")
    idx = tuple(int(i) for i in node_index)
    if not fn.mask[idx]:
        raise ValueError("node is not masked interior")
    for k in range(fn.grid.d):
        for step in (-1, 1):
            nb = list(idx)
            nb[k] += step
            if (nb[k] < 0 or nb[k] >= fn.grid.shape[k]
                    or not fn.mask[tuple(nb)]):
                raise ValueError("node lies on the mask boundary")
    flat = np.ravel_multi_index(idx, fn.grid.shape)
    masked_order = np.cumsum(fn.mask.ravel()) - 1
    vols, _, cells = subgradient_cells(fn, want_cells=True)
    i = masked_order[flat]
    return cells[i], float(vols[i])


# ---------------------------------------------------------------------------
# Envelopes of boundary data


@dataclass(frozen=True, eq=False)
class GraphEnvelope:
    """Lower convex hull of boundary samples, evaluable at interior points."""

    hull: LowerHull

    def __call__(self, pts):
        return self.hull.evaluate(pts)

    @property
    def points(self):
        return self.hull.points

    @property
    def values(self):
        return self.hull.values


def envelope_from_boundary(samples_y, samples_z):
    """Supremum of affine minorants of boundary data (y_j, z_j)."""
    y = np.atleast_2d(np.asarray(samples_y, dtype=float))
    if y.shape[0] == 1 and y.shape[1] > 1 and np.ndim(samples_y) == 1:
        y = y.T
    z = np.asarray(samples_z, dtype=float)
    d = y.shape[1]
    if y.shape[0] < d + 1:
        raise ValueError("need at least d+1 samples")
    spread = y - y.mean(axis=0)
    if np.linalg.matrix_rank(spread, tol=1e-12) < d:
        raise ValueError("samples do not affinely span")
    if d == 1:
        return _envelope_1d(y[:, 0], z)
    hull = lower_convex_hull(y, z)
    return GraphEnvelope(hull=hull)


def _envelope_1d(y, z):
    order = np.argsort(y)
    y, z = y[order], z[order]
    # lower chain by monotone scan
    keep = []
    for i in range(len(y)):
        while len(keep) >= 2:
            i0, i1 = keep[-2], keep[-1]
            cross = (y[i1] - y[i0]) * (z[i] - z[i0]) - (z[i1] - z[i0]) * (y[i] - y[i0])
            if cross <= 0:
                keep.pop()
            else:
                break
        keep.append(i)
    ys, zs = y[keep], z[keep]
    slopes = np.diff(zs) / np.diff(ys)
    offsets = zs[:-1] - slopes * ys[:-1]
    hull = LowerHull(points=y[:, None], values=z,
                     slopes=slopes[:, None] if len(slopes) else np.zeros((1, 1)),
                     offsets=offsets if len(offsets) else zs[:1],
                     facets=np.empty((0, 2), dtype=int),
                     vertex_ids=np.array(keep), affine=len(slopes) == 0)
    return GraphEnvelope(hull=hull)
