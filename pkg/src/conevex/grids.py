"""Structured grids over the dual cross-section and functions sampled on them."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

CONVEXITY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform tensor grid on a box; node (i1..id) sits at lo + i*h."""

    lo: np.ndarray
    hi: np.ndarray
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))

    @property
    def d(self):
        return len(self.shape)

    @property
    def h(self):
        return (self.hi - self.lo) / (np.array(self.shape) - 1)

    @property
    def hmax(self):
        return float(np.max(self.h))

    def axes(self):
        return [np.linspace(self.lo[k], self.hi[k], self.shape[k])
                for k in range(self.d)]

    def meshgrid(self):
        return np.meshgrid(*self.axes(), indexing="ij")

    def nodes(self):
        """All node coordinates, shape (N, d) in C order."""
        mesh = self.meshgrid()
        return np.stack([m.ravel() for m in mesh], axis=1)

    def index_of(self, pts):
        """Continuous index coordinates of points (for interpolation)."""
        return (np.asarray(pts, float) - self.lo) / self.h


def grid_for_cone(cone, n):
    """Grid with n nodes per axis on the bounding box of omega_star."""
    lo, hi = cone.omega_star.bounding_box()
    return Grid(lo=lo, hi=hi, shape=(n,) * cone.d)


@dataclass(frozen=True, eq=False)
class GridFn:
    """Real function sampled at the grid nodes, with an interior mask.

    Values at unmasked nodes are carried but have no meaning for the
    operations in this package unless stated otherwise.
    """

    grid: Grid
    values: np.ndarray
    mask: np.ndarray
    convex: bool = False

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        if self.values.shape != self.grid.shape or self.mask.shape != self.grid.shape:
            raise ValueError("values/mask shape does not match grid")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise ValueError("non-finite values at masked nodes")
        if self.convex:
            defect = midpoint_convexity_defect(self)
            tol = CONVEXITY_TOL * (1.0 + np.max(np.abs(self.values[self.mask])))
            if defect > tol:
                raise ValueError(
                    f"convexity flag set but midpoint defect {defect:.3e} > {tol:.3e}")

    def with_values(self, values, convex=None):
        return replace(self, values=values,
                       convex=self.convex if convex is None else convex)

    def masked_nodes(self):
        return self.grid.nodes()[self.mask.ravel()]

    def masked_values(self):
        return self.values[self.mask]


def mask_for_cone(grid, cone, min_distance=0.0):
    pts = grid.nodes()
    bd = cone.boundary_distance(pts).reshape(grid.shape)
    return bd > min_distance


def interior_margin_mask(grid, cone, cells):
    """Nodes at least `cells` grid cells away from the domain boundary."""
    return mask_for_cone(grid, cone, min_distance=cells * grid.hmax)


def midpoint_convexity_defect(fn: GridFn):
    """Largest violation of f(n-e) + f(n+e) - 2 f(n) >= 0 along axes and
    diagonals (only where all three nodes are masked)."""
    v, m = fn.values, fn.mask
    d = fn.grid.d
    worst = 0.0
    offsets = []
    for k in range(d):
        e = np.zeros(d, dtype=int)
        e[k] = 1
        offsets.append(e)
    if d == 2:
        offsets.append(np.array([1, 1]))
        offsets.append(np.array([1, -1]))
    for e in offsets:
        sl_c = tuple(slice(1, -1) if ek != 0 else slice(None) for ek in e)
        plus = tuple(slice(1 + ek, v.shape[i] - 1 + ek) if e[i] != 0 else slice(None)
                     for i, ek in enumerate(e))
        minus = tuple(slice(1 - ek, v.shape[i] - 1 - ek) if e[i] != 0 else slice(None)
                      for i, ek in enumerate(e))
        ok = m[sl_c] & m[plus] & m[minus]
        if not np.any(ok):
            continue
        second = v[plus] + v[minus] - 2.0 * v[sl_c]
        worst = max(worst, float(np.max(-second[ok], initial=0.0)))
    return worst


def bilinear(fn: GridFn, pts, outside="raise"):
    """Bilinear interpolation at points; a point is usable when the four
    surrounding nodes are all masked."""
    grid = fn.grid
    if grid.d != 2:
        raise NotImplementedError("bilinear interpolation implemented for d=2")
    pts = np.asarray(pts, dtype=float)
    single = pts.ndim == 1
    P = np.atleast_2d(pts)
    u = grid.index_of(P)
    i = np.floor(u).astype(int)
    n1, n2 = grid.shape
    i[:, 0] = np.clip(i[:, 0], 0, n1 - 2)
    i[:, 1] = np.clip(i[:, 1], 0, n2 - 2)
    f = u - i
    inside_box = np.all((u >= -1e-12) & (u <= np.array(grid.shape) - 1 + 1e-12), axis=1)
    v = fn.values
    m = fn.mask
    i0, j0 = i[:, 0], i[:, 1]
    corner_ok = (m[i0, j0] & m[i0 + 1, j0] & m[i0, j0 + 1] & m[i0 + 1, j0 + 1])
    usable = inside_box & corner_ok
    if outside == "raise" and not np.all(usable):
        raise ValueError("interpolation point escapes the masked grid")
    w00 = (1 - f[:, 0]) * (1 - f[:, 1])
    w10 = f[:, 0] * (1 - f[:, 1])
    w01 = (1 - f[:, 0]) * f[:, 1]
    w11 = f[:, 0] * f[:, 1]
    out = (w00 * v[i0, j0] + w10 * v[i0 + 1, j0]
           + w01 * v[i0, j0 + 1] + w11 * v[i0 + 1, j0 + 1])
    if outside == "nan":
        out = np.where(usable, out, np.nan)
    return float(out[0]) if single else out


def interpolation_error_bound(fn: GridFn):
    """Bilinear interpolation error bound (h^2/8) * max |axis second derivative|."""
    v, m = fn.values, fn.mask
    h = fn.grid.h
    bound = 0.0
    for k in range(fn.grid.d):
        sl_c = [slice(None)] * fn.grid.d
        sl_p = [slice(None)] * fn.grid.d
        sl_m = [slice(None)] * fn.grid.d
        sl_c[k] = slice(1, -1)
        sl_p[k] = slice(2, None)
        sl_m[k] = slice(0, -2)
        ok = m[tuple(sl_c)] & m[tuple(sl_p)] & m[tuple(sl_m)]
        if not np.any(ok):
            continue
        dd = (v[tuple(sl_p)] + v[tuple(sl_m)] - 2 * v[tuple(sl_c)])[ok] / h[k] ** 2
        bound = max(bound, float(np.max(np.abs(dd))) * h[k] ** 2 / 8.0)
    return bound


# ---------------------------------------------------------------------------
# Discrete derivatives (centered differences)


def gradient(fn: GridFn):
    """Centered gradient where both axis neighbours are masked, one-sided at
    mask edges.  Returns (list of d arrays, validity mask)."""
    v, m = fn.values, fn.mask
    h = fn.grid.h
    d = fn.grid.d
    grads = []
    valid = m.copy()
    for k in range(d):
        g = np.zeros_like(v)
        vp = np.roll(v, -1, axis=k)
        vm = np.roll(v, 1, axis=k)
        mp = np.roll(m, -1, axis=k)
        mm = np.roll(m, 1, axis=k)
        # roll wraps around; edge nodes of the box are never masked interior
        both = m & mp & mm
        g[both] = (vp[both] - vm[both]) / (2 * h[k])
        fwd = m & mp & ~mm
        g[fwd] = (vp[fwd] - v[fwd]) / h[k]
        bwd = m & ~mp & mm
        g[bwd] = (v[bwd] - vm[bwd]) / h[k]
        valid &= mp | mm
        grads.append(g)
    return grads, valid


def hessian(fn: GridFn):
    """Centered second differences.  Returns dict {(i,j): array} and the mask
    of nodes whose full stencil is masked."""
    v, m = fn.values, fn.mask
    h = fn.grid.h
    d = fn.grid.d
    H = {}
    ok = m.copy()
    for k in range(d):
        vp = np.roll(v, -1, axis=k)
        vm = np.roll(v, 1, axis=k)
        mp = np.roll(m, -1, axis=k)
        mm = np.roll(m, 1, axis=k)
        good = m & mp & mm
        Hkk = np.zeros_like(v)
        Hkk[good] = (vp[good] + vm[good] - 2 * v[good]) / h[k] ** 2
        H[(k, k)] = Hkk
        ok &= good
    for k in range(d):
        for l in range(k + 1, d):
            vpp = np.roll(np.roll(v, -1, axis=k), -1, axis=l)
            vmm = np.roll(np.roll(v, 1, axis=k), 1, axis=l)
            vpm = np.roll(np.roll(v, -1, axis=k), 1, axis=l)
            vmp = np.roll(np.roll(v, 1, axis=k), -1, axis=l)
            mpp = np.roll(np.roll(m, -1, axis=k), -1, axis=l)
            mmm = np.roll(np.roll(m, 1, axis=k), 1, axis=l)
            mpm = np.roll(np.roll(m, -1, axis=k), 1, axis=l)
            mmp = np.roll(np.roll(m, 1, axis=k), -1, axis=l)
            good = m & mpp & mmm & mpm & mmp
            Hkl = np.zeros_like(v)
            Hkl[good] = (vpp[good] + vmm[good] - vpm[good] - vmp[good]) / (4 * h[k] * h[l])
            H[(k, l)] = Hkl
            H[(l, k)] = Hkl
            ok &= good
    return H, ok


def hessian_determinant(fn: GridFn):
    H, ok = hessian(fn)
    d = fn.grid.d
    if d == 2:
        det = H[(0, 0)] * H[(1, 1)] - H[(0, 1)] ** 2
    elif d == 3:
        det = (H[(0, 0)] * (H[(1, 1)] * H[(2, 2)] - H[(1, 2)] ** 2)
               - H[(0, 1)] * (H[(0, 1)] * H[(2, 2)] - H[(1, 2)] * H[(0, 2)])
               + H[(0, 2)] * (H[(0, 1)] * H[(1, 2)] - H[(1, 1)] * H[(0, 2)]))
    else:
        raise NotImplementedError("hessian determinant for d > 3")
    return det, ok


def positive_definite_mask(fn: GridFn):
    """Nodes where the centered discrete Hessian is positive definite."""
    H, ok = hessian(fn)
    d = fn.grid.d
    if d == 2:
        det = H[(0, 0)] * H[(1, 1)] - H[(0, 1)] ** 2
        return ok & (H[(0, 0)] > 0) & (det > 0), ok
    det, okd = hessian_determinant(fn)
    lead1 = H[(0, 0)]
    lead2 = H[(0, 0)] * H[(1, 1)] - H[(0, 1)] ** 2
    return ok & (lead1 > 0) & (lead2 > 0) & (det > 0), ok


# ---------------------------------------------------------------------------
# Cell sets (boolean masks over nodes; each node owns the h-cell centered there)


def cell_set_ball(grid, center, radius):
    pts = grid.nodes()
    inside = np.linalg.norm(pts - np.asarray(center, float), axis=1) <= radius
    return inside.reshape(grid.shape)


def cell_volume(grid):
    return float(np.prod(grid.h))


# ---------------------------------------------------------------------------
# CSV serialization: one node per line (index, coords, value, mask bit)


def save_gridfn(path, fn: GridFn, header: Optional[dict] = None):
    grid = fn.grid
    meta = dict(header or {})
    meta["box_lo"] = grid.lo.tolist()
    meta["box_hi"] = grid.hi.tolist()
    meta["shape"] = list(grid.shape)
    meta["convex"] = bool(fn.convex)
    pts = grid.nodes()
    vals = fn.values.ravel()
    msk = fn.mask.ravel().astype(int)
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        cols = ["index"] + [f"y{k+1}" for k in range(grid.d)] + ["value", "mask"]
        fh.write(",".join(cols) + "\n")
        for i in range(pts.shape[0]):
            coord = ",".join(f"{c:.17g}" for c in pts[i])
            fh.write(f"{i},{coord},{vals[i]:.17g},{msk[i]}\n")


def load_gridfn(path):
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError("missing JSON header line")
        meta = json.loads(first[1:].strip())
        fh.readline()  # column header
        rows = [line.strip().split(",") for line in fh if line.strip()]
    shape = tuple(meta["shape"])
    grid = Grid(lo=np.array(meta["box_lo"]), hi=np.array(meta["box_hi"]), shape=shape)
    n = int(np.prod(shape))
    vals = np.empty(n)
    msk = np.empty(n, dtype=bool)
    for row in rows:
        i = int(row[0])
        vals[i] = float(row[-2])
        msk[i] = row[-1] == "1"
    fn = GridFn(grid=grid, values=vals.reshape(shape), mask=msk.reshape(shape),
                convex=False)
    if meta.get("convex"):
        fn = GridFn(grid=grid, values=fn.values, mask=fn.mask, convex=True)
    return fn, meta
