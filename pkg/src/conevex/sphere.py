"""Solver for the Monge-Ampere problem det Hess w = (-w)^(-d-2), w = 0 on the
boundary of the dual cross-section, and the fields derived from its solution.

Two discretisations cooperate:

* a monotone wide-stencil operator (minimum over stencil direction pairs of
  products of second differences, arms shortened where a stencil ray exits
  the domain) drives a damped fixed-point presolve on the right-hand side
  (-w_k)^(-d-2); it is unconditionally stable but only first-order accurate
  near the degenerate boundary;
* the substitution v = w^2 turns the problem into the regular quasilinear
  equation  v det(-Hess v) + (1/2) grad(v)^T adj(-Hess v) grad(v) = 2^d
  with v = 0 boundary data.  v vanishes linearly instead of like sqrt, so
  centered differences (boundary-shortened near the rim) stay accurate; a
  damped Newton on this system sharpens the presolve to discretisation
  accuracy.

The final field is hull-projected so its convexity certificate holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .convex import convexify_values
from .grids import Grid, GridFn, bilinear, grid_for_cone, gradient, hessian, mask_for_cone

# direction vectors (integer grid offsets); arms come in +/- pairs.
# 0..3: axes, 4..7: diagonals, 8..15: knight-move pairs for the wide stencil.
_DIRS_2D = np.array(
    [[1, 0], [-1, 0], [0, 1], [0, -1],
     [1, 1], [-1, -1], [1, -1], [-1, 1],
     [1, 2], [-1, -2], [2, -1], [-2, 1],
     [2, 1], [-2, -1], [1, -2], [-1, 2]])
# orthogonal direction pairs as (arm+, arm-, arm+, arm-) indices into _DIRS_2D
_PAIRS_2D = [(0, 1, 2, 3), (4, 5, 6, 7), (8, 9, 10, 11), (12, 13, 14, 15)]


@dataclass(frozen=True, eq=False)
class _Stencil:
    """Per-node arm data on the masked set."""

    index: np.ndarray          # full-grid -> masked index or -1
    flat: np.ndarray           # masked -> flat grid index
    nbr: np.ndarray            # (M, n_arms) masked neighbour index or -1
    rho: np.ndarray            # (M, n_arms) arm length (boundary-shortened)
    bulk: np.ndarray           # (M,) full one-ring interior


def _build_stencil(grid: Grid, mask, cone) -> _Stencil:
    if grid.d != 2:
        raise NotImplementedError("affine-sphere solver implemented for d = 2")
    h = grid.h
    shape = grid.shape
    flat_mask = mask.ravel()
    M = int(flat_mask.sum())
    index = -np.ones(flat_mask.size, dtype=int)
    index[flat_mask] = np.arange(M)
    flat = np.nonzero(flat_mask)[0]
    ij = np.stack(np.unravel_index(flat, shape), axis=1)
    pts = grid.lo + ij * h

    n_arms = _DIRS_2D.shape[0]
    nbr = -np.ones((M, n_arms), dtype=int)
    rho = np.empty((M, n_arms))
    for a, v in enumerate(_DIRS_2D):
        tgt = ij + v
        ok = np.all((tgt >= 0) & (tgt < np.array(shape)), axis=1)
        tflat = np.where(ok, np.ravel_multi_index(
            (np.clip(tgt[:, 0], 0, shape[0] - 1),
             np.clip(tgt[:, 1], 0, shape[1] - 1)), shape), -1)
        tmask = np.where(ok, index[tflat], -1)
        nbr[:, a] = tmask
        step = v * h
        full = float(np.linalg.norm(step))
        rho[:, a] = full
        short = np.nonzero(tmask < 0)[0]
        for i in short:
            t = cone.omega_star.ray_exit(pts[i], step / full)
            rho[i, a] = min(max(float(t), 1e-3 * full), full)

    one_ring = np.all(nbr[:, :8] >= 0, axis=1)
    return _Stencil(index=index, flat=flat, nbr=nbr, rho=rho, bulk=one_ring)


def _arm_values(u, st: _Stencil, boundary=0.0):
    vals = np.where(st.nbr >= 0, u[np.clip(st.nbr, 0, None)], boundary)
    return vals


# ---------------------------------------------------------------------------
# Monotone wide-stencil operator and its Gauss-Seidel relaxation


def _pair_quantities(u, st: _Stencil):
    """Weighted line averages A and coefficients m = 2/(rho+ rho-) per line."""
    vals = _arm_values(u, st)
    A = np.empty((u.size, len(_PAIRS_2D) * 2))
    m = np.empty_like(A)
    for p, (ap, am, bp, bm) in enumerate(_PAIRS_2D):
        for q, (ip, im) in enumerate(((ap, am), (bp, bm))):
            rp, rm = st.rho[:, ip], st.rho[:, im]
            wsum = 1.0 / rp + 1.0 / rm
            A[:, 2 * p + q] = (vals[:, ip] / rp + vals[:, im] / rm) / wsum
            m[:, 2 * p + q] = 2.0 / (rp * rm)
    return A, m


def _monotone_roots(u, rhs, st: _Stencil):
    """Per node: the per-pair local solves of (A1-u)(A2-u) = rhs/(m1 m2)."""
    A, m = _pair_quantities(u, st)
    roots = np.empty((u.size, len(_PAIRS_2D)))
    for p in range(len(_PAIRS_2D)):
        A1, A2 = A[:, 2 * p], A[:, 2 * p + 1]
        c = rhs / (m[:, 2 * p] * m[:, 2 * p + 1])
        disc = np.sqrt((A1 - A2) ** 2 + 4.0 * c)
        roots[:, p] = 0.5 * ((A1 + A2) - disc)
    best = np.argmin(roots, axis=1)
    return roots, best


def monotone_operator(u, st: _Stencil):
    """min over direction pairs of products of second differences."""
    A, m = _pair_quantities(u, st)
    out = np.full(u.size, np.inf)
    for p in range(len(_PAIRS_2D)):
        d1 = m[:, 2 * p] * (A[:, 2 * p] - u)
        d2 = m[:, 2 * p + 1] * (A[:, 2 * p + 1] - u)
        out = np.minimum(out, np.maximum(d1, 0.0) * np.maximum(d2, 0.0))
    return out


def _gs_sweeps(u, rhs, st: _Stencil, n_sweeps, relax=1.0, lower=None):
    for _ in range(n_sweeps):
        roots, best = _monotone_roots(u, rhs, st)
        target = roots[np.arange(u.size), best]
        if lower is not None:
            target = np.maximum(target, lower)
        u = (1 - relax) * u + relax * target
    return u


# ---------------------------------------------------------------------------
# Regularized system in v = w^2


def _line_coeffs(st: _Stencil):
    """Stencil coefficients for first and second derivatives on each line.

    Lines: 0 = axis x (arms 0,1), 1 = axis y (arms 2,3),
           2 = diagonal (1,1)/sqrt2 (arms 4,5), 3 = diagonal (1,-1)/sqrt2
           (arms 6,7).  Second differences are exact on quadratics even with
    boundary-shortened arms; first differences likewise.
    """
    coeffs = {}
    for line, (ip, im) in enumerate(((0, 1), (2, 3), (4, 5), (6, 7))):
        rp, rm = st.rho[:, ip], st.rho[:, im]
        s = rp + rm
        c2_p = 2.0 / (rp * s)
        c2_m = 2.0 / (rm * s)
        c2_0 = -2.0 / (rp * rm)
        c1_p = rm / (rp * s)
        c1_m = -rp / (rm * s)
        c1_0 = (rp**2 - rm**2) / (rp * rm * s)
        coeffs[line] = dict(ip=ip, im=im, c2=(c2_p, c2_m, c2_0),
                            c1=(c1_p, c1_m, c1_0))
    return coeffs


def _v_operators(v, st: _Stencil, lc):
    vals = _arm_values(v, st)

    def second(line):
        c = lc[line]
        cp, cm, c0 = c["c2"]
        return cp * vals[:, c["ip"]] + cm * vals[:, c["im"]] + c0 * v

    def first(line):
        c = lc[line]
        cp, cm, c0 = c["c1"]
        return cp * vals[:, c["ip"]] + cm * vals[:, c["im"]] + c0 * v

    vxx = second(0)
    vyy = second(1)
    vxy = 0.5 * (second(2) - second(3))
    vx = first(0)
    vy = first(1)
    return vxx, vyy, vxy, vx, vy


def _v_residual(v, st: _Stencil, lc, d):
    vxx, vyy, vxy, vx, vy = _v_operators(v, st, lc)
    R = (v * (vxx * vyy - vxy**2)
         + 0.5 * (-vyy * vx**2 + 2.0 * vxy * vx * vy - vxx * vy**2)
         - 2.0**d)
    return R / 2.0**d


def _v_newton(v, st: _Stencil, d, max_iter=40, tol=1e-13):
    lc = _line_coeffs(st)
    M = v.size
    idx = np.arange(M)
    F = _v_residual(v, st, lc, d)
    scale = 2.0**d
    for _ in range(max_iter):
        vxx, vyy, vxy, vx, vy = _v_operators(v, st, lc)
        dR = {
            "vxx": v * vyy - 0.5 * vy**2,
            "vyy": v * vxx - 0.5 * vx**2,
            "vxy": -2.0 * v * vxy + vx * vy,
            "vx": -vyy * vx + vxy * vy,
            "vy": vxy * vx - vxx * vy,
            "v0": vxx * vyy - vxy**2,
        }
        rows, cols, data = [], [], []

        def add(col_idx, coef):
            live = col_idx >= 0
            rows.append(idx[live])
            cols.append(col_idx[live])
            data.append(coef[live] / scale)

        center = np.zeros(M)
        # second differences: vxx (line 0), vyy (line 1), vxy from lines 2,3
        for key, line, fac in (("vxx", 0, 1.0), ("vyy", 1, 1.0),
                               ("vxy", 2, 0.5), ("vxy", 3, -0.5)):
            c = lc[line]
            cp, cm, c0 = c["c2"]
            w = dR[key] * fac
            add(st.nbr[:, c["ip"]], w * cp)
            add(st.nbr[:, c["im"]], w * cm)
            center += w * c0
        for key, line in (("vx", 0), ("vy", 1)):
            c = lc[line]
            cp, cm, c0 = c["c1"]
            w = dR[key]
            add(st.nbr[:, c["ip"]], w * cp)
            add(st.nbr[:, c["im"]], w * cm)
            center += w * c0
        center += dR["v0"]
        rows.append(idx)
        cols.append(idx)
        data.append(center / scale)

        J = sp.csr_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(M, M))
        try:
            du = spla.spsolve(J, -F)
        except RuntimeError:
            break
        if not np.all(np.isfinite(du)):
            break
        # fraction-to-boundary: scalar damping keeps v positive and keeps the
        # Newton direction intact (componentwise clipping would destroy descent)
        shrink = du < -0.9 * v
        alpha_max = 1.0
        if np.any(shrink):
            alpha_max = min(1.0, 0.995 * float(np.min(
                0.9 * v[shrink] / -du[shrink])))
        norm0 = np.linalg.norm(F)
        alpha = alpha_max
        improved = False
        for _ls in range(40):
            v_try = v + alpha * du
            F_try = _v_residual(v_try, st, lc, d)
            if np.linalg.norm(F_try) < (1.0 - 1e-4 * alpha) * norm0:
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
        v, F = v_try, F_try
        if np.max(np.abs(alpha * du)) < tol:
            break
    return v, float(np.max(np.abs(F)))


# ---------------------------------------------------------------------------
# Public solver


@dataclass(frozen=True, eq=False)
class AffineSphere:
    """Converged solution plus derived fields on the same grid."""

    cone: object
    grid: Grid
    omega: GridFn
    grad: np.ndarray          # (2, *shape) centered gradient
    grad_valid: np.ndarray
    residual: np.ndarray      # enforced-equation residual per node
    residual_valid: np.ndarray
    ma_defect: np.ndarray     # |(-w)^(d+2) det Hess_h w - 1| (diagnostic)
    sigma_density: np.ndarray  # (-w)^(-d-1) at masked nodes (0 elsewhere)
    iterations: int
    final_change: float
    history: tuple

    @property
    def mask(self):
        return self.omega.mask

    def interior_mask(self, cells=2.0):
        return mask_for_cone(self.grid, self.cone, min_distance=cells * self.grid.hmax)


def initial_guess(cone, grid, mask):
    """Quadratic-cone formula mapped onto a covering scaling of the John
    ellipsoid: w0 = (det M)^(1/(d+1)) * eta(M^{-1}(y - c)), eta = -sqrt(1-|z|^2)."""
    c, E = cone.covering_ellipsoid()
    pts = grid.nodes()
    z = np.linalg.solve(E, (pts - c).T).T
    r2 = np.sum(z * z, axis=1)
    eta = -np.sqrt(np.maximum(1.0 - r2, 1e-12))
    alpha = np.linalg.det(E) ** (1.0 / (cone.d + 1))
    vals = (alpha * eta).reshape(grid.shape)
    vals[~mask] = 0.0
    return vals


def solve_affine_sphere(cone, n=65, grid=None, tol=1e-8, damping=0.5,
                        max_outer=500, rhs_floor=None, presweeps=10,
                        scheme="regularized"):
    """Solve the affine-sphere equation on a grid over omega_star.

    The monotone wide-stencil fixed point runs first (it is the sole scheme
    when ``scheme='monotone'``); the regularized Newton phase then converges
    the boundary-accurate system.  Raises RuntimeError on non-convergence.
    """
    d = cone.d
    if grid is None:
        grid = grid_for_cone(cone, n)
    if min(grid.shape) < 33:
        raise ValueError("grid must resolve omega_star with >= 33 nodes per axis")
    mask = mask_for_cone(grid, cone)
    st = _build_stencil(grid, mask, cone)
    floor = rhs_floor if rhs_floor is not None else grid.hmax**2

    u = initial_guess(cone, grid, mask)[mask]
    lower = 3.0 * float(u.min())
    history = []
    change = np.inf
    it = 0
    # damped fixed point on the right-hand side, monotone Gauss-Seidel inner
    outer_cap = max_outer if scheme == "monotone" else 60
    inner_tol = tol if scheme == "monotone" else 1e-5
    for it in range(1, outer_cap + 1):
        rhs = np.maximum(-u, floor) ** (-d - 2.0)
        u_solved = _gs_sweeps(u.copy(), rhs, st, presweeps, lower=lower)
        u_new = (1.0 - damping) * u + damping * u_solved
        change = float(np.max(np.abs(u_new - u)))
        history.append(change)
        u = u_new
        if change < inner_tol:
            break
    if scheme == "monotone" and change >= tol:
        raise RuntimeError(
            f"monotone fixed point did not converge: last change {change:.3e}")

    if scheme == "regularized":
        v = u * u
        v, vres = _v_newton(v, st, d)
        u_new = -np.sqrt(v)
        change = float(np.max(np.abs(u_new - u)))
        history.append(change)
        u = u_new
        if vres > 1e-7:
            raise RuntimeError(
                f"regularized Newton stalled at residual {vres:.3e}")

    values = np.zeros(grid.shape)
    values[mask] = u
    omega = convexify_values(grid, values, mask)

    grads, gvalid = gradient(omega)
    H, hvalid = hessian(omega)
    det = H[(0, 0)] * H[(1, 1)] - H[(0, 1)] ** 2
    mw = np.maximum(-omega.values, floor)
    defect = np.where(hvalid & mask, np.abs(det * mw ** (d + 2.0) - 1.0), 0.0)

    if scheme == "regularized":
        lc = _line_coeffs(st)
        res_m = np.abs(_v_residual(omega.values[mask] ** 2, st, lc, d))
    else:
        res_m = np.abs(monotone_operator(omega.values[mask], st)
                       - mw[mask] ** (-d - 2.0)) * mw[mask] ** (d + 2.0)
    residual = np.zeros(grid.shape)
    residual[mask] = res_m

    sigma = np.zeros(grid.shape)
    sigma[mask] = mw[mask] ** (-d - 1.0)

    return AffineSphere(
        cone=cone, grid=grid, omega=omega,
        grad=np.stack(grads), grad_valid=gvalid,
        residual=residual, residual_valid=mask.copy(),
        ma_defect=defect, sigma_density=sigma,
        iterations=it, final_change=change, history=tuple(history))


def c_normal(sphere: AffineSphere, y):
    """Point of the affine sphere whose tangent plane is directed by (y,-1):
    N(y) = (grad w(y), grad w(y).y - w(y))."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    ys = np.atleast_2d(y)
    margin = 2.0 * sphere.grid.hmax
    if np.any(sphere.cone.boundary_distance(ys) < margin):
        raise ValueError("point too close to the boundary of omega_star")
    gfn0 = GridFn(sphere.grid, sphere.grad[0], sphere.omega.mask)
    gfn1 = GridFn(sphere.grid, sphere.grad[1], sphere.omega.mask)
    g = np.stack([bilinear(gfn0, ys), bilinear(gfn1, ys)], axis=1)
    w = np.asarray(bilinear(sphere.omega, ys))
    last = np.sum(g * ys, axis=1) - w
    out = np.concatenate([g, last[:, None]], axis=1)
    return out[0] if single else out


def sigma_volume(sphere: AffineSphere, cell_mask):
    """Mass of the canonical volume (-w)^(-d-1) over a union of grid cells."""
    cell_mask = np.asarray(cell_mask, dtype=bool)
    if not np.any(cell_mask):
        return 0.0
    grid = sphere.grid
    pts = grid.nodes()[cell_mask.ravel()]
    half_diag = 0.5 * float(np.linalg.norm(grid.h))
    if np.any(sphere.cone.boundary_distance(pts) <= half_diag):
        raise ValueError("cell set touches the boundary of omega_star")
    hvol = float(np.prod(grid.h))
    return float(np.sum(sphere.sigma_density[cell_mask]) * hvol)
