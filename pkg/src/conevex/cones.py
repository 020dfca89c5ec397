"""Cones, their bounded cross-sections, and affine group actions.

A proper open convex cone in R^{d+1} is represented through two bounded
convex domains: Omega (the cross-section of the cone at height 1) and
Omega* (the polar cross-section at height -1).  Rays of the cone are
t*(x, 1) with x in Omega; covectors annihilating the cone are t*(y, -1)
with y in Omega*.  Two cone families are built in: the quadratic cone
over the unit disk and simplicial cones spanned by d+1 rays.

Group data is an affine deformation: pairs (matrix, translation) whose
linear parts preserve the cone and whose translations satisfy the cocycle
relation tau(ab) = a tau(b) + tau(a) on every cached product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DET_TOL = 1e-10
COCYCLE_TOL = 1e-10


# ---------------------------------------------------------------------------
# Bounded convex cross-section domains


class DiskDomain:
    """Open ball of radius r centered at c."""

    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.dim = self.center.size

    def inside(self, y):
        y = np.asarray(y, dtype=float)
        return np.linalg.norm(y - self.center, axis=-1) < self.radius

    def boundary_distance(self, y):
        y = np.asarray(y, dtype=float)
        return self.radius - np.linalg.norm(y - self.center, axis=-1)

    def bounding_box(self):
        return self.center - self.radius, self.center + self.radius

    def ray_exit(self, y, v):
        """Distance t > 0 with y + t*v on the boundary (y inside, |v| > 0)."""
        y = np.asarray(y, dtype=float) - self.center
        v = np.asarray(v, dtype=float)
        a = v @ v
        b = y @ v
        c = y @ y - self.radius**2
        return (-b + np.sqrt(b * b - a * c)) / a

    def sample(self, rng, n):
        pts = rng.normal(size=(n, self.dim))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        r = self.radius * rng.uniform(size=(n, 1)) ** (1.0 / self.dim)
        return self.center + pts * r


class HalfspaceDomain:
    """Bounded intersection {y : A y < b} of open half-spaces."""

    def __init__(self, A, b, vertices=None):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.norms = np.linalg.norm(self.A, axis=1)
        self.vertices = None if vertices is None else np.asarray(vertices, float)
        self.dim = self.A.shape[1]

    def inside(self, y):
        y = np.asarray(y, dtype=float)
        return np.all(y @ self.A.T < self.b, axis=-1)

    def boundary_distance(self, y):
        y = np.asarray(y, dtype=float)
        slack = self.b - y @ self.A.T
        return np.min(slack / self.norms, axis=-1)

    def bounding_box(self):
        if self.vertices is None:
            raise ValueError("vertex list required for bounding box")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def ray_exit(self, y, v):
        y = np.asarray(y, dtype=float)
        v = np.asarray(v, dtype=float)
        num = self.b - self.A @ y
        den = self.A @ v
        with np.errstate(divide="ignore"):
            t = np.where(den > 0, num / den, np.inf)
        return float(np.min(t))

    def sample(self, rng, n):
        lo, hi = self.bounding_box()
        out = np.empty((n, self.dim))
        k = 0
        while k < n:
            cand = rng.uniform(lo, hi, size=(4 * (n - k), self.dim))
            good = cand[self.inside(cand)]
            take = min(n - k, good.shape[0])
            out[k : k + take] = good[:take]
            k += take
        return out


def _regular_simplex_directions(d):
    """d+1 unit vectors in R^d summing to zero (vertices of a regular simplex)."""
    n = d + 1
    M = np.eye(n) - np.ones((n, n)) / n
    U, _, _ = np.linalg.svd(M)
    B = U[:, :d]
    return B / np.linalg.norm(B, axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class ConeModel:
    """Proper open convex cone with its two chart domains.

    Attributes
    ----------
    kind : "quadratic" or "simplicial"
    d : chart dimension (ambient dimension is d + 1)
    omega : cross-section of the cone, a bounded convex domain containing 0
    omega_star : polar cross-section {y : x.y < 1 for all x in closure(omega)}
    rays : for simplicial cones, (d+1) x (d+1) matrix whose columns are the
        rays (a_i, 1); None for the quadratic cone.
    """

    kind: str
    d: int
    omega: object
    omega_star: object
    rays: Optional[np.ndarray] = None

    @property
    def dim(self):
        return self.d + 1

    def inside(self, y):
        return self.omega_star.inside(y)

    def boundary_distance(self, y):
        return self.omega_star.boundary_distance(y)

    def mu(self, y):
        """Affine covector coordinates 1 - a_i.y (positive exactly on omega_star)."""
        if self.rays is None:
            raise ValueError("mu coordinates only defined for simplicial cones")
        a = self.rays[:-1, :].T  # rows a_i
        return 1.0 - np.asarray(y, float) @ a.T

    def boundary_rays(self, n, rng=None):
        """Sample n rays of the cone boundary as points (x, 1), x on the
        boundary of omega."""
        if self.kind == "quadratic":
            th = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
            if self.d == 2:
                x = np.stack([np.cos(th), np.sin(th)], axis=1)
            else:
                rng = rng or np.random.default_rng(0)
                x = rng.normal(size=(n, self.d))
                x /= np.linalg.norm(x, axis=1, keepdims=True)
        else:
            rng = rng or np.random.default_rng(0)
            a = self.rays[:-1, :].T
            nv = a.shape[0]
            # points on boundary facets of the simplex omega = conv{a_i}:
            # convex combinations of all-but-one vertex
            w = rng.dirichlet(np.ones(nv - 1), size=n)
            drop = rng.integers(0, nv, size=n)
            x = np.empty((n, self.d))
            for i in range(n):
                keep = np.delete(np.arange(nv), drop[i])
                x[i] = w[i] @ a[keep]
        return np.concatenate([x, np.ones((n, 1))], axis=1)

    def contains_ray(self, X, tol=1e-9):
        """Whether points X of R^{d+1} lie in the closed cone."""
        X = np.asarray(X, dtype=float)
        last = X[..., -1]
        ok = last > tol
        x = X[..., :-1] / np.where(ok, last, 1.0)[..., None]
        if self.kind == "quadratic":
            inside = np.linalg.norm(x, axis=-1) <= self.omega.radius + tol
        else:
            a = self.rays[:-1, :].T
            # omega = conv{a_i}: barycentric coordinates must be >= -tol
            A = np.concatenate([a.T, np.ones((1, a.shape[0]))], axis=0)
            bary = np.linalg.solve(A, np.concatenate(
                [np.atleast_2d(x).T, np.ones((1, np.atleast_2d(x).shape[0]))], axis=0))
            inside = np.all(bary >= -tol, axis=0)
            inside = inside.reshape(last.shape)
        return ok & inside

    def covering_ellipsoid(self):
        """(center, M) with omega_star contained in {center + M z : |z| <= 1}."""
        if self.kind == "quadratic":
            return self.omega_star.center.copy(), self.omega_star.radius * np.eye(self.d)
        verts = self.omega_star.vertices
        c = verts.mean(axis=0)
        r = np.max(np.linalg.norm(verts - c, axis=1))
        return c, r * np.eye(self.d)

    def simplicial_closed_form(self):
        """Exact support function of the affine sphere for a simplicial cone.

        Returns a callable y -> omega(y) = -kappa * prod(mu_i)^(1/(d+1)).
        The constant kappa is fixed by the normalisation det Hess = (-omega)^(-d-2),
        evaluated through the identity det(Cov(y)) * prod(mu)^2 = const.
        """
        if self.rays is None:
            raise ValueError("closed form only for simplicial cones")
        a = self.rays[:-1, :].T
        n = self.d + 1
        y0 = np.zeros(self.d)
        mu = 1.0 - a @ y0
        L = -(a / mu[:, None])
        g = L.mean(axis=0)
        Cov = (L[:, :, None] * L[:, None, :]).mean(axis=0) - np.outer(g, g)
        c = np.linalg.det(Cov) * np.prod(mu) ** 2
        kappa = c ** (-1.0 / (2 * n))

        def omega_fn(y):
            muv = 1.0 - np.asarray(y, float) @ a.T
            return -kappa * np.prod(muv, axis=-1) ** (1.0 / n)

        return omega_fn


def quadratic_cone(d=2):
    """Cone over the unit disk: the rays t*(x,1), |x| < 1."""
    return ConeModel(
        kind="quadratic",
        d=d,
        omega=DiskDomain(np.zeros(d), 1.0),
        omega_star=DiskDomain(np.zeros(d), 1.0),
    )


def simplicial_cone(d=2, directions=None):
    """Simplicial cone spanned by rays (a_i, 1), a_i vertices of a simplex.

    Default directions are the vertices of the regular simplex with unit
    circumradius, so omega is that simplex and omega_star its polar.
    """
    if directions is None:
        a = _regular_simplex_directions(d)
    else:
        a = np.asarray(directions, dtype=float)
        if a.shape != (d + 1, d):
            raise ValueError("need d+1 direction vectors in R^d")
    rays = np.concatenate([a, np.ones((d + 1, 1))], axis=1).T
    if abs(np.linalg.det(rays)) < 1e-12:
        raise ValueError("rays are linearly dependent")
    # polar cross-section {y : a_i . y < 1}; its vertices solve d active rows
    verts = []
    n = d + 1
    for drop in range(n):
        keep = np.delete(np.arange(n), drop)
        verts.append(np.linalg.solve(a[keep], np.ones(d)))
    dual = HalfspaceDomain(a, np.ones(n), vertices=np.array(verts))
    if not np.all(dual.inside(np.zeros(d))):
        raise ValueError("0 must lie inside the dual cross-section")
    A_o, b_o = _omega_halfspaces(a)
    return ConeModel(
        kind="simplicial",
        d=d,
        omega=HalfspaceDomain(A_o, b_o, vertices=a),
        omega_star=dual,
        rays=rays,
    )


def _omega_halfspaces(a):
    """Half-space description of the simplex conv{a_i} (rows of a)."""
    n, d = a.shape
    A_rows, b_rows = [], []
    for drop in range(n):
        keep = np.delete(np.arange(n), drop)
        pts = a[keep]
        # hyperplane through pts: normal nrm with nrm.x = c for x in pts
        M = pts - pts[0]
        _, _, Vt = np.linalg.svd(M)
        nrm = Vt[-1]
        c = nrm @ pts[0]
        if nrm @ a[drop] > c:  # orient inward: a_drop strictly on the < side
            nrm, c = -nrm, -c
        A_rows.append(nrm)
        b_rows.append(c)
    return np.array(A_rows), np.array(b_rows)


# ---------------------------------------------------------------------------
# Linear maps and projective dual action


def check_special(M, tol=DET_TOL):
    M = np.asarray(M, dtype=float)
    if abs(np.linalg.det(M) - 1.0) > tol:
        raise ValueError(f"matrix determinant {np.linalg.det(M)} differs from 1")
    return M


def preserves_cone(M, cone, n_samples=100, tol=1e-9):
    rays = cone.boundary_rays(n_samples)
    return bool(np.all(cone.contains_ray(rays @ np.asarray(M, float).T, tol=tol)))


def dual_projective_action(M, y, cone):
    """Action of a cone-preserving map on omega_star: rescale M^{-T} (y,-1)."""
    M = np.asarray(M, dtype=float)
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    ys = np.atleast_2d(y)
    if not np.all(cone.inside(ys)):
        raise ValueError("point outside omega_star")
    Y = np.concatenate([ys, -np.ones((ys.shape[0], 1))], axis=1)
    Z = Y @ np.linalg.inv(M)  # rows (M^{-T} Y)
    t = -Z[:, -1]
    if np.any(t <= 0):
        raise ValueError("map does not preserve the dual cone")
    out = Z[:, :-1] / t[:, None]
    if not np.all(cone.inside(out)):
        raise ValueError("image left omega_star; map does not preserve the cone")
    return out[0] if single else out


def dual_homogeneity_factor(M, y):
    """Scalar t with M^T (y,-1) = t (y', -1); equals omega(y)/omega(y') for
    any cone-invariant support function omega (used as the exact equivariance
    weight)."""
    y = np.asarray(y, dtype=float)
    ys = np.atleast_2d(y)
    Y = np.concatenate([ys, -np.ones((ys.shape[0], 1))], axis=1)
    Z = Y @ np.asarray(M, float)  # rows (M^T Y)
    t = -Z[:, -1]
    out_t = t
    out_y = Z[:, :-1] / t[:, None]
    if y.ndim == 1:
        return float(out_t[0]), out_y[0]
    return out_t, out_y


# ---------------------------------------------------------------------------
# Group actions with translation cocycles


@dataclass(frozen=True, eq=False)
class GroupElement:
    matrix: np.ndarray
    translation: np.ndarray
    word: tuple

    def apply(self, X):
        return np.asarray(X, float) @ self.matrix.T + self.translation


def compose(a: GroupElement, b: GroupElement) -> GroupElement:
    return GroupElement(
        a.matrix @ b.matrix,
        a.matrix @ b.translation + a.translation,
        a.word + b.word,
    )


def inverse(a: GroupElement) -> GroupElement:
    Minv = np.linalg.inv(a.matrix)
    return GroupElement(Minv, -Minv @ a.translation,
                        tuple(-i for i in reversed(a.word)))


@dataclass(frozen=True, eq=False)
class GroupAction:
    """Affine deformation generators with a cached word enumeration."""

    generators: tuple
    word_bound: int
    cone: ConeModel
    cached: tuple = field(default=())
    coboundary_vector: Optional[np.ndarray] = None

    @property
    def elements(self):
        return self.cached

    def element(self, word):
        """Compose an explicit word of signed 1-based generator indices."""
        g = identity_element(self.cone.dim)
        for idx in word:
            if idx == 0 or abs(idx) > len(self.generators):
                raise IndexError(f"invalid generator index {idx}")
            step = self.generators[abs(idx) - 1]
            if idx < 0:
                step = inverse(step)
            g = compose(g, step)
        return g


def identity_element(dim):
    return GroupElement(np.eye(dim), np.zeros(dim), ())


def build_action(generators, cone, word_bound=4, check_cone=True):
    """Cache the group ball of the given word length, deduplicating elements.

    Raises if a duplicate linear part arrives with a different translation
    (the input translations then do not define a cocycle).
    """
    gens = []
    for k, (M, t) in enumerate(generators):
        M = check_special(M)
        t = np.asarray(t, dtype=float)
        if check_cone and not preserves_cone(M, cone):
            raise ValueError(f"generator {k} does not preserve the cone")
        gens.append(GroupElement(M, t, (k + 1,)))
    dim = cone.dim
    steps = []
    for g in gens:
        steps.append(g)
        steps.append(inverse(g))
    cache = [identity_element(dim)]
    seen = [cache[0]]
    frontier = [cache[0]]
    for _ in range(word_bound):
        new_frontier = []
        for g in frontier:
            for s in steps:
                h = compose(g, s)
                dup = None
                for e in seen:
                    if np.max(np.abs(e.matrix - h.matrix)) < DET_TOL:
                        dup = e
                        break
                if dup is not None:
                    if np.max(np.abs(dup.translation - h.translation)) > COCYCLE_TOL:
                        raise ValueError(
                            "translations are not a cocycle: same linear part, "
                            "different translation")
                    continue
                seen.append(h)
                cache.append(h)
                new_frontier.append(h)
        frontier = new_frontier
    return GroupAction(generators=tuple(gens), word_bound=word_bound,
                       cone=cone, cached=tuple(cache))


def coboundary_cocycle(matrices, v, cone, word_bound=4):
    """Action with translations tau(g) = (I - g) v on each generator."""
    v = np.asarray(v, dtype=float)
    gens = [(np.asarray(M, float), (np.eye(cone.dim) - np.asarray(M, float)) @ v)
            for M in matrices]
    action = build_action(gens, cone, word_bound=word_bound)
    return GroupAction(generators=action.generators, word_bound=word_bound,
                       cone=cone, cached=action.cached, coboundary_vector=v)


def cocycle_extend(action: GroupAction, word: Sequence[int]):
    """Compose an explicit word; returns (matrix, translation)."""
    g = action.element(list(word))
    return g.matrix, g.translation


def diagonal_generator(cone: ConeModel, eigenvalues):
    """Map acting diagonally in the ray basis of a simplicial cone."""
    if cone.rays is None:
        raise ValueError("diagonal generators require a simplicial cone")
    m = np.asarray(eigenvalues, dtype=float)
    if m.size != cone.dim or np.any(m <= 0):
        raise ValueError("need d+1 positive eigenvalues")
    if abs(np.prod(m) - 1.0) > 1e-9:
        raise ValueError("eigenvalue product must be 1 (volume preserving)")
    R = cone.rays
    return R @ np.diag(m) @ np.linalg.inv(R)


# ---------------------------------------------------------------------------
# Instance (de)serialization


@dataclass(frozen=True, eq=False)
class Instance:
    cone: ConeModel
    action: Optional[GroupAction]
    spec: dict

    @property
    def hash(self):
        import hashlib

        payload = json.dumps(self.spec, sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:12]


def instance_to_spec(cone: ConeModel, action: Optional[GroupAction]) -> dict:
    spec = {"cone": {"kind": cone.kind, "d": cone.d}}
    if cone.rays is not None:
        spec["cone"]["rays"] = cone.rays.T.tolist()  # one ray per row
    gens = []
    if action is not None:
        for g in action.generators:
            gens.append({"matrix": g.matrix.tolist(),
                         "translation": g.translation.tolist()})
        spec["group"] = {"generators": gens, "word_bound": action.word_bound}
        if action.coboundary_vector is not None:
            spec["group"]["coboundary_vector"] = action.coboundary_vector.tolist()
    else:
        spec["group"] = {"generators": [], "word_bound": 0}
    return spec


def instance_from_spec(spec: dict) -> Instance:
    ck = spec["cone"]
    if ck["kind"] == "quadratic":
        cone = quadratic_cone(ck["d"])
    elif ck["kind"] == "simplicial":
        if "rays" in ck and ck["rays"] is not None:
            rays = np.asarray(ck["rays"], dtype=float)
            last = rays[:, -1]
            if np.any(last <= 0):
                raise ValueError("simplicial rays need positive last coordinate")
            dirs = rays[:, :-1] / last[:, None]
            cone = simplicial_cone(ck["d"], directions=dirs)
        else:
            cone = simplicial_cone(ck["d"])
    else:
        raise ValueError(f"unknown cone kind {ck['kind']!r}")
    grp = spec.get("group", {"generators": [], "word_bound": 0})
    action = None
    if grp["generators"]:
        gens = [(np.asarray(g["matrix"], float), np.asarray(g["translation"], float))
                for g in grp["generators"]]
        action = build_action(gens, cone, word_bound=grp.get("word_bound", 4))
        if "coboundary_vector" in grp:
            action = GroupAction(
                generators=action.generators, word_bound=action.word_bound,
                cone=cone, cached=action.cached,
                coboundary_vector=np.asarray(grp["coboundary_vector"], float))
    return Instance(cone=cone, action=action, spec=spec)


def load_instance(path) -> Instance:
    with open(path) as fh:
        return instance_from_spec(json.load(fh))


def save_instance(path, spec: dict):
    with open(path, "w") as fh:
        json.dump(spec, fh, indent=2, sort_keys=True)
        fh.write("\n")
