"""Point-cloud container, exact kNN, surface distance, curvature and synthetic shapes."""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateCloud, DegenerateNeighborhood

SHAPE_KINDS = ("sphere", "torus", "box", "cylinder", "cone")

DEFAULT_SHAPE_PARAMS = {
    "sphere": {"radius": 1.0},
    "torus": {"R": 1.0, "r": 0.4},
    "box": {"a": 1.0, "b": 0.7, "c": 0.5},
    "cylinder": {"radius": 0.5, "height": 1.6},
    "cone": {"radius": 0.7, "height": 1.5},
}


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    label: int | None = None
    id: str | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] < 1:
            raise DegenerateCloud("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise DegenerateCloud("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    def with_points(self, points):
        return PointCloud(points, label=self.label, id=self.id)


def normalization_params(points):
    """Return (center, scale) such that (points - center) / scale has max norm 1."""
    pts = np.asarray(points, dtype=np.float64)
    center = pts.mean(axis=0)
    scale = np.linalg.norm(pts - center, axis=1).max()
    if not scale > 0:
        raise DegenerateCloud("all points coincide; cannot normalize")
    return center, scale


def normalize(cloud):
    """Center at the origin and scale to unit max norm, keeping point order."""
    center, scale = normalization_params(cloud.points)
    return cloud.with_points((cloud.points - center) / scale)


class NeighborIndex:
    """Exact Euclidean kNN over an immutable point set.

    Ties are broken by the lower point index so that results do not depend
    on the tree layout.
    """

    def __init__(self, points):
        if isinstance(points, PointCloud):
            points = points.points
        self.points = np.asarray(points, dtype=np.float64)
        self.tree = cKDTree(self.points)

    def __len__(self):
        return self.points.shape[0]

    def knn(self, q, k):
        """List of (index, distance) for the min(k, n) nearest points to q."""
        idx, dist = self.query(np.asarray(q, dtype=np.float64)[None], k)
        return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]

    def query(self, queries, k):
        """Batch kNN. Returns (indices, distances), each of shape (m, min(k, n))."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self)
        k = max(1, min(int(k), n))
        kk = min(k + 1, n)
        _, idx = self.tree.query(queries, k=kk)
        idx = idx.reshape(len(queries), kk)
        # recompute so ordering matches a plain scan bit for bit, then break ties by index
        dist = _norm(self.points[idx] - queries[:, None, :])
        order = np.lexsort((idx, dist), axis=1)
        dist = np.take_along_axis(dist, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        if kk > k:
            boundary = dist[:, k] <= dist[:, k - 1] * (1 + 1e-12)
            for row in np.flatnonzero(boundary):
                idx[row, :k], dist[row, :k] = self._resolve_boundary(queries[row], k, dist[row, k - 1])
        return idx[:, :k], dist[:, :k]

    def _resolve_boundary(self, q, k, radius):
        cand = np.array(self.tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-300), dtype=np.int64)
        d = _norm(self.points[cand] - q)
        order = np.lexsort((cand, d))[:k]
        return cand[order], d[order]


def _norm(v):
    return np.sqrt(np.sum(v * v, axis=-1))


class SurfaceProxy:
    """Dense sample standing in for the continuous surface when measuring distance to it."""

    def __init__(self, samples):
        self.index = NeighborIndex(samples)

    @property
    def samples(self):
        return self.index.points

    def distance(self, q):
        """Distance from q (a 3-vector or an (m, 3) array) to the nearest proxy sample."""
        q = np.asarray(q, dtype=np.float64)
        d, _ = self.index.tree.query(q.reshape(-1, 3), k=1)
        return float(d[0]) if q.ndim == 1 else d


def point_to_surface_distance(proxy, q):
    return proxy.distance(q)


def local_covariance_eigenvalues(points, neighbors):
    """Ascending eigenvalues of each neighborhood covariance; neighbors is (m, k) indices."""
    nb = points[neighbors]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered) / nb.shape[1]
    return np.linalg.eigvalsh(cov)


def curvatures(points, k=16, index=None):
    """Surface variation lambda_min / trace at every point (neighborhood includes the point)."""
    points = np.asarray(points, dtype=np.float64)
    if index is None:
        index = NeighborIndex(points)
    nbrs, _ = index.query(points, k)
    ev = np.clip(local_covariance_eigenvalues(points, nbrs), 0.0, None)
    trace = ev.sum(axis=1)
    if np.any(trace < 1e-18):
        raise DegenerateNeighborhood("neighborhood covariance has zero trace")
    return ev[:, 0] / trace


def estimate_curvature(cloud, i, k=16):
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if not 4 <= k <= len(points):
        raise ValueError(f"need 4 <= k <= n, got k={k}, n={len(points)}")
    index = NeighborIndex(points)
    nbrs, _ = index.query(points[i][None], k)
    ev = np.clip(local_covariance_eigenvalues(points, nbrs)[0], 0.0, None)
    if ev.sum() < 1e-18:
        raise DegenerateNeighborhood(f"neighborhood of point {i} has zero covariance trace")
    return float(ev[0] / ev.sum())


# --- analytic shapes -------------------------------------------------------


def _unit_circle(rng, n):
    t = rng.uniform(0.0, 2 * np.pi, n)
    return np.cos(t), np.sin(t)


def _sample_sphere(rng, n, radius):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v, v.copy()


def _sample_torus(rng, n, R, r):
    out_u, out_v = [], []
    count = 0
    # rejection on the area element (R + r cos v)
    while count < n:
        m = 2 * (n - count) + 16
        u = rng.uniform(0, 2 * np.pi, m)
        v = rng.uniform(0, 2 * np.pi, m)
        keep = rng.uniform(0, 1, m) < (R + r * np.cos(v)) / (R + r)
        out_u.append(u[keep])
        out_v.append(v[keep])
        count += int(keep.sum())
    u = np.concatenate(out_u)[:n]
    v = np.concatenate(out_v)[:n]
    normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    centers = np.stack([R * np.cos(u), R * np.sin(u), np.zeros(n)], axis=1)
    return centers + r * normals, normals


def _sample_box(rng, n, a, b, c):
    half = np.array([a, b, c]) / 2
    # faces come in +/- pairs along each axis; area of the pair normal to axis j
    areas = np.array([b * c, a * c, a * b])
    probs = np.repeat(areas, 2) / (2 * areas.sum())
    face = rng.choice(6, size=n, p=probs)
    pts = rng.uniform(-1, 1, (n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    normals = np.zeros((n, 3))
    normals[np.arange(n), axis] = sign
    return pts, normals


def _sample_cylinder(rng, n, radius, height):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    cx, cy = _unit_circle(rng, n)
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    s = part == 0
    pts[s] = np.stack([radius * cx[s], radius * cy[s], rng.uniform(-height / 2, height / 2, s.sum())], axis=1)
    normals[s] = np.stack([cx[s], cy[s], np.zeros(s.sum())], axis=1)
    for p, z in ((1, height / 2), (2, -height / 2)):
        m = part == p
        rad = radius * np.sqrt(rng.uniform(0, 1, m.sum()))
        pts[m] = np.stack([rad * cx[m], rad * cy[m], np.full(m.sum(), z)], axis=1)
        normals[m, 2] = np.sign(z)
    return pts, normals


def _sample_cone(rng, n, radius, height):
    slant = np.hypot(radius, height)
    lateral = np.pi * radius * slant
    base = np.pi * radius**2
    on_side = rng.uniform(0, 1, n) < lateral / (lateral + base)
    cx, cy = _unit_circle(rng, n)
    s = np.sqrt(rng.uniform(0, 1, n))
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    # apex at z = +h/2, base disc at z = -h/2
    pts[:, 0] = radius * s * cx
    pts[:, 1] = radius * s * cy
    pts[:, 2] = np.where(on_side, height / 2 - s * height, -height / 2)
    side_n = np.stack([height * cx, height * cy, np.full(n, radius)], axis=1) / slant
    normals[on_side] = side_n[on_side]
    normals[~on_side, 2] = -1.0
    return pts, normals


_SAMPLERS = {
    "sphere": _sample_sphere,
    "torus": _sample_torus,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
}


def sample_surface(kind, n, rng, params=None, return_normals=False):
    """Uniform-by-area samples on an analytic surface, in raw (unnormalized) coordinates."""
    if kind not in _SAMPLERS:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    kw = dict(DEFAULT_SHAPE_PARAMS[kind])
    kw.update(params or {})
    pts, normals = _SAMPLERS[kind](rng, n, **kw)
    return (pts, normals) if return_normals else pts


@dataclass(frozen=True)
class SyntheticShape:
    """An analytic surface with fixed parameters, plus the normalization of one sampled cloud."""

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    n: int = 1024

    def raw_cloud(self):
        return sample_surface(self.kind, self.n, np.random.default_rng(self.seed), self.params)

    def cloud(self, id=None):
        raw = self.raw_cloud()
        center, scale = normalization_params(raw)
        return PointCloud((raw - center) / scale, label=SHAPE_KINDS.index(self.kind), id=id)

    def dense_samples(self, m=20000, with_normals=False):
        """Analytic samples mapped through the same normalization as `cloud()`."""
        center, scale = normalization_params(self.raw_cloud())
        rng = np.random.default_rng([self.seed, 1])
        pts, normals = sample_surface(self.kind, m, rng, self.params, return_normals=True)
        pts = (pts - center) / scale
        return (pts, normals) if with_normals else pts

    def proxy(self, m=20000):
        return SurfaceProxy(self.dense_samples(m))


def generate_shape(kind, n, seed, params=None):
    if n < 8:
        raise ValueError("need at least 8 points")
    return SyntheticShape(kind, dict(params or {}), seed, n).cloud()
