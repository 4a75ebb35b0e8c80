"""Nearest neighbours, closed-form similarity alignment, ICP and local surface normals."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from hallmap.geometry import PoseSE3, Rotation, Sim3Transform, se3_exp
from hallmap.io import PointCloud


class DegenerateInputError(ValueError):
    pass


class NoOverlapError(RuntimeError):
    pass


def _workers() -> int:
    return int(os.environ.get("HALLMAP_THREADS", "1"))


def _as_points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x, dtype=float).reshape(-1, 3)


class KdTree:
    """Balanced 3-d tree (leaf size 16) answering exact nearest-neighbour queries."""

    LEAF_SIZE = 16

    def __init__(self, cloud):
        pts = _as_points(cloud)
        if len(pts) == 0:
            raise ValueError("cannot build a kd-tree over an empty cloud")
        self.points = pts
        self._tree = cKDTree(pts, leafsize=self.LEAF_SIZE, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, points, k: int = 1, max_distance: float = np.inf):
        """Distances and indices of the ``k`` nearest neighbours of each query point.

        Neighbours farther than ``max_distance`` come back with distance ``inf`` and
        index ``len(self)``.
        """
        q = _as_points(points)
        return self._tree.query(q, k=k, distance_upper_bound=max_distance, workers=_workers())

    def query_radius_count(self, points, radius: float) -> np.ndarray:
        return np.asarray(self._tree.query_ball_point(_as_points(points), radius, return_length=True, workers=_workers()))


def build_kdtree(cloud) -> KdTree:
    return KdTree(cloud)


def nearest(tree: KdTree, p) -> tuple[int, float]:
    d, i = tree.query(np.asarray(p, dtype=float).reshape(1, 3))
    return int(i[0]), float(d[0])


def voxel_labels(points: np.ndarray, voxel: float):
    """Voxel index of every point (ordered by voxel key) and the per-voxel counts."""
    keys = np.floor(points / voxel).astype(np.int64)
    keys -= keys.min(axis=0)
    ext = keys.max(axis=0) + 1
    if np.prod(ext.astype(float)) < 2**62:
        flat = (keys[:, 0] * ext[1] + keys[:, 1]) * ext[2] + keys[:, 2]
        _, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    else:
        _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return inverse.reshape(-1), counts


def voxel_downsample(points: np.ndarray, voxel: float, times: np.ndarray | None = None, colors=None):
    """Replace the points of every occupied voxel by their centroid.

    Returns ``(centroids, times, colors)`` where times are the per-voxel minimum and
    colors the per-voxel mean (``None`` when not given). Output is ordered by voxel key.
    """
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        return points.reshape(0, 3), times, colors
    inverse, counts = voxel_labels(points, voxel)
    n = len(counts)
    cent = np.empty((n, 3))
    for k in range(3):
        cent[:, k] = np.bincount(inverse, weights=points[:, k], minlength=n) / counts
    out_t = None
    if times is not None:
        out_t = np.full(n, np.inf)
        np.minimum.at(out_t, inverse, np.asarray(times, dtype=float))
    out_c = None
    if colors is not None:
        colors = np.asarray(colors, dtype=float)
        out_c = np.empty((n, 3))
        for k in range(3):
            out_c[:, k] = np.bincount(inverse, weights=colors[:, k], minlength=n) / counts
        out_c = np.rint(out_c).astype(np.uint8)
    return cent, out_t, out_c


# ---------------------------------------------------------------------------
# closed-form alignment


def umeyama_align(src, dst, with_scale: bool = True) -> Sim3Transform:
    """Least-squares similarity ``dst ~ s R src + t`` for corresponded point sets.

    The rotation is a proper rotation (reflections are removed by the SVD sign
    correction). ``with_scale=False`` fixes ``s = 1``.
    """
    x = _as_points(src)
    y = _as_points(dst)
    if len(x) != len(y):
        raise ValueError(f"point sets differ in size ({len(x)} vs {len(y)})")
    if len(x) < 3:
        raise DegenerateInputError(f"need at least 3 correspondences, got {len(x)}")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    var_x = float((xc**2).sum()) / len(x)
    sx = np.linalg.svd(xc, compute_uv=False)
    if sx[0] == 0.0 or sx[1] <= 1e-10 * sx[0]:
        raise DegenerateInputError("source points are collinear or coincident")
    cov = yc.T @ xc / len(x)
    U, S, Vt = np.linalg.svd(cov)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateInputError("cross-covariance is rank deficient")
    d = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[2] = -1.0
    R = U @ np.diag(d) @ Vt
    s = float(S @ d) / var_x if with_scale else 1.0
    if s <= 0.0:
        raise DegenerateInputError("non-positive scale estimate")
    t = my - s * R @ mx
    return Sim3Transform(s, Rotation.from_matrix(R), t)


def alignment_residual(src, dst, transform: Sim3Transform) -> float:
    """Root-mean-square residual of ``dst - transform(src)``."""
    r = _as_points(dst) - transform.apply(_as_points(src))
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


# ---------------------------------------------------------------------------
# normals and overlap


def estimate_normals(
    cloud,
    k: int = 8,
    viewpoint=(0.0, 0.0, 0.0),
    tree: KdTree | None = None,
    min_planarity: float = 0.0,
    at=None,
) -> np.ndarray:
    """Unit normals from the smallest eigenvector of each k-NN covariance.

    Normals point toward ``viewpoint``. Points whose neighbourhood has rank < 2
    get a zero vector, and so do neighbourhoods whose planarity
    ``(l1 - l0) / l2`` (eigenvalues ascending) is below ``min_planarity``.
    With ``at`` given, normals are estimated at those query points using
    neighbourhoods drawn from ``cloud``.
    """
    pts = _as_points(cloud)
    if k < 3:
        raise ValueError(f"k must be at least 3, got {k}")
    if len(pts) <= k:
        raise ValueError(f"k={k} needs more than {k} points, cloud has {len(pts)}")
    tree = tree or KdTree(pts)
    q = pts if at is None else _as_points(at)
    _, idx = tree.query(q, k=k)
    nb = pts[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.matmul(nb.transpose(0, 2, 1), nb) / k
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0].copy()
    degenerate = w[:, 1] <= 1e-12 * np.maximum(w[:, 2], 1e-300)
    if min_planarity > 0:
        degenerate |= (w[:, 1] - w[:, 0]) < min_planarity * np.maximum(w[:, 2], 1e-300)
    to_view = np.asarray(viewpoint, dtype=float) - q
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1.0
    normals[degenerate] = 0.0
    return normals


def overlap_ratio(a, b, radius: float, b_tree: KdTree | None = None) -> float:
    """Fraction of the points of ``a`` with a neighbour in ``b`` within ``radius``."""
    pa = _as_points(a)
    if len(pa) == 0:
        raise ValueError("overlap of an empty cloud is undefined")
    tree = b_tree or KdTree(b)
    d, _ = tree.query(pa, max_distance=radius)
    return float(np.count_nonzero(np.isfinite(d))) / len(pa)


# ---------------------------------------------------------------------------
# ICP


@dataclass
class IcpConfig:
    max_iterations: int = 50
    convergence_eps: float = 1e-6
    max_corr_dist: float = 2.0
    corr_dist_decay: float = 0.9
    min_corr_dist: float = 0.1
    variant: str = "point2point"

    def __post_init__(self):
        if self.convergence_eps <= 0:
            raise ValueError("convergence_eps must be positive")
        if not 0.0 < self.corr_dist_decay <= 1.0:
            raise ValueError("corr_dist_decay must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.max_corr_dist <= 0 or self.min_corr_dist <= 0:
            raise ValueError("correspondence distances must be positive")
        if self.variant not in ("point2point", "point2plane"):
            raise ValueError(f"unknown ICP variant {self.variant!r}")


@dataclass
class IcpResult:
    transform: PoseSE3
    rmse: float
    iterations: int
    converged: bool
    inlier_fraction: float
    rmse_history: list = field(default_factory=list)


def point_to_plane_step(x: np.ndarray, y: np.ndarray, n: np.ndarray, weights=None, prior=None) -> np.ndarray:
    """One linearized point-to-plane solve; returns the twist (rotation, translation).

    ``prior`` optionally adds ``(H, g)`` terms to the normal equations.
    """
    r = np.einsum("ij,ij->i", n, x - y)
    J = np.hstack([np.cross(x, n), n])
    if weights is not None:
        Jw = J * weights[:, None]
    else:
        Jw = J
    H = Jw.T @ J
    g = Jw.T @ r
    if prior is not None:
        H = H + prior[0]
        g = g + prior[1]
    H += 1e-9 * np.eye(6)
    return -np.linalg.solve(H, g)


def icp(
    source,
    target,
    init: PoseSE3 | None = None,
    cfg: IcpConfig | None = None,
    target_tree: KdTree | None = None,
    target_normals: np.ndarray | None = None,
) -> IcpResult:
    """Register ``source`` onto ``target``; the result maps source coordinates into the target frame.

    The correspondence gate starts at ``cfg.max_corr_dist`` and shrinks by
    ``cfg.corr_dist_decay`` per iteration down to ``cfg.min_corr_dist``.
    """
    cfg = cfg or IcpConfig()
    src = _as_points(source)
    tgt = _as_points(target)
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("ICP needs non-empty clouds")
    tree = target_tree or KdTree(tgt)
    if cfg.variant == "point2plane" and target_normals is None:
        target_normals = estimate_normals(tgt, k=min(10, len(tgt) - 1), tree=tree)
    T = init or PoseSE3.identity()
    gate = cfg.max_corr_dist
    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        x = T.apply(src)
        d, idx = tree.query(x, max_distance=gate)
        mask = np.isfinite(d)
        if cfg.variant == "point2plane":
            mask &= np.any(target_normals[np.minimum(idx, len(tgt) - 1)] != 0.0, axis=1)
        n_in = int(np.count_nonzero(mask))
        if n_in == 0 and it == 1:
            raise NoOverlapError(f"no correspondences within {gate:.3g} m at the initial pose")
        if n_in < 6:
            break
        rmse = float(np.sqrt(np.mean(d[mask] ** 2)))
        if history and abs(history[-1] - rmse) < cfg.convergence_eps:
            history.append(rmse)
            converged = True
            break
        history.append(rmse)
        xs, ys = x[mask], tgt[idx[mask]]
        if cfg.variant == "point2point":
            try:
                delta = umeyama_align(xs, ys, with_scale=False).as_pose()
            except DegenerateInputError:
                break
        else:
            # linearize about the centroid so the iterates do not depend on the world origin
            c = xs.mean(axis=0)
            step = se3_exp(point_to_plane_step(xs - c, ys - c, target_normals[idx[mask]]))
            delta = PoseSE3(step.rotation, step.translation + c - step.rotation.apply(c))
        T = delta @ T
        if delta.rotation.angle < 1e-10 and np.linalg.norm(delta.translation) < 1e-10:
            converged = True
            break
        gate = max(gate * cfg.corr_dist_decay, cfg.min_corr_dist)
    x = T.apply(src)
    d, _ = tree.query(x, max_distance=gate)
    mask = np.isfinite(d)
    rmse = float(np.sqrt(np.mean(d[mask] ** 2))) if mask.any() else float("inf")
    return IcpResult(T, rmse, it, converged, float(np.count_nonzero(mask)) / len(src), history)
