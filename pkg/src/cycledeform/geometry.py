"""Geometry kernel: point clouds, augmentation, nearest-neighbour search,
Chamfer distances, rigid ICP and mIoU scoring.

Clouds are plain ``(n, 3)`` float64 numpy arrays. Every function here treats
its inputs as read-only, so all of them may be called concurrently on shared
data.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateCloud, LabelSpaceMismatch, LengthMismatch

MAX_AUG_ANGLE = np.deg2rad(40.0)
AUG_SCALE_RANGE = (0.75, 1.25)
AUG_MAX_TRANSLATION = 0.03


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DegenerateCloud(f"expected an (n, 3) array, got shape {pts.shape}")
    if len(pts) == 0:
        raise DegenerateCloud("point cloud is empty")
    if not np.isfinite(pts).all():
        raise DegenerateCloud("point cloud has non-finite coordinates")
    return pts


@dataclass
class LabeledCloud:
    """A point cloud with one integer part id per point."""

    points: np.ndarray
    labels: np.ndarray
    num_parts: int
    name: str = ""

    def __post_init__(self):
        self.points = as_cloud(self.points)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.points),):
            raise LengthMismatch(
                f"{len(self.labels)} labels for {len(self.points)} points"
            )
        if self.num_parts < 1:
            raise LabelSpaceMismatch("num_parts must be >= 1")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_parts):
            raise LabelSpaceMismatch(
                f"labels outside [0, {self.num_parts}) in cloud {self.name!r}"
            )


def bbox(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return points.min(axis=0), points.max(axis=0)


def normalize_bbox(points) -> np.ndarray:
    """Center the axis-aligned bounding box at the origin and scale its
    longest edge to 2, preserving aspect ratios."""
    pts = as_cloud(points)
    lo, hi = bbox(pts)
    longest = float((hi - lo).max())
    if longest == 0.0:
        raise DegenerateCloud("all points coincide")
    return (pts - (lo + hi) / 2.0) * (2.0 / longest)


def rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class AugmentationTransform:
    """Random similarity-like transform applied as
    rotate about Z -> anisotropic scale -> bbox normalize -> translate."""

    theta_z: float = 0.0
    scale: tuple = (1.0, 1.0, 1.0)
    translation: tuple = (0.0, 0.0, 0.0)
    bbox_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scale", tuple(float(v) for v in self.scale))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        if len(self.scale) != 3 or len(self.translation) != 3:
            raise ValueError("scale and translation need three components")
        if not abs(self.theta_z) <= MAX_AUG_ANGLE + 1e-12:
            raise ValueError(f"theta_z={self.theta_z} outside [-40deg, 40deg]")
        lo, hi = AUG_SCALE_RANGE
        if not all(lo <= v <= hi for v in self.scale):
            raise ValueError(f"scale {self.scale} outside [{lo}, {hi}]")
        if not all(abs(v) < AUG_MAX_TRANSLATION for v in self.translation):
            raise ValueError(f"translation {self.translation} not below {AUG_MAX_TRANSLATION}")

    @classmethod
    def sample(cls, rng: np.random.Generator, translate: bool = True) -> "AugmentationTransform":
        theta = rng.uniform(-MAX_AUG_ANGLE, MAX_AUG_ANGLE)
        scale = rng.uniform(*AUG_SCALE_RANGE, size=3)
        # open interval: strictly below the bound
        t = rng.uniform(-1.0, 1.0, size=3) * (AUG_MAX_TRANSLATION * 0.999) if translate else np.zeros(3)
        return cls(float(theta), tuple(scale), tuple(t), True)

    def linear_part(self) -> np.ndarray:
        return np.diag(self.scale) @ rotation_z(self.theta_z)


def apply_augmentation(points, psi: AugmentationTransform) -> np.ndarray:
    pts = as_cloud(points)
    out = pts @ psi.linear_part().T
    if psi.bbox_norm:
        out = normalize_bbox(out)
    return out + np.asarray(psi.translation)


def resample(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n`` points drawn uniformly with replacement."""
    return rng.integers(0, len(points), size=n)


class KdTree:
    """Immutable nearest-neighbour index; ties resolve to the smallest index."""

    def __init__(self, points):
        self.points = np.ascontiguousarray(as_cloud(points))
        # duplicated rows always tie; index each distinct row once and
        # report the first occurrence
        unique, self._first = np.unique(self.points, axis=0, return_index=True)
        self._unique = unique
        self._tree = cKDTree(unique)

    def __len__(self):
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(indices, distances)`` of the nearest point for each query row."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if len(self._unique) == 1:
            d = np.linalg.norm(q - self._unique[0], axis=1)
            return np.full(len(q), self._first[0], dtype=np.int64), d
        d, i = self._tree.query(q, k=2)
        idx = self._first[i[:, 0]].astype(np.int64)
        dist = d[:, 0]
        # distinct points at exactly equal distance: rare, settle by brute force
        for r in np.flatnonzero(d[:, 1] == d[:, 0]):
            diff = self.points - q[r]
            sq = (diff**2).sum(axis=1)
            cand = np.flatnonzero(sq == sq.min())
            # rescale the tied rows so tiny offsets that underflowed when
            # squared are told apart
            s = np.abs(diff[cand]).max()
            if s > 0:
                scaled = ((diff[cand] / s) ** 2).sum(axis=1)
                cand = cand[scaled == scaled.min()]
            idx[r] = int(cand[0])
            dist[r] = np.linalg.norm(diff[cand[0]])
        return idx, dist


def project(q, tree: KdTree) -> tuple[int, np.ndarray]:
    """Nearest point of the indexed cloud to ``q`` and its index."""
    idx, _ = tree.query(np.asarray(q, dtype=np.float64).reshape(1, 3))
    i = int(idx[0])
    return i, tree.points[i]


def chamfer_asym(source, target, source_tree: KdTree | None = None) -> float:
    """Mean over target points of the distance to the nearest source point."""
    tree = source_tree if source_tree is not None else KdTree(source)
    _, d = tree.query(as_cloud(target))
    return float(d.mean())


def chamfer_sym(a, b) -> float:
    return chamfer_asym(a, b) + chamfer_asym(b, a)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying ``inner`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ inner.rotation,
            self.rotation @ inner.translation + self.translation,
        )


def best_fit_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` rows onto ``dst`` rows (Kabsch)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        raise DegenerateCloud("rigid fit is rank-deficient (collinear correspondences)")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, mu_d - R @ mu_s)


@dataclass
class IcpResult:
    transform: RigidTransform
    aligned: np.ndarray
    residuals: list
    iterations: int


def icp_align(source, target, max_iters: int = 50, tol: float = 1e-6) -> IcpResult:
    """Point-to-point ICP of ``source`` onto ``target`` without outlier rejection.

    ``residuals`` holds the RMS nearest-neighbour distance before each
    iteration's fit, followed by the final one.
    """
    src = as_cloud(source)
    tree = KdTree(target)
    total = RigidTransform()
    current = src
    idx, d = tree.query(current)
    residuals = [float(np.sqrt(np.mean(d**2)))]
    it = 0
    for it in range(1, max_iters + 1):
        step = best_fit_rigid(current, tree.points[idx])
        total = step.compose(total)
        current = total.apply(src)
        idx, d = tree.query(current)
        residuals.append(float(np.sqrt(np.mean(d**2))))
        if abs(residuals[-2] - residuals[-1]) < tol:
            break
    return IcpResult(total, current, residuals, it)


def miou(pred, gt, num_parts: int) -> float:
    """Mean per-part IoU; a part absent from both prediction and ground truth scores 1."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"prediction has {pred.shape} labels, ground truth {gt.shape}")
    ious = []
    for part in range(num_parts):
        p, g = pred == part, gt == part
        union = np.count_nonzero(p | g)
        ious.append(1.0 if union == 0 else np.count_nonzero(p & g) / union)
    return float(np.mean(ious))
