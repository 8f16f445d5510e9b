"""Synthetic piecewise-planar rooms, exact ground-truth rendering and the oracle predictor.

The oracle replaces a trained network: it emits the encoding of the true scene coordinate
plus controlled noise, with a confidence that reflects how much noise was injected.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .codec import FrequencySet, encode_point
from .errors import InvalidParameterError, NoValidPixelsError
from .fusion import CoordinateMap
from .geometry import Intrinsics, Pose, random_rotation, so3_exp

log = logging.getLogger(__name__)

DEFAULT_BOUNDS = ((0.0, 0.0, 0.0), (10.0, 8.0, 3.0))
ORACLE_EPS = 1e-3
_HIT_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class Rectangle:
    """Planar rectangle ``corner + a*u + b*v`` for ``a, b`` in [0, 1], with ``u`` orthogonal to ``v``."""

    corner: np.ndarray
    u: np.ndarray
    v: np.ndarray
    corners: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        c, u, v = (np.asarray(a, dtype=np.float64).reshape(3) for a in (self.corner, self.u, self.v))
        if np.linalg.norm(np.cross(u, v)) <= 1e-12:
            raise InvalidParameterError("rectangle edges must span a non-degenerate area")
        if abs(u @ v) > 1e-9 * np.linalg.norm(u) * np.linalg.norm(v):
            raise InvalidParameterError("rectangle edges must be orthogonal")
        # corners are kept as given so that serialization round-trips bit-exactly
        corners = np.stack([c, c + u, c + u + v, c + v]) if self.corners is None else np.asarray(self.corners, float)
        object.__setattr__(self, "corner", c)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "corners", corners)

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))

    @classmethod
    def from_corners(cls, corners) -> "Rectangle":
        p = np.asarray(corners, dtype=np.float64).reshape(4, 3)
        rect = cls(p[0], p[1] - p[0], p[3] - p[0], p)
        if not np.allclose(p[0] + rect.u + rect.v, p[2], atol=1e-9):
            raise InvalidParameterError("corners do not form a rectangle")
        return rect


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    planes: tuple[Rectangle, ...]
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]]
    seed: int = 0

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.bounds[0], dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.bounds[1], dtype=np.float64)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
            "planes": [r.corners.tolist() for r in self.planes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        lo, hi = (tuple(float(x) for x in b) for b in d["bounds"])
        return cls(tuple(Rectangle.from_corners(p) for p in d["planes"]), (lo, hi), int(d.get("seed", 0)))

    @classmethod
    def from_json(cls, text: str) -> "SyntheticScene":
        return cls.from_dict(json.loads(text))


def _room(lo: np.ndarray, hi: np.ndarray) -> list[Rectangle]:
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    dx, dy, dz = hi - lo
    return [
        Rectangle([x0, y0, z0], [dx, 0, 0], [0, dy, 0]),  # floor
        Rectangle([x0, y0, z0], [dx, 0, 0], [0, 0, dz]),  # y = y0
        Rectangle([x0, y1, z0], [dx, 0, 0], [0, 0, dz]),  # y = y1
        Rectangle([x0, y0, z0], [0, dy, 0], [0, 0, dz]),  # x = x0
        Rectangle([x1, y0, z0], [0, dy, 0], [0, 0, dz]),  # x = x1
    ]


def build_scene(seed: int = 0, bounds=DEFAULT_BOUNDS, plane_count: int = 6) -> SyntheticScene:
    """A room (floor and four walls) holding ``plane_count`` random rectangles."""
    if plane_count < 1:
        raise InvalidParameterError("plane_count must be at least 1")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise InvalidParameterError("bounds must be a non-empty axis-aligned box")
    rng = np.random.default_rng(seed)
    planes = _room(lo, hi)
    extent = hi - lo
    size_hi = max(0.2, 0.3 * float(extent.min()))
    while len(planes) < 5 + plane_count:
        center = lo + extent * rng.uniform(0.15, 0.85, 3)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        a = np.cross(n, [0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.cross(n, [1.0, 0.0, 0.0])
        a /= np.linalg.norm(a)
        b = np.cross(n, a)
        w, h = rng.uniform(0.3 * size_hi, size_hi, 2)
        rect = Rectangle(center - 0.5 * (w * a + h * b), w * a, h * b)
        c = rect.corners
        if np.all(c >= lo) and np.all(c <= hi):
            planes.append(rect)
    bnds = (tuple(float(x) for x in lo), tuple(float(x) for x in hi))
    return SyntheticScene(tuple(planes), bnds, seed)


# --------------------------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RenderedView:
    pose: Pose
    intrinsics: Intrinsics
    gt_coords: CoordinateMap
    depth: np.ndarray  # (H, W) ray length in meters, NaN where nothing is hit
    plane_ids: np.ndarray  # (H, W) index into scene.planes, -1 where nothing is hit
    view_id: str = ""

    @property
    def valid(self) -> np.ndarray:
        return self.gt_coords.valid


def pixel_rays(pose: Pose, K: Intrinsics) -> np.ndarray:
    """Unit world-frame ray direction through every pixel center, shape (H, W, 3)."""
    rows, cols = np.mgrid[0 : K.height, 0 : K.width].astype(np.float64)
    d = np.stack([(cols - K.cx) / K.fx, (rows - K.cy) / K.fy, np.ones_like(cols)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ pose.rotation  # rows of R are camera axes in world frame


def render_view(scene: SyntheticScene, pose: Pose, K: Intrinsics, view_id: str = "") -> RenderedView:
    """Nearest ray-rectangle hit per pixel; unhit pixels are invalid."""
    o = pose.center
    if np.any(o < scene.lo) or np.any(o > scene.hi):
        raise InvalidParameterError("camera center must lie inside the scene bounds")
    d = pixel_rays(pose, K)
    best = np.full(d.shape[:2], np.inf)
    ids = np.full(d.shape[:2], -1, dtype=np.int64)
    for k, r in enumerate(scene.planes):
        n = np.cross(r.u, r.v)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            t = ((r.corner - o) @ n) / denom
            p = o + t[..., None] * d
            a = (p - r.corner) @ r.u / (r.u @ r.u)
            b = (p - r.corner) @ r.v / (r.v @ r.v)
            hit = (np.abs(denom) > 1e-12) & (t > _HIT_EPS) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1) & (t < best)
        best = np.where(hit, t, best)
        ids = np.where(hit, k, ids)
    valid = ids >= 0
    depth = np.where(valid, best, np.nan)
    coords = np.where(valid[..., None], o + np.where(valid, best, 0.0)[..., None] * d, 0.0)
    gt = CoordinateMap(coords, valid.astype(np.float64), valid)
    return RenderedView(pose, K, gt, depth, ids, view_id)


# --------------------------------------------------------------------------------------------
# Annotations and augmentation
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SparseAnnotations:
    pixels: np.ndarray  # (n, 2) integer (col, row)
    points: np.ndarray  # (n, 3)
    view_id: str = ""
    perturbed: np.ndarray | None = None  # (n,) bool, entries touched by depth noise

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(px) != len(pts):
            raise InvalidParameterError("pixels and points must have equal length")
        pert = np.zeros(len(px), bool) if self.perturbed is None else np.asarray(self.perturbed, dtype=bool)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "perturbed", pert)

    def __len__(self) -> int:
        return len(self.pixels)

    def ranges(self) -> list[tuple[float, float]]:
        """Per-axis (min, max) of the annotated points."""
        return [(float(self.points[:, k].min()), float(self.points[:, k].max())) for k in range(3)]

    def to_jsonl(self) -> str:
        lines = [
            json.dumps({"px": int(p[0]), "py": int(p[1]), "x": float(v[0]), "y": float(v[1]), "z": float(v[2])})
            for p, v in zip(self.pixels, self.points)
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str, view_id: str = "") -> "SparseAnnotations":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        return cls([[r["px"], r["py"]] for r in rows], [[r["x"], r["y"], r["z"]] for r in rows], view_id)


def subsample_annotations(view: RenderedView, count: int = 1024, seed: int = 0) -> SparseAnnotations:
    """Uniform sample of valid pixels without replacement, in row-major order."""
    flat = np.flatnonzero(view.valid)
    if flat.size == 0:
        raise NoValidPixelsError("view has no valid pixel to annotate")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(flat, size=min(count, flat.size), replace=False))
    rows, cols = np.unravel_index(pick, view.valid.shape)
    return SparseAnnotations(np.stack([cols, rows], axis=1), view.gt_coords.coords[rows, cols], view.view_id)


@dataclass(frozen=True, eq=False)
class Similarity3D:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9 or np.linalg.det(R) <= 0:
            raise InvalidParameterError("rotation must be proper orthonormal")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise InvalidParameterError("scale must be positive and finite")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def random(cls, rng: np.random.Generator, scale_range=(0.5, 2.0), translation_range=1000.0) -> "Similarity3D":
        """Random rotation, log-uniform scale and uniform translation in ``[-r, r]^3``."""
        lo, hi = scale_range
        s = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        return cls(random_rotation(rng), s, rng.uniform(-translation_range, translation_range, 3))

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "Similarity3D":
        Ri = self.rotation.T
        return Similarity3D(Ri, 1.0 / self.scale, -(Ri @ self.translation) / self.scale)

    def transform_pose(self, pose: Pose) -> Pose:
        """Pose of the same camera in the transformed world (projections are unchanged)."""
        R = pose.rotation @ self.rotation.T
        return Pose(R, self.scale * pose.translation - R @ self.translation)


def augment_similarity(obj, sim: Similarity3D):
    """Apply ``v -> s R v + t`` to a point array or to every annotated point (pixels untouched)."""
    if isinstance(obj, SparseAnnotations):
        return SparseAnnotations(obj.pixels, sim.apply(obj.points), obj.view_id, obj.perturbed)
    return sim.apply(obj)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def inject_depth_noise(
    ann: SparseAnnotations, pose: Pose, fraction: float = 0.05, sigma_depth: float | None = None, seed: int = 0
) -> SparseAnnotations:
    """Move a random ``fraction`` of the points along their camera ray by Gaussian depth noise.

    ``sigma_depth=None`` uses 5% of each point's depth.
    """
    if not 0.0 <= fraction <= 1.0:
        raise InvalidParameterError("fraction must lie in [0, 1]")
    n = len(ann)
    count = _round_half_up(fraction * n)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=count, replace=False))
    pts = ann.points.copy()
    ray = pts[idx] - pose.center
    depth = np.linalg.norm(ray, axis=1)
    sigma = 0.05 * depth if sigma_depth is None else np.full(count, float(sigma_depth))
    pts[idx] += ray / depth[:, None] * (sigma * rng.normal(size=count))[:, None]
    pert = ann.perturbed.copy()
    pert[idx] = True
    return SparseAnnotations(ann.pixels, pts, ann.view_id, pert)


# --------------------------------------------------------------------------------------------
# Oracle predictor
# --------------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OraclePrediction:
    encodings: np.ndarray  # (H, W, 6F), zero where invalid
    confidence: np.ndarray  # (H, W), zero where invalid
    valid: np.ndarray  # (H, W)
    dropped: np.ndarray  # (H, W) pixels whose encoding was replaced by random phases


def oracle_predict(
    view: RenderedView,
    fs: FrequencySet,
    sigma_enc: float = 0.0,
    dropout_fraction: float = 0.0,
    seed: int = 0,
    eps: float = ORACLE_EPS,
) -> OraclePrediction:
    """Encoding of the true coordinate plus Gaussian noise, with ``tau = 1 / (eps + |noise|_1)``.

    A ``dropout_fraction`` of the valid pixels (rounded half up) gets random unit pairs instead.
    """
    if sigma_enc < 0 or not 0.0 <= dropout_fraction <= 1.0:
        raise InvalidParameterError("sigma_enc must be >= 0 and dropout_fraction in [0, 1]")
    rng = np.random.default_rng(seed)
    valid = view.valid
    flat = np.flatnonzero(valid)
    clean = encode_point(view.gt_coords.coords.reshape(-1, 3)[flat], fs)
    noisy = clean + sigma_enc * rng.normal(size=clean.shape)
    n_drop = _round_half_up(dropout_fraction * flat.size)
    drop = np.sort(rng.choice(flat.size, size=n_drop, replace=False))
    phase = rng.uniform(0, 2 * np.pi, size=(n_drop, clean.shape[1] // 2))
    noisy[drop, 0::2] = np.cos(phase)
    noisy[drop, 1::2] = np.sin(phase)
    tau = 1.0 / (eps + np.sum(np.abs(noisy - clean), axis=1))

    H, W = valid.shape
    enc = np.zeros((H * W, fs.dim))
    enc[flat] = noisy
    conf = np.zeros(H * W)
    conf[flat] = tau
    dropped = np.zeros(H * W, bool)
    dropped[flat[drop]] = True
    return OraclePrediction(enc.reshape(H, W, -1), conf.reshape(H, W), valid.copy(), dropped.reshape(H, W))


def make_token_samples(seed: int, count: int, D: int, modes: int = 256, sigma: float = 0.1) -> np.ndarray:
    """Gaussian-mixture corpus of ``count`` float32 vectors for codebook training."""
    if count < 256:
        raise InvalidParameterError("need at least 256 samples")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(modes, D))
    labels = rng.integers(0, modes, count)
    return (centers[labels] + sigma * rng.normal(size=(count, D))).astype(np.float32)


# --------------------------------------------------------------------------------------------
# Query and shortlist generation
# --------------------------------------------------------------------------------------------


def visible_plane_count(view: RenderedView, min_share: float = 0.05) -> int:
    ids = view.plane_ids[view.plane_ids >= 0]
    if ids.size == 0:
        return 0
    share = np.bincount(ids) / view.plane_ids.size
    return int(np.sum(share >= min_share))


def sample_query_pose(
    scene: SyntheticScene,
    K: Intrinsics,
    rng: np.random.Generator,
    min_valid: float = 0.9,
    min_planes: int = 3,
    max_tries: int = 1000,
) -> Pose:
    """Random camera at standing height that sees mostly geometry spread over several planes."""
    lo, hi = scene.lo, scene.hi
    margin = 0.15 * (hi - lo)
    for _ in range(max_tries):
        c = rng.uniform(lo + margin, hi - margin)
        c[2] = lo[2] + (hi[2] - lo[2]) * rng.uniform(0.35, 0.65)
        target = rng.uniform(lo, hi)
        target[2] = lo[2] + (hi[2] - lo[2]) * rng.uniform(0.0, 0.4)
        if np.linalg.norm(target - c) < 1.0:
            continue
        pose = Pose.look_at(c, target)
        view = render_view(scene, pose, K)
        if view.valid.mean() >= min_valid and visible_plane_count(view) >= min_planes:
            return pose
    raise InvalidParameterError("could not find a query pose with enough visible structure")


def jitter_pose(
    scene: SyntheticScene, pose: Pose, rng: np.random.Generator, translation: float = 0.5, angle_deg: float = 10.0
) -> Pose:
    """Nearby pose for a database view: shifted center, slightly rotated view direction."""
    c = np.clip(pose.center + rng.uniform(-translation, translation, 3), scene.lo + 1e-3, scene.hi - 1e-3)
    w = rng.normal(size=3)
    w *= math.radians(angle_deg) * rng.uniform() / np.linalg.norm(w)
    R = pose.rotation @ so3_exp(w)
    return Pose(R, -R @ c)
