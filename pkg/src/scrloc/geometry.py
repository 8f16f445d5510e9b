"""Pinhole camera, PnP pose estimation and localization metrics.

Conventions: poses map world to camera (``X_cam = R @ X + t``), the camera looks down +z,
and integer pixel coordinates ``(col, row)`` address pixel centers.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DegenerateConfigurationError, EmptyInputError, InvalidParameterError, NoConsensusError

log = logging.getLogger(__name__)

BEHIND_CAMERA_EPS = 1e-9
MIN_SAMPLE = 6
# thresholds as (meters, degrees)
ACCURACY_THRESHOLDS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))


class PnPConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidParameterError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "Intrinsics":
        f = 0.5 * width / math.tan(math.radians(hfov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def contains(self, pixels) -> np.ndarray:
        p = np.asarray(pixels, dtype=np.float64)
        return (p[..., 0] >= -0.5) & (p[..., 0] < self.width - 0.5) & (p[..., 1] >= -0.5) & (p[..., 1] < self.height - 0.5)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9 or np.linalg.det(R) <= 0:
            raise InvalidParameterError("rotation must be proper orthonormal")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, center, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``center`` looking at ``target`` with image rows pointing against ``up``."""
        c = np.asarray(center, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - c
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ c)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def transform(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3), np.asarray(d["translation"], dtype=np.float64))


@dataclass(frozen=True)
class Correspondence2D3D:
    pixel: tuple[float, float]
    point: tuple[float, float, float]
    confidence: float = 1.0


class CorrespondenceSet:
    """Array-backed collection of 2D-3D correspondences; iterates as :class:`Correspondence2D3D`."""

    def __init__(self, pixels, points, confidence=None):
        self.pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if confidence is None:
            confidence = np.ones(len(self.pixels))
        self.confidence = np.asarray(confidence, dtype=np.float64).reshape(-1)
        if not (len(self.pixels) == len(self.points) == len(self.confidence)):
            raise InvalidParameterError("pixels, points and confidences must have equal length")

    @classmethod
    def from_list(cls, corrs: Iterable[Correspondence2D3D]) -> "CorrespondenceSet":
        corrs = list(corrs)
        return cls(
            [c.pixel for c in corrs] or np.zeros((0, 2)),
            [c.point for c in corrs] or np.zeros((0, 3)),
            [c.confidence for c in corrs],
        )

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Correspondence2D3D(tuple(self.pixels[i]), tuple(self.points[i]), float(self.confidence[i]))
        return CorrespondenceSet(self.pixels[i], self.points[i], self.confidence[i])

    def __iter__(self) -> Iterator[Correspondence2D3D]:
        for i in range(len(self)):
            yield self[i]


def _as_set(corrs) -> CorrespondenceSet:
    if isinstance(corrs, CorrespondenceSet):
        return corrs
    return CorrespondenceSet.from_list(corrs)


@dataclass(frozen=True)
class PoseError:
    translation_error: float
    rotation_error: float


# --------------------------------------------------------------------------------------------
# Projection
# --------------------------------------------------------------------------------------------


def project(pose: Pose, K: Intrinsics, point) -> np.ndarray | None:
    """Pixel of a world point, or ``None`` when it is not in front of the camera."""
    Xc = pose.transform(point)
    if Xc[2] <= BEHIND_CAMERA_EPS:
        return None
    return np.array([K.fx * Xc[0] / Xc[2] + K.cx, K.fy * Xc[1] / Xc[2] + K.cy])


def project_points(pose: Pose, K: Intrinsics, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`project`; returns ``(pixels, in_front)`` with NaN pixels where behind."""
    Xc = pose.transform(points)
    front = Xc[..., 2] > BEHIND_CAMERA_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * Xc[..., 0] / Xc[..., 2] + K.cx, K.fy * Xc[..., 1] / Xc[..., 2] + K.cy], axis=-1)
    uv[~front] = np.nan
    return uv, front


def _skew(v: np.ndarray) -> np.ndarray:
    """Batched cross-product matrices, shape (..., 3, 3)."""
    z = np.zeros(v.shape[:-1])
    return np.stack(
        [
            np.stack([z, -v[..., 2], v[..., 1]], -1),
            np.stack([v[..., 2], z, -v[..., 0]], -1),
            np.stack([-v[..., 1], v[..., 0], z], -1),
        ],
        -2,
    )


def so3_exp(w) -> np.ndarray:
    """Batched rotation matrices from axis-angle vectors."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    W = _skew(w)
    small = theta < 1e-8
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6, np.sin(th) / th)
    b = np.where(small, 0.5 - theta**2 / 24, (1 - np.cos(th)) / th**2)
    return np.eye(3) + a * W + b * (W @ W)


def _nearest_rotation(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.ones(M.shape[:-2] + (3,))
    D[..., 2] = d
    return (U * D[..., None, :]) @ Vt


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (from a random unit quaternion)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


# --------------------------------------------------------------------------------------------
# PnP
# --------------------------------------------------------------------------------------------


def _dlt_batch(xn: np.ndarray, X: np.ndarray, rank_tol: float = 1e-9):
    """Batched DLT on normalized image coordinates.

    xn: (H, n, 2), X: (H, n, 3). Returns (R, t, ok) with ``ok`` False for rank-deficient systems.
    """
    H, n, _ = X.shape
    c = X.mean(axis=1, keepdims=True)
    scale = np.sqrt(np.mean(np.sum((X - c) ** 2, axis=2), axis=1))
    scale = np.where(scale > 0, scale, 1.0)[:, None, None]
    Xh = np.concatenate([(X - c) / scale, np.ones((H, n, 1))], axis=2)
    zeros = np.zeros((H, n, 4))
    u, v = xn[..., 0:1], xn[..., 1:2]
    rows1 = np.concatenate([Xh, zeros, -u * Xh], axis=2)
    rows2 = np.concatenate([zeros, Xh, -v * Xh], axis=2)
    A = np.concatenate([rows1, rows2], axis=1)
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    ok = s[:, 10] > rank_tol * s[:, 0]
    P = Vt[:, -1, :].reshape(H, 3, 4)
    # undo the 3D normalization: P_world = P_norm @ [[I/s, -c/s], [0, 1]]
    M = P[:, :, :3] / scale
    p = P[:, :, 3] - np.einsum("hij,hj->hi", M, c[:, 0, :])
    det = np.linalg.det(M)
    sgn = np.where(det < 0, -1.0, 1.0)
    M = M * sgn[:, None, None]
    p = p * sgn[:, None]
    ok &= np.abs(det) > 0
    U, S, Vt3 = np.linalg.svd(M)
    R = U @ Vt3
    lam = 3.0 / np.maximum(np.sum(S, axis=1), 1e-300)
    t = lam[:, None] * p
    return R, t, ok


def _residuals(R, t, X, uv, K: Intrinsics):
    Xc = X @ R.transpose(0, 2, 1) + t[:, None, :]
    z = Xc[..., 2]
    pred = np.stack([K.fx * Xc[..., 0] / z + K.cx, K.fy * Xc[..., 1] / z + K.cy], axis=-1)
    return pred - uv, Xc


def _gauss_newton_batch(R, t, X, uv, K: Intrinsics, iterations: int, tol: float = 1e-12):
    """Batched Gauss-Newton on pixel reprojection residuals.

    Rotation updates are left-multiplied tangent-space increments. A step that increases the
    cost is halved up to 10 times before being rejected. Stops once the relative cost change
    falls below ``tol``.
    Returns (R, t, cost, converged).
    """
    H, n, _ = X.shape
    r, Xc = _residuals(R, t, X, uv, K)
    cost = np.sum(r * r, axis=(1, 2))
    converged = np.zeros(H, dtype=bool)
    for _ in range(iterations):
        act = ~converged
        if not np.any(act):
            break
        idx = np.nonzero(act)[0]
        Ra, ta, Xa, uva, Xca, ra = R[idx], t[idx], X[idx], uv[idx], Xc[idx], r[idx]
        x, y, z = Xca[..., 0], Xca[..., 1], Xca[..., 2]
        zinv = 1.0 / z
        # d(pixel)/d(X_cam)
        Ju = np.stack([K.fx * zinv, np.zeros_like(z), -K.fx * x * zinv**2], -1)
        Jv = np.stack([np.zeros_like(z), K.fy * zinv, -K.fy * y * zinv**2], -1)
        RX = Xca - ta[:, None, :]
        dR = -_skew(RX)  # d(X_cam)/d(omega)
        Jr_u = np.einsum("hni,hnij->hnj", Ju, dR)
        Jr_v = np.einsum("hni,hnij->hnj", Jv, dR)
        J = np.concatenate(
            [np.concatenate([Jr_u, Ju], -1), np.concatenate([Jr_v, Jv], -1)], axis=1
        )  # (h, 2n, 6)
        res = np.concatenate([ra[..., 0], ra[..., 1]], axis=1)
        JtJ = np.einsum("hni,hnj->hij", J, J)
        Jtr = np.einsum("hni,hn->hi", J, res)
        try:
            delta = -np.linalg.solve(JtJ + 1e-15 * np.eye(6), Jtr[..., None])[..., 0]
        except np.linalg.LinAlgError:
            delta = -np.einsum("hij,hj->hi", np.linalg.pinv(JtJ), Jtr)
        step = np.ones(idx.size)
        old = cost[idx]
        newR, newt = Ra, ta
        pending = np.ones(idx.size, dtype=bool)
        new_cost = old.copy()
        new_r, new_Xc = ra, Xca
        for _ in range(10):
            cand_R = so3_exp(delta[:, :3] * step[:, None]) @ Ra
            cand_t = ta + delta[:, 3:] * step[:, None]
            cr, cXc = _residuals(cand_R, cand_t, Xa, uva, K)
            cc = np.sum(cr * cr, axis=(1, 2))
            good = pending & np.isfinite(cc) & (cc <= old) & np.all(cXc[..., 2] > 0, axis=1)
            newR = np.where(good[:, None, None], cand_R, newR)
            newt = np.where(good[:, None], cand_t, newt)
            new_cost = np.where(good, cc, new_cost)
            new_r = np.where(good[:, None, None], cr, new_r)
            new_Xc = np.where(good[:, None, None], cXc, new_Xc)
            pending &= ~good
            if not np.any(pending):
                break
            step = np.where(pending, step * 0.5, step)
        R[idx], t[idx], cost[idx], r[idx], Xc[idx] = newR, newt, new_cost, new_r, new_Xc
        small_step = np.linalg.norm(delta * step[:, None], axis=1) < 1e-14
        converged[idx] = pending | small_step | (np.abs(old - new_cost) <= tol * old) | (new_cost < 1e-24)
    return R, t, cost, converged


def _normalized(K: Intrinsics, pixels: np.ndarray) -> np.ndarray:
    return np.stack([(pixels[..., 0] - K.cx) / K.fx, (pixels[..., 1] - K.cy) / K.fy], axis=-1)


def solve_pnp(corrs, K: Intrinsics, init: Pose | None = None, max_iterations: int = 50) -> Pose:
    """Least-squares PnP: DLT initialization refined by Gauss-Newton on pixel residuals.

    With ``init`` the DLT step is skipped and refinement starts from the given pose.
    """
    cs = _as_set(corrs)
    if len(cs) < MIN_SAMPLE:
        raise InvalidParameterError(f"PnP needs at least {MIN_SAMPLE} correspondences, got {len(cs)}")
    X = cs.points[None]
    uv = cs.pixels[None]
    if init is None:
        R, t, ok = _dlt_batch(_normalized(K, uv), X)
        if not ok[0]:
            raise DegenerateConfigurationError("DLT system is rank deficient (coplanar or collinear points?)")
    else:
        R, t = init.rotation[None].copy(), init.translation[None].copy()
    R, t, _, converged = _gauss_newton_batch(R, t, X, uv, K, max_iterations)
    if not converged[0]:
        warnings.warn("Gauss-Newton did not converge; returning best iterate", PnPConvergenceWarning, stacklevel=2)
    return Pose(_nearest_rotation(R[0]), t[0])


def reprojection_errors(pose: Pose, K: Intrinsics, corrs) -> np.ndarray:
    """Pixel distance per correspondence; ``inf`` for points behind the camera."""
    cs = _as_set(corrs)
    uv, front = project_points(pose, K, cs.points)
    err = np.linalg.norm(uv - cs.pixels, axis=1)
    err[~front] = np.inf
    return err


@dataclass(frozen=True)
class RansacParams:
    sample_budget: int = 4096
    iterations: int = 10_000
    reproj_threshold_px: float = 5.0
    seed: int = 0
    min_inliers: int = MIN_SAMPLE

    def to_dict(self) -> dict:
        return {
            "sample_budget": self.sample_budget,
            "iterations": self.iterations,
            "reproj_threshold_px": self.reproj_threshold_px,
            "seed": self.seed,
            "min_inliers": self.min_inliers,
        }


@dataclass(frozen=True, eq=False)
class RansacResult:
    pose: Pose
    inlier_mask: np.ndarray
    num_inliers: int


def _minimal_samples(rng: np.random.Generator, n: int, count: int, k: int) -> np.ndarray:
    """``count`` index sets of ``k`` distinct elements of ``range(n)``."""
    idx = rng.integers(0, n, size=(count, k))
    while True:
        s = np.sort(idx, axis=1)
        dup = np.any(s[:, 1:] == s[:, :-1], axis=1)
        if not np.any(dup):
            return idx
        idx[dup] = rng.integers(0, n, size=(int(dup.sum()), k))


def _inlier_scores(R, t, X, uv, K: Intrinsics, threshold: float, chunk: int = 128):
    """Inlier count and summed inlier pixel residual of every hypothesis."""
    H = R.shape[0]
    counts = np.zeros(H, dtype=np.int64)
    sums = np.zeros(H)
    thr2 = threshold * threshold
    un = ((uv[:, 0] - K.cx) / K.fx)[:, None]
    vn = ((uv[:, 1] - K.cy) / K.fy)[:, None]
    for h0 in range(0, H, chunk):
        Rs = R[h0 : h0 + chunk]
        m = Rs.shape[0]
        # one BLAS call: (n, 3) @ (3, 3m)
        Xc = (X @ Rs.transpose(2, 1, 0).reshape(3, 3 * m)).reshape(-1, 3, m)
        Xc += t[h0 : h0 + chunk].T[None]
        z = Xc[:, 2, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            iz = 1.0 / z
            a = Xc[:, 0, :] * iz
            a -= un
            a *= K.fx
            a *= a
            b = Xc[:, 1, :] * iz
            b -= vn
            b *= K.fy
            b *= b
            a += b
            inl = a < thr2
        inl &= z > BEHIND_CAMERA_EPS
        counts[h0 : h0 + m] = inl.sum(axis=0)
        np.sqrt(a, out=a, where=inl)
        a[~inl] = 0.0
        sums[h0 : h0 + m] = a.sum(axis=0)
    return counts, sums


def ransac_pnp(corrs, K: Intrinsics, params: RansacParams | None = None) -> RansacResult:
    """Robust PnP: random minimal samples, consensus scoring, least-squares refit on inliers.

    The returned ``inlier_mask`` covers every input correspondence and is evaluated with the
    final pose.
    """
    params = params or RansacParams()
    cs = _as_set(corrs)
    n_all = len(cs)
    if n_all < MIN_SAMPLE:
        raise InvalidParameterError(f"RANSAC needs at least {MIN_SAMPLE} correspondences, got {n_all}")
    rng = np.random.default_rng(params.seed)
    if n_all > params.sample_budget:
        subset = np.sort(rng.choice(n_all, size=params.sample_budget, replace=False))
    else:
        subset = np.arange(n_all)
    X = cs.points[subset]
    uv = cs.pixels[subset]
    n = len(subset)

    samples = _minimal_samples(rng, n, params.iterations, MIN_SAMPLE)
    Xs, uvs = X[samples], uv[samples]
    R, t, ok = _dlt_batch(_normalized(K, uvs), Xs)
    R, t, ok = R[ok], t[ok], np.nonzero(ok)[0]
    if len(ok) == 0:
        raise NoConsensusError("every minimal sample was degenerate")
    R, t, _, _ = _gauss_newton_batch(R.copy(), t.copy(), Xs[ok], uvs[ok], K, iterations=5)
    finite = np.all(np.isfinite(R), axis=(1, 2)) & np.all(np.isfinite(t), axis=1)
    R, t, ok = R[finite], t[finite], ok[finite]
    if len(ok) == 0:
        raise NoConsensusError("no finite hypothesis")
    counts, sums = _inlier_scores(R, t, X, uv, K, params.reproj_threshold_px)
    # most inliers, then lowest mean inlier residual, then earliest iteration
    tied = np.nonzero(counts == counts.max())[0]
    means = sums[tied] / np.maximum(counts[tied], 1)
    best = tied[np.lexsort((ok[tied], means))[0]]
    log.debug("ransac best hypothesis: %d inliers (iteration %d)", counts[best], ok[best])
    if counts[best] < max(MIN_SAMPLE, params.min_inliers):
        raise NoConsensusError(f"best hypothesis has only {counts[best]} inliers")

    hyp = Pose(_nearest_rotation(R[best]), t[best])
    inl_sub = reprojection_errors(hyp, K, CorrespondenceSet(uv, X)) < params.reproj_threshold_px
    inliers = CorrespondenceSet(uv[inl_sub], X[inl_sub])
    candidates = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PnPConvergenceWarning)
        candidates.append(solve_pnp(inliers, K, init=hyp))
        try:
            candidates.append(solve_pnp(inliers, K))
        except DegenerateConfigurationError:
            pass
    costs = []
    for p in candidates:
        e = reprojection_errors(p, K, inliers)
        costs.append(float(np.sum(e * e)) if np.all(np.isfinite(e)) else math.inf)
    pose = candidates[int(np.argmin(costs))]
    mask = reprojection_errors(pose, K, cs) < params.reproj_threshold_px
    return RansacResult(pose, mask, int(mask.sum()))


# --------------------------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------------------------


def rotation_angle_deg(Ra, Rb) -> float:
    """Geodesic angle of ``Ra @ Rb.T``.

    Same value as ``arccos((trace - 1) / 2)``, but the atan2 form keeps full precision for
    tiny angles where arccos saturates around 1e-6 degrees.
    """
    D = np.asarray(Ra) @ np.asarray(Rb).T
    c = (np.trace(D) - 1) / 2
    s = 0.5 * np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def pose_error(estimate: Pose, truth: Pose) -> PoseError:
    dt = float(np.linalg.norm(estimate.center - truth.center))
    return PoseError(dt, min(max(rotation_angle_deg(estimate.rotation, truth.rotation), 0.0), 180.0))


UNLOCALIZED = PoseError(math.inf, 180.0)


def accuracy_report(errors: Sequence[PoseError | None], thresholds=ACCURACY_THRESHOLDS) -> dict:
    """Median errors and joint-threshold accuracies; ``None`` entries count as failures."""
    errs = [UNLOCALIZED if e is None else e for e in errors]
    if not errs:
        raise EmptyInputError("accuracy report needs at least one query")
    te = np.array([e.translation_error for e in errs])
    re_ = np.array([e.rotation_error for e in errs])
    out = {
        "count": len(errs),
        "median_t": float(np.median(te)),
        "median_r": float(np.median(re_)),
    }
    for dt, dr in thresholds:
        out[f"acc@({dt:g}m,{dr:g}deg)"] = float(np.mean((te <= dt) & (re_ <= dr)))
    return out
