"""Scene representation: Gaussians, cameras, and the shared semantic codebook.

Conventions used throughout the package:

* Quaternions are stored (w, x, y, z) and kept unit-norm.
* ``CameraPose`` is the world-to-camera (view) transform: x_cam = R @ x_world + t.
* Image coordinates are (u, v) = (row, column). Row u pairs with fx/cx,
  column v with fy/cy, so a point at camera coords (x, y, z) projects to
  u = fx*x/z + cx, v = fy*y/z + cy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import BehindCameraError, InvalidInputError

QUAT_NORM_TOL = 1e-6
# Screen-space covariance eigenvalues are floored here (px^2) so splats never
# degenerate below sub-pixel size.
EIG_FLOOR_PX2 = 0.3


# ---------------------------------------------------------------------------
# quaternion / rotation helpers


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise InvalidInputError("zero quaternion cannot be normalized")
    return q / n


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (..., 4) wxyz -> rotation matrix (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix (3,3) -> unit quaternion wxyz with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# domain types


@dataclass
class Gaussian:
    """A single anisotropic splat with a semantic logit vector."""

    mu: np.ndarray        # (3,) world position
    quat: np.ndarray      # (4,) unit wxyz
    scale: np.ndarray     # (3,) strictly positive axis lengths
    opacity: float        # in [0, 1]
    color: np.ndarray     # (3,) RGB in [0, 1]
    logits: np.ndarray    # (K,) semantic coefficients

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(self.quat) - 1.0) > QUAT_NORM_TOL:
            raise InvalidInputError("quaternion must be unit-norm within 1e-6")
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if np.any(self.scale <= 0):
            raise InvalidInputError("scale components must be strictly positive")
        self.opacity = float(np.clip(self.opacity, 0.0, 1.0))
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)


@dataclass
class GaussianField:
    """Struct-of-arrays scene; all Gaussians share one logit length K.

    ``generation`` increases on every structural change (insert/prune).
    Parameter arrays are treated as immutable snapshots: optimizers build a
    new field via ``with_params`` rather than writing in place.
    """

    mu: np.ndarray        # (N, 3)
    quat: np.ndarray      # (N, 4)
    scale: np.ndarray     # (N, 3)
    opacity: np.ndarray   # (N,)
    color: np.ndarray     # (N, 3)
    logits: np.ndarray    # (N, K)
    generation: int = 0

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        self.quat = np.atleast_2d(np.asarray(self.quat, dtype=np.float64))
        self.scale = np.atleast_2d(np.asarray(self.scale, dtype=np.float64))
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(-1)
        self.color = np.atleast_2d(np.asarray(self.color, dtype=np.float64))
        self.logits = np.atleast_2d(np.asarray(self.logits, dtype=np.float64))
        n = self.mu.shape[0]
        if not (self.quat.shape == (n, 4) and self.scale.shape == (n, 3)
                and self.opacity.shape == (n,) and self.color.shape == (n, 3)
                and self.logits.shape[0] == n):
            raise InvalidInputError("inconsistent field array shapes")
        norms = np.linalg.norm(self.quat, axis=1)
        if n and np.max(np.abs(norms - 1.0)) > QUAT_NORM_TOL:
            raise InvalidInputError("field quaternions must be unit-norm within 1e-6")
        if n and np.any(self.scale <= 0):
            raise InvalidInputError("field scales must be strictly positive")
        self.opacity = np.clip(self.opacity, 0.0, 1.0)

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def K(self) -> int:
        return self.logits.shape[1]

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.mu[i], self.quat[i], self.scale[i],
                        float(self.opacity[i]), self.color[i], self.logits[i])

    def with_params(self, **arrays) -> "GaussianField":
        """New field sharing untouched arrays; same generation (no structure change)."""
        return replace(self, **arrays)

    def with_logits(self, logits: np.ndarray) -> "GaussianField":
        if logits.shape != self.logits.shape:
            raise InvalidInputError("logits shape mismatch")
        return replace(self, logits=np.asarray(logits, dtype=np.float64))

    @staticmethod
    def from_gaussians(gaussians: Sequence[Gaussian], generation: int = 0) -> "GaussianField":
        if not gaussians:
            raise InvalidInputError("cannot build a field from zero Gaussians")
        return GaussianField(
            mu=np.stack([g.mu for g in gaussians]),
            quat=np.stack([g.quat for g in gaussians]),
            scale=np.stack([g.scale for g in gaussians]),
            opacity=np.array([g.opacity for g in gaussians]),
            color=np.stack([g.color for g in gaussians]),
            logits=np.stack([g.logits for g in gaussians]),
            generation=generation,
        )


class FeatureReservoir:
    """Bounded FIFO of recently observed feature vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise InvalidInputError("reservoir capacity must be >= 1")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._buf = np.empty((0, dim), dtype=np.float64)

    def __len__(self) -> int:
        return self._buf.shape[0]

    def extend(self, x: np.ndarray) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise InvalidInputError("reservoir dimension mismatch")
        self._buf = np.concatenate([self._buf, x])[-self.capacity:]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if len(self) == 0:
            raise InvalidInputError("cannot sample from an empty reservoir")
        return self._buf[int(rng.integers(0, len(self)))].copy()

    def as_array(self) -> np.ndarray:
        return self._buf.copy()


@dataclass
class Codebook:
    """K x D semantic codewords plus EMA count/sum buffers and a reservoir."""

    E: np.ndarray                  # (K, D) codewords
    N: np.ndarray                  # (K,) EMA counts
    M: np.ndarray                  # (K, D) EMA feature sums
    lam: float                     # EMA decay in [0, 1)
    epsilon: float                 # stability constant
    reservoir: FeatureReservoir = field(repr=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.E = np.atleast_2d(np.asarray(self.E, dtype=np.float64))
        self.N = np.asarray(self.N, dtype=np.float64).reshape(-1)
        self.M = np.atleast_2d(np.asarray(self.M, dtype=np.float64))
        if self.E.shape != self.M.shape or self.N.shape[0] != self.E.shape[0]:
            raise InvalidInputError("codebook buffer shapes disagree")
        if not (0.0 <= self.lam < 1.0):
            raise InvalidInputError("EMA decay must lie in [0, 1)")
        if np.any(self.N < 0):
            raise InvalidInputError("EMA counts must be nonnegative")
        if self.reservoir is None:
            self.reservoir = FeatureReservoir(4096, self.E.shape[1])

    @property
    def K(self) -> int:
        return self.E.shape[0]

    @property
    def D(self) -> int:
        return self.E.shape[1]

    @staticmethod
    def zeros(K: int, D: int, lam: float = 0.96, epsilon: float = 1e-5,
              reservoir_capacity: int = 4096) -> "Codebook":
        return Codebook(E=np.zeros((K, D)), N=np.zeros(K), M=np.zeros((K, D)),
                        lam=lam, epsilon=epsilon,
                        reservoir=FeatureReservoir(reservoir_capacity, D))


@dataclass
class CameraPose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray     # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-6:
            raise InvalidInputError("pose rotation must be orthonormal within 1e-6")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise InvalidInputError("pose rotation must have det +1")

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @staticmethod
    def from_matrix(T: np.ndarray) -> "CameraPose":
        return CameraPose(T[:3, :3], T[:3, 3])

    def compose(self, other: "CameraPose") -> "CameraPose":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return CameraPose(self.rotation @ other.rotation,
                          self.rotation @ other.translation + self.translation)

    def inverse(self) -> "CameraPose":
        return CameraPose(self.rotation.T, -self.rotation.T @ self.translation)

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def transform(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    height: int   # image rows H
    width: int    # image columns W
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise InvalidInputError("require 0 < near < far")

    @staticmethod
    def from_fov(height: int, width: int, fov_deg: float = 60.0,
                 near: float = 0.05, far: float = 100.0) -> "CameraIntrinsics":
        f = 0.5 * min(height, width) / np.tan(np.deg2rad(fov_deg) / 2)
        return CameraIntrinsics(fx=f, fy=f, cx=(height - 1) / 2,
                                cy=(width - 1) / 2, height=height, width=width,
                                near=near, far=far)


# ---------------------------------------------------------------------------
# SE(3) twist maps (rotation part first: xi = (wx, wy, wz, tx, ty, tz))


def _hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])


def se3_exp(xi: np.ndarray) -> CameraPose:
    """Exponential map from a 6-twist to a rigid transform."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    w, v = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    Wx = _hat(w)
    if theta < 1e-10:
        R = np.eye(3) + Wx + 0.5 * (Wx @ Wx)
        V = np.eye(3) + 0.5 * Wx + (Wx @ Wx) / 6.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        R = np.eye(3) + (s / theta) * Wx + ((1 - c) / theta**2) * (Wx @ Wx)
        V = (np.eye(3) + ((1 - c) / theta**2) * Wx
             + ((theta - s) / theta**3) * (Wx @ Wx))
    # Re-orthonormalize so CameraPose validation never trips on rounding.
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return CameraPose(R, V @ v)


def se3_log(pose: CameraPose) -> np.ndarray:
    """Logarithm map from a rigid transform to its 6-twist."""
    R, t = pose.rotation, pose.translation
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-10:
        w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        V_inv = np.eye(3) - 0.5 * _hat(w)
    elif abs(theta - np.pi) < 1e-6:
        # Near pi: extract axis from the symmetric part.
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        axis = axis / np.linalg.norm(axis)
        signs = np.sign([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        axis = axis * np.where(signs == 0, 1.0, signs)
        w = theta * axis / np.linalg.norm(axis)
        Wx = _hat(w)
        V_inv = (np.eye(3) - 0.5 * Wx
                 + (1 / theta**2 - (1 + np.cos(theta)) / (2 * theta * np.sin(theta) + 1e-300))
                 * (Wx @ Wx))
    else:
        w = theta / (2 * np.sin(theta)) * np.array(
            [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        Wx = _hat(w)
        V_inv = (np.eye(3) - 0.5 * Wx
                 + (1 / theta**2 - (1 + np.cos(theta)) / (2 * theta * np.sin(theta)))
                 * (Wx @ Wx))
    return np.concatenate([w, V_inv @ t])


def relative_pose(a: CameraPose, b: CameraPose) -> CameraPose:
    """Transform taking ``a`` to ``b``: result ∘ a = b."""
    return b.compose(a.inverse())


def rotation_angle(R: np.ndarray) -> float:
    """Rotation magnitude in radians."""
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# operations


def covariance_from_parts(quat: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """3D covariance Sigma = R S S^T R^T from a unit quaternion and axis scales."""
    quat = np.asarray(quat, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if abs(np.linalg.norm(quat) - 1.0) > QUAT_NORM_TOL:
        raise InvalidInputError("quaternion must be unit-norm within 1e-6")
    if np.any(scale <= 0):
        raise InvalidInputError("scale components must be strictly positive")
    R = quat_to_rot(quat)
    return (R * scale**2) @ R.T


def covariance_from_parts_batch(quat: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """(N,4),(N,3) -> (N,3,3); assumes quaternions already unit-norm."""
    R = quat_to_rot(quat)
    return np.einsum("nij,nj,nkj->nik", R, np.asarray(scale) ** 2, R)


def _floor_eigenvalues_2x2(cov: np.ndarray, floor: float) -> np.ndarray:
    """Clamp eigenvalues of symmetric (..., 2, 2) matrices to >= floor."""
    a, b, c = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))
    l1 = np.maximum(half_tr + disc, floor)
    l2 = np.maximum(half_tr - disc, floor)
    theta = 0.5 * np.arctan2(2 * b, a - c)
    ct, st = np.cos(theta), np.sin(theta)
    out = np.empty_like(cov)
    out[..., 0, 0] = l1 * ct * ct + l2 * st * st
    out[..., 1, 1] = l1 * st * st + l2 * ct * ct
    out[..., 0, 1] = (l1 - l2) * ct * st
    out[..., 1, 0] = out[..., 0, 1]
    return out


def project_covariance_batch(sigma: np.ndarray, pose: CameraPose,
                             intr: CameraIntrinsics, mu: np.ndarray,
                             eig_floor: float = EIG_FLOOR_PX2,
                             cam: np.ndarray | None = None) -> np.ndarray:
    """Screen-space 2x2 covariances via the affine (Jacobian) approximation.

    ``sigma`` is (N,3,3) world covariance, ``mu`` (N,3) world centers.
    Callers are responsible for culling centers behind the near plane;
    ``cam`` may carry precomputed camera-space centers.
    """
    W = pose.rotation
    if cam is None:
        cam = pose.transform(np.atleast_2d(mu))
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    n = cam.shape[0]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * x / z**2
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * y / z**2
    JW = J @ W
    cov2 = np.einsum("nij,njk,nlk->nil", JW, np.atleast_3d(sigma), JW)
    cov2 = 0.5 * (cov2 + np.swapaxes(cov2, 1, 2))
    return _floor_eigenvalues_2x2(cov2, eig_floor)


def project_covariance(sigma: np.ndarray, pose: CameraPose,
                       intr: CameraIntrinsics, mu: np.ndarray,
                       eig_floor: float = EIG_FLOOR_PX2) -> np.ndarray:
    """Single-Gaussian wrapper around :func:`project_covariance_batch`."""
    mu = np.asarray(mu, dtype=np.float64).reshape(3)
    z = pose.transform(mu[None])[0, 2]
    if z <= intr.near:
        raise BehindCameraError(f"center at camera depth {z:.4g} <= near plane {intr.near}")
    return project_covariance_batch(np.asarray(sigma)[None], pose, intr, mu[None],
                                    eig_floor=eig_floor)[0]


def project_points(pose: CameraPose, intr: CameraIntrinsics,
                   mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World points -> ((u,v) pixel coords, camera depth z)."""
    cam = pose.transform(np.atleast_2d(mu))
    z = cam[:, 2]
    u = intr.fx * cam[:, 0] / z + intr.cx
    v = intr.fy * cam[:, 1] / z + intr.cy
    return np.stack([u, v], axis=1), z


def mixture_weights(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the codeword axis (last axis)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("logits must be finite")
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_vjp(logits: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """VJP of mixture_weights: rows of logits/upstream -> rows of d/dlogits."""
    w = mixture_weights(logits)
    inner = np.sum(w * upstream, axis=-1, keepdims=True)
    return w * (upstream - inner)


def decode_feature(logits: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Softmax-weighted codeword mixture; supports (K,) or (N,K) logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != codebook.K:
        raise InvalidInputError(
            f"logit length {logits.shape[-1]} does not match codebook K={codebook.K}")
    return mixture_weights(logits) @ codebook.E


# ---------------------------------------------------------------------------
# serialization


def field_to_json_dict(field_: GaussianField, D: int) -> dict:
    return {
        "K": field_.K,
        "D": int(D),
        "gaussians": [
            {
                "mu": field_.mu[i].tolist(),
                "quat": field_.quat[i].tolist(),
                "scale": field_.scale[i].tolist(),
                "opacity": float(field_.opacity[i]),
                "color": field_.color[i].tolist(),
                "logits": field_.logits[i].tolist(),
            }
            for i in range(len(field_))
        ],
    }


def field_from_json_dict(doc: dict) -> GaussianField:
    gs = doc["gaussians"]
    return GaussianField(
        mu=np.array([g["mu"] for g in gs]),
        quat=np.array([g["quat"] for g in gs]),
        scale=np.array([g["scale"] for g in gs]),
        opacity=np.array([g["opacity"] for g in gs]),
        color=np.array([g["color"] for g in gs]),
        logits=np.array([g["logits"] for g in gs]),
    )


def save_field(path, field_: GaussianField, D: int) -> None:
    with open(path, "w") as f:
        json.dump(field_to_json_dict(field_, D), f)


def load_field(path) -> GaussianField:
    with open(path) as f:
        return field_from_json_dict(json.load(f))


def codebook_to_json_dict(cb: Codebook) -> dict:
    return {"E": cb.E.tolist(), "N": cb.N.tolist(), "M": cb.M.tolist(),
            "lambda": cb.lam, "epsilon": cb.epsilon}


def codebook_from_json_dict(doc: dict, reservoir_capacity: int = 4096) -> Codebook:
    E = np.array(doc["E"])
    return Codebook(E=E, N=np.array(doc["N"]), M=np.array(doc["M"]),
                    lam=doc["lambda"], epsilon=doc["epsilon"],
                    reservoir=FeatureReservoir(reservoir_capacity, E.shape[1]))


def save_codebook(path, cb: Codebook) -> None:
    with open(path, "w") as f:
        json.dump(codebook_to_json_dict(cb), f)


def load_codebook(path) -> Codebook:
    with open(path) as f:
        return codebook_from_json_dict(json.load(f))
