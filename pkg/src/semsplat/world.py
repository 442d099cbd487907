"""Deterministic synthetic scenes, trajectories, ground-truth frames, metrics.

Every pipeline stage gets an exact oracle from here: scenes are seeded
Gaussian fields whose Gaussians belong to spatially coherent regions, each
region carrying a unit feature vector; frames are rendered with the package's
own rasterizer; annotations label each pixel with the region of its dominant
Gaussian. A stubbed vision-model output is therefore available for every
frame without any network weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (CameraIntrinsics, CameraPose, GaussianField, quat_normalize,
                   se3_exp)
from .errors import InvalidInputError, SceneGenerationError
from .rasterizer import GridSpec, render, render_argmax_ids, render_channels_grid
from .supervision import ContinuousFeatureSource, RegionAnnotation


@dataclass
class SceneRecipe:
    seed: int = 7
    n_gaussians: int = 60
    box_half_extent: float = 1.0
    n_regions: int = 4
    feature_dim: int = 8
    codebook_size: int = 4
    trajectory: str = "orbit"        # orbit | line | random-walk
    n_frames: int = 30
    height: int = 32
    width: int = 32
    mode: str = "rgbd"               # rgb | rgbd
    orbit_radius: float = 2.5
    orbit_arc_deg: float = 360.0
    fov_deg: float = 60.0
    noise_std: float = 0.0
    feat_downscale: int = 16         # continuous feature source at H/16

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.height, self.width, self.fov_deg)

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_json_dict(doc: dict) -> "SceneRecipe":
        return SceneRecipe(**doc)


def standard_recipe(**overrides) -> SceneRecipe:
    """The scene the acceptance checks run against (90-degree orbit, 32x32)."""
    base = SceneRecipe(seed=7, n_gaussians=60, n_regions=4, feature_dim=8,
                       codebook_size=4, n_frames=30, height=32, width=32,
                       orbit_arc_deg=90.0, mode="rgbd")
    for k, v in overrides.items():
        setattr(base, k, v)
    return base


@dataclass
class CameraFrame:
    frame_id: int
    pose: CameraPose                       # ground truth
    color: np.ndarray                      # (3, H, W)
    depth: Optional[np.ndarray]            # (H, W) or None in rgb mode
    annotation: Optional[RegionAnnotation] = None
    features: Optional[ContinuousFeatureSource] = None


REGION_BASE_COLORS = np.array([
    [0.9, 0.25, 0.2], [0.2, 0.75, 0.3], [0.25, 0.35, 0.95], [0.95, 0.8, 0.2],
    [0.8, 0.3, 0.85], [0.25, 0.85, 0.85], [0.95, 0.55, 0.2], [0.6, 0.6, 0.6],
])


def region_feature_table(rng: np.random.Generator, R: int, D: int,
                         max_cos: float = 0.5, max_tries: int = 2000) -> np.ndarray:
    """R unit rows with pairwise cosine < max_cos, by rejection sampling."""
    for _ in range(max_tries):
        phi = rng.standard_normal((R, D))
        phi /= np.linalg.norm(phi, axis=1, keepdims=True)
        gram = phi @ phi.T
        if np.max(gram - np.eye(R)) < max_cos:
            return phi
    raise SceneGenerationError(
        f"could not separate {R} features in {D} dims below cosine {max_cos}")


def generate_scene(recipe: SceneRecipe) -> tuple[GaussianField, np.ndarray, np.ndarray]:
    """Seeded scene -> (field, per-Gaussian region labels, region table Phi)."""
    if recipe.n_gaussians < 1:
        raise InvalidInputError("recipe needs at least one Gaussian")
    rng = np.random.default_rng(recipe.seed)
    R, D = recipe.n_regions, recipe.feature_dim
    phi = region_feature_table(rng, R, D)

    half = recipe.box_half_extent
    centers = rng.uniform(-0.6 * half, 0.6 * half, size=(R, 3))
    n = recipe.n_gaussians
    if n == 1:
        mu = np.zeros((1, 3))
    else:
        mu = rng.uniform(-half, half, size=(n, 3))
    labels = np.argmin(np.linalg.norm(mu[:, None] - centers[None], axis=2), axis=1)

    base_scale = half * 0.55 / max(n, 2) ** (1 / 3)
    scale = base_scale * rng.uniform(0.7, 1.3, size=(n, 3))
    quat = quat_normalize(rng.standard_normal((n, 4)))
    opacity = rng.uniform(0.7, 1.0, size=n)
    color = np.clip(REGION_BASE_COLORS[labels % len(REGION_BASE_COLORS)]
                    + rng.uniform(-0.12, 0.12, size=(n, 3)), 0.0, 1.0)
    logits = np.zeros((n, recipe.codebook_size))
    field_ = GaussianField(mu=mu, quat=quat, scale=scale, opacity=opacity,
                           color=color, logits=logits)
    return field_, labels.astype(np.int64), phi


def _look_at(position: np.ndarray, target: np.ndarray,
             up_hint: np.ndarray = np.array([0.0, 0.0, 1.0])) -> CameraPose:
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(up_hint, fwd)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(np.array([0.0, 1.0, 0.0]), fwd)
    right = right / np.linalg.norm(right)
    up = np.cross(fwd, right)
    R = np.stack([right, up, fwd])     # rows: camera axes in world coords
    return CameraPose(R, -R @ position)


def generate_trajectory(recipe: SceneRecipe) -> list:
    """Ground-truth poses with bounded inter-frame motion."""
    if recipe.n_frames < 2:
        raise InvalidInputError("trajectory needs at least 2 frames")
    n = recipe.n_frames
    rng = np.random.default_rng(recipe.seed + 1)
    poses = []
    if recipe.trajectory == "orbit":
        arc = np.deg2rad(recipe.orbit_arc_deg)
        for i in range(n):
            ang = arc * i / n
            pos = recipe.orbit_radius * np.array([np.cos(ang), np.sin(ang), 0.25])
            poses.append(_look_at(pos, np.zeros(3)))
    elif recipe.trajectory == "line":
        start = np.array([0.0, -recipe.orbit_radius, 0.3])
        step = np.array([0.0, 0.06, 0.0])
        base = _look_at(start, np.zeros(3))
        for i in range(n):
            poses.append(CameraPose(base.rotation,
                                    -base.rotation @ (start + i * step)))
    elif recipe.trajectory == "random-walk":
        pose = _look_at(np.array([0.0, -recipe.orbit_radius, 0.3]), np.zeros(3))
        max_step = 0.05
        for i in range(n):
            poses.append(pose)
            xi = np.concatenate([rng.uniform(-0.02, 0.02, 3),
                                 rng.uniform(-max_step, max_step, 3)])
            pose = se3_exp(xi).compose(pose)
    else:
        raise InvalidInputError(f"unknown trajectory kind {recipe.trajectory!r}")
    return poses


def render_ground_truth(field_: GaussianField, labels: np.ndarray, phi: np.ndarray,
                        poses: list, intr: CameraIntrinsics, mode: str = "rgbd",
                        noise_std: float = 0.0, feat_downscale: int = 16,
                        seed: int = 0) -> list:
    """Render frames through the pipeline's own imaging model.

    Region annotations assign each covered pixel the region of the Gaussian
    with the largest blend weight; background stays -1 exactly where the
    accumulated alpha is zero. The continuous feature source renders the
    region features at 1/feat_downscale resolution.
    """
    rng = np.random.default_rng(seed + 99)
    frames = []
    hf = max(1, intr.height // feat_downscale)
    wf = max(1, intr.width // feat_downscale)
    small = CameraIntrinsics(fx=intr.fx * hf / intr.height,
                             fy=intr.fy * wf / intr.width,
                             cx=(hf - 1) / 2, cy=(wf - 1) / 2,
                             height=hf, width=wf, near=intr.near, far=intr.far)
    gauss_feats = phi[labels]
    for fid, pose in enumerate(poses):
        out = render(field_, pose, intr)
        color = out.color
        if noise_std > 0:
            color = np.clip(color + rng.normal(0.0, noise_std, color.shape), 0.0, 1.0)
        ids = render_argmax_ids(field_, pose, intr)
        S = np.where(ids >= 0, labels[np.clip(ids, 0, None)], -1)
        S = np.where(out.alpha > 0, S, -1)
        feat = render_channels_grid(field_, gauss_feats, pose, small,
                                    GridSpec(H=hf, W=wf, s=1)).data
        frames.append(CameraFrame(
            frame_id=fid, pose=pose, color=color,
            depth=out.depth.copy() if mode == "rgbd" else None,
            annotation=RegionAnnotation(S=S, Phi=phi),
            features=ContinuousFeatureSource(P=feat)))
    return frames


# ---------------------------------------------------------------------------
# metrics

PSNR_CAP_DB = 99.0


def psnr(rendered: np.ndarray, reference: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(rendered) - np.asarray(reference)) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def umeyama_alignment(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid (R, t), no scale, minimizing ||R src + t - dst||."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / src.shape[0]
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def ate_rmse(est_poses: list, gt_poses: list) -> float:
    """Translation RMSE of camera centers after rigid alignment."""
    if len(est_poses) != len(gt_poses):
        raise InvalidInputError("trajectory lengths differ")
    est = np.stack([p.camera_center() for p in est_poses])
    gt = np.stack([p.camera_center() for p in gt_poses])
    R, t = umeyama_alignment(est, gt)
    resid = est @ R.T + t - gt
    return float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))


def compute_metrics(est_poses: list, gt_poses: list,
                    renders: list, gt_frames: list) -> dict:
    """PSNR over color plus ATE RMSE; lengths must agree."""
    if len(renders) != len(gt_frames):
        raise InvalidInputError("render/frame counts differ")
    stacked_r = np.stack([np.asarray(r) for r in renders])
    stacked_g = np.stack([f.color for f in gt_frames])
    return {"psnr": psnr(stacked_r, stacked_g),
            "ate_rmse": ate_rmse(est_poses, gt_poses)}
