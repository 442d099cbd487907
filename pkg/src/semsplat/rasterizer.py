"""Front-to-back alpha compositing of color, depth, and semantic channels.

One vectorized core serves every render mode. Gaussians are depth-sorted
(camera z, ties by index), paired with the pixels of a sampling lattice,
culled at the 3-sigma ellipse, and composited per pixel with early
termination once transmittance drops below a threshold. The grid-sampled
path materializes pairs only for sampled pixels, so its work shrinks by
~s^2 relative to dense rendering; ``blend_steps`` counts the pixel/Gaussian
blend evaluations a sequential compositor would perform and is the hook the
work-reduction checks use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (Codebook, CameraIntrinsics, CameraPose, GaussianField,
                   covariance_from_parts_batch, decode_feature, mixture_weights,
                   project_covariance_batch, softmax_vjp, EIG_FLOOR_PX2)
from .errors import EmptySceneError, InvalidInputError
from .supervision import GridSpec

# log(1e-30): transmittance factors are clamped here so opaque splats do not
# poison the segmented cumulative sums with infinities.
_LOG_T_MIN = -69.07755278982137

# Above this pair count the core switches from all-pairs evaluation to
# per-Gaussian bounding boxes.
_DENSE_PAIR_LIMIT = 1 << 20


@dataclass(frozen=True)
class RasterConfig:
    term_threshold: float = 1e-4   # stop blending once transmittance < this
    cutoff_sigma: float = 3.0      # Gaussian/pixel culling radius (sigma units)
    eig_floor: float = EIG_FLOOR_PX2


DEFAULT_RASTER = RasterConfig()


@dataclass
class RenderOutput:
    color: np.ndarray   # (3, H, W) in [0, 1]
    depth: np.ndarray   # (H, W), 0 where no coverage
    alpha: np.ndarray   # (H, W) accumulated opacity
    blend_steps: int = 0


@dataclass
class CompactFeatureMap:
    data: np.ndarray    # (C, H_s, W_s)
    grid: GridSpec
    blend_steps: int = 0


@dataclass
class FeatureGradients:
    logit_grads: np.ndarray    # (N, K) d(loss)/d(logits)
    feature_grads: np.ndarray  # (N, D) codebook-independent blend cotangents


@dataclass
class BlendPairs:
    """Per (pixel, Gaussian) blend terms, pixel-segmented in depth order."""

    gauss: np.ndarray        # pair -> original Gaussian index
    pixel: np.ndarray        # pair -> flat lattice pixel index
    weight: np.ndarray       # blend weight alpha' * T (zero where terminated)
    alpha_prime: np.ndarray  # footprint opacity per pair
    t_before: np.ndarray     # transmittance in front of the pair
    alive: np.ndarray        # False once transmittance fell below threshold
    depth: np.ndarray        # camera z per pair
    n_pixels: int
    blend_steps: int


def _empty_pairs(n_pixels: int) -> BlendPairs:
    z = np.zeros(0)
    zi = z.astype(np.int64)
    return BlendPairs(gauss=zi, pixel=zi, weight=z, alpha_prime=z, t_before=z,
                      alive=z.astype(bool), depth=z, n_pixels=n_pixels,
                      blend_steps=0)


def build_blend_pairs(field: GaussianField, pose: CameraPose, intr: CameraIntrinsics,
                      rows: np.ndarray, cols: np.ndarray,
                      cfg: RasterConfig = DEFAULT_RASTER) -> BlendPairs:
    """Depth-sorted, culled, terminated blend terms on an arbitrary lattice."""
    n_pixels = rows.size * cols.size
    if len(field) == 0 or n_pixels == 0:
        return _empty_pairs(n_pixels)

    cam = pose.transform(field.mu)
    z = cam[:, 2]
    keep = (z > intr.near) & (z < intr.far)
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return _empty_pairs(n_pixels)

    order = idx[np.argsort(z[idx], kind="stable")]
    zs = z[order]
    centers_u = intr.fx * cam[order, 0] / zs + intr.cx
    centers_v = intr.fy * cam[order, 1] / zs + intr.cy

    sigma = covariance_from_parts_batch(field.quat[order], field.scale[order])
    cov2 = project_covariance_batch(sigma, pose, intr, field.mu[order],
                                    eig_floor=cfg.eig_floor, cam=cam[order])
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    inv_a, inv_b, inv_c = c / det, -b / det, a / det
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))
    radius = cfg.cutoff_sigma * np.sqrt(lam_max)
    cutoff2 = cfg.cutoff_sigma ** 2

    n = order.size
    if n * n_pixels <= _DENSE_PAIR_LIMIT:
        uu, vv = np.meshgrid(rows.astype(np.float64), cols.astype(np.float64),
                             indexing="ij")
        du = uu.ravel()[None, :] - centers_u[:, None]
        dv = vv.ravel()[None, :] - centers_v[:, None]
        quad = (inv_a[:, None] * du * du + 2 * inv_b[:, None] * du * dv
                + inv_c[:, None] * dv * dv)
        inside = quad <= cutoff2
        gi_s, pi = np.nonzero(inside)
        quad_kept = quad[gi_s, pi]
    else:
        gi_parts, pi_parts, quad_parts = [], [], []
        n_cols = cols.size
        s_r = rows[1] - rows[0] if rows.size > 1 else 1
        s_c = cols[1] - cols[0] if cols.size > 1 else 1
        for k in range(n):
            m_lo = max(0, int(np.ceil((centers_u[k] - radius[k] - rows[0]) / s_r)))
            m_hi = min(rows.size - 1, int(np.floor((centers_u[k] + radius[k] - rows[0]) / s_r)))
            n_lo = max(0, int(np.ceil((centers_v[k] - radius[k] - cols[0]) / s_c)))
            n_hi = min(n_cols - 1, int(np.floor((centers_v[k] + radius[k] - cols[0]) / s_c)))
            if m_hi < m_lo or n_hi < n_lo:
                continue
            mm = np.arange(m_lo, m_hi + 1)
            nn = np.arange(n_lo, n_hi + 1)
            du = (rows[mm].astype(np.float64) - centers_u[k])[:, None]
            dv = (cols[nn].astype(np.float64) - centers_v[k])[None, :]
            quad = inv_a[k] * du * du + 2 * inv_b[k] * du * dv + inv_c[k] * dv * dv
            inside = quad <= cutoff2
            mloc, nloc = np.nonzero(inside)
            if mloc.size == 0:
                continue
            gi_parts.append(np.full(mloc.size, k, dtype=np.int64))
            pi_parts.append((mm[mloc] * n_cols + nn[nloc]).astype(np.int64))
            quad_parts.append(quad[mloc, nloc])
        if not gi_parts:
            return _empty_pairs(n_pixels)
        gi_s = np.concatenate(gi_parts)
        pi = np.concatenate(pi_parts)
        quad_kept = np.concatenate(quad_parts)

    if gi_s.size == 0:
        return _empty_pairs(n_pixels)

    alpha_pair = field.opacity[order][gi_s] * np.exp(-0.5 * quad_kept)

    # Segment pairs by pixel, preserving depth order within each pixel.
    ordp = np.argsort(pi, kind="stable")
    pi = pi[ordp]
    gi_s = gi_s[ordp]
    alpha_pair = alpha_pair[ordp]

    with np.errstate(divide="ignore"):
        log_t = np.maximum(np.log1p(-alpha_pair), _LOG_T_MIN)
    cs = np.cumsum(log_t)
    newseg = np.empty(pi.size, dtype=bool)
    newseg[0] = True
    newseg[1:] = pi[1:] != pi[:-1]
    starts = np.nonzero(newseg)[0]
    seg_id = np.cumsum(newseg) - 1
    base = (cs[starts] - log_t[starts])[seg_id]
    log_T_before = cs - log_t - base
    T_before = np.exp(log_T_before)
    alive = T_before >= cfg.term_threshold
    weight = np.where(alive, alpha_pair * T_before, 0.0)

    return BlendPairs(gauss=order[gi_s], pixel=pi, weight=weight,
                      alpha_prime=alpha_pair, t_before=T_before, alive=alive,
                      depth=zs[gi_s], n_pixels=n_pixels,
                      blend_steps=int(alive.sum()))


def _accumulate_channels(pairs: BlendPairs, payload: np.ndarray) -> np.ndarray:
    """Sum weight * payload[gauss] per pixel; payload is (N, C) -> (C, P)."""
    C = payload.shape[1]
    out = np.empty((C, pairs.n_pixels))
    for ch in range(C):
        out[ch] = np.bincount(pairs.pixel, weights=pairs.weight * payload[pairs.gauss, ch],
                              minlength=pairs.n_pixels)
    return out


def footprints(field: GaussianField, pose: CameraPose, intr: CameraIntrinsics,
               cfg: RasterConfig = DEFAULT_RASTER
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Projected center (u, v), cutoff radius, and visibility per Gaussian."""
    cam = pose.transform(field.mu)
    z = cam[:, 2]
    visible = (z > intr.near) & (z < intr.far)
    u = np.where(visible, intr.fx * cam[:, 0] / np.where(visible, z, 1.0) + intr.cx, 0.0)
    v = np.where(visible, intr.fy * cam[:, 1] / np.where(visible, z, 1.0) + intr.cy, 0.0)
    radius = np.zeros(len(field))
    if visible.any():
        idx = np.nonzero(visible)[0]
        sigma = covariance_from_parts_batch(field.quat[idx], field.scale[idx])
        cov2 = project_covariance_batch(sigma, pose, intr, field.mu[idx],
                                        eig_floor=cfg.eig_floor, cam=cam[idx])
        a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
        lam_max = 0.5 * (a + c) + np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))
        radius[idx] = cfg.cutoff_sigma * np.sqrt(lam_max)
    return u, v, radius, visible


def render(field: GaussianField, pose: CameraPose, intr: CameraIntrinsics,
           cfg: RasterConfig = DEFAULT_RASTER) -> RenderOutput:
    """Color/depth/alpha at full resolution."""
    if len(field) == 0:
        raise EmptySceneError("cannot render an empty field")
    rows = np.arange(intr.height)
    cols = np.arange(intr.width)
    pairs = build_blend_pairs(field, pose, intr, rows, cols, cfg)
    color = _accumulate_channels(pairs, field.color).reshape(3, intr.height, intr.width)
    alpha = np.bincount(pairs.pixel, weights=pairs.weight,
                        minlength=pairs.n_pixels).reshape(intr.height, intr.width)
    depth = np.bincount(pairs.pixel, weights=pairs.weight * pairs.depth,
                        minlength=pairs.n_pixels).reshape(intr.height, intr.width)
    return RenderOutput(color=color, depth=depth, alpha=alpha,
                        blend_steps=pairs.blend_steps)


def render_rect(field: GaussianField, pose: CameraPose, intr: CameraIntrinsics,
                rows: np.ndarray, cols: np.ndarray,
                cfg: RasterConfig = DEFAULT_RASTER) -> RenderOutput:
    """Color/depth/alpha restricted to a pixel-row/column window.

    Equals the corresponding slice of a full render (same arithmetic per
    pixel); used to evaluate localized loss changes cheaply.
    """
    if len(field) == 0:
        raise EmptySceneError("cannot render an empty field")
    pairs = build_blend_pairs(field, pose, intr, rows, cols, cfg)
    shape = (rows.size, cols.size)
    color = _accumulate_channels(pairs, field.color).reshape((3,) + shape)
    alpha = np.bincount(pairs.pixel, weights=pairs.weight,
                        minlength=pairs.n_pixels).reshape(shape)
    depth = np.bincount(pairs.pixel, weights=pairs.weight * pairs.depth,
                        minlength=pairs.n_pixels).reshape(shape)
    return RenderOutput(color=color, depth=depth, alpha=alpha,
                        blend_steps=pairs.blend_steps)


def render_channels_grid(field: GaussianField, payload: np.ndarray,
                         pose: CameraPose, intr: CameraIntrinsics, grid: GridSpec,
                         cfg: RasterConfig = DEFAULT_RASTER) -> CompactFeatureMap:
    """Composite an arbitrary per-Gaussian payload (N, C) on the sampling lattice."""
    if len(field) == 0:
        raise EmptySceneError("cannot render an empty field")
    if payload.shape[0] != len(field):
        raise InvalidInputError("payload rows must match Gaussian count")
    H_s, W_s = grid.H_s, grid.W_s
    if H_s == 0 or W_s == 0:
        return CompactFeatureMap(data=np.zeros((payload.shape[1], H_s, W_s)),
                                 grid=grid, blend_steps=0)
    pairs = build_blend_pairs(field, pose, intr, grid.rows(), grid.cols(), cfg)
    data = _accumulate_channels(pairs, payload).reshape(payload.shape[1], H_s, W_s)
    return CompactFeatureMap(data=data, grid=grid, blend_steps=pairs.blend_steps)


def render_features_dense(field: GaussianField, codebook: Codebook,
                          pose: CameraPose, intr: CameraIntrinsics,
                          cfg: RasterConfig = DEFAULT_RASTER) -> np.ndarray:
    """Dense (D, H, W) semantic feature map."""
    grid = GridSpec(H=intr.height, W=intr.width, s=1)
    feats = decode_feature(field.logits, codebook)
    return render_channels_grid(field, feats, pose, intr, grid, cfg).data


def render_features_grid(field: GaussianField, codebook: Codebook,
                         pose: CameraPose, intr: CameraIntrinsics, grid: GridSpec,
                         cfg: RasterConfig = DEFAULT_RASTER) -> CompactFeatureMap:
    """Compact (D, H_s, W_s) semantic features, evaluated only at sampled pixels."""
    feats = decode_feature(field.logits, codebook)
    return render_channels_grid(field, feats, pose, intr, grid, cfg)


def render_argmax_ids(field: GaussianField, pose: CameraPose, intr: CameraIntrinsics,
                      cfg: RasterConfig = DEFAULT_RASTER) -> np.ndarray:
    """Per-pixel index of the Gaussian with the largest blend weight; -1 = none."""
    if len(field) == 0:
        raise EmptySceneError("cannot render an empty field")
    rows = np.arange(intr.height)
    cols = np.arange(intr.width)
    pairs = build_blend_pairs(field, pose, intr, rows, cols, cfg)
    out = np.full(pairs.n_pixels, -1, dtype=np.int64)
    if pairs.pixel.size:
        ordw = np.lexsort((pairs.weight, pairs.pixel))
        pix_sorted = pairs.pixel[ordw]
        ends = np.nonzero(np.r_[pix_sorted[1:] != pix_sorted[:-1], True])[0]
        best = ordw[ends]
        covered = pairs.weight[best] > 0
        out[pix_sorted[ends][covered]] = pairs.gauss[best][covered]
    return out.reshape(intr.height, intr.width)


def feature_gradients(field: GaussianField, codebook: Codebook, pose: CameraPose,
                      intr: CameraIntrinsics, grid: GridSpec, upstream: np.ndarray,
                      cfg: RasterConfig = DEFAULT_RASTER) -> FeatureGradients:
    """Backprop an upstream cotangent on the compact map into per-Gaussian logits.

    Only the semantic channel is differentiated: blend weights are treated as
    constants (geometry is frozen during semantic optimization). Gaussians
    that contribute no blend weight receive exactly zero gradient.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (codebook.D, grid.H_s, grid.W_s):
        raise InvalidInputError(
            f"upstream shape {upstream.shape} does not match (D, H_s, W_s)="
            f"{(codebook.D, grid.H_s, grid.W_s)}")
    n = len(field)
    feature_grads = np.zeros((n, codebook.D))
    if grid.H_s and grid.W_s and n:
        pairs = build_blend_pairs(field, pose, intr, grid.rows(), grid.cols(), cfg)
        if pairs.pixel.size:
            contrib = pairs.weight[:, None] * upstream.reshape(codebook.D, -1).T[pairs.pixel]
            np.add.at(feature_grads, pairs.gauss, contrib)
    logit_grads = softmax_vjp(field.logits, feature_grads @ codebook.E.T)
    return FeatureGradients(logit_grads=logit_grads, feature_grads=feature_grads)
