"""Online tracking and mapping over synthetic scenes.

Tracking refines a 6-twist around the constant-velocity prediction by central
finite differences with the map frozen. Mapping alternates two phases per
keyframe event: a radiance phase that optimizes geometry/appearance (color
and opacity gradients are analytic through the blend, geometry uses patch-
local central finite differences), and a semantic phase that touches only the
per-Gaussian logits through the grid-sampled loss. The two parameter groups
are strictly frozen in each other's phase; checksums make that auditable.

Photometric and depth residuals use a smooth-L1 with a small quadratic zone:
fixed-step descent on a pure L1 stalls at an oscillation floor of
lr * |grad|, which would defeat the stated convergence behavior; above the
zone the loss is exactly L1.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import (CameraIntrinsics, CameraPose, Codebook, GaussianField,
                   quat_normalize, relative_pose, rotation_angle, se3_exp,
                   se3_log)
from .errors import InvalidInputError
from .rasterizer import (DEFAULT_RASTER, RasterConfig, RenderOutput,
                         build_blend_pairs, feature_gradients, footprints,
                         render, render_features_grid, render_rect)
from .supervision import GridSpec, SupervisionTarget, masked_semantic_loss, next_offset
from .world import CameraFrame


@dataclass
class SlamConfig:
    # loss terms
    lambda_d: float = 1.0
    lambda_iso: float = 10.0
    smooth_l1_beta: float = 0.02
    # tracking
    lr_pose: float = 3e-3
    pose_optimizer: str = "adam"   # "adam" | "gd"
    track_iters: int = 60
    fd_step_pose: float = 1e-4
    patience: int = 10
    # mapping (radiance phase); per-parameter rates are lr_map * multiplier,
    # compensating the very different gradient scales of the groups
    lr_map: float = 5e-3
    lr_mult_mu: float = 1.0
    lr_mult_quat: float = 0.1
    lr_mult_scale: float = 0.02
    lr_mult_opacity: float = 1.0
    lr_mult_color: float = 1.0
    radiance_iters: int = 150
    fd_step_map: float = 1e-4
    geom_block: int = 0          # gaussians per iteration given FD geometry; 0 = all
    min_scale: float = 1e-3
    # keyframe management
    n_win: int = 8
    theta_t: float = 0.05
    theta_r_deg: float = 5.0
    # densify / prune
    prune_opacity: float = 0.01
    coverage_alpha: float = 0.5
    insert_stride: int = 4
    insert_opacity: float = 0.8
    default_depth: float = 2.0
    # semantic phase
    semantic_iters: int = 50
    lr_sem: float = 20.0
    lambda_sem: float = 1.0
    stride: int = 2
    offset_seed: int = 0
    raster: RasterConfig = DEFAULT_RASTER


@dataclass
class PhaseSchedule:
    radiance_iters: int = 150
    semantic_iters: int = 50
    phase: str = "radiance"      # "radiance" | "semantic"


@dataclass
class Keyframe:
    frame: CameraFrame
    pose: CameraPose


class KeyframeWindow:
    """Sliding window with capacity N_win and an insertion/eviction log."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise InvalidInputError("window capacity must be >= 1")
        self.capacity = capacity
        self.frames: list[Keyframe] = []
        self.log: list[tuple[int, str]] = []

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def newest(self) -> Keyframe:
        return self.frames[-1]

    def insert(self, frame: CameraFrame, pose: CameraPose) -> Optional[int]:
        """Insert a keyframe; returns the evicted frame id, if any."""
        self.frames.append(Keyframe(frame=frame, pose=pose))
        self.log.append((frame.frame_id, "insert"))
        if len(self.frames) > self.capacity:
            evicted = self.frames.pop(0)
            self.log.append((evicted.frame.frame_id, "evict"))
            return evicted.frame.frame_id
        return None


@dataclass
class TrackState:
    current: Optional[CameraPose] = None
    previous: Optional[CameraPose] = None

    def push(self, pose: CameraPose) -> None:
        self.previous = self.current
        self.current = pose

    def velocity_twist(self) -> np.ndarray:
        if self.current is None or self.previous is None:
            return np.zeros(6)
        return se3_log(relative_pose(self.previous, self.current))


@dataclass
class PosePrediction:
    pose: CameraPose
    cold_start: bool


def predict_pose(track: TrackState) -> PosePrediction:
    """Constant-velocity prediction: replay the last inter-frame twist."""
    if track.current is None:
        return PosePrediction(pose=CameraPose.identity(), cold_start=True)
    if track.previous is None:
        return PosePrediction(pose=track.current, cold_start=False)
    delta = relative_pose(track.previous, track.current)
    return PosePrediction(pose=delta.compose(track.current), cold_start=False)


# ---------------------------------------------------------------------------
# losses


def _smooth_l1(x: np.ndarray, beta: float) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def _smooth_l1_grad(x: np.ndarray, beta: float) -> np.ndarray:
    return np.clip(x / beta, -1.0, 1.0)


def _frame_loss_pieces(out: RenderOutput, frame: CameraFrame, cfg: SlamConfig
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel loss maps: (photo err, coverage, depth err, depth-valid)."""
    cov = out.alpha > 0
    e_c = np.sum(_smooth_l1(out.color - frame.color, cfg.smooth_l1_beta), axis=0) * cov
    if frame.depth is not None:
        dval = cov & (frame.depth > 0)
        e_d = _smooth_l1(out.depth - frame.depth, cfg.smooth_l1_beta) * dval
    else:
        dval = np.zeros_like(cov)
        e_d = np.zeros_like(out.depth)
    return e_c, cov, e_d, dval


def photometric_loss(out: RenderOutput, frame: CameraFrame,
                     cfg: SlamConfig) -> Optional[float]:
    """Mean photo residual over covered pixels plus the weighted depth term.

    Returns None when nothing is covered (no gradient signal).
    """
    e_c, cov, e_d, dval = _frame_loss_pieces(out, frame, cfg)
    n_cov = int(cov.sum())
    if n_cov == 0:
        return None
    loss = float(e_c.sum()) / (3 * n_cov)
    n_d = int(dval.sum())
    if n_d:
        loss += cfg.lambda_d * float(e_d.sum()) / n_d
    return loss


def iso_loss_single(scale_row: np.ndarray) -> float:
    return float(np.sum(np.abs(scale_row - scale_row.mean())))


def iso_loss(field_: GaussianField) -> float:
    m = field_.scale.mean(axis=1, keepdims=True)
    return float(np.sum(np.abs(field_.scale - m)))


# ---------------------------------------------------------------------------
# tracking


@dataclass
class TrackResult:
    pose: CameraPose
    loss: float
    failed: bool
    iters: int


def track_frame(field_: GaussianField, frame: CameraFrame, init: CameraPose,
                cfg: SlamConfig) -> TrackResult:
    """Refine the pose by descent on central-FD twist gradients.

    The map is frozen. The twist is applied in the camera frame (left
    composition), which keeps rotation and translation comparably scaled;
    Adam handles the remaining valley conditioning (plain fixed-step descent
    is available via ``pose_optimizer="gd"`` but stalls at an oscillation
    floor). Divergence (a patience-long run of non-improving steps) stops
    early; the best pose seen is always returned, so the result never scores
    worse than the initialization.
    """
    intr = frame_intrinsics(frame, cfg)

    def loss_at(pose: CameraPose) -> Optional[float]:
        return photometric_loss(render(field_, pose, intr, cfg.raster), frame, cfg)

    current = init
    best_pose, best_loss = init, loss_at(init)
    if best_loss is None:
        return TrackResult(pose=init, loss=float("inf"), failed=True, iters=0)

    h = cfg.fd_step_pose
    adam_m = np.zeros(6)
    adam_v = np.zeros(6)
    bad_streak = 0
    prev_loss = best_loss
    it = 0
    for it in range(1, cfg.track_iters + 1):
        g = np.zeros(6)
        for j in range(6):
            e = np.zeros(6)
            e[j] = h
            lp = loss_at(se3_exp(e).compose(current))
            lm = loss_at(se3_exp(-e).compose(current))
            if lp is None or lm is None:
                return TrackResult(pose=best_pose, loss=best_loss, failed=True,
                                   iters=it)
            g[j] = (lp - lm) / (2 * h)
        if cfg.pose_optimizer == "adam":
            adam_m = 0.9 * adam_m + 0.1 * g
            adam_v = 0.999 * adam_v + 0.001 * g * g
            m_hat = adam_m / (1 - 0.9**it)
            v_hat = adam_v / (1 - 0.999**it)
            step = cfg.lr_pose * m_hat / (np.sqrt(v_hat) + 1e-8)
        else:
            step = cfg.lr_pose * g
        current = se3_exp(-step).compose(current)
        cur_loss = loss_at(current)
        if cur_loss is None:
            return TrackResult(pose=best_pose, loss=best_loss, failed=True, iters=it)
        if cur_loss < best_loss:
            best_loss, best_pose = cur_loss, current
        bad_streak = bad_streak + 1 if cur_loss >= prev_loss else 0
        prev_loss = cur_loss
        if bad_streak >= cfg.patience:
            return TrackResult(pose=best_pose, loss=best_loss, failed=True, iters=it)
    return TrackResult(pose=best_pose, loss=best_loss, failed=False, iters=it)


_INTRINSICS_CACHE: dict[tuple, CameraIntrinsics] = {}


def frame_intrinsics(frame: CameraFrame, cfg: SlamConfig,
                     fov_deg: float = 60.0) -> CameraIntrinsics:
    """Intrinsics derived from the frame resolution (shared FOV convention)."""
    H, W = frame.color.shape[1:]
    key = (H, W, fov_deg)
    if key not in _INTRINSICS_CACHE:
        _INTRINSICS_CACHE[key] = CameraIntrinsics.from_fov(H, W, fov_deg)
    return _INTRINSICS_CACHE[key]


# ---------------------------------------------------------------------------
# mapping (radiance phase)


def _analytic_color_opacity_grads(field_: GaussianField, kf: Keyframe,
                                  intr: CameraIntrinsics, cfg: SlamConfig
                                  ) -> tuple[np.ndarray, np.ndarray, RenderOutput]:
    """d(loss)/d(color), d(loss)/d(opacity) through the alpha blend."""
    out = render(field_, kf.pose, intr, cfg.raster)
    n = len(field_)
    g_color = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    e_c, cov, e_d, dval = _frame_loss_pieces(out, kf.frame, cfg)
    n_cov = int(cov.sum())
    if n_cov == 0:
        return g_color, g_opacity, out
    # per-pixel upstream gradients
    dL_dC = (_smooth_l1_grad(out.color - kf.frame.color, cfg.smooth_l1_beta)
             * cov) / (3 * n_cov)
    n_d = int(dval.sum())
    if n_d and kf.frame.depth is not None:
        dL_dD = (cfg.lambda_d * _smooth_l1_grad(out.depth - kf.frame.depth,
                                                cfg.smooth_l1_beta) * dval) / n_d
    else:
        dL_dD = np.zeros_like(out.depth)

    pairs = build_blend_pairs(field_, kf.pose, intr,
                              np.arange(intr.height), np.arange(intr.width),
                              cfg.raster)
    if pairs.pixel.size == 0:
        return g_color, g_opacity, out
    dC_flat = dL_dC.reshape(3, -1)
    dD_flat = dL_dD.reshape(-1)
    # color gradient: dL/dc_i = sum_px w_i(px) dL/dC(px)
    for ch in range(3):
        np.add.at(g_color[:, ch], pairs.gauss, pairs.weight * dC_flat[ch, pairs.pixel])
    # opacity gradient through the compositing recurrence
    u = (field_.color[pairs.gauss] * dC_flat[:, pairs.pixel].T).sum(axis=1)
    u = u + pairs.depth * dD_flat[pairs.pixel]
    q = pairs.weight * u
    # suffix sums of q within each pixel segment, exclusive of self
    cs = np.cumsum(q)
    newseg = np.empty(q.size, dtype=bool)
    newseg[0] = True
    newseg[1:] = pairs.pixel[1:] != pairs.pixel[:-1]
    starts = np.nonzero(newseg)[0]
    seg_id = np.cumsum(newseg) - 1
    seg_total = np.add.reduceat(q, starts)
    base = (cs[starts] - q[starts])[seg_id]
    suffix = seg_total[seg_id] - (cs - base)
    dL_dap = np.where(pairs.alive,
                      pairs.t_before * u
                      - suffix / np.maximum(1.0 - pairs.alpha_prime, 1e-12),
                      0.0)
    opac = field_.opacity[pairs.gauss]
    gmag = np.where(opac > 0, pairs.alpha_prime / np.maximum(opac, 1e-300), 0.0)
    np.add.at(g_opacity, pairs.gauss, gmag * dL_dap)
    return g_color, g_opacity, out


def _iso_grad(field_: GaussianField) -> np.ndarray:
    m = field_.scale.mean(axis=1, keepdims=True)
    s = np.sign(field_.scale - m)
    return s - s.mean(axis=1, keepdims=True)


@dataclass
class _FrameBase:
    """Cached per-pixel loss pieces of the unperturbed render."""
    e_c: np.ndarray
    cov: np.ndarray
    e_d: np.ndarray
    dval: np.ndarray
    s_c: float
    n_cov: int
    s_d: float
    n_d: int


def _make_base(out: RenderOutput, kf: Keyframe, cfg: SlamConfig) -> _FrameBase:
    e_c, cov, e_d, dval = _frame_loss_pieces(out, kf.frame, cfg)
    return _FrameBase(e_c=e_c, cov=cov, e_d=e_d, dval=dval,
                      s_c=float(e_c.sum()), n_cov=int(cov.sum()),
                      s_d=float(e_d.sum()), n_d=int(dval.sum()))


def _patch_loss(field_: GaussianField, kf: Keyframe, intr: CameraIntrinsics,
                base: _FrameBase, rows: np.ndarray, cols: np.ndarray,
                cfg: SlamConfig) -> float:
    """Total frame loss with the window [rows x cols] re-rendered."""
    out = render_rect(field_, kf.pose, intr, rows, cols, cfg.raster)
    sl = np.ix_(rows, cols)
    sub = CameraFrame(frame_id=kf.frame.frame_id, pose=kf.frame.pose,
                      color=kf.frame.color[:, rows][:, :, cols],
                      depth=None if kf.frame.depth is None
                      else kf.frame.depth[sl])
    e_c, cov, e_d, dval = _frame_loss_pieces(out, sub, cfg)
    s_c = base.s_c - float(base.e_c[sl].sum()) + float(e_c.sum())
    n_cov = base.n_cov - int(base.cov[sl].sum()) + int(cov.sum())
    s_d = base.s_d - float(base.e_d[sl].sum()) + float(e_d.sum())
    n_d = base.n_d - int(base.dval[sl].sum()) + int(dval.sum())
    if n_cov == 0:
        return 0.0
    loss = s_c / (3 * n_cov)
    if n_d:
        loss += cfg.lambda_d * s_d / n_d
    return loss


def _geometry_fd_grads(field_: GaussianField, kfs: list[Keyframe],
                       intr: CameraIntrinsics, bases: list[_FrameBase],
                       indices: np.ndarray, cfg: SlamConfig
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Central FD gradients of the window loss for mu/quat/scale of ``indices``.

    Each probe re-renders only the perturbed Gaussian's footprint window;
    pixels outside it are unchanged, so their loss pieces come from the
    cached base maps. Quaternion probes are renormalized (tangential FD).
    """
    h = cfg.fd_step_map
    n = len(field_)
    g_mu = np.zeros((n, 3))
    g_quat = np.zeros((n, 4))
    g_scale = np.zeros((n, 3))

    per_frame_boxes = []
    for kf in kfs:
        u, v, radius, vis = footprints(field_, kf.pose, intr, cfg.raster)
        per_frame_boxes.append((u, v, radius, vis))

    def perturbed(name: str, gi: int, comp: int, sign: float) -> GaussianField:
        arr = getattr(field_, name).copy()
        arr[gi, comp] += sign * h
        if name == "quat":
            arr[gi] = arr[gi] / np.linalg.norm(arr[gi])
        if name == "scale":
            arr[gi, comp] = max(arr[gi, comp], cfg.min_scale / 2)
        return field_.with_params(**{name: arr})

    pad = 2.0
    for gi in indices:
        for name, g_out, ncomp in (("mu", g_mu, 3), ("quat", g_quat, 4),
                                   ("scale", g_scale, 3)):
            for comp in range(ncomp):
                grad = 0.0
                for fi, kf in enumerate(kfs):
                    u, v, radius, vis = per_frame_boxes[fi]
                    if not vis[gi]:
                        continue
                    r0 = max(0, int(np.floor(u[gi] - radius[gi] - pad)))
                    r1 = min(intr.height - 1, int(np.ceil(u[gi] + radius[gi] + pad)))
                    c0 = max(0, int(np.floor(v[gi] - radius[gi] - pad)))
                    c1 = min(intr.width - 1, int(np.ceil(v[gi] + radius[gi] + pad)))
                    if r1 < r0 or c1 < c0:
                        continue
                    rows = np.arange(r0, r1 + 1)
                    cols = np.arange(c0, c1 + 1)
                    lp = _patch_loss(perturbed(name, gi, comp, +1.0), kf, intr,
                                     bases[fi], rows, cols, cfg)
                    lm = _patch_loss(perturbed(name, gi, comp, -1.0), kf, intr,
                                     bases[fi], rows, cols, cfg)
                    grad += (lp - lm) / (2 * h)
                if name == "scale":
                    sp = field_.scale[gi].copy(); sp[comp] += h
                    sm = field_.scale[gi].copy(); sm[comp] -= h
                    grad += cfg.lambda_iso * (iso_loss_single(sp)
                                              - iso_loss_single(sm)) / (2 * h)
                g_out[gi, comp] = grad
    return g_mu, g_quat, g_scale


@dataclass
class MapResult:
    field: GaussianField
    trace: list


def map_window(field_: GaussianField, window: KeyframeWindow, cfg: SlamConfig,
               iters: Optional[int] = None) -> MapResult:
    """Radiance phase: descend on {mu, quat, scale, opacity, color}.

    Poses, logits, and the codebook are untouched. ``geom_block`` > 0 cycles
    geometry FD over a block of Gaussians per iteration (color/opacity
    gradients are analytic and always full-batch).
    """
    if len(window) == 0:
        raise InvalidInputError("mapping needs a nonempty keyframe window")
    iters = cfg.radiance_iters if iters is None else iters
    kfs = window.frames
    intr = frame_intrinsics(kfs[0].frame, cfg)
    trace = []
    n = len(field_)
    for it in range(iters):
        g_color = np.zeros((n, 3))
        g_opacity = np.zeros(n)
        outs = []
        loss = cfg.lambda_iso * iso_loss(field_)
        for kf in kfs:
            gc, go, out = _analytic_color_opacity_grads(field_, kf, intr, cfg)
            g_color += gc
            g_opacity += go
            outs.append(out)
            fl = photometric_loss(out, kf.frame, cfg)
            loss += fl if fl is not None else 0.0
        trace.append(loss)

        if cfg.geom_block == 0:
            indices = np.arange(n)
        else:
            start = (it * cfg.geom_block) % n
            indices = (start + np.arange(min(cfg.geom_block, n))) % n
        bases = [_make_base(out, kf, cfg) for out, kf in zip(outs, kfs)]
        g_mu, g_quat, g_scale = _geometry_fd_grads(field_, kfs, intr, bases,
                                                   indices, cfg)
        lr = cfg.lr_map
        field_ = field_.with_params(
            mu=field_.mu - lr * cfg.lr_mult_mu * g_mu,
            quat=quat_normalize(field_.quat - lr * cfg.lr_mult_quat * g_quat),
            scale=np.maximum(field_.scale - lr * cfg.lr_mult_scale * g_scale,
                             cfg.min_scale),
            opacity=np.clip(field_.opacity - lr * cfg.lr_mult_opacity * g_opacity,
                            0.0, 1.0),
            color=np.clip(field_.color - lr * cfg.lr_mult_color * g_color,
                          0.0, 1.0),
        )
    return MapResult(field=field_, trace=trace)


# ---------------------------------------------------------------------------
# semantic phase

TargetProvider = Callable[[CameraFrame, tuple[int, int]], tuple[SupervisionTarget, bool]]


@dataclass
class SemanticResult:
    field: GaussianField
    trace: list
    stalls: int
    steps_consumed: int


def semantic_phase(field_: GaussianField, codebook: Codebook,
                   window: KeyframeWindow, targets: TargetProvider,
                   cfg: SlamConfig, start_step: int = 0,
                   iters: Optional[int] = None) -> SemanticResult:
    """Semantic phase: descend on logits only, geometry and codebook frozen.

    ``targets`` maps (frame, offset) to a prefetched SupervisionTarget; the
    boolean it returns marks a stall (target not ready, built on demand).
    """
    if len(window) == 0:
        raise InvalidInputError("semantic phase needs a nonempty keyframe window")
    iters = cfg.semantic_iters if iters is None else iters
    intr = frame_intrinsics(window.frames[0].frame, cfg)
    logits = field_.logits.copy()
    trace = []
    stalls = 0
    for it in range(iters):
        step = start_step + it
        offset = next_offset(step, cfg.stride, cfg.offset_seed)
        grid = GridSpec(H=intr.height, W=intr.width, s=cfg.stride,
                        o_h=offset[0], o_w=offset[1])
        work = field_.with_logits(logits)
        total = 0.0
        grads = np.zeros_like(logits)
        for kf in window.frames:
            target, stalled = targets(kf.frame, offset)
            stalls += int(stalled)
            pred = render_features_grid(work, codebook, kf.pose, intr, grid,
                                        cfg.raster)
            loss, cot = masked_semantic_loss(pred.data, target, cfg.lambda_sem)
            total += loss
            if np.any(cot):
                grads += feature_gradients(work, codebook, kf.pose, intr, grid,
                                           cot, cfg.raster).logit_grads
        trace.append(total)
        logits = logits - cfg.lr_sem * grads
    return SemanticResult(field=field_.with_logits(logits), trace=trace,
                          stalls=stalls, steps_consumed=iters)


# ---------------------------------------------------------------------------
# keyframes, densify/prune


@dataclass
class KeyframeDecision:
    inserted: bool
    evicted: Optional[int]


def manage_keyframes(window: KeyframeWindow, frame: CameraFrame,
                     pose: CameraPose, cfg: SlamConfig) -> KeyframeDecision:
    """Insert on sufficient motion vs the newest keyframe; evict at capacity."""
    if len(window) == 0:
        return KeyframeDecision(inserted=True, evicted=window.insert(frame, pose))
    last = window.newest.pose
    dt = float(np.linalg.norm(pose.camera_center() - last.camera_center()))
    dr = np.rad2deg(rotation_angle(pose.rotation @ last.rotation.T))
    if dt > cfg.theta_t or dr > cfg.theta_r_deg:
        return KeyframeDecision(inserted=True, evicted=window.insert(frame, pose))
    return KeyframeDecision(inserted=False, evicted=None)


def backproject(pose: CameraPose, intr: CameraIntrinsics, u: float, v: float,
                depth: float) -> np.ndarray:
    cam = np.array([(u - intr.cx) * depth / intr.fx,
                    (v - intr.cy) * depth / intr.fy, depth])
    return pose.rotation.T @ (cam - pose.translation)


def densify_and_prune(field_: GaussianField, window: KeyframeWindow,
                      cfg: SlamConfig, K: Optional[int] = None) -> GaussianField:
    """Insert splats at under-covered pixels of the newest keyframe; prune
    near-transparent ones. Bumps the generation on any structural change."""
    if len(window) == 0:
        return field_
    kf = window.newest
    intr = frame_intrinsics(kf.frame, cfg)
    K = field_.K if K is None else K

    if len(field_):
        out = render(field_, kf.pose, intr, cfg.raster)
        alpha = out.alpha
        cam_depth = pose_depths(field_, kf.pose)
        median_depth = float(np.median(cam_depth)) if cam_depth.size else cfg.default_depth
    else:
        alpha = np.zeros((intr.height, intr.width))
        median_depth = cfg.default_depth

    new = []
    s = cfg.insert_stride
    for u in range(0, intr.height, s):
        for v in range(0, intr.width, s):
            if alpha[u, v] >= cfg.coverage_alpha:
                continue
            if kf.frame.depth is not None and kf.frame.depth[u, v] > 0:
                depth = float(kf.frame.depth[u, v])
            else:
                depth = median_depth
            mu = backproject(kf.pose, intr, u, v, depth)
            size = max(cfg.min_scale, 0.5 * s * depth / intr.fx)
            new.append((mu, size, kf.frame.color[:, u, v]))

    keep = field_.opacity >= cfg.prune_opacity if len(field_) else np.zeros(0, bool)
    changed = (len(new) > 0) or (len(field_) and not keep.all())
    if not changed:
        return field_

    def stack(old, extra):
        return np.concatenate([old[keep], extra]) if len(field_) else np.asarray(extra)

    n_new = len(new)
    return GaussianField(
        mu=stack(field_.mu, np.array([m for m, _, _ in new]).reshape(n_new, 3)),
        quat=stack(field_.quat, np.tile([1.0, 0, 0, 0], (n_new, 1))),
        scale=stack(field_.scale, np.array([[sz, sz, sz] for _, sz, _ in new]).reshape(n_new, 3)),
        opacity=stack(field_.opacity, np.full(n_new, cfg.insert_opacity)),
        color=stack(field_.color, np.array([c for _, _, c in new]).reshape(n_new, 3)),
        logits=stack(field_.logits, np.zeros((n_new, K))),
        generation=field_.generation + 1,
    )


def pose_depths(field_: GaussianField, pose: CameraPose) -> np.ndarray:
    return pose.transform(field_.mu)[:, 2]


# ---------------------------------------------------------------------------
# freezing-contract checksums


def geometry_checksum(field_: GaussianField) -> str:
    h = hashlib.sha256()
    for arr in (field_.mu, field_.quat, field_.scale, field_.opacity, field_.color):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def semantic_checksum(field_: GaussianField, codebook: Codebook) -> str:
    h = hashlib.sha256()
    for arr in (field_.logits, codebook.E, codebook.N, codebook.M):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()
