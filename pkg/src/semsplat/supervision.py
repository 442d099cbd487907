"""Grid-sampled semantic supervision: lattice math, targets, masks, loss.

Supervision is applied on a stride-s lattice with per-step offset (o_h, o_w):
sampled pixels are (u, v) = (o_h + m*s, o_w + n*s). Targets come either from
region-indexed annotations (with a validity mask) or from a low-resolution
continuous feature map (mask all ones).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CorruptAnnotationError, InvalidInputError

NORM_EPS = 1e-8


def grid_resolution(H: int, s: int, o: int) -> int:
    """Number of sampled positions along one axis of length H.

    Uses floored division so an offset past the last pixel yields 0.
    """
    if s < 1:
        raise InvalidInputError("stride must be >= 1")
    if not (0 <= o < s):
        raise InvalidInputError("offset must satisfy 0 <= o < stride")
    return max(0, 1 + (H - 1 - o) // s)


@dataclass(frozen=True)
class GridSpec:
    """Sampling lattice over an H x W image; compact shape is derived, never stored."""

    H: int
    W: int
    s: int = 1
    o_h: int = 0
    o_w: int = 0

    def __post_init__(self):
        if self.s < 1:
            raise InvalidInputError("stride must be >= 1")
        if not (0 <= self.o_h < self.s and 0 <= self.o_w < self.s):
            raise InvalidInputError("offsets must satisfy 0 <= o < stride")

    @property
    def H_s(self) -> int:
        return grid_resolution(self.H, self.s, self.o_h)

    @property
    def W_s(self) -> int:
        return grid_resolution(self.W, self.s, self.o_w)

    def rows(self) -> np.ndarray:
        return self.o_h + self.s * np.arange(self.H_s)

    def cols(self) -> np.ndarray:
        return self.o_w + self.s * np.arange(self.W_s)


def sample_coordinates(grid: GridSpec) -> np.ndarray:
    """All sampled (u, v) pairs in row-major order, shape (H_s * W_s, 2)."""
    uu, vv = np.meshgrid(grid.rows(), grid.cols(), indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


@dataclass
class SupervisionTarget:
    G_star: np.ndarray  # (D, H_s, W_s)
    V: np.ndarray       # (1, H_s, W_s) binary

    def __post_init__(self):
        self.G_star = np.asarray(self.G_star, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.V.shape != (1,) + self.G_star.shape[1:]:
            raise InvalidInputError("mask shape must be (1, H_s, W_s)")
        if not np.all((self.V == 0) | (self.V == 1)):
            raise InvalidInputError("validity mask must be binary")


@dataclass
class RegionAnnotation:
    """Integer region map S (-1 = background) plus an R x D feature table."""

    S: np.ndarray    # (H, W) int
    Phi: np.ndarray  # (R, D)

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.int64)
        self.Phi = np.atleast_2d(np.asarray(self.Phi, dtype=np.float64))

    @property
    def R(self) -> int:
        return self.Phi.shape[0]


@dataclass
class ContinuousFeatureSource:
    P: np.ndarray  # (D, H_f, W_f)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.P.ndim != 3 or self.P.shape[1] < 1 or self.P.shape[2] < 1:
            raise InvalidInputError("feature source must be (D, H_f, W_f) with H_f, W_f >= 1")

    @property
    def H_f(self) -> int:
        return self.P.shape[1]

    @property
    def W_f(self) -> int:
        return self.P.shape[2]


def build_target_discrete(ann: RegionAnnotation, grid: GridSpec) -> SupervisionTarget:
    """Table lookup at sampled pixels; background (-1) cells are masked out."""
    if ann.S.shape != (grid.H, grid.W):
        raise InvalidInputError("annotation resolution does not match grid")
    r = ann.S[np.ix_(grid.rows(), grid.cols())]
    if r.size and (r.max(initial=-1) >= ann.R or r.min(initial=-1) < -1):
        raise CorruptAnnotationError("region index outside feature table")
    valid = r != -1
    D = ann.Phi.shape[1]
    G = np.zeros((D, grid.H_s, grid.W_s))
    if r.size:
        G[:, valid] = ann.Phi[r[valid]].T
    return SupervisionTarget(G_star=G, V=valid[None].astype(np.float64))


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # numpy rounds half-to-even; the coordinate map wants half-away-from-zero,
    # which for nonnegative inputs is floor(x + 0.5).
    return np.floor(x + 0.5).astype(np.int64)


def build_target_continuous(src: ContinuousFeatureSource, grid: GridSpec) -> SupervisionTarget:
    """Nearest-neighbor alignment of image coords onto the low-res feature map."""
    u = grid.rows().astype(np.float64)
    v = grid.cols().astype(np.float64)
    uu = _round_half_away(u * (src.H_f - 1) / max(grid.H - 1, 1))
    vv = _round_half_away(v * (src.W_f - 1) / max(grid.W - 1, 1))
    G = src.P[:, uu][:, :, vv]
    V = np.ones((1, grid.H_s, grid.W_s))
    return SupervisionTarget(G_star=G, V=V)


def masked_semantic_loss(pred: np.ndarray, target: SupervisionTarget,
                         lambda_sem: float = 1.0) -> tuple[float, np.ndarray]:
    """Masked cosine + L1 loss averaged over valid cells.

    Returns (scalar loss, cotangent dloss/dpred of the same shape as pred).
    Both terms are means over valid cells; the L1 term is normalized by D so
    the two terms share scale. Zero valid cells -> (0.0, zeros).
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape[1:] != target.G_star.shape[1:] or pred.shape[0] != target.G_star.shape[0]:
        raise InvalidInputError("prediction and target shapes disagree")
    mask = target.V[0] > 0
    n_valid = int(mask.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(pred)

    D = pred.shape[0]
    p = pred[:, mask]            # (D, n)
    t = target.G_star[:, mask]   # (D, n)
    np_ = np.linalg.norm(p, axis=0)
    nt = np.linalg.norm(t, axis=0)
    a = np_ + NORM_EPS
    b = nt + NORM_EPS
    dot = np.sum(p * t, axis=0)
    cos = dot / (a * b)
    both_zero = (np_ == 0) & (nt == 0)
    cos[both_zero] = 1.0

    l1 = np.sum(np.abs(p - t), axis=0) / D
    loss = lambda_sem * (np.mean(1.0 - cos) + np.mean(l1))

    # d(1-cos)/dp = -(t/(a b) - dot * p/(np * a^2 * b)); guard np == 0.
    safe_np = np.where(np_ > 0, np_, 1.0)
    dcos = t / (a * b) - (dot / (safe_np * a * a * b)) * p * (np_ > 0)
    dcos[:, both_zero] = 0.0
    grad_cells = lambda_sem * (-dcos + np.sign(p - t) / D) / n_valid
    cot = np.zeros_like(pred)
    cot[:, mask] = grad_cells
    return float(loss), cot


def next_offset(step: int, s: int, rng_seed: int = 0) -> tuple[int, int]:
    """Offset schedule: seeded permutation of all s^2 phases, repeated cyclically.

    Every consecutive block of s^2 steps visits each phase exactly once.
    """
    if s < 1:
        raise InvalidInputError("stride must be >= 1")
    if s == 1:
        return (0, 0)
    n = s * s
    cycle, pos = divmod(int(step), n)
    rng = np.random.default_rng([int(rng_seed), cycle])
    perm = rng.permutation(n)
    k = int(perm[pos])
    return (k // s, k % s)


def padded_shape(H: int, W: int, s: int) -> tuple[int, int]:
    """Fixed batched shape covering every offset: (ceil(H/s), ceil(W/s))."""
    return (-(-H // s), -(-W // s))


def pad_target(target: SupervisionTarget, grid: GridSpec) -> SupervisionTarget:
    """Pad a target to the offset-independent batched shape; padding gets V=0."""
    Hp, Wp = padded_shape(grid.H, grid.W, grid.s)
    D = target.G_star.shape[0]
    G = np.zeros((D, Hp, Wp))
    V = np.zeros((1, Hp, Wp))
    G[:, :grid.H_s, :grid.W_s] = target.G_star
    V[:, :grid.H_s, :grid.W_s] = target.V
    return SupervisionTarget(G_star=G, V=V)
