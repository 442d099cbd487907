"""Streaming EMA vector quantization of observed semantic features.

Hard nearest-neighbor assignment feeds decayed count/sum buffers; codewords
are refreshed as M_k / (N_k + eps) after every buffer update. A confidence-
filtered warm start initializes the buffers, and codewords whose decayed mass
drops below a threshold are reseeded from a reservoir of recent features.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import Codebook, FeatureReservoir
from .errors import InvalidInputError, InvalidStateError


@dataclass
class VqConfig:
    K: int = 256
    lam: float = 0.96            # EMA decay momentum
    tau_warm: float = 0.7        # warm-start confidence temperature
    gamma: float = 0.5           # confidence threshold
    delta_dead: float = 1e-2     # dead-code mass threshold
    epsilon: float = 1e-5
    reservoir_capacity: int = 4096

    def __post_init__(self):
        if not (0.0 <= self.lam < 1.0):
            raise InvalidInputError("lam must lie in [0, 1)")
        if self.K < 1:
            raise InvalidInputError("K must be >= 1")
        if not (0.0 < self.gamma < 1.0):
            raise InvalidInputError("gamma must lie in (0, 1)")
        if self.delta_dead <= 0:
            raise InvalidInputError("delta_dead must be positive")


@dataclass
class VqBatchStats:
    counts: np.ndarray  # (K,) integer-valued
    sums: np.ndarray    # (K, D)


@dataclass
class WarmStartResult:
    codebook: Codebook
    used: int            # samples that passed the confidence filter
    degenerate: bool     # True when every sample was filtered (codebook left at seed)


@dataclass
class ReviveResult:
    codebook: Codebook
    revived: list
    skipped: bool        # True when dead codes existed but the reservoir was empty


def _check_dims(x: np.ndarray, codebook: Codebook) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != codebook.D:
        raise InvalidInputError(f"feature dim {x.shape[1]} != codebook D={codebook.D}")
    return x


def squared_distances(x: np.ndarray, codebook: Codebook) -> np.ndarray:
    """(N, D) x (K, D) -> (N, K) squared euclidean distances."""
    x = _check_dims(x, codebook)
    diff = x[:, None, :] - codebook.E[None, :, :]
    return np.sum(diff * diff, axis=2)


def assign(x: np.ndarray, codebook: Codebook) -> int:
    """Nearest codeword index for one sample; ties go to the lowest index."""
    if codebook.K == 0:
        raise InvalidStateError("cannot assign against an empty codebook")
    d = squared_distances(np.asarray(x, dtype=np.float64)[None], codebook)[0]
    return int(np.argmin(d))


def assign_batch(x: np.ndarray, codebook: Codebook) -> np.ndarray:
    if codebook.K == 0:
        raise InvalidStateError("cannot assign against an empty codebook")
    return np.argmin(squared_distances(x, codebook), axis=1)


def accumulate(batch: np.ndarray, codebook: Codebook) -> VqBatchStats:
    """Per-codeword assignment counts and feature sums for a batch."""
    batch = _check_dims(batch, codebook)
    if batch.shape[0] == 0:
        raise InvalidInputError("batch must be nonempty")
    a = assign_batch(batch, codebook)
    K, D = codebook.K, codebook.D
    counts = np.bincount(a, minlength=K).astype(np.float64)
    sums = np.zeros((K, D))
    np.add.at(sums, a, batch)
    return VqBatchStats(counts=counts, sums=sums)


def ema_step(codebook: Codebook, stats: VqBatchStats) -> Codebook:
    """Decay the buffers toward the batch statistics and refresh every codeword."""
    lam = codebook.lam
    N = lam * codebook.N + (1 - lam) * stats.counts
    M = lam * codebook.M + (1 - lam) * stats.sums
    E = M / (N + codebook.epsilon)[:, None]
    return replace(codebook, E=E, N=N, M=M)


def confidence_scores(batch: np.ndarray, codebook: Codebook, tau: float) -> np.ndarray:
    """Softmax over codewords of negative distance / tau, per sample: (N, K)."""
    d = np.sqrt(squared_distances(batch, codebook))
    logits = -d / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def confidence_mask(batch: np.ndarray, codebook: Codebook, cfg: VqConfig) -> np.ndarray:
    """Boolean mask of samples whose max confidence reaches gamma."""
    p = confidence_scores(batch, codebook, cfg.tau_warm)
    return p.max(axis=1) >= cfg.gamma


def seed_from_samples(buffer: np.ndarray, K: int) -> np.ndarray:
    """K seed codewords by greedy farthest-point traversal of the buffer.

    Starts at the first sample and repeatedly takes the sample farthest from
    the chosen set (deterministic k-means++ cousin), so well-separated
    clusters each receive a seed. Falls back to cycling when the buffer has
    fewer distinct rows than K.
    """
    buffer = np.atleast_2d(np.asarray(buffer, dtype=np.float64))
    if buffer.shape[0] == 0:
        raise InvalidInputError("seed buffer must be nonempty")
    seeds = [buffer[0]]
    min_d = np.sum((buffer - buffer[0]) ** 2, axis=1)
    while len(seeds) < K:
        j = int(np.argmax(min_d))
        if min_d[j] == 0.0:
            seeds.append(buffer[len(seeds) % buffer.shape[0]])
            continue
        seeds.append(buffer[j])
        min_d = np.minimum(min_d, np.sum((buffer - buffer[j]) ** 2, axis=1))
    return np.stack(seeds)


def warm_start(buffer: np.ndarray, codebook: Codebook, cfg: VqConfig) -> WarmStartResult:
    """Initialize N/M from a confidence-filtered hard-assignment pass.

    Samples whose max confidence falls below gamma are excluded. When every
    sample is filtered the codebook is returned untouched (degenerate flag).
    """
    buffer = _check_dims(buffer, codebook)
    if buffer.shape[0] == 0:
        raise InvalidInputError("warm-start buffer must be nonempty")
    mask = confidence_mask(buffer, codebook, cfg)
    used = int(mask.sum())
    if used == 0:
        return WarmStartResult(codebook=codebook, used=0, degenerate=True)
    kept = buffer[mask]
    a = assign_batch(kept, codebook)
    N = np.bincount(a, minlength=codebook.K).astype(np.float64)
    M = np.zeros_like(codebook.M)
    np.add.at(M, a, kept)
    E = M / (N + codebook.epsilon)[:, None]
    return WarmStartResult(codebook=replace(codebook, E=E, N=N, M=M),
                           used=used, degenerate=False)


def revive_dead_codes(codebook: Codebook, cfg: VqConfig,
                      rng: np.random.Generator) -> ReviveResult:
    """Reseed codewords with N_k below the dead threshold from the reservoir."""
    dead = np.nonzero(codebook.N < cfg.delta_dead)[0]
    if dead.size == 0:
        return ReviveResult(codebook=codebook, revived=[], skipped=False)
    if len(codebook.reservoir) == 0:
        return ReviveResult(codebook=codebook, revived=[], skipped=True)
    N = codebook.N.copy()
    M = codebook.M.copy()
    E = codebook.E.copy()
    for k in dead:
        x = codebook.reservoir.sample(rng)
        M[k] = x
        N[k] = 1.0 + codebook.epsilon
        E[k] = M[k] / (N[k] + codebook.epsilon)
    return ReviveResult(codebook=replace(codebook, E=E, N=N, M=M),
                        revived=[int(k) for k in dead], skipped=False)


def online_step(codebook: Codebook, batch: np.ndarray, cfg: VqConfig,
                rng: np.random.Generator) -> tuple[Codebook, ReviveResult]:
    """One streaming update: confidence filter, EMA, reservoir insert, revival.

    All incoming samples enter the reservoir, including confidence-filtered
    ones; only confident samples contribute to the EMA statistics.
    """
    batch = _check_dims(batch, codebook)
    if batch.shape[0] == 0:
        raise InvalidInputError("batch must be nonempty")
    codebook.reservoir.extend(batch)
    mask = confidence_mask(batch, codebook, cfg)
    if mask.any():
        stats = accumulate(batch[mask], codebook)
    else:
        stats = VqBatchStats(counts=np.zeros(codebook.K),
                             sums=np.zeros_like(codebook.M))
    codebook = ema_step(codebook, stats)
    result = revive_dead_codes(codebook, cfg, rng)
    return result.codebook, result


class VqAuditLog:
    """CSV audit trail for dead-code monitoring: step, revived, min/max N."""

    def __init__(self):
        self.rows = []

    def record(self, step: int, revived: Sequence[int], codebook: Codebook) -> None:
        self.rows.append((step, ";".join(str(i) for i in revived),
                          float(codebook.N.min()) if codebook.K else 0.0,
                          float(codebook.N.max()) if codebook.K else 0.0))

    def write(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "revived_indices", "min_N", "max_N"])
            w.writerows(self.rows)
