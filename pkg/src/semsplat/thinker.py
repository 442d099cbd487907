"""Text-prompted queries over the semantic field.

Relevance contrasts a decoded (and L2-normalized) feature against a positive
text embedding and a set of generic negatives via a temperature-scaled
two-way softmax, taking the worst case over negatives. A deterministic stub
encoder stands in for a real text tower: prompts hash to unit vectors, the
four negative phrases map to reserved directions, and ``region:<i>`` prompts
resolve to rows of a scene's region feature table when one is supplied.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Codebook, GaussianField, decode_feature, mixture_weights
from .errors import InvalidInputError
from .rasterizer import CompactFeatureMap

NEGATIVE_PHRASES = ("object", "things", "stuff", "texture")
NORM_EPS = 1e-8


def _hash_unit_vector(text: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class StubTextEncoder:
    """Deterministic prompt -> unit vector map standing in for a text tower.

    With a region feature table attached, ``region:<i>`` prompts return the
    table row and the reserved negative phrases return fixed directions
    anchored near the table rows (mimicking how generic phrases correlate
    broadly with scene content). Without a table everything is hash-derived.
    """

    def __init__(self, dim: int, region_table: Optional[np.ndarray] = None):
        self.dim = int(dim)
        self.region_table = None
        if region_table is not None:
            table = np.atleast_2d(np.asarray(region_table, dtype=np.float64))
            if table.shape[1] != self.dim:
                raise InvalidInputError("region table dim mismatch")
            self.region_table = table

    def encode(self, prompt: str) -> np.ndarray:
        if self.region_table is not None:
            if prompt.startswith("region:"):
                idx = int(prompt.split(":", 1)[1])
                if not (0 <= idx < self.region_table.shape[0]):
                    raise InvalidInputError(f"region prompt index {idx} out of range")
                v = self.region_table[idx]
                return v / np.linalg.norm(v)
            if prompt in NEGATIVE_PHRASES:
                n = NEGATIVE_PHRASES.index(prompt)
                anchor = self.region_table[n % self.region_table.shape[0]]
                anchor = anchor / np.linalg.norm(anchor)
                v = anchor + 0.5 * _hash_unit_vector("negative::" + prompt, self.dim)
                return v / np.linalg.norm(v)
        return _hash_unit_vector(prompt, self.dim)

    def negatives(self) -> list:
        return [self.encode(p) for p in NEGATIVE_PHRASES]


@dataclass
class TextQuery:
    positive: np.ndarray                 # (D,) unit vector
    negatives: Sequence[np.ndarray]      # list of (D,) unit vectors
    tau_rel: float = 10.0
    delta_mask: float = 0.6

    def __post_init__(self):
        self.positive = np.asarray(self.positive, dtype=np.float64).reshape(-1)
        self.positive = self.positive / np.linalg.norm(self.positive)
        self.negatives = [np.asarray(n, dtype=np.float64).reshape(-1) for n in self.negatives]
        self.negatives = [n / np.linalg.norm(n) for n in self.negatives]
        if not (0.0 < self.delta_mask < 1.0):
            raise InvalidInputError("delta_mask must lie in (0, 1)")

    @staticmethod
    def from_prompt(prompt: str, encoder: StubTextEncoder, tau_rel: float = 10.0,
                    delta_mask: float = 0.6) -> "TextQuery":
        return TextQuery(positive=encoder.encode(prompt),
                         negatives=encoder.negatives(),
                         tau_rel=tau_rel, delta_mask=delta_mask)


@dataclass
class RelevanceResult:
    per_gaussian_scores: np.ndarray  # (N,) in [0, 1]
    mask: np.ndarray                 # (N,) bool
    fallback_used: bool


@dataclass
class TokenSample:
    indices: np.ndarray    # (M,) distinct Gaussian indices
    entropies: np.ndarray  # (M,) non-increasing
    features: np.ndarray   # (M, D) decoded vectors
    clamped: bool = False


def _contrast_scores(feats_unit: np.ndarray, query: TextQuery) -> np.ndarray:
    """min over negatives of the positive-slot two-way softmax; feats (N, D)."""
    if len(query.negatives) == 0:
        raise InvalidInputError("query must carry at least one negative phrase")
    pos = feats_unit @ query.positive
    scores = np.ones(feats_unit.shape[0])
    for neg in query.negatives:
        margin = query.tau_rel * (pos - feats_unit @ neg)
        scores = np.minimum(scores, 1.0 / (1.0 + np.exp(-margin)))
    return scores


def relevance_per_gaussian(field: GaussianField, codebook: Codebook,
                           query: TextQuery) -> np.ndarray:
    """Prompt relevance r_i in [0,1] for every Gaussian."""
    if len(field) == 0:
        raise InvalidInputError("field must be nonempty")
    feats = decode_feature(field.logits, codebook)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return _contrast_scores(feats / (norms + NORM_EPS), query)


def relevance_per_pixel(weight_maps: Sequence[CompactFeatureMap],
                        codebooks: Sequence[Codebook],
                        query: TextQuery) -> np.ndarray:
    """Per-pixel relevance from rendered codeword-weight maps, max across levels.

    Each level's map carries that level's K mixture weights as channels; the
    pixel feature is reconstructed as the weight-blended codeword sum. Blended
    weights are used as rendered (no renormalization after compositing).
    """
    if len(weight_maps) == 0 or len(weight_maps) != len(codebooks):
        raise InvalidInputError("need one weight map per codebook level")
    shape = weight_maps[0].data.shape[1:]
    out = None
    for wm, cb in zip(weight_maps, codebooks):
        if wm.data.shape[1:] != shape:
            raise InvalidInputError("level shapes disagree")
        if wm.data.shape[0] != cb.K:
            raise InvalidInputError("weight channels must match codebook K")
        flat = wm.data.reshape(cb.K, -1)            # (K, P)
        feats = cb.E.T @ flat                        # (D, P)
        norms = np.linalg.norm(feats, axis=0, keepdims=True)
        scores = _contrast_scores((feats / (norms + NORM_EPS)).T, query)
        level = scores.reshape(shape)
        out = level if out is None else np.maximum(out, level)
    return out


def mask_gaussians(scores: np.ndarray, delta: float,
                   fallback_frac: float = 0.01) -> tuple[np.ndarray, bool]:
    """Threshold mask r_i > delta with a top-scoring fallback when empty.

    The fallback keeps max(1, ceil(fallback_frac * N)) Gaussians by score,
    ties resolved toward the lowest index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    mask = scores > delta
    if mask.any():
        return mask, False
    n_keep = max(1, int(np.ceil(fallback_frac * scores.size)))
    order = np.argsort(-scores, kind="stable")
    mask = np.zeros(scores.size, dtype=bool)
    mask[order[:n_keep]] = True
    return mask, True


def query_field(field: GaussianField, codebook: Codebook, query: TextQuery,
                fallback_frac: float = 0.01) -> RelevanceResult:
    scores = relevance_per_gaussian(field, codebook, query)
    mask, fallback = mask_gaussians(scores, query.delta_mask, fallback_frac)
    return RelevanceResult(per_gaussian_scores=scores, mask=mask,
                           fallback_used=fallback)


def semantic_entropy(logits: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of the codeword assignment distribution."""
    p = mixture_weights(np.atleast_2d(np.asarray(logits, dtype=np.float64)))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    h = -np.sum(plogp, axis=-1)
    return h if np.asarray(logits).ndim > 1 else float(h[0])


def sample_tokens(field: GaussianField, codebook: Codebook, M: int) -> TokenSample:
    """Top-M Gaussians by semantic entropy (ties to the lower index)."""
    if len(field) == 0:
        raise InvalidInputError("field must be nonempty")
    if M < 1:
        raise InvalidInputError("M must be >= 1")
    clamped = M > len(field)
    M = min(M, len(field))
    H = semantic_entropy(field.logits)
    order = np.argsort(-H, kind="stable")[:M]
    feats = decode_feature(field.logits[order], codebook)
    return TokenSample(indices=order.astype(np.int64), entropies=H[order],
                       features=feats, clamped=clamped)
