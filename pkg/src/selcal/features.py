"""Shared per-token feature vectors for the classifier and calibrator.

Each token is described by three softmax uncertainty statistics, a learned
token embedding, its relative position, its leading (shifted) logits, and
an attention-pooled acoustic embedding shared by all tokens of the
utterance.  Masked feature groups are zero-filled so the vector dimension
never changes.

The stored top-K head plus tail log-sum-exp reconstructs the full softmax
by treating the tail as ``tail_count`` equal pseudo-logits; this is exact
at temperature 1 and approximates temperature scaling with an error
bounded by the tail mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import read_mel
from .records import TokenRecord, UtteranceRecord, ValidationError

FEATURE_GROUPS = (
    "top1", "margin", "entropy", "token_embedding", "position",
    "topk_logits", "mel",
)

EMBEDDING_ROWS = 4096
MEL_FRAMES_PER_SECOND = 100.0  # 10 ms hop convention


@dataclass(frozen=True)
class FeatureConfig:
    """Dimensions and ablation switches for the shared feature vector."""

    k_logits: int = 5
    d_token_emb: int = 32
    d_acoustic: int = 64
    n_mel_bins: int = 80
    acoustic_window_s: float = 3.0
    ablation_mask: frozenset = frozenset()

    def __post_init__(self):
        if min(self.k_logits, self.d_token_emb, self.d_acoustic, self.n_mel_bins) <= 0:
            raise ValidationError("feature dimensions must be positive")
        if self.acoustic_window_s <= 0:
            raise ValidationError("acoustic window must be positive")
        unknown = set(self.ablation_mask) - set(FEATURE_GROUPS)
        if unknown:
            raise ValidationError(f"unknown ablation groups: {sorted(unknown)}")
        object.__setattr__(self, "ablation_mask", frozenset(self.ablation_mask))

    @property
    def dim(self) -> int:
        return 3 + self.d_token_emb + 1 + self.k_logits + self.d_acoustic

    @property
    def max_frames(self) -> int:
        return int(round(self.acoustic_window_s * MEL_FRAMES_PER_SECOND))

    def group_slices(self) -> dict[str, slice]:
        d, k = self.d_token_emb, self.k_logits
        return {
            "top1": slice(0, 1),
            "margin": slice(1, 2),
            "entropy": slice(2, 3),
            "token_embedding": slice(3, 3 + d),
            "position": slice(3 + d, 4 + d),
            "topk_logits": slice(4 + d, 4 + d + k),
            "mel": slice(4 + d + k, 4 + d + k + self.d_acoustic),
        }


@dataclass
class FeatureVector:
    """The assembled per-token input in its fixed concatenation order."""

    top1_prob: float
    margin: float
    entropy: float
    token_emb: np.ndarray
    rel_position: float
    topk_logits: np.ndarray
    acoustic_emb: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([
            [self.top1_prob, self.margin, self.entropy],
            self.token_emb,
            [self.rel_position],
            self.topk_logits,
            self.acoustic_emb,
        ])


def embedding_row(token_id: int, n_rows: int = EMBEDDING_ROWS) -> int:
    """Fold a vocabulary id into the bounded embedding table."""
    return token_id % n_rows


@dataclass
class LogitBatch:
    """Dense view of a uniform-K record batch for vectorized scaling.

    ``tail_u`` is the per-entry tail pseudo-logit ``tail_lse - ln(tail_count)``
    and ``tail_log_count`` is ``ln(tail_count)`` (``-inf`` when no tail).
    """

    logits: np.ndarray       # (n, K)
    tail_u: np.ndarray       # (n,)
    tail_log_count: np.ndarray  # (n,)

    @classmethod
    def from_records(cls, records) -> "LogitBatch":
        ks = {len(r.topk_logits) for r in records}
        if len(ks) != 1:
            raise ValidationError("records in a batch must share one K")
        logits = np.array([r.topk_logits for r in records], dtype=np.float64)
        tail_u = np.zeros(len(records))
        tail_log_count = np.full(len(records), -np.inf)
        for i, r in enumerate(records):
            if r.tail_count > 0:
                tail_log_count[i] = math.log(r.tail_count)
                tail_u[i] = r.tail_lse - tail_log_count[i]
        return cls(logits, tail_u, tail_log_count)

    def scaled_confidence(self, temperature) -> tuple[np.ndarray, np.ndarray]:
        """Top-token probability after dividing all logits by T.

        Returns ``(confidence, d_confidence/dT)`` for per-row temperatures.
        """
        T = np.broadcast_to(np.asarray(temperature, dtype=np.float64),
                            self.logits.shape[:1]).copy()
        scaled = self.logits / T[:, None]
        has_tail = np.isfinite(self.tail_log_count)
        with np.errstate(invalid="ignore"):
            tail_term = np.where(has_tail,
                                 self.tail_log_count + self.tail_u / T, -np.inf)
        top = scaled[:, 0]  # logits are non-increasing, so this is the max
        z = np.exp(scaled - top[:, None]).sum(axis=1) + np.exp(tail_term - top)
        conf = 1.0 / z
        probs = np.exp(scaled - top[:, None]) / z[:, None]
        tail_mass = np.exp(tail_term - top) / z
        mean_logit = (probs * self.logits).sum(axis=1) + np.where(
            has_tail, tail_mass * self.tail_u, 0.0)
        dconf_dT = conf * (mean_logit - self.logits[:, 0]) / T**2
        return conf, dconf_dT


def softmax_stats(record: TokenRecord) -> tuple[float, float, float]:
    """Top-1 probability, top-2 margin, and entropy (nats).

    The tail is treated as ``tail_count`` equal pseudo-logits, which makes
    the reconstruction exact whenever the unstored mass is uniform.
    """
    record.validate()
    logits = np.asarray(record.topk_logits, dtype=np.float64)
    log_norm = record.log_norm()
    probs = np.exp(logits - log_norm)
    top1 = float(probs[0])
    if record.tail_count > 0:
        tail_entry = math.exp(
            record.tail_lse - math.log(record.tail_count) - log_norm)
        tail_mass = record.tail_count * tail_entry
    else:
        tail_entry = 0.0
        tail_mass = 0.0
    second = float(probs[1]) if len(probs) > 1 else tail_entry
    entropy = float(-np.sum(probs * (logits - log_norm)))
    if tail_mass > 0:
        entropy -= tail_mass * (record.tail_lse - math.log(record.tail_count) - log_norm)
    return top1, top1 - second, entropy


def scaled_confidence(record: TokenRecord, temperature: float) -> float:
    """Softmax probability of the emitted token after logit scaling.

    Temperatures below 1 are rejected: the calibrator contract only ever
    softens the distribution.
    """
    if temperature < 1.0:
        raise ValidationError("temperature must be >= 1")
    batch = LogitBatch.from_records([record])
    conf, _ = batch.scaled_confidence(np.array([temperature]))
    return float(conf[0])


def _attention_forward(frames: np.ndarray, wa, ba, v, wp, bp):
    """Attention pooling forward pass with the cache needed for backprop."""
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValidationError("attention pooling needs at least one frame")
    pre = frames @ wa.T + ba          # (t, d_att)
    h = np.tanh(pre)
    scores = h @ v                    # (t,)
    scores = scores - scores.max()
    alpha = np.exp(scores)
    alpha /= alpha.sum()
    proj = frames @ wp.T + bp         # (t, d_acoustic)
    pooled = alpha @ proj
    return pooled, {"frames": frames, "h": h, "alpha": alpha, "proj": proj}


def _attention_backward(d_pooled: np.ndarray, cache, wa, v, wp):
    """Gradients of pooled output w.r.t. the pooling parameters."""
    frames, h, alpha, proj = cache["frames"], cache["h"], cache["alpha"], cache["proj"]
    d_alpha = proj @ d_pooled                       # (t,)
    d_scores = alpha * (d_alpha - float(alpha @ d_alpha))
    d_v = h.T @ d_scores
    d_h = np.outer(d_scores, v)
    d_pre = d_h * (1.0 - h**2)
    d_wa = d_pre.T @ frames
    d_ba = d_pre.sum(axis=0)
    d_wp = np.outer(d_pooled, alpha @ frames)
    d_bp = d_pooled.copy()  # attention weights sum to one
    return d_wa, d_ba, d_v, d_wp, d_bp


def attention_pool(frames: np.ndarray, params) -> np.ndarray:
    """Pool mel frames into one acoustic embedding via additive attention."""
    pooled, _ = _attention_forward(
        np.asarray(frames, dtype=np.float64),
        params.pool_wa, params.pool_ba, params.pool_v,
        params.pool_wp, params.pool_bp)
    return pooled


def load_acoustic_frames(utt: UtteranceRecord, cfg: FeatureConfig,
                         base_dir: str | Path | None = None) -> np.ndarray:
    """Read the utterance mel and truncate it to the acoustic window."""
    path = Path(utt.mel_path)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    if not path.exists():
        raise ValidationError(f"missing mel file: {path}")
    mel = read_mel(path).astype(np.float64)
    if mel.shape != (utt.n_frames, utt.n_mel_bins):
        raise ValidationError(
            f"mel header {mel.shape} does not match utterance "
            f"({utt.n_frames}, {utt.n_mel_bins})")
    if mel.shape[1] != cfg.n_mel_bins:
        raise ValidationError("mel bin count does not match feature config")
    return mel[: cfg.max_frames]


def rel_position(token_index: int, n_tokens: int) -> float:
    return token_index / max(1, n_tokens - 1)


def assemble_features(record: TokenRecord, utt: UtteranceRecord, params,
                      cfg: FeatureConfig,
                      base_dir: str | Path | None = None,
                      frames: np.ndarray | None = None) -> FeatureVector:
    """Build the shared feature vector for one token.

    ``frames`` short-circuits the mel read when the caller already holds the
    windowed frames.  Masked groups are zero-filled in place.
    """
    if record.utt_id != utt.utt_id:
        raise ValidationError("record does not belong to this utterance")
    if len(record.topk_logits) < cfg.k_logits:
        raise ValidationError("record stores fewer logits than k_logits")
    top1, margin, entropy = softmax_stats(record)
    mask = cfg.ablation_mask
    if frames is None:
        frames = load_acoustic_frames(utt, cfg, base_dir)
    if "mel" in mask:
        acoustic = np.zeros(cfg.d_acoustic)
    else:
        acoustic = attention_pool(frames, params)
    if "token_embedding" in mask:
        emb = np.zeros(cfg.d_token_emb)
    else:
        emb = params.embedding[embedding_row(record.token_id, params.embedding.shape[0])].copy()
    logits = np.asarray(record.topk_logits[: cfg.k_logits], dtype=np.float64)
    shifted = logits - logits[0]
    return FeatureVector(
        top1_prob=0.0 if "top1" in mask else top1,
        margin=0.0 if "margin" in mask else margin,
        entropy=0.0 if "entropy" in mask else entropy,
        token_emb=emb,
        rel_position=0.0 if "position" in mask else rel_position(
            record.token_index, len(utt.hyp_token_ids)),
        topk_logits=np.zeros(cfg.k_logits) if "topk_logits" in mask else shifted,
        acoustic_emb=acoustic,
    )
