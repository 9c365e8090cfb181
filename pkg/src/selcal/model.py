"""Model parameters and forward passes for the two-stage calibrator.

The overconfidence classifier and the temperature head are both two-layer
perceptrons over the shared feature vector; the classifier ends in a
sigmoid, the temperature head in ``1 + softplus`` so predicted
temperatures can only soften the distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .features import FeatureConfig, FeatureVector, LogitBatch
from .records import ValidationError

DEFAULT_HIDDEN = 128
DEFAULT_ATTENTION_DIM = 64
SELECTION_THRESHOLD = 0.5

PARAM_FIELDS = (
    "embedding",
    "pool_wa", "pool_ba", "pool_v", "pool_wp", "pool_bp",
    "cls_w1", "cls_b1", "cls_w2", "cls_b2",
    "tmp_w1", "tmp_b1", "tmp_w2", "tmp_b2",
)


@dataclass
class ModelParams:
    """All learnable arrays: embedding table, pooling, and both heads."""

    embedding: np.ndarray   # (rows, d_token_emb)
    pool_wa: np.ndarray     # (d_att, n_mel)
    pool_ba: np.ndarray     # (d_att,)
    pool_v: np.ndarray      # (d_att,)
    pool_wp: np.ndarray     # (d_acoustic, n_mel)
    pool_bp: np.ndarray     # (d_acoustic,)
    cls_w1: np.ndarray      # (hidden, dim)
    cls_b1: np.ndarray      # (hidden,)
    cls_w2: np.ndarray      # (hidden,)
    cls_b2: np.ndarray      # ()
    tmp_w1: np.ndarray      # (hidden, tmp_dim)
    tmp_b1: np.ndarray      # (hidden,)
    tmp_w2: np.ndarray      # (hidden,)
    tmp_b2: np.ndarray      # ()

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: getattr(self, name).copy() for name in PARAM_FIELDS})

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def validate_finite(self) -> None:
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite values in parameter {name}")


def _glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = shape[-1] if len(shape) > 1 else shape[0]
    fan_out = shape[0] if len(shape) > 1 else 1
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: FeatureConfig, seed: int, hidden: int = DEFAULT_HIDDEN,
                embedding_rows: int = 4096, d_att: int = DEFAULT_ATTENTION_DIM,
                temp_input_dim: int | None = None) -> ModelParams:
    """Seeded initialization: Glorot-uniform weights, zero biases.

    ``temp_input_dim`` overrides the temperature head's input width for the
    utterance-level variant; the default is the shared feature dimension.
    """
    rng = np.random.default_rng(seed)
    dim = cfg.dim
    tmp_dim = dim if temp_input_dim is None else temp_input_dim
    return ModelParams(
        embedding=rng.normal(0.0, 0.02, size=(embedding_rows, cfg.d_token_emb)),
        pool_wa=_glorot(rng, (d_att, cfg.n_mel_bins)),
        pool_ba=np.zeros(d_att),
        pool_v=_glorot(rng, (d_att,)),
        pool_wp=_glorot(rng, (cfg.d_acoustic, cfg.n_mel_bins)),
        pool_bp=np.zeros(cfg.d_acoustic),
        cls_w1=_glorot(rng, (hidden, dim)),
        cls_b1=np.zeros(hidden),
        cls_w2=_glorot(rng, (hidden,)),
        cls_b2=np.zeros(()),
        tmp_w1=_glorot(rng, (hidden, tmp_dim)),
        tmp_b1=np.zeros(hidden),
        tmp_w2=_glorot(rng, (hidden,)),
        tmp_b2=np.zeros(()),
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z: np.ndarray) -> np.ndarray:
    """ln(1 + e^z) with the numerically stable branch for large |z|."""
    return np.logaddexp(0.0, z)


def _mlp_forward(x: np.ndarray, w1, b1, w2, b2):
    """Two-layer perceptron with ReLU; returns scalar pre-activations."""
    if x.shape[-1] != w1.shape[1]:
        raise ValidationError(
            f"feature dimension {x.shape[-1]} does not match parameters "
            f"({w1.shape[1]})")
    h = x @ w1.T + b1
    a = np.maximum(h, 0.0)
    z = a @ w2 + b2
    return z, {"x": x, "h": h, "a": a}


def _mlp_backward(dz: np.ndarray, cache, w1, w2):
    a, h, x = cache["a"], cache["h"], cache["x"]
    d_w2 = a.T @ dz
    d_b2 = np.asarray(dz.sum())
    d_a = np.outer(dz, w2)
    d_h = d_a * (h > 0)
    d_w1 = d_h.T @ x
    d_b1 = d_h.sum(axis=0)
    d_x = d_h @ w1
    return d_x, d_w1, d_b1, d_w2, d_b2


def _as_matrix(f) -> np.ndarray:
    if isinstance(f, FeatureVector):
        f = f.concat()
    f = np.asarray(f, dtype=np.float64)
    return f[None, :] if f.ndim == 1 else f


def classifier_forward(features: np.ndarray, params: ModelParams):
    z, cache = _mlp_forward(features, params.cls_w1, params.cls_b1,
                            params.cls_w2, params.cls_b2)
    return _sigmoid(z), z, cache


def temperature_forward(features: np.ndarray, params: ModelParams):
    z, cache = _mlp_forward(features, params.tmp_w1, params.tmp_b1,
                            params.tmp_w2, params.tmp_b2)
    return 1.0 + softplus(z), z, cache


def classify(f, params: ModelParams) -> float:
    """Probability that the token is overconfident."""
    o_hat, _, _ = classifier_forward(_as_matrix(f), params)
    return float(o_hat[0]) if o_hat.shape[0] == 1 else o_hat


def predict_temperature(f, params: ModelParams) -> float:
    """Per-token temperature, strictly greater than 1 by construction."""
    t, _, _ = temperature_forward(_as_matrix(f), params)
    return float(t[0]) if t.shape[0] == 1 else t


def select_and_apply(records, features, params: ModelParams,
                     threshold: float = SELECTION_THRESHOLD):
    """Flag tokens and rescale only the flagged ones.

    Returns ``(confidences, flags, temperatures)``; unflagged tokens keep
    their stored confidence bit-for-bit.
    """
    matrix = np.stack([_as_matrix(f)[0] for f in features]) \
        if not isinstance(features, np.ndarray) else features
    if matrix.shape[0] != len(records):
        raise ValidationError("records and features must align")
    o_hat, _, _ = classifier_forward(matrix, params)
    temps, _, _ = temperature_forward(matrix, params)
    flags = o_hat >= threshold
    confidences = np.array([r.confidence for r in records], dtype=np.float64)
    if np.any(flags):
        batch = LogitBatch.from_records([r for r, fl in zip(records, flags) if fl])
        scaled, _ = batch.scaled_confidence(temps[flags])
        confidences[flags] = scaled
    return confidences, flags, temps


MODEL_FORMAT_VERSION = 1


def save_params(path: str | Path, params: ModelParams, cfg: FeatureConfig) -> None:
    """Self-describing JSON model file with exact decimal floats."""
    params.validate_finite()
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "feature_config": {
            "k_logits": cfg.k_logits,
            "d_token_emb": cfg.d_token_emb,
            "d_acoustic": cfg.d_acoustic,
            "n_mel_bins": cfg.n_mel_bins,
            "acoustic_window_s": cfg.acoustic_window_s,
            "ablation_mask": sorted(cfg.ablation_mask),
        },
        "shapes": {name: list(arr.shape) for name, arr in params.arrays().items()},
        "parameters": {name: arr.tolist() for name, arr in params.arrays().items()},
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_params(path: str | Path) -> tuple[ModelParams, FeatureConfig]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValidationError(f"unsupported model format: {doc.get('format_version')}")
    fc = doc["feature_config"]
    cfg = FeatureConfig(
        k_logits=int(fc["k_logits"]),
        d_token_emb=int(fc["d_token_emb"]),
        d_acoustic=int(fc["d_acoustic"]),
        n_mel_bins=int(fc["n_mel_bins"]),
        acoustic_window_s=float(fc["acoustic_window_s"]),
        ablation_mask=frozenset(fc["ablation_mask"]),
    )
    arrays = {}
    for name in PARAM_FIELDS:
        if name not in doc["parameters"]:
            raise ValidationError(f"model file missing parameter {name}")
        arr = np.asarray(doc["parameters"][name], dtype=np.float64)
        if list(arr.shape) != doc["shapes"][name]:
            raise ValidationError(f"shape mismatch for parameter {name}")
        arrays[name] = arr
    params = ModelParams(**arrays)
    _validate_against_config(params, cfg)
    return params, cfg


def _validate_against_config(params: ModelParams, cfg: FeatureConfig) -> None:
    if params.embedding.shape[1] != cfg.d_token_emb:
        raise ValidationError("embedding width does not match d_token_emb")
    if params.pool_wp.shape[0] != cfg.d_acoustic:
        raise ValidationError("pooling output does not match d_acoustic")
    if params.pool_wa.shape[1] != cfg.n_mel_bins or params.pool_wp.shape[1] != cfg.n_mel_bins:
        raise ValidationError("pooling input does not match n_mel_bins")
    if params.cls_w1.shape[1] != cfg.dim:
        raise ValidationError("classifier input does not match feature dimension")
