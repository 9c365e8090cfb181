"""Calibration and discrimination metrics over scored tokens.

All metrics operate on :class:`ScoredToken` sequences: a confidence in
(0, 1], a binary correctness label, and optionally the SNR of the source
utterance for stratified reporting.

Conventions fixed here (metrics are only comparable under one convention):

* Confidence bins are equal width, half-open ``[lo, hi)`` with the last
  bin closed at 1.0.
* Log-based metrics clamp confidences to ``(1e-7, 1 - 1e-7)``.
* EER sweeps thresholds at midpoints between consecutive distinct
  confidences plus {0, 1}; accept means ``confidence >= t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .records import ValidationError

LOG_EPS = 1e-7
LOW_COUNT_THRESHOLD = 50


@dataclass
class ScoredToken:
    """One token's confidence, correctness, and optional SNR condition."""

    confidence: float
    y: int
    snr_db: float | None = None


def _to_arrays(tokens: Sequence[ScoredToken]) -> tuple[np.ndarray, np.ndarray]:
    if len(tokens) == 0:
        raise ValidationError("empty token set")
    conf = np.array([t.confidence for t in tokens], dtype=np.float64)
    y = np.array([t.y for t in tokens], dtype=np.float64)
    if np.any(conf <= 0.0) or np.any(conf > 1.0):
        raise ValidationError("confidence out of range (0, 1]")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("y must be binary")
    return conf, y


def bin_edges(m: int) -> np.ndarray:
    return np.array([i / m for i in range(m + 1)], dtype=np.float64)


def bin_index(conf: np.ndarray, m: int) -> np.ndarray:
    """Half-open bin assignment with the last bin closed at 1.0."""
    idx = np.searchsorted(bin_edges(m), conf, side="right") - 1
    return np.minimum(idx, m - 1)


@dataclass
class ReliabilityBins:
    """Per-bin counts, mean confidence, and accuracy (NaN where empty)."""

    m: int
    counts: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def edges(self) -> np.ndarray:
        return bin_edges(self.m)

    @property
    def occupied(self) -> np.ndarray:
        return self.counts > 0


def reliability_bins(tokens: Sequence[ScoredToken], m: int = 10) -> ReliabilityBins:
    """Group tokens into ``m`` equal-width confidence bins."""
    if m < 1:
        raise ValidationError("M must be >= 1")
    conf, y = _to_arrays(tokens)
    idx = bin_index(conf, m)
    counts = np.bincount(idx, minlength=m).astype(np.int64)
    conf_sum = np.bincount(idx, weights=conf, minlength=m)
    acc_sum = np.bincount(idx, weights=y, minlength=m)
    with np.errstate(invalid="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / np.maximum(counts, 1), np.nan)
        accuracy = np.where(counts > 0, acc_sum / np.maximum(counts, 1), np.nan)
    return ReliabilityBins(m, counts, mean_conf, accuracy)


def ece(tokens: Sequence[ScoredToken], m: int = 10) -> float:
    """Expected calibration error: bin-weighted |accuracy - confidence|."""
    bins = reliability_bins(tokens, m)
    n = int(bins.counts.sum())
    occ = bins.occupied
    gaps = np.abs(bins.accuracy[occ] - bins.mean_confidence[occ])
    return float(np.sum(bins.counts[occ] / n * gaps))


def _conditional_entropy_total(conf: np.ndarray, y: np.ndarray) -> float:
    c = np.clip(conf, LOG_EPS, 1.0 - LOG_EPS)
    return float(-np.sum(y * np.log(c) + (1.0 - y) * np.log(1.0 - c)))


def nce(tokens: Sequence[ScoredToken]) -> float:
    """Normalized cross entropy: information gain over the base rate.

    Positive when confidences carry information about correctness; negative
    when they are worse than the uninformative base-rate predictor.
    """
    conf, y = _to_arrays(tokens)
    n_correct = float(np.sum(y))
    n = float(len(y))
    if n_correct == 0.0 or n_correct == n:
        raise ValidationError("NCE undefined: token set is single-class")
    p = n_correct / n
    h_base = -n_correct * math.log(p) - (n - n_correct) * math.log(1.0 - p)
    h_cond = _conditional_entropy_total(conf, y)
    return (h_base - h_cond) / h_base


def nll(tokens: Sequence[ScoredToken]) -> float:
    """Mean per-token binary negative log-likelihood of correctness."""
    conf, y = _to_arrays(tokens)
    return _conditional_entropy_total(conf, y) / len(y)


def eer(tokens: Sequence[ScoredToken]) -> float:
    """Equal error rate of accepting tokens by thresholding confidence.

    Returns ``(FAR + FRR) / 2`` at the swept threshold minimizing
    ``|FAR - FRR|``; ties pick the smaller average.
    """
    conf, y = _to_arrays(tokens)
    n_correct = int(np.sum(y))
    if n_correct == 0 or n_correct == len(y):
        raise ValidationError("EER undefined: token set is single-class")
    distinct = np.unique(conf)
    thresholds = np.concatenate(([0.0], (distinct[:-1] + distinct[1:]) / 2.0, [1.0]))
    order = np.argsort(conf, kind="stable")
    conf_sorted = conf[order]
    y_sorted = y[order]
    # tokens with confidence < t are rejected
    n_below = np.searchsorted(conf_sorted, thresholds, side="left")
    correct_below = np.concatenate(([0.0], np.cumsum(y_sorted)))[n_below]
    incorrect_below = n_below - correct_below
    n_incorrect = len(y) - n_correct
    far = (n_incorrect - incorrect_below) / n_incorrect
    frr = correct_below / n_correct
    gap = np.abs(far - frr)
    avg = (far + frr) / 2.0
    best = np.lexsort((avg, gap))[0]
    return float(avg[best])


def overconfidence_mass(tokens: Sequence[ScoredToken], threshold: float = 0.7) -> float:
    """Fraction of all tokens that are incorrect with confidence >= threshold."""
    conf, y = _to_arrays(tokens)
    return float(np.mean((y == 0.0) & (conf >= threshold)))


@dataclass(frozen=True)
class Band:
    """An SNR interval with explicit endpoint closure."""

    lo: float
    hi: float
    include_lo: bool = True
    include_hi: bool = True

    def contains(self, snr_db: float) -> bool:
        above = snr_db >= self.lo if self.include_lo else snr_db > self.lo
        below = snr_db <= self.hi if self.include_hi else snr_db < self.hi
        return above and below

    @property
    def label(self) -> str:
        lo_b = "[" if self.include_lo else "("
        hi_b = "]" if self.include_hi else ")"
        return f"{lo_b}{_fmt(self.lo)},{_fmt(self.hi)}{hi_b}"


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else str(v)


DEFAULT_SNR_BANDS = (
    Band(5.0, 10.0, include_lo=False, include_hi=True),
    Band(0.0, 5.0, include_lo=False, include_hi=True),
    Band(-5.0, 0.0, include_lo=False, include_hi=True),
    Band(-10.0, -5.0, include_lo=True, include_hi=True),
    Band(-15.0, -10.0, include_lo=True, include_hi=False),
    Band(-18.0, -15.0, include_lo=True, include_hi=True),
)


def _as_band(b) -> Band:
    if isinstance(b, Band):
        return b
    lo, hi = b
    return Band(float(lo), float(hi))


@dataclass
class BandMetrics:
    """Metric row for one SNR band; metrics are None when undefined."""

    band: Band
    count: int
    ece: float | None
    nce: float | None
    overconfidence_mass: float | None
    low_confidence: bool


@dataclass
class HeatmapCell:
    band: Band
    bin_lo: float
    bin_hi: float
    accuracy: float
    count: int


@dataclass
class CalibrationReport:
    """Per-band metric table plus reliability and heatmap bin data."""

    rows: list[BandMetrics]
    reliability: ReliabilityBins
    heatmap: list[HeatmapCell]
    m: int = 10


def _require_snr(tokens: Sequence[ScoredToken]) -> None:
    for i, t in enumerate(tokens):
        if t.snr_db is None:
            raise ValidationError(f"token {i} has no snr_db")


def snr_stratified_report(tokens: Sequence[ScoredToken],
                          bands=DEFAULT_SNR_BANDS, m: int = 10) -> CalibrationReport:
    """Per-band ECE/NCE/overconfident-mass table with bin data.

    Bands with fewer than 50 tokens are flagged low-confidence; empty bands
    report count 0 with absent metrics.
    """
    if len(tokens) == 0:
        raise ValidationError("empty token set")
    _require_snr(tokens)
    bands = [_as_band(b) for b in bands]
    rows = []
    for band in bands:
        members = [t for t in tokens if band.contains(t.snr_db)]
        if not members:
            rows.append(BandMetrics(band, 0, None, None, None, True))
            continue
        try:
            band_nce = nce(members)
        except ValidationError:
            band_nce = None
        rows.append(BandMetrics(
            band=band,
            count=len(members),
            ece=ece(members, m),
            nce=band_nce,
            overconfidence_mass=overconfidence_mass(members),
            low_confidence=len(members) < LOW_COUNT_THRESHOLD,
        ))
    return CalibrationReport(
        rows=rows,
        reliability=reliability_bins(tokens, m),
        heatmap=confidence_accuracy_heatmap(tokens, m, bands),
        m=m,
    )


def confidence_accuracy_heatmap(tokens: Sequence[ScoredToken], m: int = 10,
                                bands=DEFAULT_SNR_BANDS) -> list[HeatmapCell]:
    """Accuracy per (SNR band, confidence bin); empty cells are omitted."""
    if len(tokens) == 0:
        raise ValidationError("empty token set")
    _require_snr(tokens)
    edges = bin_edges(m)
    cells = []
    for band in (_as_band(b) for b in bands):
        members = [t for t in tokens if band.contains(t.snr_db)]
        if not members:
            continue
        bins = reliability_bins(members, m)
        for k in range(m):
            if bins.counts[k] > 0:
                cells.append(HeatmapCell(
                    band=band, bin_lo=float(edges[k]), bin_hi=float(edges[k + 1]),
                    accuracy=float(bins.accuracy[k]), count=int(bins.counts[k]),
                ))
    return cells
