"""Portable token/utterance data model: serialization, labeling, alignment, WER.

Token records store a truncated view of the decoder output distribution:
the top-K logits in non-increasing order plus the log-sum-exp of the
remaining ``tail_count`` logits, which is enough to reconstruct the exact
softmax confidence of the emitted token.

File formats
------------
Token records and utterance records are stored as JSON Lines (one object
per line, UTF-8).  Floats round-trip exactly: the encoder emits the
shortest decimal form that parses back to the same binary double.
Optional fields (``y``, ``o``, ``snr_db``) are omitted when absent;
``tail_lse`` is ``null`` when ``tail_count`` is zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence


class ValidationError(ValueError):
    """A record, file, or argument failed schema or invariant validation."""


CONFIDENCE_ATOL = 1e-5
DEFAULT_OVERCONF_THRESHOLD = 0.7


def _logsumexp(values: Sequence[float]) -> float:
    m = max(values)
    if math.isinf(m):
        return m
    return m + math.log(sum(math.exp(v - m) for v in values))


@dataclass
class TokenRecord:
    """One decoded token and its truncated output distribution.

    ``topk_logits`` holds the K largest logits, non-increasing, with
    ``topk_ids[0]`` the emitted token.  ``tail_lse`` is the log-sum-exp of
    the ``tail_count`` logits that were not stored (``None`` iff
    ``tail_count == 0``).  ``confidence`` is the full-vocabulary softmax
    probability of the emitted token.  ``y`` is the correctness label and
    ``o`` the overconfidence label; both are optional.
    """

    utt_id: str
    token_index: int
    token_id: int
    topk_ids: list[int]
    topk_logits: list[float]
    tail_lse: float | None
    tail_count: int
    confidence: float
    y: int | None = None
    o: int | None = None

    def log_norm(self) -> float:
        """Log partition function of the reconstructed distribution."""
        terms = list(self.topk_logits)
        if self.tail_count > 0:
            terms.append(self.tail_lse)
        return _logsumexp(terms)

    def validate(self) -> None:
        if self.token_index < 0:
            raise ValidationError("token_index must be non-negative")
        if len(self.topk_ids) != len(self.topk_logits) or not self.topk_ids:
            raise ValidationError("topk_ids and topk_logits must be non-empty and equal length")
        if self.topk_ids[0] != self.token_id:
            raise ValidationError("topk_ids[0] must equal token_id")
        logits = self.topk_logits
        if any(logits[i] < logits[i + 1] for i in range(len(logits) - 1)):
            raise ValidationError("topk order violated: topk_logits must be non-increasing")
        if not all(math.isfinite(v) for v in logits):
            raise ValidationError("topk_logits must be finite")
        if self.tail_count < 0:
            raise ValidationError("tail_count must be non-negative")
        if self.tail_count > 0:
            if self.tail_lse is None or not math.isfinite(self.tail_lse):
                raise ValidationError("tail_lse must be finite when tail_count > 0")
        elif self.tail_lse is not None:
            raise ValidationError("tail_lse must be null when tail_count == 0")
        if not 0.0 < self.confidence <= 1.0:
            raise ValidationError("confidence out of range (0, 1]")
        expected = math.exp(self.topk_logits[0] - self.log_norm())
        if abs(self.confidence - expected) > CONFIDENCE_ATOL:
            raise ValidationError(
                f"confidence {self.confidence!r} does not match reconstructed "
                f"softmax probability {expected!r}"
            )
        for name, value in (("y", self.y), ("o", self.o)):
            if value is not None and value not in (0, 1):
                raise ValidationError(f"{name} must be 0 or 1")
        if self.o is not None:
            if self.y is None:
                raise ValidationError("o requires y to be present")
            if self.o == 1 and self.y != 0:
                raise ValidationError("o == 1 requires y == 0")

    def to_dict(self) -> dict:
        d = {
            "utt_id": self.utt_id,
            "token_index": self.token_index,
            "token_id": self.token_id,
            "topk_ids": self.topk_ids,
            "topk_logits": self.topk_logits,
            "tail_lse": self.tail_lse,
            "tail_count": self.tail_count,
            "confidence": self.confidence,
        }
        if self.y is not None:
            d["y"] = self.y
        if self.o is not None:
            d["o"] = self.o
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TokenRecord":
        required = [
            "utt_id", "token_index", "token_id", "topk_ids",
            "topk_logits", "tail_lse", "tail_count", "confidence",
        ]
        for field in required:
            if field not in d:
                raise ValidationError(f"missing field '{field}'")
        try:
            rec = cls(
                utt_id=str(d["utt_id"]),
                token_index=int(d["token_index"]),
                token_id=int(d["token_id"]),
                topk_ids=[int(v) for v in d["topk_ids"]],
                topk_logits=[float(v) for v in d["topk_logits"]],
                tail_lse=None if d["tail_lse"] is None else float(d["tail_lse"]),
                tail_count=int(d["tail_count"]),
                confidence=float(d["confidence"]),
                y=None if d.get("y") is None else int(d["y"]),
                o=None if d.get("o") is None else int(d["o"]),
            )
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"malformed field value: {exc}") from exc
        rec.validate()
        return rec


@dataclass
class UtteranceRecord:
    """Per-utterance metadata linking tokens to their acoustic condition."""

    utt_id: str
    snr_db: float | None
    mel_path: str
    n_frames: int
    n_mel_bins: int
    hyp_token_ids: list[int]
    ref_token_ids: list[int]

    def validate(self) -> None:
        if not self.utt_id:
            raise ValidationError("utt_id must be non-empty")
        if self.n_frames <= 0 or self.n_mel_bins <= 0:
            raise ValidationError("n_frames and n_mel_bins must be positive")
        if self.snr_db is not None and not math.isfinite(self.snr_db):
            raise ValidationError("snr_db must be finite when present")

    def to_dict(self) -> dict:
        d = {
            "utt_id": self.utt_id,
            "mel_path": self.mel_path,
            "n_frames": self.n_frames,
            "n_mel_bins": self.n_mel_bins,
            "hyp_token_ids": self.hyp_token_ids,
            "ref_token_ids": self.ref_token_ids,
        }
        if self.snr_db is not None:
            d["snr_db"] = self.snr_db
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UtteranceRecord":
        required = ["utt_id", "mel_path", "n_frames", "n_mel_bins",
                    "hyp_token_ids", "ref_token_ids"]
        for field in required:
            if field not in d:
                raise ValidationError(f"missing field '{field}'")
        try:
            rec = cls(
                utt_id=str(d["utt_id"]),
                snr_db=None if d.get("snr_db") is None else float(d["snr_db"]),
                mel_path=str(d["mel_path"]),
                n_frames=int(d["n_frames"]),
                n_mel_bins=int(d["n_mel_bins"]),
                hyp_token_ids=[int(v) for v in d["hyp_token_ids"]],
                ref_token_ids=[int(v) for v in d["ref_token_ids"]],
            )
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"malformed field value: {exc}") from exc
        rec.validate()
        return rec


@dataclass
class CorpusManifest:
    """Top-level corpus descriptor tying record files together."""

    vocab_size: int
    K: int
    records_path: str
    utterances_path: str
    seed: int

    def validate(self) -> None:
        if not (self.vocab_size > self.K >= 1):
            raise ValidationError("vocab_size must exceed K and K must be >= 1")

    def save(self, path: str | Path) -> None:
        self.validate()
        Path(path).write_text(json.dumps(self.__dict__, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CorpusManifest":
        d = json.loads(Path(path).read_text())
        for field in ("vocab_size", "K", "records_path", "utterances_path", "seed"):
            if field not in d:
                raise ValidationError(f"manifest missing field '{field}'")
        m = cls(vocab_size=int(d["vocab_size"]), K=int(d["K"]),
                records_path=str(d["records_path"]),
                utterances_path=str(d["utterances_path"]), seed=int(d["seed"]))
        m.validate()
        return m


def _save_jsonl(items: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in items:
            fh.write(json.dumps(d, ensure_ascii=False) + "\n")


def _load_jsonl(path: str | Path, from_dict, what: str) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed {what} line: {exc}") from exc
            if not isinstance(d, dict):
                raise ValidationError(f"{path}:{lineno}: expected a JSON object")
            try:
                out.append(from_dict(d))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return out


def save_records(records: Sequence[TokenRecord], path: str | Path) -> None:
    """Write token records as JSON Lines after validating each one."""
    for rec in records:
        rec.validate()
    _save_jsonl((rec.to_dict() for rec in records), path)


def load_records(path: str | Path) -> list[TokenRecord]:
    """Load and validate token records; errors name the offending line."""
    return _load_jsonl(path, TokenRecord.from_dict, "token record")


def save_utterances(utterances: Sequence[UtteranceRecord], path: str | Path) -> None:
    for utt in utterances:
        utt.validate()
    _save_jsonl((utt.to_dict() for utt in utterances), path)


def load_utterances(path: str | Path) -> list[UtteranceRecord]:
    return _load_jsonl(path, UtteranceRecord.from_dict, "utterance record")


# Alignment moves, in backtrace preference order.
_MATCH, _SUB, _INS, _DEL = range(4)


def _edit_alignment(hyp: Sequence[int], ref: Sequence[int]) -> tuple[int, list[int]]:
    """Minimum-edit alignment with deterministic tie-breaking.

    Returns ``(distance, labels)`` where ``labels[i]`` is 1 iff hypothesis
    token ``i`` is aligned to an identical reference token.  Ties are broken
    by preferring match > substitution > insertion > deletion while walking
    back from the end of both sequences.
    """
    m, n = len(hyp), len(ref)
    dist = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(1, m + 1):
        dist[i][0] = i
    for j in range(1, n + 1):
        dist[0][j] = j
    for i in range(1, m + 1):
        row, prev = dist[i], dist[i - 1]
        hi = hyp[i - 1]
        for j in range(1, n + 1):
            diag = prev[j - 1] + (hi != ref[j - 1])
            row[j] = min(diag, prev[j] + 1, row[j - 1] + 1)
    labels = [0] * m
    i, j = m, n
    while i > 0 or j > 0:
        cost = dist[i][j]
        if i > 0 and j > 0 and hyp[i - 1] == ref[j - 1] and dist[i - 1][j - 1] == cost:
            labels[i - 1] = 1
            i -= 1
            j -= 1
        elif i > 0 and j > 0 and hyp[i - 1] != ref[j - 1] and dist[i - 1][j - 1] + 1 == cost:
            i -= 1
            j -= 1
        elif i > 0 and dist[i - 1][j] + 1 == cost:
            i -= 1
        else:
            j -= 1
    return dist[m][n], labels


def align_and_label(hyp: Sequence[int], ref: Sequence[int]) -> list[int]:
    """Per-token correctness labels from a minimum-edit alignment.

    A hypothesis token gets label 1 iff it aligns to an identical reference
    token; substituted and inserted tokens get 0.
    """
    if len(hyp) == 0:
        return []
    if len(ref) == 0:
        return [0] * len(hyp)
    return _edit_alignment(hyp, ref)[1]


def compute_wer(hyp: Sequence[int], ref: Sequence[int]) -> float:
    """(substitutions + deletions + insertions) / len(ref)."""
    if len(ref) == 0:
        raise ValidationError("reference sequence must be non-empty")
    distance, _ = _edit_alignment(hyp, ref)
    return distance / len(ref)


def label_overconfident(record: TokenRecord,
                        threshold: float = DEFAULT_OVERCONF_THRESHOLD) -> int:
    """1 iff the token is incorrect but its confidence meets the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError("threshold must be in (0, 1)")
    if record.y is None:
        raise ValidationError("unlabeled record: y is required")
    return int(record.y == 0 and record.confidence >= threshold)
