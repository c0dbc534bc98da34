"""Four-level slot evaluation (strict / semantic / coarse / safe), acceptable accuracy, top-k, and retrieval."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .report import Malignancy, SlotType, TypeMismatch, Vocabulary


class EmptyRecordSet(ValueError):
    pass


class ZeroNormEmbedding(ValueError):
    pass


@dataclass(frozen=True)
class SlotIndicators:
    strict: bool
    semantic: bool
    coarse: bool
    safe: bool

    @property
    def acceptable(self) -> bool:
        return self.strict or self.semantic or (self.coarse and self.safe)

    def lattice_ok(self) -> bool:
        return (not self.strict or self.semantic) and (not self.semantic or self.coarse) and \
            (not self.strict or self.safe)


_DICHOTOMY = (Malignancy.BENIGN, Malignancy.MALIGNANT)


def slot_indicators(pred: int, truth: int, vocab: Vocabulary) -> SlotIndicators:
    p, t = vocab.terms[pred], vocab.terms[truth]
    if p.slot_type != t.slot_type:
        raise TypeMismatch(f"prediction {pred} ({p.slot_type.name}) vs truth {truth} ({t.slot_type.name})")
    strict = pred == truth
    semantic = vocab.canonical(pred) == vocab.canonical(truth)
    coarse = p.coarse_class == t.coarse_class
    unsafe = (
        (p.malignancy in _DICHOTOMY and t.malignancy in _DICHOTOMY and p.malignancy != t.malignancy)
        or (p.grade_rank is not None and t.grade_rank is not None and abs(p.grade_rank - t.grade_rank) >= 2)
        or (p.polarity is not None and t.polarity is not None and p.polarity != t.polarity)
    )
    ind = SlotIndicators(strict, semantic, coarse, not unsafe)
    if not ind.lattice_ok():
        raise AssertionError(f"indicator lattice violated for ({pred}, {truth}): {ind}")
    return ind


def acceptable_accuracy(records: Sequence[SlotIndicators]) -> float:
    if not records:
        raise EmptyRecordSet("no records")
    return sum(r.acceptable for r in records) / len(records)


def topk_hits(probs: np.ndarray, truths: np.ndarray, k: int) -> np.ndarray:
    """(S, V) probabilities, (S,) truths -> boolean hits; ties broken toward lower term id."""
    probs = np.asarray(probs, dtype=np.float64)
    truths = np.asarray(truths)
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = np.arange(probs.shape[1])
    hits = np.zeros(len(truths), dtype=bool)
    for i, (row, t) in enumerate(zip(probs, truths)):
        # rank = number of terms strictly ahead of the truth under (-prob, id) ordering
        ahead = np.sum((row > row[t]) | ((row == row[t]) & (ids < t)))
        hits[i] = ahead < k
    return hits


def topk_accuracy(distributions, truths, k: int) -> float:
    probs = np.stack([d.probs if hasattr(d, "probs") else np.asarray(d) for d in distributions])
    return float(topk_hits(probs, np.asarray(truths), k).mean())


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(probs), axis=-1)


def retrieval_recall_at_1(z_vis: np.ndarray, z_txt: np.ndarray) -> float:
    z_vis = np.asarray(z_vis, dtype=np.float64)
    z_txt = np.asarray(z_txt, dtype=np.float64)
    nv = np.linalg.norm(z_vis, axis=1, keepdims=True)
    nt = np.linalg.norm(z_txt, axis=1, keepdims=True)
    if (nv == 0).any() or (nt == 0).any():
        raise ZeroNormEmbedding("zero-norm embedding row")
    S = (z_vis / nv) @ (z_txt / nt).T
    return float(np.mean(np.argmax(S, axis=1) == np.arange(len(S))))


def percent(count: int, n: int) -> Decimal:
    """Exact percentage rounded half-even to 2 decimals."""
    if n == 0:
        return Decimal("0.00")
    frac = Fraction(100 * count, n)
    return (Decimal(frac.numerator) / Decimal(frac.denominator)).quantize(Decimal("0.01"), ROUND_HALF_EVEN)


ROW_ORDER = ("DIAG", "GRADE", "RES", "All")
COLUMNS = ("strict", "semantic", "coarse", "acceptable", "safety")


@dataclass
class MetricRow:
    name: str
    n: int
    counts: dict[str, int]
    topk_counts: dict[int, int] = field(default_factory=dict)

    def pct(self, key: str) -> Decimal:
        return percent(self.counts[key], self.n)

    def to_json(self) -> dict:
        out = {"name": self.name, "N": self.n}
        for c in COLUMNS:
            out[c] = float(self.pct(c))
        for k, cnt in sorted(self.topk_counts.items()):
            out[f"top{k}"] = float(percent(cnt, self.n))
        return out


@dataclass
class MetricReport:
    records: list[SlotIndicators]
    slot_types: list[SlotType]
    rows: list[MetricRow]

    def row(self, name: str) -> MetricRow:
        return next(r for r in self.rows if r.name == name)

    def to_json(self) -> dict:
        return {
            "rows": [r.to_json() for r in self.rows],
            "records": [
                {"type": t.name, "strict": r.strict, "semantic": r.semantic, "coarse": r.coarse, "safe": r.safe}
                for r, t in zip(self.records, self.slot_types)
            ],
        }

    def to_text(self) -> str:
        topks = sorted({k for r in self.rows for k in r.topk_counts})
        head = ["Slot type", "N", "Strict", "Semantic", "Coarse", "Accept.", "Safety"] + [f"Top-{k}" for k in topks]
        body = []
        for r in self.rows:
            body.append([r.name, str(r.n)] + [f"{r.pct(c)}" for c in COLUMNS] +
                        [f"{percent(r.topk_counts[k], r.n)}" for k in topks])
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        lines = [fmt(head), "  ".join("-" * w for w in widths)]
        lines += [fmt(b) for b in body]
        return "\n".join(lines) + "\n"


def _row(name: str, recs: list[SlotIndicators], topk: dict[int, np.ndarray], sel: np.ndarray) -> MetricRow:
    counts = {
        "strict": sum(r.strict for r in recs),
        "semantic": sum(r.semantic for r in recs),
        "coarse": sum(r.coarse for r in recs),
        "acceptable": sum(r.acceptable for r in recs),
        "safety": sum(r.safe for r in recs),
    }
    row = MetricRow(name, len(recs), counts, {k: int(h[sel].sum()) for k, h in topk.items()})
    if not row.counts["strict"] <= row.counts["semantic"] <= row.counts["coarse"]:
        raise AssertionError(f"row {name}: strict <= semantic <= coarse violated")
    return row


def aggregate(records: Sequence[SlotIndicators], slot_types: Sequence[SlotType],
              topk: Optional[dict[int, np.ndarray]] = None) -> MetricReport:
    """Per-type rows DIAG/GRADE/RES plus the pooled All row. ``topk`` maps k -> per-record hit flags."""
    records = list(records)
    slot_types = [SlotType(t) for t in slot_types]
    if len(records) != len(slot_types):
        raise ValueError("records and slot types are not aligned")
    topk = {k: np.asarray(v, dtype=bool) for k, v in (topk or {}).items()}
    types = np.array([int(t) for t in slot_types], dtype=np.int64)
    rows = []
    for t in SlotType:
        sel = types == int(t)
        rows.append(_row(t.name, [r for r, s in zip(records, sel) if s], topk, sel))
    rows.append(_row("All", records, topk, np.ones(len(records), dtype=bool)))
    return MetricReport(records, slot_types, rows)


def evaluate_predictions(preds: Sequence[int], truths: Sequence[int], vocab: Vocabulary,
                         probs: Optional[np.ndarray] = None, k_values: Sequence[int] = (1, 5)) -> MetricReport:
    records = [slot_indicators(int(p), int(t), vocab) for p, t in zip(preds, truths)]
    types = [vocab.terms[int(t)].slot_type for t in truths]
    topk = None
    if probs is not None:
        topk = {k: topk_hits(probs, np.asarray(truths), k) for k in k_values}
    return aggregate(records, types, topk)
