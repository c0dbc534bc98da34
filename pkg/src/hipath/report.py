"""Structured report data model: slot types, vocabulary, templates, cases, and the line-grammar parser.

Report grammar (one case per text block)::

    CASE <id> IMAGES=<J>
    SEG <site>
    FIELD DIAG=<surface>
    FIELD GRADE=<surface>
    FIELD RES(<marker>)=<surface>

Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class SlotType(enum.IntEnum):
    DIAG = 0
    GRADE = 1
    RES = 2


class Malignancy(str, enum.Enum):
    BENIGN = "benign"
    MALIGNANT = "malignant"
    NOT_APPLICABLE = "not_applicable"


class Polarity(str, enum.Enum):
    NEGATIVE = "negative"
    POSITIVE = "positive"


class ReportError(ValueError):
    """Base class for report/vocabulary errors."""


class UnknownTerm(ReportError):
    def __init__(self, surface: str, line: int):
        super().__init__(f"line {line}: unknown term {surface!r}")
        self.surface = surface
        self.line = line


class TypeMismatch(ReportError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class GrammarError(ReportError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def normalize_surface(text: str) -> str:
    return " ".join(text.split()).lower()


@dataclass(frozen=True)
class Term:
    id: int
    surface: str
    slot_type: SlotType
    coarse_class: int
    malignancy: Malignancy = Malignancy.NOT_APPLICABLE
    grade_rank: Optional[int] = None
    polarity: Optional[Polarity] = None
    quant_level: Optional[int] = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "surface": self.surface,
            "slot_type": self.slot_type.name,
            "coarse_class": self.coarse_class,
            "malignancy": self.malignancy.value,
            "grade_rank": self.grade_rank,
            "polarity": None if self.polarity is None else self.polarity.value,
            "quant_level": self.quant_level,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "Term":
        pol = rec.get("polarity")
        return cls(
            id=int(rec["id"]),
            surface=rec["surface"],
            slot_type=SlotType[rec["slot_type"]],
            coarse_class=int(rec["coarse_class"]),
            malignancy=Malignancy(rec.get("malignancy", "not_applicable")),
            grade_rank=rec.get("grade_rank"),
            polarity=None if pol is None else Polarity(pol),
            quant_level=rec.get("quant_level"),
        )


@dataclass
class Vocabulary:
    terms: list[Term]
    synonym_map: dict[str, int] = field(default_factory=dict)
    n_coarse: int = 12

    def __post_init__(self):
        self.synonym_map = {normalize_surface(k): v for k, v in self.synonym_map.items()}
        self._by_surface = {normalize_surface(t.surface): t.id for t in self.terms}

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def type_index(self) -> dict[SlotType, list[int]]:
        idx: dict[SlotType, list[int]] = {t: [] for t in SlotType}
        for term in self.terms:
            idx[term.slot_type].append(term.id)
        return idx

    def type_mask(self) -> np.ndarray:
        """Boolean (3, |V|) membership matrix."""
        mask = np.zeros((len(SlotType), len(self.terms)), dtype=bool)
        for term in self.terms:
            mask[term.slot_type, term.id] = True
        return mask

    def canonical(self, term_id: int) -> int:
        return self.synonym_map.get(normalize_surface(self.terms[term_id].surface), term_id)

    def canonical_ids(self, slot_type: Optional[SlotType] = None) -> list[int]:
        """Terms that are their own canonical form (the ones ground truth is drawn from)."""
        return [
            t.id
            for t in self.terms
            if self.canonical(t.id) == t.id and (slot_type is None or t.slot_type == slot_type)
        ]

    def resolve(self, surface: str) -> Optional[int]:
        key = normalize_surface(surface)
        if key in self.synonym_map:
            return self.synonym_map[key]
        return self._by_surface.get(key)

    def to_json(self) -> dict:
        return {
            "terms": [t.to_json() for t in self.terms],
            "synonyms": dict(sorted(self.synonym_map.items())),
            "n_coarse": self.n_coarse,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "Vocabulary":
        return cls(
            terms=[Term.from_json(t) for t in rec["terms"]],
            synonym_map={k: int(v) for k, v in rec.get("synonyms", {}).items()},
            n_coarse=int(rec.get("n_coarse", 12)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        vocab = cls.from_json(json.loads(Path(path).read_text()))
        problems = validate_vocabulary(vocab)
        if problems:
            raise ReportError(f"invalid vocabulary {path}: {problems[0]}")
        return vocab


@dataclass(frozen=True)
class Violation:
    kind: str
    subject: str
    detail: str = ""


def validate_vocabulary(vocab: Vocabulary) -> list[Violation]:
    out: list[Violation] = []
    seen: set[int] = set()
    for term in vocab.terms:
        name = f"term {term.id} ({term.surface!r})"
        if term.id in seen:
            out.append(Violation("DuplicateId", name))
        seen.add(term.id)
        if not 0 <= term.coarse_class < vocab.n_coarse:
            out.append(Violation("CoarseOutOfRange", name, str(term.coarse_class)))
        if term.slot_type == SlotType.GRADE and term.grade_rank is None:
            out.append(Violation("MissingGradeRank", name))
        if term.slot_type == SlotType.RES and term.polarity is None:
            out.append(Violation("MissingPolarity", name))
    if seen != set(range(len(vocab.terms))):
        out.append(Violation("NonDenseIds", "terms", f"{len(seen)} ids for {len(vocab.terms)} terms"))
    by_id = {t.id: t for t in vocab.terms}
    for surface, target in vocab.synonym_map.items():
        canon = by_id.get(target)
        if canon is None:
            out.append(Violation("DanglingSynonym", surface, str(target)))
            continue
        own = vocab._by_surface.get(surface)
        if own is None:
            continue
        own_term = by_id[own]
        if own_term.slot_type != canon.slot_type:
            out.append(
                Violation("TypeMismatch", surface, f"{own_term.slot_type.name} -> {canon.slot_type.name}")
            )
        elif own_term.coarse_class != canon.coarse_class:
            out.append(Violation("CoarseMismatch", surface))
    return out


@dataclass(frozen=True)
class SlotSpec:
    k: int
    segment_index: int
    slot_type: SlotType
    truth_term: Optional[int] = None
    marker: Optional[str] = None


@dataclass(frozen=True)
class Template:
    n_segments: int
    slots: tuple[tuple[int, SlotType], ...]
    markers: tuple[Optional[str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple((int(s), SlotType(t)) for s, t in self.slots))
        object.__setattr__(self, "markers", tuple(self.markers) or (None,) * len(self.slots))

    @property
    def n_slots(self) -> int:
        return len(self.slots)

    @property
    def slot_types(self) -> list[SlotType]:
        return [t for _, t in self.slots]

    def to_json(self) -> dict:
        return {
            "n_segments": self.n_segments,
            "slots": [[s, t.name] for s, t in self.slots],
            "markers": list(self.markers),
        }


@dataclass
class ImageFeatures:
    patches: np.ndarray

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 2 or self.patches.shape[0] < 1:
            raise ValueError(f"patch matrix must be N x D with N >= 1, got {self.patches.shape}")


@dataclass
class SegmentText:
    embedding: np.ndarray
    raw: Optional[str] = None

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)


@dataclass
class Case:
    case_id: str
    images: list[ImageFeatures]
    segments: list[SegmentText]
    slots: list[SlotSpec]
    coarse_labels: np.ndarray

    def __post_init__(self):
        if not self.slots:
            raise ReportError(f"case {self.case_id}: zero slots")
        if not self.images:
            raise ReportError(f"case {self.case_id}: no images")
        self.coarse_labels = np.asarray(self.coarse_labels, dtype=np.int8)

    @property
    def n_images(self) -> int:
        return len(self.images)

    def check(self, vocab: Vocabulary) -> None:
        """Re-check slot invariants against a vocabulary (used at load)."""
        n_seg = max(len(self.segments), 1)
        labels = np.zeros(vocab.n_coarse, dtype=np.int8)
        for slot in self.slots:
            if self.segments and not 0 <= slot.segment_index < n_seg:
                raise ReportError(f"case {self.case_id}: slot {slot.k} references missing segment")
            if slot.truth_term is not None:
                term = vocab.terms[slot.truth_term]
                if term.slot_type != slot.slot_type:
                    raise TypeMismatch(f"case {self.case_id}: slot {slot.k} truth type {term.slot_type.name}")
                labels[term.coarse_class] = 1
        if any(s.truth_term is not None for s in self.slots) and not np.array_equal(labels, self.coarse_labels):
            raise ReportError(f"case {self.case_id}: coarse labels inconsistent with slot truths")


def build_template(case: Case) -> Template:
    return Template(
        n_segments=max(len(case.segments), 1 + max(s.segment_index for s in case.slots)),
        slots=tuple((s.segment_index, s.slot_type) for s in case.slots),
        markers=tuple(s.marker for s in case.slots),
    )


@dataclass(frozen=True)
class ReportSegment:
    site: str
    slot_ks: tuple[int, ...]


@dataclass(frozen=True)
class ParsedReport:
    case_id: str
    n_images: int
    segments: tuple[ReportSegment, ...]
    slots: tuple[SlotSpec, ...]
    template: Template

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "n_images": self.n_images,
            "segments": [{"site": s.site, "slots": list(s.slot_ks)} for s in self.segments],
            "slots": [
                {
                    "k": s.k,
                    "segment_index": s.segment_index,
                    "slot_type": s.slot_type.name,
                    "marker": s.marker,
                    "truth_term": s.truth_term,
                }
                for s in self.slots
            ],
            "template": self.template.to_json(),
        }


_CASE_RE = re.compile(r"^CASE\s+(\S+)\s+IMAGES=(\d+)$")
_SEG_RE = re.compile(r"^SEG\s+(\S.*)$")
_FIELD_RE = re.compile(r"^FIELD\s+(DIAG|GRADE|RES)(?:\(([^()=\s]+)\))?\s*=\s*(.*)$")


def parse_report(raw: str, vocab: Vocabulary) -> ParsedReport:
    case_id: Optional[str] = None
    n_images = 0
    segments: list[tuple[str, list[int]]] = []
    slots: list[SlotSpec] = []
    for lineno, line in enumerate(raw.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if case_id is None:
            m = _CASE_RE.match(line)
            if not m:
                raise GrammarError("expected 'CASE <id> IMAGES=<J>' header", lineno)
            case_id, n_images = m.group(1), int(m.group(2))
            if n_images < 1:
                raise GrammarError("IMAGES must be >= 1", lineno)
            continue
        if m := _SEG_RE.match(line):
            segments.append((" ".join(m.group(1).split()), []))
            continue
        if m := _FIELD_RE.match(line):
            if not segments:
                raise GrammarError("FIELD before any SEG", lineno)
            tag, marker, surface = SlotType[m.group(1)], m.group(2), m.group(3).strip()
            if marker is not None and tag != SlotType.RES:
                raise GrammarError(f"marker only allowed on RES fields, got {tag.name}({marker})", lineno)
            if not surface:
                raise GrammarError("empty field value", lineno)
            term_id = vocab.resolve(surface)
            if term_id is None:
                raise UnknownTerm(surface, lineno)
            term_type = vocab.terms[term_id].slot_type
            if term_type != tag:
                raise TypeMismatch(f"{surface!r} is a {term_type.name} term in a {tag.name} field", lineno)
            k = len(slots)
            slots.append(SlotSpec(k, len(segments) - 1, tag, term_id, marker))
            segments[-1][1].append(k)
            continue
        raise GrammarError(f"unrecognised line {line!r}", lineno)
    if case_id is None:
        raise GrammarError("empty report", 1)
    if not segments:
        raise GrammarError("report has no segments", 1)
    if not slots:
        raise GrammarError("report has no slots", 1)
    template = Template(
        n_segments=len(segments),
        slots=tuple((s.segment_index, s.slot_type) for s in slots),
        markers=tuple(s.marker for s in slots),
    )
    return ParsedReport(
        case_id=case_id,
        n_images=n_images,
        segments=tuple(ReportSegment(site, tuple(ks)) for site, ks in segments),
        slots=tuple(slots),
        template=template,
    )


def render_report(parsed: ParsedReport, vocab: Vocabulary) -> str:
    """Canonical text form; truth terms are written with their canonical surface."""
    lines = [f"CASE {parsed.case_id} IMAGES={parsed.n_images}"]
    for seg in parsed.segments:
        lines.append(f"SEG {seg.site}")
        for k in seg.slot_ks:
            slot = parsed.slots[k]
            tag = slot.slot_type.name if slot.marker is None else f"RES({slot.marker})"
            if slot.truth_term is None:
                value = f"[{slot.slot_type.name}]"
            else:
                value = vocab.terms[vocab.canonical(slot.truth_term)].surface
            lines.append(f"FIELD {tag}={value}")
    return "\n".join(lines) + "\n"


def parse_outcome(text: str, vocab: Vocabulary) -> str:
    """Stable JSON of a parse: slots, template and canonical render, or the error class and line."""
    try:
        parsed = parse_report(text, vocab)
    except ReportError as exc:
        out = {"error": type(exc).__name__, "line": getattr(exc, "line", None)}
    else:
        out = parsed.to_json()
        out["canonical"] = render_report(parsed, vocab)
    return json.dumps(out, indent=1, sort_keys=True) + "\n"


def parse_report_file(path, vocab: Vocabulary) -> list[ParsedReport]:
    """A ``.txt`` file holds one report; a ``.jsonl`` file holds records with a ``report`` key."""
    path = Path(path)
    if path.suffix == ".jsonl":
        out = []
        for line in path.read_text().splitlines():
            if line.strip():
                out.append(parse_report(json.loads(line)["report"], vocab))
        return out
    return [parse_report(path.read_text(), vocab)]
