"""Planted-signal stand-in for the frozen visual/text encoders.

Every image's patches are ``noise_sigma * N(0, I) + signal_strength * signal``
where ``signal`` sums, over the slots assigned to that image, the fixed
projection of the slot's truth-term embedding plus a fixed site marker for
the slot position. Segment embeddings are the mean of their slots' term
embeddings plus gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .report import (
    Case,
    ImageFeatures,
    Malignancy,
    Polarity,
    SegmentText,
    SlotSpec,
    SlotType,
    Term,
    Vocabulary,
)

# stream ids mixed into the seed sequence so each artifact has its own RNG
_CASE_STREAM = 0
_PROJ_STREAM = 1
_MARKER_STREAM = 2
_MAX_SLOTS = 16


class DimensionTooSmall(ValueError):
    pass


_B, _M, _NA = Malignancy.BENIGN, Malignancy.MALIGNANT, Malignancy.NOT_APPLICABLE
# benign/malignant look-alikes share a coarse class (consecutive pairs)
_DIAG_NAMES = [
    ("adenoma", _B), ("adenocarcinoma", _M),
    ("leiomyoma", _B), ("leiomyosarcoma", _M),
    ("fibroadenoma", _B), ("invasive ductal carcinoma", _M),
    ("chronic inflammation", _B), ("dysplasia", _M),
    ("normal tissue", _NA), ("squamous cell carcinoma", _M),
    ("hyperplasia", _B), ("lymphoma", _M),
]
_SYNONYM_NAMES = {
    "adenoma": "adenomatous polyp",
    "adenocarcinoma": "adenocarcinoma nos",
    "leiomyoma": "uterine fibroid",
}


def make_vocabulary(n_diag: int = 12, n_grade: int = 4, n_res: int = 4, n_synonym_terms: int = 1,
                    n_coarse: int = 12) -> Vocabulary:
    """Structural vocabulary fixture.

    Coarse classes: DIAG terms share classes 0..7 in benign/malignant pairs,
    GRADE ranks split low/high into 8/9, RES negative/positive into 10/11.
    The last ``n_synonym_terms`` DIAG entries are synonym variants of the
    first DIAG terms. Default sizes give the 20-term desk vocabulary.
    """
    if n_coarse < 12:
        raise ValueError("fixture taxonomy needs 12 coarse classes")
    terms: list[Term] = []
    synonyms: dict[str, int] = {}
    n_base = n_diag - n_synonym_terms
    for i in range(n_base):
        if i < len(_DIAG_NAMES):
            surface, malig = _DIAG_NAMES[i]
        else:
            surface = f"diagnosis {i:03d}"
            malig = (Malignancy.BENIGN, Malignancy.MALIGNANT, Malignancy.NOT_APPLICABLE)[i % 3]
        terms.append(Term(len(terms), surface, SlotType.DIAG, (i // 2) % 8, malig))
    for j in range(n_synonym_terms):
        target = terms[j % n_base]
        surface = _SYNONYM_NAMES.get(target.surface, f"{target.surface} variant {j}")
        if j >= n_base or surface in synonyms:
            surface = f"{target.surface} variant {j}"
        terms.append(Term(len(terms), surface, SlotType.DIAG, target.coarse_class, target.malignancy))
        synonyms[surface] = target.id
    for g in range(n_grade):
        terms.append(Term(len(terms), f"grade {g + 1}", SlotType.GRADE, 8 if g < max(n_grade // 2, 1) else 9,
                          grade_rank=g))
    for r in range(n_res):
        if r == 0:
            terms.append(Term(len(terms), "negative", SlotType.RES, 10, polarity=Polarity.NEGATIVE, quant_level=0))
        elif r <= 3:
            terms.append(Term(len(terms), f"positive ({r}+)", SlotType.RES, 11,
                              polarity=Polarity.POSITIVE, quant_level=r))
        else:
            pol = Polarity.NEGATIVE if r % 2 == 0 else Polarity.POSITIVE
            terms.append(Term(len(terms), f"result {r:03d}", SlotType.RES, 10 if pol == Polarity.NEGATIVE else 11,
                              polarity=pol, quant_level=0 if pol == Polarity.NEGATIVE else 1 + r % 3))
    return Vocabulary(terms, synonyms, n_coarse)


def paper_scale_vocabulary() -> Vocabulary:
    return make_vocabulary(184, 93, 27, n_synonym_terms=20)


@dataclass(frozen=True)
class VocabEmbeddings:
    table: np.ndarray
    frozen: bool = True


def gen_vocab_embeddings(vocab: Vocabulary, d_txt: int, seed: int, max_cos: float = 0.95,
                         max_redraws: int = 1000) -> VocabEmbeddings:
    if d_txt < 8:
        raise DimensionTooSmall(f"d_txt={d_txt} < 8")
    rng = np.random.default_rng([seed, len(vocab), d_txt])
    rows: list[np.ndarray] = []
    for i in range(len(vocab)):
        for _ in range(max_redraws):
            v = rng.standard_normal(d_txt)
            v /= np.linalg.norm(v)
            if not rows or np.max(np.stack(rows) @ v) < max_cos:
                break
        else:
            raise DimensionTooSmall(f"cannot separate {len(vocab)} terms below cosine {max_cos} at d_txt={d_txt}")
        rows.append(v)
    table = np.stack(rows)
    table /= np.linalg.norm(table, axis=1, keepdims=True)
    table.setflags(write=False)
    return VocabEmbeddings(table)


@dataclass
class GeneratorSpec:
    seed: int = 0
    n_cases: int = 2000
    d_vis: int = 64
    d_txt: int = 96
    # P(J=j) for j = 1..len(j_distribution)
    j_distribution: tuple[float, ...] = (0.6,) + (0.4 / 7,) * 7
    patches_per_image: tuple[int, int] = (8, 32)
    signal_strength: float = 0.8
    noise_sigma: float = 0.1
    text_noise_sigma: Optional[float] = None
    vocab_seed: int = 0

    def __post_init__(self):
        self.j_distribution = tuple(float(p) for p in self.j_distribution)
        self.patches_per_image = tuple(int(n) for n in self.patches_per_image)
        if min(self.d_vis, self.d_txt) < 8:
            raise ValueError("dimensions must be >= 8")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError("signal_strength must lie in [0, 1]")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be > 0")
        if abs(sum(self.j_distribution) - 1.0) > 1e-9:
            raise ValueError("j_distribution must sum to 1")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Generator:
    """Holds the fixed (seed-determined) projection, site markers, and vocabulary embeddings."""

    spec: GeneratorSpec
    vocab: Vocabulary
    embeddings: VocabEmbeddings = field(init=False)
    projection: np.ndarray = field(init=False)
    markers: np.ndarray = field(init=False)

    def __post_init__(self):
        s = self.spec
        self.embeddings = gen_vocab_embeddings(self.vocab, s.d_txt, s.vocab_seed)
        proj_rng = np.random.default_rng([s.seed, _PROJ_STREAM])
        self.projection = proj_rng.standard_normal((s.d_txt, s.d_vis)) / np.sqrt(s.d_vis)
        mrk_rng = np.random.default_rng([s.seed, _MARKER_STREAM])
        m = mrk_rng.standard_normal((_MAX_SLOTS, s.d_vis))
        self.markers = m / np.linalg.norm(m, axis=1, keepdims=True)
        self._canon = {t: self.vocab.canonical_ids(t) for t in SlotType}

    def _draw_template(self, rng: np.random.Generator, n_images: int) -> list[tuple[int, SlotType, Optional[str]]]:
        """Segment layout such that no image receives two slots of one type under round-robin assignment."""
        for _ in range(64):
            n_seg = 1 if n_images == 1 else int(rng.integers(max(1, n_images // 2), n_images + 1))
            slots: list[tuple[int, SlotType, Optional[str]]] = []
            for seg in range(n_seg):
                slots.append((seg, SlotType.DIAG, None))
                if rng.random() < 0.5:
                    slots.append((seg, SlotType.GRADE, None))
                n_res = int(rng.choice(3, p=[0.5, 0.25, 0.25]))
                for marker in ("ER", "PR")[:n_res]:
                    slots.append((seg, SlotType.RES, marker))
            if len(slots) > _MAX_SLOTS:
                continue
            seen = set()
            ok = True
            for k, (_, typ, _) in enumerate(slots):
                key = (k % n_images, typ)
                if key in seen:
                    ok = False
                    break
                seen.add(key)
            if ok:
                return slots
        return [(0, SlotType.DIAG, None)]

    def case(self, case_index: int) -> Case:
        s = self.spec
        if not 0 <= case_index < s.n_cases:
            raise IndexError(case_index)
        rng = np.random.default_rng([s.seed, _CASE_STREAM, case_index])
        n_images = 1 + int(rng.choice(len(s.j_distribution), p=s.j_distribution))
        layout = self._draw_template(rng, n_images)
        truths = [int(rng.choice(self._canon[typ])) for _, typ, _ in layout]
        emb = self.embeddings.table

        signals = np.zeros((n_images, s.d_vis))
        for k, truth in enumerate(truths):
            signals[k % n_images] += emb[truth] @ self.projection + self.markers[k]
        lo, hi = s.patches_per_image
        images = []
        for j in range(n_images):
            n = int(rng.integers(lo, hi + 1))
            noise = rng.standard_normal((n, s.d_vis))
            images.append(ImageFeatures(s.noise_sigma * noise + s.signal_strength * signals[j]))

        n_seg = 1 + max(seg for seg, _, _ in layout)
        txt_sigma = s.noise_sigma if s.text_noise_sigma is None else s.text_noise_sigma
        segments = []
        for seg in range(n_seg):
            ks = [k for k, (sg, _, _) in enumerate(layout) if sg == seg]
            mean = emb[[truths[k] for k in ks]].mean(axis=0)
            segments.append(SegmentText(mean + txt_sigma * rng.standard_normal(s.d_txt), raw=f"site {seg}"))

        slots = [SlotSpec(k, seg, typ, truths[k], marker) for k, (seg, typ, marker) in enumerate(layout)]
        coarse = np.zeros(self.vocab.n_coarse, dtype=np.int8)
        for t in truths:
            coarse[self.vocab.terms[t].coarse_class] = 1
        return Case(f"c{s.seed}-{case_index:06d}", images, segments, slots, coarse)

    def dataset(self, indices: Optional[Iterable[int]] = None) -> list[Case]:
        idx = range(self.spec.n_cases) if indices is None else indices
        return [self.case(i) for i in idx]


def gen_case(spec: GeneratorSpec, case_index: int, vocab: Optional[Vocabulary] = None) -> Case:
    return Generator(spec, vocab or make_vocabulary()).case(case_index)


def split_indices(n_cases: int, holdout_every: int = 10) -> tuple[list[int], list[int]]:
    """Deterministic 90/10 split: every ``holdout_every``-th case is held out."""
    test = [i for i in range(n_cases) if i % holdout_every == holdout_every - 1]
    held = set(test)
    return [i for i in range(n_cases) if i not in held], test


# --- dataset files --------------------------------------------------------

def case_to_json(case: Case) -> dict:
    return {
        "case_id": case.case_id,
        "images": [img.patches.tolist() for img in case.images],
        "segments": [{"embedding": seg.embedding.tolist(), "raw": seg.raw} for seg in case.segments],
        "slots": [
            {"k": s.k, "segment_index": s.segment_index, "slot_type": s.slot_type.name,
             "truth_term": s.truth_term, "marker": s.marker}
            for s in case.slots
        ],
        "coarse_labels": case.coarse_labels.tolist(),
    }


def case_from_json(rec: dict) -> Case:
    return Case(
        case_id=rec["case_id"],
        images=[ImageFeatures(np.asarray(p, dtype=np.float64)) for p in rec["images"]],
        segments=[SegmentText(np.asarray(s["embedding"], dtype=np.float64), s.get("raw")) for s in rec["segments"]],
        slots=[
            SlotSpec(int(s["k"]), int(s["segment_index"]), SlotType[s["slot_type"]], s.get("truth_term"),
                     s.get("marker"))
            for s in rec["slots"]
        ],
        coarse_labels=np.asarray(rec["coarse_labels"], dtype=np.int8),
    )


def write_dataset(cases: list[Case], path, sidecar: dict) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for case in cases:
            fh.write(json.dumps(case_to_json(case), separators=(",", ":")) + "\n")
    Path(str(path) + ".config.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")


def read_dataset(path, vocab: Optional[Vocabulary] = None) -> tuple[list[Case], dict]:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".config.json").read_text())
    cases = []
    with path.open() as fh:
        for line in fh:
            if line.strip():
                case = case_from_json(json.loads(line))
                if case.images[0].patches.shape[1] != sidecar["d_vis"]:
                    raise ValueError(f"{case.case_id}: d_vis does not match sidecar")
                if vocab is not None:
                    case.check(vocab)
                cases.append(case)
    return cases, sidecar


def save_embeddings(emb: VocabEmbeddings, path) -> None:
    np.save(path, emb.table)


def load_embeddings(path) -> VocabEmbeddings:
    table = np.load(path)
    table.setflags(write=False)
    return VocabEmbeddings(table)
