"""Sentence-image pairs with pre-extracted phrase/region features.

On disk a corpus is a ``manifest.json`` plus one feature blob::

    features.bin := b"IECIFEAT" | u32 version | record*
    record       := u32 count | u32 dim | float32[count * dim]

All integers and floats are little-endian. Pair records in the manifest point
at the byte offset of their phrase and region records.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"IECIFEAT"
BLOB_VERSION = 1
MANIFEST_VERSION = 1
MAX_REGIONS = 100
SPLITS = ("train", "val", "test")
IMPLICIT_TAGS = ("CU", "CCU", "SRU", "NU")
RELATION_TAGS = IMPLICIT_TAGS + ("EXPLICIT",)

# Share of commonsense-understanding among implicit relations; the rest is
# split evenly across the other three implicit types.
CU_SHARE = 0.345


class CorpusError(ValueError):
    pass


class ManifestParseError(CorpusError):
    pass


class CorpusValidationError(CorpusError):
    pass


class SynthConfigError(CorpusError):
    pass


@dataclass(frozen=True)
class Region:
    region_id: int
    box: tuple
    embedding: np.ndarray


@dataclass(frozen=True)
class Phrase:
    phrase_id: int
    embedding: np.ndarray
    text: Optional[str] = None


@dataclass
class PairedSample:
    """One sentence-image pair, features stored as dense matrices."""

    pair_id: int
    phrase_ids: np.ndarray          # [n] int
    phrase_features: np.ndarray     # [n, d_p]
    region_ids: np.ndarray          # [m] int
    region_features: np.ndarray     # [m, d_r]
    boxes: np.ndarray               # [m, 4] x1, y1, x2, y2
    phrase_texts: Optional[list] = None

    @property
    def n(self) -> int:
        return len(self.phrase_ids)

    @property
    def m(self) -> int:
        return len(self.region_ids)

    @property
    def sentence(self) -> list[Phrase]:
        texts = self.phrase_texts or [None] * self.n
        return [Phrase(int(i), e, t) for i, e, t in zip(self.phrase_ids, self.phrase_features, texts)]

    @property
    def image(self) -> list[Region]:
        return [Region(int(i), tuple(float(v) for v in b), e)
                for i, b, e in zip(self.region_ids, self.boxes, self.region_features)]

    def phrase_index(self, phrase_id: int) -> int:
        hits = np.flatnonzero(self.phrase_ids == phrase_id)
        if hits.size == 0:
            raise KeyError(phrase_id)
        return int(hits[0])

    def region_index(self, region_id: int) -> int:
        hits = np.flatnonzero(self.region_ids == region_id)
        if hits.size == 0:
            raise KeyError(region_id)
        return int(hits[0])


@dataclass(frozen=True)
class GoldAnnotation:
    pair_id: int
    phrase_id: int
    gold_region_ids: tuple
    relation_tag: str

    @property
    def implicit(self) -> bool:
        return self.relation_tag != "EXPLICIT"


@dataclass
class GroundingCorpus:
    d_p: int
    d_r: int
    splits: dict = field(default_factory=lambda: {s: [] for s in SPLITS})
    annotations: list = field(default_factory=list)

    def __post_init__(self):
        for s in SPLITS:
            self.splits.setdefault(s, [])
        self._by_id = None

    def pair(self, pair_id: int) -> PairedSample:
        if self._by_id is None:
            self._by_id = {p.pair_id: p for s in SPLITS for p in self.splits[s]}
        return self._by_id[pair_id]

    def split_of(self, pair_id: int) -> str:
        for s in SPLITS:
            if any(p.pair_id == pair_id for p in self.splits[s]):
                return s
        raise KeyError(pair_id)

    def annotations_for(self, split: str) -> list[GoldAnnotation]:
        ids = {p.pair_id for p in self.splits[split]}
        return [a for a in self.annotations if a.pair_id in ids]

    def validate(self) -> "GroundingCorpus":
        validate_corpus(self)
        return self


# --- validation ---------------------------------------------------------------

def validate_corpus(corpus: GroundingCorpus) -> None:
    seen: dict[int, str] = {}
    for split in SPLITS:
        for p in corpus.splits[split]:
            pid = p.pair_id
            if pid in seen:
                raise CorpusValidationError(f"pair_id {pid} appears in both {seen[pid]} and {split}")
            seen[pid] = split
            _validate_pair(p, corpus.d_p, corpus.d_r)

    keys = set()
    for a in corpus.annotations:
        split = seen.get(a.pair_id)
        if split is None:
            raise CorpusValidationError(f"annotation cites unknown pair_id {a.pair_id}")
        if split == "train":
            raise CorpusValidationError(f"train pair_id {a.pair_id} carries a phrase-region annotation")
        if a.relation_tag not in RELATION_TAGS:
            raise CorpusValidationError(f"pair_id {a.pair_id}: unknown relation tag {a.relation_tag!r}")
        if not a.gold_region_ids:
            raise CorpusValidationError(f"pair_id {a.pair_id} phrase {a.phrase_id}: empty gold region set")
        if (a.pair_id, a.phrase_id) in keys:
            raise CorpusValidationError(f"pair_id {a.pair_id} phrase {a.phrase_id} annotated twice")
        keys.add((a.pair_id, a.phrase_id))
        p = corpus.pair(a.pair_id)
        if a.phrase_id not in set(p.phrase_ids.tolist()):
            raise CorpusValidationError(f"pair_id {a.pair_id}: annotation cites absent phrase_id {a.phrase_id}")
        rids = set(p.region_ids.tolist())
        for r in a.gold_region_ids:
            if r not in rids:
                raise CorpusValidationError(f"pair_id {a.pair_id}: annotation cites absent region_id {r}")


def _validate_pair(p: PairedSample, d_p: int, d_r: int) -> None:
    pid = p.pair_id
    if p.n < 1:
        raise CorpusValidationError(f"pair_id {pid}: sentence has no phrases")
    if p.m < 1:
        raise CorpusValidationError(f"pair_id {pid}: image has no regions")
    if p.m > MAX_REGIONS:
        raise CorpusValidationError(f"pair_id {pid}: {p.m} regions exceeds cap of {MAX_REGIONS}")
    if p.phrase_features.shape != (p.n, d_p):
        raise CorpusValidationError(
            f"pair_id {pid}: phrase features {list(p.phrase_features.shape)} != [{p.n}, {d_p}]")
    if p.region_features.shape != (p.m, d_r):
        raise CorpusValidationError(
            f"pair_id {pid}: region features {list(p.region_features.shape)} != [{p.m}, {d_r}]")
    if p.boxes.shape != (p.m, 4):
        raise CorpusValidationError(f"pair_id {pid}: boxes {list(p.boxes.shape)} != [{p.m}, 4]")
    if len(set(p.region_ids.tolist())) != p.m or len(set(p.phrase_ids.tolist())) != p.n:
        raise CorpusValidationError(f"pair_id {pid}: duplicate phrase or region ids")
    if not (np.isfinite(p.phrase_features).all() and np.isfinite(p.region_features).all()):
        raise CorpusValidationError(f"pair_id {pid}: non-finite feature values")
    b = p.boxes
    bad = ~((b[:, 0] < b[:, 2]) & (b[:, 1] < b[:, 3]))
    if bad.any():
        rid = int(p.region_ids[np.flatnonzero(bad)[0]])
        raise CorpusValidationError(f"pair_id {pid}: region {rid} has a degenerate box")
    if p.phrase_texts is not None and len(p.phrase_texts) != p.n:
        raise CorpusValidationError(f"pair_id {pid}: phrase text count != phrase count")


# --- feature blob -------------------------------------------------------------

class _BlobWriter:
    def __init__(self):
        self.chunks = [MAGIC, struct.pack("<I", BLOB_VERSION)]
        self.offset = len(MAGIC) + 4

    def add(self, mat: np.ndarray) -> int:
        mat = np.asarray(mat)
        count, dim = mat.shape
        start = self.offset
        payload = np.ascontiguousarray(mat, dtype="<f4").tobytes()
        self.chunks.append(struct.pack("<II", count, dim))
        self.chunks.append(payload)
        self.offset += 8 + len(payload)
        return start

    def getvalue(self) -> bytes:
        return b"".join(self.chunks)


def _read_record(buf: bytes, offset: int, path: Path) -> np.ndarray:
    if offset < len(MAGIC) + 4 or offset + 8 > len(buf):
        raise CorpusValidationError(f"{path}: record offset {offset} out of range")
    count, dim = struct.unpack_from("<II", buf, offset)
    start = offset + 8
    end = start + 4 * count * dim
    if end > len(buf):
        raise CorpusValidationError(f"{path}: record at offset {offset} truncated")
    arr = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=start)
    return arr.astype(np.float64).reshape(count, dim)


def _open_blob(path: Path) -> bytes:
    if not path.is_file():
        raise CorpusValidationError(f"feature blob not found: {path}")
    buf = path.read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise CorpusValidationError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", buf, len(MAGIC))
    if version != BLOB_VERSION:
        raise CorpusValidationError(f"{path}: unsupported blob version {version}")
    return buf


# --- manifest I/O -------------------------------------------------------------

def load_corpus(manifest_path) -> GroundingCorpus:
    manifest_path = Path(manifest_path)
    text = manifest_path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestParseError(f"{manifest_path}: line {e.lineno}: {e.msg}") from None
    try:
        d_p, d_r = int(doc["d_p"]), int(doc["d_r"])
        splits_doc = doc["splits"]
        ann_doc = doc.get("annotations", [])
    except (KeyError, TypeError) as e:
        raise ManifestParseError(f"{manifest_path}: missing key {e}") from None
    if doc.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise ManifestParseError(f"{manifest_path}: unsupported manifest version {doc.get('version')}")

    root = manifest_path.parent
    blobs: dict[str, bytes] = {}

    def fetch(ref) -> np.ndarray:
        name = ref["blob"]
        if name not in blobs:
            blobs[name] = _open_blob(root / name)
        return _read_record(blobs[name], int(ref["offset"]), root / name)

    corpus = GroundingCorpus(d_p=d_p, d_r=d_r)
    for split in splits_doc:
        if split not in SPLITS:
            raise ManifestParseError(f"{manifest_path}: unknown split {split!r}")
        for rec in splits_doc[split]:
            try:
                sample = PairedSample(
                    pair_id=int(rec["pair_id"]),
                    phrase_ids=np.asarray(rec["phrase_ids"], dtype=np.int64),
                    phrase_features=fetch(rec["phrase_features"]),
                    region_ids=np.asarray(rec["region_ids"], dtype=np.int64),
                    region_features=fetch(rec["region_features"]),
                    boxes=np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4),
                    phrase_texts=rec.get("phrase_texts"),
                )
            except (KeyError, TypeError) as e:
                raise ManifestParseError(f"{manifest_path}: pair record missing {e}") from None
            if len(sample.phrase_ids) != rec.get("n_phrases", sample.n) or \
                    len(sample.region_ids) != rec.get("n_regions", sample.m):
                raise CorpusValidationError(f"pair_id {sample.pair_id}: declared counts disagree with ids")
            corpus.splits[split].append(sample)
    for a in ann_doc:
        corpus.annotations.append(GoldAnnotation(
            pair_id=int(a["pair_id"]),
            phrase_id=int(a["phrase_id"]),
            gold_region_ids=tuple(int(r) for r in a["gold_region_ids"]),
            relation_tag=str(a["relation_tag"]),
        ))
    validate_corpus(corpus)
    return corpus


def write_corpus(corpus: GroundingCorpus, out_dir, blob_name: str = "features.bin") -> Path:
    """Write ``manifest.json`` + ``blob_name`` into ``out_dir``; returns the manifest path."""
    validate_corpus(corpus)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob = _BlobWriter()
    splits_doc = {}
    for split in SPLITS:
        recs = []
        for p in corpus.splits[split]:
            recs.append({
                "pair_id": int(p.pair_id),
                "n_phrases": p.n,
                "n_regions": p.m,
                "phrase_ids": [int(i) for i in p.phrase_ids],
                "phrase_texts": p.phrase_texts,
                "region_ids": [int(i) for i in p.region_ids],
                "boxes": [[float(v) for v in b] for b in p.boxes],
                "phrase_features": {"blob": blob_name, "offset": blob.add(p.phrase_features)},
                "region_features": {"blob": blob_name, "offset": blob.add(p.region_features)},
            })
        splits_doc[split] = recs
    doc = {
        "version": MANIFEST_VERSION,
        "d_p": corpus.d_p,
        "d_r": corpus.d_r,
        "splits": splits_doc,
        "annotations": [
            {"pair_id": a.pair_id, "phrase_id": a.phrase_id,
             "gold_region_ids": list(a.gold_region_ids), "relation_tag": a.relation_tag}
            for a in corpus.annotations
        ],
    }
    (out_dir / blob_name).write_bytes(blob.getvalue())
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return manifest


# --- stratification -----------------------------------------------------------

def stratify(annotations: Iterable[GoldAnnotation]) -> dict[str, list[GoldAnnotation]]:
    """Partition annotations into Implicit / Explicit, plus their union Full."""
    full = list(annotations)
    return {
        "Implicit": [a for a in full if a.relation_tag != "EXPLICIT"],
        "Explicit": [a for a in full if a.relation_tag == "EXPLICIT"],
        "Full": full,
    }


# --- synthetic corpora --------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs for :func:`synth_generate`.

    Region embeddings are ``context centroid + unit Gaussian``. An explicit
    phrase copies its gold region; an implicit phrase mixes the gold region
    with a randomly designated context centroid (``implicit_mix`` weight on
    the centroid). Both get isotropic noise of std ``noise_sigma``.
    """

    train_pairs: int = 200
    val_pairs: int = 0
    test_pairs: int = 50
    n_phrases: int = 4
    n_regions: int = 12
    dim: int = 32
    implicit_fraction: float = 0.1
    noise_sigma: float = 0.1
    n_contexts: int = 8
    context_scale: float = 1.0
    implicit_mix: float = 0.5
    nu_extra_gold: int = 1
    canvas: int = 512
    seed: int = 0

    def check(self) -> None:
        if not (0.0 <= self.implicit_fraction <= 1.0) or math.isnan(self.implicit_fraction):
            raise SynthConfigError(f"implicit_fraction must lie in [0, 1], got {self.implicit_fraction}")
        if not (0.0 <= self.implicit_mix <= 1.0):
            raise SynthConfigError(f"implicit_mix must lie in [0, 1], got {self.implicit_mix}")
        if self.n_phrases < 1 or self.n_regions < 1:
            raise SynthConfigError("need at least one phrase and one region per pair")
        if self.n_regions > MAX_REGIONS:
            raise SynthConfigError(f"n_regions {self.n_regions} exceeds cap of {MAX_REGIONS}")
        if self.n_phrases > self.n_regions:
            raise SynthConfigError("n_phrases must not exceed n_regions (one distinct gold region each)")
        if min(self.train_pairs, self.val_pairs, self.test_pairs) < 0 or self.dim < 1:
            raise SynthConfigError("split sizes must be >= 0 and dim >= 1")
        if self.noise_sigma < 0 or self.n_contexts < 1:
            raise SynthConfigError("noise_sigma must be >= 0 and n_contexts >= 1")


def relation_probs() -> dict[str, float]:
    rest = (1.0 - CU_SHARE) / 3.0
    return {"CU": CU_SHARE, "CCU": rest, "SRU": rest, "NU": rest}


def _f32(a: np.ndarray) -> np.ndarray:
    # Match the on-disk encoding so generated and reloaded corpora are identical.
    return a.astype(np.float32).astype(np.float64)


def _random_boxes(rng: np.random.Generator, m: int, canvas: int, max_iou: float = 0.3) -> np.ndarray:
    from .evaluation import iou

    boxes: list = []
    lo, hi = canvas // 16, canvas // 2
    while len(boxes) < m:
        for _ in range(200):
            w, h = rng.integers(lo, hi, size=2)
            x1 = rng.integers(0, canvas - w)
            y1 = rng.integers(0, canvas - h)
            cand = (float(x1), float(y1), float(x1 + w), float(y1 + h))
            if all(iou(cand, b) < max_iou for b in boxes):
                break
        boxes.append(cand)
    return np.asarray(boxes, dtype=np.float64)


def synth_generate(cfg: SynthConfig) -> GroundingCorpus:
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    contexts = rng.normal(size=(cfg.n_contexts, d)) * cfg.context_scale
    tags = list(relation_probs())
    tag_p = np.array([relation_probs()[t] for t in tags])

    corpus = GroundingCorpus(d_p=d, d_r=d)
    pair_id = 0
    for split, count in (("train", cfg.train_pairs), ("val", cfg.val_pairs), ("test", cfg.test_pairs)):
        for _ in range(count):
            m, n = cfg.n_regions, cfg.n_phrases
            ctx = rng.integers(0, cfg.n_contexts, size=m)
            regions = contexts[ctx] + rng.normal(size=(m, d))
            gold = rng.permutation(m)[:n]
            phrases = np.empty((n, d))
            for li in range(n):
                g = gold[li]
                is_implicit = rng.random() < cfg.implicit_fraction
                tag = "EXPLICIT"
                if is_implicit:
                    tag = tags[int(rng.choice(len(tags), p=tag_p))]
                    designated = contexts[rng.integers(0, cfg.n_contexts)]
                    base = (1.0 - cfg.implicit_mix) * regions[g] + cfg.implicit_mix * designated
                else:
                    base = regions[g]
                phrases[li] = base + cfg.noise_sigma * rng.normal(size=d)
                gold_ids = [int(g)]
                if tag == "NU" and cfg.nu_extra_gold > 0:
                    others = [r for r in range(m) if r not in gold_ids]
                    extra = rng.choice(others, size=min(cfg.nu_extra_gold, len(others)), replace=False)
                    gold_ids += sorted(int(e) for e in extra)
                if split != "train":
                    corpus.annotations.append(GoldAnnotation(pair_id, li, tuple(gold_ids), tag))
            corpus.splits[split].append(PairedSample(
                pair_id=pair_id,
                phrase_ids=np.arange(n, dtype=np.int64),
                phrase_features=_f32(phrases),
                region_ids=np.arange(m, dtype=np.int64),
                region_features=_f32(regions),
                boxes=_random_boxes(rng, m, cfg.canvas),
            ))
            pair_id += 1
    validate_corpus(corpus)
    return corpus
