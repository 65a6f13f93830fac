"""Region ranking, IoU and Recall@k reporting for phrase grounding."""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .corpus import IMPLICIT_TAGS, GoldAnnotation, stratify

SPLIT_NAMES = ("Implicit", "Explicit", "Full")


class BoxError(ValueError):
    pass


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two ``(x1, y1, x2, y2)`` boxes."""
    for box in (a, b):
        if not (box[0] < box[2] and box[1] < box[3]):
            raise BoxError(f"degenerate box {tuple(box)}")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


@dataclass
class PhrasePrediction:
    pair_id: int
    phrase_id: int
    region_ids: list
    scores: list

    def top(self, k: int) -> list:
        return self.region_ids[:k]


def rank_regions(scores: Sequence[float], region_ids: Sequence[int],
                 pair_id: int = -1, phrase_id: int = -1) -> PhrasePrediction:
    """Sort regions by descending score; ties go to the lower region id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(region_ids)
    if scores.shape != ids.shape:
        raise ValueError(f"{scores.size} scores for {ids.size} regions")
    order = np.lexsort((ids, -scores))
    return PhrasePrediction(pair_id, phrase_id, [int(i) for i in ids[order]],
                            [float(s) for s in scores[order]])


BoxTable = Mapping[int, Mapping[int, Sequence[float]]]


def box_table(corpus) -> dict:
    """``{pair_id: {region_id: box}}`` for every pair in ``corpus``."""
    out = {}
    for split in corpus.splits.values():
        for p in split:
            out[p.pair_id] = {int(r): tuple(float(v) for v in b) for r, b in zip(p.region_ids, p.boxes)}
    return out


def _is_hit(pred: PhrasePrediction, ann: GoldAnnotation, boxes: BoxTable, k: int, thr: float) -> bool:
    table = boxes[ann.pair_id]
    for rid in pred.top(k):
        for gid in ann.gold_region_ids:
            if iou(table[rid], table[gid]) >= thr:
                return True
    return False


def recall_at_k(predictions: Mapping, annotations: Sequence[GoldAnnotation], boxes: BoxTable,
                k: int = 1, iou_threshold: float = 0.5) -> float:
    """Fraction of annotated phrases with any gold box hit by a top-``k`` box.

    ``predictions`` maps ``(pair_id, phrase_id)`` to :class:`PhrasePrediction`.
    A phrase without a prediction counts as a miss.
    """
    if not annotations:
        raise ValueError("recall_at_k needs at least one annotation")
    hits = 0
    for ann in annotations:
        pred = predictions.get((ann.pair_id, ann.phrase_id))
        if pred is None:
            warnings.warn(f"no prediction for pair {ann.pair_id} phrase {ann.phrase_id}; counted as miss",
                          stacklevel=2)
            continue
        hits += _is_hit(pred, ann, boxes, k, iou_threshold)
    return hits / len(annotations)


@dataclass
class EvalReport:
    ks: tuple
    iou_threshold: float
    recall_at: dict = field(default_factory=dict)      # (split, k) -> float | None
    per_relation: dict = field(default_factory=dict)   # tag -> {k: float | None}
    counts: dict = field(default_factory=dict)         # split or tag -> int

    def get(self, split: str, k: int) -> Optional[float]:
        return self.recall_at.get((split, k))

    def to_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "iou_threshold": self.iou_threshold,
            "recall_at": {s: {f"R@{k}": self.recall_at.get((s, k)) for k in self.ks}
                          for s in dict.fromkeys(s for s, _ in self.recall_at)},
            "per_relation": {t: {f"R@{k}": v for k, v in row.items()} for t, row in self.per_relation.items()},
            "counts": dict(self.counts),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "name", "count"] + [f"R@{k}" for k in self.ks])
        for s in dict.fromkeys(s for s, _ in self.recall_at):
            w.writerow(["split", s, self.counts.get(s, 0)] + [_fmt(self.recall_at[(s, k)]) for k in self.ks])
        for t, row in self.per_relation.items():
            w.writerow(["relation", t, self.counts.get(t, 0)] + [_fmt(row[k]) for k in self.ks])
        return buf.getvalue()


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def stratified_report(predictions: Mapping, annotations: Iterable[GoldAnnotation], boxes: BoxTable,
                      ks: Sequence[int] = (1, 5), iou_threshold: float = 0.5,
                      splits: Sequence[str] = SPLIT_NAMES) -> EvalReport:
    """R@k per Implicit/Explicit/Full subset and per implicit relation type.

    Empty subsets are reported as ``None`` (absent), never as zero.
    """
    ks = tuple(int(k) for k in ks)
    strata = stratify(annotations)
    report = EvalReport(ks=ks, iou_threshold=float(iou_threshold))
    for name in splits:
        subset = strata[name]
        report.counts[name] = len(subset)
        for k in ks:
            report.recall_at[(name, k)] = (
                recall_at_k(predictions, subset, boxes, k, iou_threshold) if subset else None)
    for tag in IMPLICIT_TAGS:
        subset = [a for a in strata["Full"] if a.relation_tag == tag]
        report.counts[tag] = len(subset)
        report.per_relation[tag] = {
            k: (recall_at_k(predictions, subset, boxes, k, iou_threshold) if subset else None) for k in ks}
    return report


def prediction_dump(predictions: Mapping, corpus, top: int = 5) -> str:
    """JSON lines, one per phrase, with the ``top`` ranked regions and their boxes."""
    table = box_table(corpus)
    lines = []
    for (pair_id, phrase_id) in sorted(predictions):
        pred = predictions[(pair_id, phrase_id)]
        sample = corpus.pair(pair_id)
        text = None
        if sample.phrase_texts is not None:
            text = sample.phrase_texts[sample.phrase_index(phrase_id)]
        lines.append(json.dumps({
            "pair_id": int(pair_id),
            "phrase_id": int(phrase_id),
            "phrase_text": text,
            "top5": [{"region_id": r, "box": list(table[pair_id][r]), "score": s}
                     for r, s in zip(pred.region_ids[:top], pred.scores[:top])],
        }))
    return "\n".join(lines) + ("\n" if lines else "")


def predict(model, samples: Sequence, batch_size: int = 64) -> dict:
    """Rank every phrase's regions by the model's grounding scores."""
    from .model import Batch

    preds = {}
    for start in range(0, len(samples), batch_size):
        chunk = list(samples[start:start + batch_size])
        scores = model.grounding_scores(Batch.from_samples(chunk))
        for b, s in enumerate(chunk):
            for li, phrase_id in enumerate(s.phrase_ids):
                preds[(s.pair_id, int(phrase_id))] = rank_regions(
                    scores[b, li, :s.m], s.region_ids, s.pair_id, int(phrase_id))
    return preds
