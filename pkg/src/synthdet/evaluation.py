"""Detection and proposal scoring: IoU matching, AP / mAP, recall at IoU."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import MalformedManifest, MissingFile


@dataclass(frozen=True)
class Detection:
    image: str
    label: str
    bbox: tuple[float, float, float, float]
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"non-finite detection score {self.score}")
        _check_box(self.bbox)


@dataclass(frozen=True)
class GroundTruth:
    image: str
    label: str
    bbox: tuple[float, float, float, float]


def _check_box(b) -> None:
    if len(b) != 4 or not (b[2] >= b[0] and b[3] >= b[1]):
        raise ValueError(f"invalid box {b!r}; expected [x_min, y_min, x_max, y_max]")


def iou(a, b) -> float:
    """Intersection over union; max edges are exclusive so area = (x1-x0)*(y1-y0)."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def sort_by_score(dets: list[Detection]) -> list[Detection]:
    # stable sort keeps input order among equal scores
    return sorted(dets, key=lambda d: -d.score)


def match_detections(dets: list[Detection], gts: list[GroundTruth], iou_thresh: float = 0.5) -> list[bool]:
    """Greedy TP/FP flags for one class, in descending-score order.

    Each detection takes the still-unmatched ground truth of its image with
    the highest IoU, if that IoU reaches ``iou_thresh``.
    """
    by_image: dict[str, list[GroundTruth]] = defaultdict(list)
    for g in gts:
        by_image[g.image].append(g)
    used = {img: [False] * len(lst) for img, lst in by_image.items()}
    flags = []
    for d in sort_by_score(dets):
        cands = by_image.get(d.image, [])
        best, best_iou = -1, -1.0
        for j, g in enumerate(cands):
            if used[d.image][j]:
                continue
            o = iou(d.bbox, g.bbox)
            if o > best_iou:
                best, best_iou = j, o
        if best >= 0 and best_iou >= iou_thresh:
            used[d.image][best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def precision_recall(flags: list[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    rec = tp / n_gt if n_gt > 0 else np.zeros_like(tp)
    prec = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return prec, rec


def average_precision(flags: list[bool], n_gt: int, use_07_metric: bool = False) -> tuple[float, bool]:
    """AP from TP/FP flags already in descending-score order.

    Returns ``(ap, defined)``; ``defined`` is False only when there is
    neither ground truth nor any detection.
    """
    if n_gt == 0:
        return 0.0, len(flags) > 0
    if not flags:
        return 0.0, True
    prec, rec = precision_recall(flags, n_gt)
    if use_07_metric:
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            p = prec[rec >= t].max() if np.any(rec >= t) else 0.0
            ap += p / 11.0
        return float(ap), True
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1])), True


def evaluate_detections(dets: list[Detection], gts: list[GroundTruth], iou_thresh: float = 0.5,
                        use_07_metric: bool = False) -> dict:
    """Per-class AP and mAP over classes with at least one ground truth."""
    labels = sorted({g.label for g in gts} | {d.label for d in dets})
    per_class = {}
    for lab in labels:
        cd = [d for d in dets if d.label == lab]
        cg = [g for g in gts if g.label == lab]
        flags = match_detections(cd, cg, iou_thresh)
        ap, defined = average_precision(flags, len(cg), use_07_metric)
        per_class[lab] = {"ap": ap, "n_gt": len(cg), "n_det": len(cd), "defined": defined}
    scored = [v["ap"] for v in per_class.values() if v["n_gt"] > 0]
    return {"iou": iou_thresh, "metric": "voc07_11pt" if use_07_metric else "all_points",
            "per_class": per_class, "mAP": float(np.mean(scored)) if scored else 0.0}


def recall_at_iou(proposals: dict[str, list], gts: dict[str, list], iou_thresh: float) -> float:
    """Fraction of ground-truth boxes hit by at least one proposal at ``iou_thresh``."""
    total = covered = 0
    for img, boxes in gts.items():
        props = proposals.get(img, [])
        for g in boxes:
            total += 1
            if any(iou(p, g) >= iou_thresh for p in props):
                covered += 1
    return covered / total if total else 0.0


def recall_table(datasets: dict[str, tuple[dict, dict]], thresholds: Iterable[float]) -> dict:
    """``{iou: {dataset: recall}}`` for each threshold and ``(proposals, gts)`` pair."""
    return {float(t): {name: recall_at_iou(p, g, t) for name, (p, g) in datasets.items()}
            for t in thresholds}


# ---------------------------------------------------------------- io

def _read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"missing file: {path}")
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise MalformedManifest(f"{path}:{n}: invalid JSON ({e})") from None
    return rows


def load_detections(path) -> list[Detection]:
    try:
        return [Detection(str(r["image"]), str(r["label"]), tuple(r["bbox"]), float(r["score"]))
                for r in _read_jsonl(path)]
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedManifest(f"{path}: bad detection record ({e})") from None


def load_proposals(path) -> dict[str, list]:
    out: dict[str, list] = defaultdict(list)
    for r in _read_jsonl(path):
        try:
            _check_box(r["bbox"])
            out[str(r["image"])].append(tuple(r["bbox"]))
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedManifest(f"{path}: bad proposal record ({e})") from None
    return dict(out)


def load_ground_truth(source) -> list[GroundTruth]:
    """Ground truth from a run directory (``annotations/*.json``) or a JSONL file."""
    source = Path(source)
    gts = []
    if source.is_dir():
        ann_dir = source / "annotations"
        if not ann_dir.is_dir():
            raise MissingFile(f"no annotations directory in {source}")
        for p in sorted(ann_dir.glob("*.json")):
            doc = json.loads(p.read_text())
            image = doc.get("composite_id", p.stem)
            for o in doc["objects"]:
                gts.append(GroundTruth(image, str(o["label"]), tuple(o["bbox"])))
        return gts
    for r in _read_jsonl(source):
        try:
            gts.append(GroundTruth(str(r["image"]), str(r["label"]), tuple(r["bbox"])))
        except KeyError as e:
            raise MalformedManifest(f"{source}: ground-truth record lacks {e}") from None
    return gts


def gt_boxes_by_image(gts: list[GroundTruth]) -> dict[str, list]:
    out: dict[str, list] = defaultdict(list)
    for g in gts:
        out[g.image].append(g.bbox)
    return dict(out)


def format_ap_table(result: dict) -> str:
    rows = [(lab, v["ap"] * 100, v["n_gt"], v["n_det"]) for lab, v in result["per_class"].items()]
    w = max([len("class"), len("mAP")] + [len(r[0]) for r in rows])
    lines = [f"{'class':<{w}}  {'AP':>6}  {'n_gt':>6}  {'n_det':>6}"]
    for lab, ap, ng, nd in rows:
        lines.append(f"{lab:<{w}}  {ap:6.1f}  {ng:6d}  {nd:6d}")
    lines.append(f"{'mAP':<{w}}  {result['mAP'] * 100:6.1f}")
    return "\n".join(lines)


def format_recall_table(table: dict) -> str:
    names = list(next(iter(table.values())).keys()) if table else []
    w = [max(len(n), 6) for n in names]
    head = "IoU  " + "  ".join(f"{n:>{wi}}" for n, wi in zip(names, w))
    lines = [head]
    for t, row in table.items():
        lines.append(f"{t:<4.2g} " + "  ".join(f"{row[n] * 100:>{wi}.1f}" for n, wi in zip(names, w)))
    return "\n".join(lines)
