"""Retrieval metrics and reporting.

Instance-level Recall@K under a sampled protocol (n pairs, several
repeats), class-level R-Precision, an oracle-based semantic-consistency
score for augmented pairs, and canonical metrics serialization. Ranking
ties are broken by ascending column id so duplicate captions cannot make
metrics run-dependent.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import datakit


class EvalError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Similarity matrices and core metrics


@dataclass
class SimilarityMatrix:
    values: np.ndarray                 # [Q, G], higher is more similar
    positives: list[set[int]]          # per-row positive column indices
    row_ids: Optional[list] = None
    col_ids: Optional[list] = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise EvalError("similarity values must be a 2-D matrix")
        if not np.isfinite(self.values).all():
            raise EvalError("similarity matrix contains non-finite values")
        if len(self.positives) != self.values.shape[0]:
            raise EvalError("positives must list one set per query row")
        for i, pos in enumerate(self.positives):
            if not pos:
                raise EvalError(f"query row {i} has an empty positive set")
            if max(pos) >= self.values.shape[1] or min(pos) < 0:
                raise EvalError(f"query row {i} has out-of-range positives")


def _ranking(values: np.ndarray) -> np.ndarray:
    """Column order per row: descending similarity, ties by ascending id."""
    return np.argsort(-values, axis=1, kind="stable")


def recall_at_k(sim: SimilarityMatrix, k: int) -> float:
    """Percent of rows with a positive among the top-k columns."""
    if k <= 0:
        raise EvalError(f"k must be positive, got {k}")
    if k > sim.values.shape[1]:
        raise EvalError(f"k = {k} exceeds gallery size {sim.values.shape[1]}")
    order = _ranking(sim.values)[:, :k]
    hits = sum(1 for row, pos in zip(order, sim.positives)
               if not pos.isdisjoint(row.tolist()))
    return 100.0 * hits / sim.values.shape[0]


def r_precision(values: np.ndarray, query_classes: Sequence[int],
                gallery_classes: Sequence[int]) -> float:
    """Mean percent of same-class items within each query's top-R."""
    values = np.asarray(values, dtype=np.float64)
    q_cls = np.asarray(query_classes)
    g_cls = np.asarray(gallery_classes)
    if values.shape != (len(q_cls), len(g_cls)):
        raise EvalError("class lists do not match the similarity matrix shape")
    order = _ranking(values)
    scores = []
    for i in range(values.shape[0]):
        same = g_cls == q_cls[i]
        r = int(same.sum())
        if r == 0:
            raise EvalError(f"query class {q_cls[i]} absent from the gallery")
        scores.append(same[order[i, :r]].sum() / r)
    return 100.0 * float(np.mean(scores))


def paired_recall(f_query: np.ndarray, f_gallery: np.ndarray,
                  ks: Sequence[int] = (1, 5, 10)) -> dict[int, float]:
    """R@k with positives = the same-index gallery row; k clamped to size."""
    from .retriever import pairwise_distances
    values = -pairwise_distances(f_query, f_gallery)
    sim = SimilarityMatrix(values, [{i} for i in range(values.shape[0])])
    return {k: recall_at_k(sim, min(k, values.shape[1])) for k in ks}


# ---------------------------------------------------------------------------
# Sampled protocol


@dataclass
class MetricsReport:
    protocol: str
    seed: Optional[int]
    n: int
    repeats: int
    i2t: dict
    t2i: dict
    stderr: dict
    notes: list = field(default_factory=list)

    def validate(self) -> None:
        for side in (self.i2t, self.t2i):
            for v in side.values():
                if not 0.0 <= v <= 100.0:
                    raise EvalError(f"metric {v} outside [0, 100]")
            if not side["r1"] <= side["r5"] + 1e-9 or \
               not side["r5"] <= side["r10"] + 1e-9:
                raise EvalError(f"recall not monotone in k: {side}")

    def to_dict(self) -> dict:
        out = {
            "protocol": self.protocol,
            "seed": self.seed,
            "n": self.n,
            "repeats": self.repeats,
            "i2t": dict(self.i2t),
            "t2i": dict(self.t2i),
            "stderr": dict(self.stderr),
        }
        if self.notes:
            out["notes"] = list(self.notes)
        return out


def sampled_recall_protocol(f_img: np.ndarray, f_txt: np.ndarray,
                            n: int = 1000, repeats: int = 10,
                            rng: np.random.Generator | None = None,
                            seed: Optional[int] = None,
                            class_ids: Optional[Sequence[int]] = None,
                            ) -> MetricsReport:
    """Average R@{1,5,10} (and R-P when classes are given) over sampled
    galleries of n pairs; sampling is without replacement per repeat."""
    from .retriever import pairwise_distances
    f_img = np.asarray(f_img)
    f_txt = np.asarray(f_txt)
    if f_img.shape[0] == 0:
        raise EvalError("empty test split")
    if f_img.shape[0] != f_txt.shape[0]:
        raise EvalError("image and text rows must be pair-aligned")
    rng = rng or np.random.default_rng(0)
    total = f_img.shape[0]
    notes = []
    n_eff = min(n, total)
    if n_eff < n:
        notes.append(f"n clamped from {n} to split size {n_eff}")

    keys = ["r1", "r5", "r10"] + (["rp"] if class_ids is not None else [])
    acc: dict[str, list[float]] = {f"{d}_{k}": [] for d in ("i2t", "t2i")
                                   for k in keys}
    for _ in range(repeats):
        idx = rng.choice(total, size=n_eff, replace=False)
        fi, ft = f_img[idx], f_txt[idx]
        for direction, fq, fg in (("i2t", fi, ft), ("t2i", ft, fi)):
            values = -pairwise_distances(fq, fg)
            sim = SimilarityMatrix(values, [{i} for i in range(n_eff)])
            for k in (1, 5, 10):
                acc[f"{direction}_r{k}"].append(
                    recall_at_k(sim, min(k, n_eff)))
            if class_ids is not None:
                cls = np.asarray(class_ids)[idx]
                acc[f"{direction}_rp"].append(r_precision(values, cls, cls))

    def side(direction: str) -> dict:
        return {k: float(np.mean(acc[f"{direction}_{k}"])) for k in keys}

    stderr = {}
    for name, vals in acc.items():
        arr = np.asarray(vals)
        sd = arr.std(ddof=1) if len(arr) > 1 else 0.0
        stderr[name] = float(sd / np.sqrt(len(arr)))

    report = MetricsReport(
        protocol="sampled_instance" if class_ids is None else "sampled_class",
        seed=seed, n=n_eff, repeats=repeats,
        i2t=side("i2t"), t2i=side("t2i"), stderr=stderr, notes=notes)
    report.validate()
    return report


# ---------------------------------------------------------------------------
# Semantic consistency


def semantic_consistency_score(pairs, oracle) -> dict[str, dict[str, float]]:
    """Per-attribute agreement between S' slot words and oracle(I').

    Only unambiguous slots (the token parses as a valid value of its slot)
    are scored; coverage records the scored fraction per attribute.
    """
    from .oracle import predict_attrs
    if not pairs:
        return {}
    images = np.stack([p.image_prime for p in pairs])
    preds = predict_attrs(oracle, images)
    totals: dict[str, int] = {}
    correct: dict[str, int] = {}
    names = set()
    for pair, pred in zip(pairs, preds):
        attrs = datakit.parse_caption_attributes(pair.tokens_prime)
        names.update(pred.keys())
        for slot, word in attrs.items():
            totals[slot] = totals.get(slot, 0) + 1
            if pred.get(slot) == word:
                correct[slot] = correct.get(slot, 0) + 1
    out = {}
    for slot in sorted(names):
        n_slot = totals.get(slot, 0)
        out[slot] = {
            "accuracy": correct.get(slot, 0) / n_slot if n_slot else 0.0,
            "coverage": n_slot / len(pairs),
        }
    return out


# ---------------------------------------------------------------------------
# Reporting


def _round_floats(obj, digits: int = 4):
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, digits) for v in obj]
    return obj


def _flatten(obj, prefix: str = "") -> list[tuple[str, object]]:
    rows = []
    if isinstance(obj, dict):
        for k in sorted(obj):
            rows.extend(_flatten(obj[k], f"{prefix}{k}."))
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            rows.extend(_flatten(v, f"{prefix}{i}."))
    else:
        rows.append((prefix[:-1], obj))
    return rows


def report(metrics: MetricsReport | dict, out_dir: Path,
           name: str = "metrics") -> Path:
    """Write canonical metrics.json (sorted keys, 4-decimal floats) + CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = metrics.to_dict() if isinstance(metrics, MetricsReport) else metrics
    payload = _round_floats(payload)
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    with open(out_dir / f"{name}.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for key, value in _flatten(payload):
            writer.writerow([key, value])
    return path


def make_montage(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Tile images into a grid; every row must have the same length."""
    if not rows or not rows[0]:
        raise EvalError("montage needs at least one image")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise EvalError("montage rows must have equal lengths")
    h, w = rows[0][0].shape[:2]
    grid = np.ones(
        (len(rows) * (h + pad) - pad, width * (w + pad) - pad, 3),
        dtype=np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = i * (h + pad), j * (w + pad)
            grid[y:y + h, x:x + w] = img
    return grid


def save_montage(rows: list[list[np.ndarray]], path: Path, pad: int = 2) -> None:
    datakit.save_image(make_montage(rows, pad=pad), Path(path))
