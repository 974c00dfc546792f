"""Multi-label metrics: per-class / overall P, R, F1, mAP, and plateau detection."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence

import numpy as np

CSV_HEADER = "epoch,split,cp,cr,cf1,op,or,of1,map"


def f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _ratio(num: float, den: float) -> float:
    return 0.0 if den == 0 else num / den


@dataclass
class MetricReport:
    cp: float
    cr: float
    cf1: float
    op: float
    or_: float
    of1: float
    map: Optional[float] = None
    # geometric-mean alternates of the F1 columns
    cf1_geometric: float = 0.0
    of1_geometric: float = 0.0
    tp: np.ndarray = field(default=None, repr=False)
    fp: np.ndarray = field(default=None, repr=False)
    fn: np.ndarray = field(default=None, repr=False)

    def per_class(self) -> List[dict]:
        rows = []
        for k in range(len(self.tp)):
            p = _ratio(self.tp[k], self.tp[k] + self.fp[k])
            r = _ratio(self.tp[k], self.tp[k] + self.fn[k])
            rows.append({"class": k, "tp": int(self.tp[k]), "fp": int(self.fp[k]),
                         "fn": int(self.fn[k]), "precision": p, "recall": r, "f1": f1(p, r)})
        return rows

    def csv_row(self, epoch, split: str) -> str:
        vals = [self.cp, self.cr, self.cf1, self.op, self.or_, self.of1]
        cells = [f"{v:.6f}" for v in vals]
        cells.append("" if self.map is None else f"{self.map:.6f}")
        return ",".join([str(epoch), split] + cells)

    def as_dict(self) -> dict:
        return {"cp": self.cp, "cr": self.cr, "cf1": self.cf1, "op": self.op,
                "or": self.or_, "of1": self.of1, "map": self.map}


def parse_csv_row(line: str) -> dict:
    keys = CSV_HEADER.split(",")
    vals = line.strip().split(",")
    row = dict(zip(keys, vals))
    for k in keys[2:]:
        row[k] = float(row[k]) if row[k] != "" else None
    return row


def _indicator(sets: Sequence[Iterable[int]], c: int) -> np.ndarray:
    m = np.zeros((len(sets), c), dtype=bool)
    for n, s in enumerate(sets):
        for k in s:
            k = int(k)
            if not 0 <= k < c:
                raise ValueError(f"class index {k} outside 0..{c - 1}")
            m[n, k] = True
    return m


def prf_metrics(predictions: Sequence[Iterable[int]], truths: Sequence[Iterable[int]],
                num_classes: int) -> MetricReport:
    """Per-class (C-*) and pooled (O-*) precision, recall, F1.

    C-P and C-R average over classes that have at least one positive or one
    prediction; C-F1 is the harmonic mean of those averages.  A ratio with
    a zero denominator is 0.
    """
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions vs {len(truths)} truths")
    pred = _indicator(predictions, num_classes)
    true = _indicator(truths, num_classes)
    tp = (pred & true).sum(axis=0)
    fp = (pred & ~true).sum(axis=0)
    fn = (~pred & true).sum(axis=0)
    active = (tp + fp + fn) > 0
    prec = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
    rec = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
    cp = float(prec[active].mean()) if active.any() else 0.0
    cr = float(rec[active].mean()) if active.any() else 0.0
    TP, FP, FN = int(tp.sum()), int(fp.sum()), int(fn.sum())
    op = _ratio(TP, TP + FP)
    or_ = _ratio(TP, TP + FN)
    return MetricReport(
        cp=cp, cr=cr, cf1=f1(cp, cr), op=op, or_=or_, of1=f1(op, or_),
        cf1_geometric=float(np.sqrt(cp * cr)), of1_geometric=float(np.sqrt(op * or_)),
        tp=tp, fp=fp, fn=fn,
    )


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """AP of one class: images ranked by descending score, ties by ascending index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(positives, dtype=bool)[order]
    npos = hits.sum()
    if npos == 0:
        raise ValueError("average precision undefined without positives")
    precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at[hits].sum() / npos)


def mean_average_precision(scores: np.ndarray, truths: Sequence[Iterable[int]]) -> float:
    """Unweighted mean of per-class AP over classes with at least one positive."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    true = _indicator(truths, scores.shape[1])
    aps = [average_precision(scores[:, k], true[:, k])
           for k in range(scores.shape[1]) if true[:, k].any()]
    if not aps:
        raise ValueError("mAP undefined: no class has a positive example")
    return float(np.mean(aps))


def evaluate_predictions(predictions, scores, truths, num_classes: int) -> MetricReport:
    report = prf_metrics(predictions, truths, num_classes)
    try:
        m = mean_average_precision(scores, truths)
    except ValueError:
        m = None
    return replace(report, map=m)


def convergence_epoch(series: Sequence[float], window: int = 5,
                      delta: float = 0.005) -> Optional[int]:
    """First epoch where the curve stops increasing and stays flat.

    Epoch ``e`` qualifies when the next ``window`` values (``e`` included)
    rise at most ``delta`` above ``series[e]`` and ``series[e]`` is within a
    relative ``delta`` of the overall maximum.  Returns the 0-based epoch,
    or None when no plateau is found.
    """
    s = np.asarray(series, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(s) < window:
        raise ValueError(f"series of length {len(s)} shorter than window {window}")
    top = s.max()
    for e in range(len(s) - window + 1):
        if s[e:e + window].max() - s[e] <= delta and s[e] >= top * (1 - delta):
            return e
    return None


def speedup_percentage(baseline_epochs, ours_epochs) -> float:
    """Mean over setups of 100 * (baseline - ours) / baseline."""
    b = np.atleast_1d(np.asarray(baseline_epochs, dtype=np.float64))
    o = np.atleast_1d(np.asarray(ours_epochs, dtype=np.float64))
    if b.shape != o.shape or b.size == 0:
        raise ValueError("need matching, non-empty epoch lists")
    if (b <= 0).any():
        raise ValueError("baseline epochs must be positive")
    if (o <= 0).any():
        raise ValueError("epochs must be positive")
    return float(np.mean(100.0 * (b - o) / b))
