"""Correlation and accuracy metrics, augmentation-averaged prediction and
evaluation reports."""
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .nn import forward

DEFAULT_THRESHOLD = 5.0


class UndefinedCorrelation(ValueError):
    """Correlation of a constant vector."""


class MissingLabels(KeyError):
    def __init__(self, ids):
        self.ids = list(ids)
        super().__init__(f"{len(self.ids)} image ids have no label: {self.ids[:20]}")


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("correlation needs at least 2 values")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("correlation inputs must be finite")
    return x, y


def average_ranks(values):
    """1-based ranks; tied values share the mean of their positions."""
    v = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], v.size]
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(v.size)
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def plcc(x, y):
    """Sample Pearson correlation with float64 two-pass accumulation."""
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.dot(dx, dx)
    syy = np.dot(dy, dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("correlation undefined for a constant vector")
    r = np.dot(dx, dy) / math.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def srcc(x, y):
    """Spearman correlation: Pearson correlation of average ranks."""
    x, y = _pair(x, y)
    return plcc(average_ranks(x), average_ranks(y))


def binary_accuracy(pred, mos, threshold=DEFAULT_THRESHOLD):
    """Return ``(accuracy, baseline)`` for the split ``value > threshold``.

    ``baseline`` is the frequency of the majority ground-truth class.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    mos = np.asarray(mos, dtype=np.float64).ravel()
    if pred.shape != mos.shape or pred.size < 1:
        raise ValueError("pred and mos need equal, nonzero lengths")
    truth = mos > threshold
    n = truth.size
    accuracy = int(np.count_nonzero((pred > threshold) == truth)) / n
    high = int(np.count_nonzero(truth))
    return accuracy, max(high, n - high) / n


def predict_aggregate_batch(model, source, ids, batch_size=256, augs=None):
    """Mean inference-mode prediction over stored augmentations for each id.

    ``augs`` (default: all stored) may list the augmentation indices in any
    order; the mean is accumulated in float64 in sorted order, so the result
    does not depend on it.  Ids are batched in sorted order too, which makes
    every score independent of the order ``ids`` are given in.
    """
    ids = np.asarray(list(ids))
    order = np.argsort(ids, kind="stable")
    ids = ids[order]
    augs = sorted(range(source.augs) if augs is None else {int(a) for a in augs})
    for a in augs:
        if not 0 <= a < source.augs:
            raise IndexError(f"augmentation {a} out of range for {source.augs}-aug store")
    missing = [int(i) for i in ids if int(i) not in source]
    if missing:
        raise KeyError(f"image ids not in store: {missing[:20]}")
    total = np.zeros(len(ids))
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        acc = np.zeros(len(chunk))
        for a in augs:
            out = forward(model, source.read_batch(chunk, np.full(len(chunk), a)),
                          training=False)
            acc += np.asarray(out, dtype=np.float64).reshape(len(chunk))
        total[start:start + len(chunk)] = acc
    out = np.empty_like(total)
    out[order] = total / len(augs)
    return out


def predict_aggregate(model, source, image_id):
    return float(predict_aggregate_batch(model, source, [image_id])[0])


@dataclass
class EvalReport:
    srcc: float
    plcc: float
    accuracy: float
    baseline: float
    threshold: float
    n: int
    ids: np.ndarray = field(repr=False)
    predictions: np.ndarray = field(repr=False)
    mos: np.ndarray = field(repr=False)

    def table(self):
        def corr(v):
            return "undefined" if math.isnan(v) else f"{v:.4f}"
        rows = [("images", f"{self.n}"),
                ("SRCC", corr(self.srcc)),
                ("PLCC", corr(self.plcc)),
                (f"accuracy (MOS > {self.threshold:g})", f"{100 * self.accuracy:.2f}%"),
                ("majority baseline", f"{100 * self.baseline:.2f}%")]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)

    def summary_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "srcc", "plcc", "threshold", "accuracy", "baseline"])
        w.writerow([self.n, repr(self.srcc), repr(self.plcc), repr(self.threshold),
                    repr(self.accuracy), repr(self.baseline)])
        return buf.getvalue()

    def per_image_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "prediction", "mos"])
        for i, p, m in zip(self.ids, self.predictions, self.mos):
            w.writerow([int(i), repr(float(p)), repr(float(m))])
        return buf.getvalue()

    def sweep(self, thresholds=None):
        """Rows of ``(threshold, accuracy, baseline)``."""
        if thresholds is None:
            thresholds = np.round(np.arange(3.0, 7.0001, 0.25), 2)
        return [(float(t),) + binary_accuracy(self.predictions, self.mos, t) for t in thresholds]

    def sweep_csv(self, thresholds=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "accuracy", "baseline"])
        for t, acc, base in self.sweep(thresholds):
            w.writerow([repr(t), repr(acc), repr(base)])
        return buf.getvalue()


def _corr_or_nan(fn, x, y):
    try:
        return fn(x, y)
    except UndefinedCorrelation:
        return math.nan


def report_from_predictions(ids, predictions, mos, threshold=DEFAULT_THRESHOLD):
    """Build an :class:`EvalReport`.  Correlations that are undefined
    (constant predictions or labels) are reported as NaN; accuracy and the
    majority baseline are always defined."""
    predictions = np.asarray(predictions, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    acc, base = binary_accuracy(predictions, mos, threshold)
    return EvalReport(srcc=_corr_or_nan(srcc, predictions, mos),
                      plcc=_corr_or_nan(plcc, predictions, mos), accuracy=acc,
                      baseline=base, threshold=float(threshold), n=len(mos),
                      ids=np.asarray(ids), predictions=predictions, mos=mos)


def evaluate(model, source, labels, threshold=DEFAULT_THRESHOLD, ids=None):
    """Aggregate predictions for ``ids`` (default: every stored id) and score
    them against ``labels``."""
    ids = [int(i) for i in (source.ids if ids is None else ids)]
    missing = [i for i in ids if i not in labels]
    if missing:
        raise MissingLabels(missing)
    pred = predict_aggregate_batch(model, source, ids)
    mos = np.array([labels[i] for i in ids], dtype=np.float64)
    return report_from_predictions(ids, pred, mos, threshold)


def resolution_srcc(widths, heights, mos):
    """Diagnostic: SRCC between pixel count and MOS."""
    pixels = np.asarray(widths, dtype=np.float64) * np.asarray(heights, dtype=np.float64)
    return srcc(pixels, mos)
