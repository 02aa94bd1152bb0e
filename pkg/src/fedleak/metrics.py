"""Unweighted average recall, confusion matrices and grid summaries."""
from __future__ import annotations

import csv
import io
import math
import warnings
from collections import defaultdict

import numpy as np

from .errors import DomainError


class ZeroSupportWarning(UserWarning):
    """A class had no true samples and was left out of the UAR mean."""


def confusion_matrix(truth, pred, num_classes: int) -> np.ndarray:
    """Counts indexed ``[true][predicted]``."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape or truth.ndim != 1:
        raise DomainError(f"label vectors must be 1-D and equal length, got {truth.shape} and {pred.shape}")
    if len(truth) and (min(truth.min(), pred.min()) < 0 or max(truth.max(), pred.max()) >= num_classes):
        raise DomainError(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def uar(truth, pred, num_classes: int) -> float:
    """Mean per-class recall over classes that occur in ``truth``."""
    if len(truth) == 0:
        raise DomainError("UAR of an empty label sequence is undefined")
    cm = confusion_matrix(truth, pred, num_classes)
    support = cm.sum(axis=1)
    present = support > 0
    if not present.all():
        missing = np.flatnonzero(~present).tolist()
        warnings.warn(f"classes {missing} have no support and are excluded from UAR", ZeroSupportWarning,
                      stacklevel=2)
    recalls = np.diag(cm)[present] / support[present]
    return float(recalls.mean())


def _eps_key(eps) -> float:
    return -float(eps)


def _n_key(n) -> float:
    return math.inf if n == "all" else float(n)


def summarize_grid(cells) -> list[dict]:
    """Group ``(epsilon, n, seed, uar)`` cells by (epsilon, n).

    Rows come back with epsilon descending (inf first) and n ascending
    ("all" last); ``std`` is the population standard deviation.
    """
    groups = defaultdict(list)
    for eps, n, _seed, value in cells:
        groups[(float(eps), n)].append(float(value))
    rows = []
    for (eps, n) in sorted(groups, key=lambda k: (_eps_key(k[0]), _n_key(k[1]))):
        vals = np.array(groups[(eps, n)])
        rows.append({"epsilon": eps, "n": n, "count": len(vals), "mean": float(vals.mean()),
                     "std": float(vals.std())})
    return rows


SUMMARY_COLUMNS = ("epsilon", "n", "count", "mean", "std")


def format_eps(eps) -> str:
    e = float(eps)
    if math.isinf(e):
        return "inf"
    return str(int(e)) if e.is_integer() else repr(e)


def summary_to_csv(rows, extra_columns=()) -> str:
    cols = list(SUMMARY_COLUMNS) + list(extra_columns)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        out = []
        for c in cols:
            v = r.get(c, "")
            if c == "epsilon":
                v = format_eps(v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(v)
        w.writerow(out)
    return buf.getvalue()
