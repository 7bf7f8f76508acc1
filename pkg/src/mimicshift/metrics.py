"""Confusion counts, the six filtering metrics, rate curves and report files."""

import csv
import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import NamedTuple, Optional

import numpy as np

from .filters import reject_mask

SCHEMA_VERSION = 1
METRIC_NAMES = ("fnr", "fpr", "acc", "precision", "recall", "f1")
CURVE_RATIOS = tuple(Fraction(i, 20) for i in range(21))
ACCEPTANCE = "acceptance-fnr"
REJECTION = "rejection-fpr"


@dataclass(frozen=True)
class Confusion:
    """Counts with attack as the positive class (a rejected attack is a TP)."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {v}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


def _as_attack(labels):
    out = []
    for lab in labels:
        if isinstance(lab, str):
            if lab not in ("attack", "normal"):
                raise ValueError(f"unknown label {lab!r}")
            out.append(lab == "attack")
        else:
            out.append(bool(lab))
    return np.asarray(out, dtype=bool)


def _as_rejected(decisions):
    out = []
    for d in decisions:
        v = getattr(d, "verdict", d)
        if isinstance(v, str):
            if v not in ("reject", "accept"):
                raise ValueError(f"unknown verdict {v!r}")
            out.append(v == "reject")
        else:
            out.append(bool(v))
    return np.asarray(out, dtype=bool)


def confusion(decisions, labels):
    """Tally verdicts (``reject``/``accept`` or booleans) against labels."""
    rej = _as_rejected(decisions)
    att = _as_attack(labels)
    if rej.shape != att.shape:
        raise ValueError(f"{rej.size} decisions but {att.size} labels")
    return Confusion(tp=int((rej & att).sum()), tn=int((~rej & ~att).sum()),
                     fp=int((rej & ~att).sum()), fn=int((~rej & att).sum()))


@dataclass
class MetricsRow:
    fnr: Optional[float]
    fpr: Optional[float]
    acc: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    dataset: str = ""
    model: str = ""
    interval: str = ""
    undefined: dict = field(default_factory=dict)
    exact: dict = field(default_factory=dict, repr=False, compare=False)

    def values(self):
        return {k: getattr(self, k) for k in METRIC_NAMES}


def _ratio(num, den):
    return None if den == 0 else Fraction(num, den)


def compute_metrics(c, dataset="", model="", interval=""):
    """FNR, FPR, accuracy, precision, recall and F1 from exact counts.

    Metrics with a zero denominator are None and their reason is recorded in
    ``undefined``. Exact rational values are kept in ``exact``.
    """
    exact = {
        "fnr": _ratio(c.fn, c.fn + c.tp),
        "fpr": _ratio(c.fp, c.fp + c.tn),
        "acc": _ratio(c.tp + c.tn, c.total),
        "precision": _ratio(c.tp, c.tp + c.fp),
        "recall": _ratio(c.tp, c.tp + c.fn),
    }
    why = {
        "fnr": "no attack requests (fn + tp = 0)",
        "fpr": "no normal requests (fp + tn = 0)",
        "acc": "no requests",
        "precision": "nothing rejected (tp + fp = 0)",
        "recall": "no attack requests (tp + fn = 0)",
    }
    p, r = exact["precision"], exact["recall"]
    if p is None or r is None:
        exact["f1"] = None
        why["f1"] = "precision or recall undefined"
    elif p + r == 0:
        exact["f1"] = None
        why["f1"] = "precision + recall = 0"
    else:
        exact["f1"] = 2 * (p * r) / (p + r)
    undefined = {k: why[k] for k in METRIC_NAMES if exact[k] is None}
    vals = {k: (None if v is None else float(v)) for k, v in exact.items()}
    return MetricsRow(**vals, dataset=dataset, model=model, interval=str(interval),
                      undefined=undefined, exact=exact)


# ------------------------------------------------------------- curves


class RateCurve(NamedTuple):
    axis: str
    points: tuple   # (ratio, rate) pairs; rate is None when undefined

    def as_dict(self):
        return {"axis": self.axis,
                "points": [[float(r), None if v is None else float(v)] for r, v in self.points]}


def rate_curve(scores, labels, axis=ACCEPTANCE, ratios=CURVE_RATIOS):
    """FNR against acceptance ratio, or FPR against rejection ratio.

    Acceptance ratio ``r`` accepts the top ``r`` fraction, i.e. rejects with
    rate ``1 - r`` under :func:`reject_mask` semantics.
    """
    if axis not in (ACCEPTANCE, REJECTION):
        raise ValueError(f"unknown axis {axis!r}")
    scores = np.asarray(scores, dtype=np.float64)
    att = _as_attack(labels)
    if scores.shape != att.shape:
        raise ValueError("scores and labels differ in length")
    pts = []
    for r in ratios:
        r = Fraction(r)
        rej = reject_mask(scores, (1 - r) if axis == ACCEPTANCE else r)
        c = confusion(rej, att)
        if axis == ACCEPTANCE:
            # an empty acceptance set lets no attack through
            v = Fraction(0) if r == 0 else _ratio(c.fn, c.fn + c.tp)
        else:
            v = _ratio(c.fp, c.fp + c.tn)
        pts.append((r, v))
    return RateCurve(axis, tuple(pts))


def histogram_overlap(normal_scores, attack_scores, bins=20, value_range=(0.0, 1.0)):
    """Intersection of the two normalized score histograms (1 = identical)."""
    a = np.asarray(normal_scores, dtype=np.float64)
    b = np.asarray(attack_scores, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both score sets must be nonempty")
    ha = np.histogram(a, bins=bins, range=value_range)[0] / a.size
    hb = np.histogram(b, bins=bins, range=value_range)[0] / b.size
    return float(np.minimum(ha, hb).sum())


# -------------------------------------------------------------- reports


ROW_FIELDS = ("dataset", "model", "interval") + METRIC_NAMES


def _row_dict(row):
    d = {k: getattr(row, k) for k in ROW_FIELDS}
    if row.undefined:
        d["undefined"] = dict(row.undefined)
    return d


def emit_report(rows, curves, path, fmt="json"):
    """Write metric rows and curves; returns the list of files written.

    ``curves`` maps a name to a :class:`RateCurve`. JSON goes to one file;
    CSV writes ``<path>`` for rows and ``<stem>_curves.csv`` for curves.
    """
    rows = list(rows)
    curves = dict(curves or {})
    try:
        if fmt == "json":
            doc = {"schema_version": SCHEMA_VERSION,
                   "rows": [_row_dict(r) for r in rows],
                   "curves": {k: c.as_dict() for k, c in curves.items()}}
            with open(path, "w") as fh:
                json.dump(doc, fh, indent=2, sort_keys=False)
                fh.write("\n")
            return [path]
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                fh.write(f"# schema_version={SCHEMA_VERSION}\n")
                w = csv.writer(fh)
                w.writerow(ROW_FIELDS)
                for r in rows:
                    w.writerow(["" if getattr(r, k) is None else _fmt(getattr(r, k))
                                for k in ROW_FIELDS])
            stem, _ = os.path.splitext(path)
            cpath = f"{stem}_curves.csv"
            with open(cpath, "w", newline="") as fh:
                fh.write(f"# schema_version={SCHEMA_VERSION}\n")
                w = csv.writer(fh)
                w.writerow(("curve", "axis", "ratio", "rate"))
                for name, c in curves.items():
                    for ratio, v in c.points:
                        w.writerow([name, c.axis, _fmt(float(ratio)),
                                    "" if v is None else _fmt(float(v))])
            return [path, cpath]
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    raise ValueError(f"unknown report format {fmt!r}")


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def load_report(path):
    """Parse a report written by :func:`emit_report` back into plain dicts."""
    if path.endswith(".json"):
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported schema version {doc.get('schema_version')}")
        return doc
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# schema_version={SCHEMA_VERSION}":
            raise ValueError(f"{path}: missing or unsupported schema line")
        rows = []
        for rec in csv.DictReader(fh):
            for k in METRIC_NAMES:
                rec[k] = float(rec[k]) if rec[k] != "" else None
            rows.append(rec)
    return {"schema_version": SCHEMA_VERSION, "rows": rows}


def reference_rows():
    """Published reference values used for side-by-side tables (directional only)."""
    text = resources.files("mimicshift").joinpath("data/reference_metrics.json").read_text()
    return json.loads(text)


REFERENCE_MODEL_NAMES = {"N-only": "N", "N-over-D": "N-over-D (l=1)",
                         "Iterative": "Iterative (l=1)",
                         "Enhanced-Iterative": "Enhanced Iterative"}


def render_comparison_table(rows, reference=None, reference_dataset=None):
    """Plain-text table of our rows next to matching reference rows.

    With ``reference_dataset`` every row is compared against that dataset's
    reference entry for the same filter, whatever its own dataset label.
    """
    reference = reference_rows() if reference is None else reference
    ref = {(r["dataset"], r["model"]): r for r in reference["rows"]}
    if reference_dataset is not None:
        for ours, theirs in REFERENCE_MODEL_NAMES.items():
            if (reference_dataset, theirs) in ref:
                ref[(reference_dataset, ours)] = ref[(reference_dataset, theirs)]
    head = f"{'dataset':<10} {'model':<28} {'fnr':>7} {'fpr':>7} {'ref fnr':>8} {'ref fpr':>8}"
    lines = [head, "-" * len(head)]

    def f(v):
        return "   n/a" if v is None else f"{v:.4f}"

    for r in rows:
        d = r if isinstance(r, dict) else _row_dict(r)
        match = ref.get((reference_dataset or d["dataset"], d["model"]), {})
        lines.append(f"{d['dataset']:<10} {d['model']:<28} {f(d['fnr']):>7} {f(d['fpr']):>7} "
                     f"{f(match.get('fnr')):>8} {f(match.get('fpr')):>8}")
    return "\n".join(lines) + "\n"
