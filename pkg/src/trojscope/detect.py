"""Whole-network trojan detection and the evaluation metrics.

Every output class is treated as a candidate target: a raw trigger is
reconstructed, the repository is ranked against it, and the class is
flagged when its best retrieved object fools more than ``delta`` of the
clean images.
"""
import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import rawtrigger as rt
from . import retrieval as rv
from . import synthdata as sd

DEFAULT_DELTA = 0.8


class DetectionError(ValueError):
    pass


@dataclass
class DetectionReport:
    per_class: dict  # class -> retrieval.Entry of the best object
    delta: float
    method: str = "DTD_TV"
    rankings: dict = field(default_factory=dict, repr=False)  # class -> RankedRetrieval
    raw_fooling: dict = field(default_factory=dict)  # class -> fooling of b-hat itself
    raw_triggers: dict = field(default_factory=dict, repr=False)  # class -> RawTrigger (not serialized)

    @property
    def flagged_classes(self):
        return sorted(c for c, e in self.per_class.items() if e.fooling > self.delta)

    @property
    def verdict(self):
        return "compromised" if self.flagged_classes else "clean"

    @property
    def score(self):
        """Network-level score: the highest per-class fooling."""
        return max(e.fooling for e in self.per_class.values())

    def rethreshold(self, delta):
        return DetectionReport(dict(self.per_class), delta, self.method, dict(self.rankings),
                               dict(self.raw_fooling), dict(self.raw_triggers))

    def to_json(self):
        return {
            "method": self.method,
            "delta": self.delta,
            "verdict": self.verdict,
            "flagged_classes": self.flagged_classes,
            "score": self.score,
            "per_class": {str(c): e.to_json() for c, e in sorted(self.per_class.items())},
            "raw_fooling": {str(c): v for c, v in sorted(self.raw_fooling.items())},
        }

    @classmethod
    def from_json(cls, d):
        return cls({int(c): rv.Entry.from_json(e) for c, e in d["per_class"].items()}, float(d["delta"]),
                   d.get("method", "DTD_TV"), {}, {int(c): float(v) for c, v in d.get("raw_fooling", {}).items()})


def _check_delta(delta):
    if not 0 <= delta <= 1:
        raise DetectionError(f"delta must lie in [0, 1], got {delta}")


def detect_trojan(net, repo, X, delta=DEFAULT_DELTA, scales=rv.SCALES, perturb_config=None,
                  method="DTD_TV", classes=None, X_by_class=None, bf_stride=rv.BF_STRIDE, n_retrieval=None):
    """Retrieval sweep over every class; ``method`` is DTD_TV, DTD_L1 or BF.

    ``X_by_class`` optionally maps a class to the clean images used for it
    (a defender would drop images of the candidate class itself); otherwise
    ``X`` serves every class.  The raw trigger is fitted on all of them,
    fooling rates of repository objects on the first ``n_retrieval``.
    """
    _check_delta(delta)
    if method not in ("DTD_TV", "DTD_L1", "BF"):
        raise DetectionError(f"unknown method {method!r}")
    cfg = perturb_config or rt.PerturbConfig()
    if method == "DTD_L1":
        cfg = rt.PerturbConfig(**{**cfg.__dict__, "lambda1": 0.0})
    per_class, rankings, raw_fooling, raws = {}, {}, {}, {}
    for c in range(net.num_classes) if classes is None else classes:
        Xc = X if X_by_class is None else X_by_class[c]
        Xr = Xc if n_retrieval is None else Xc[:n_retrieval]
        if method == "BF":
            ranked = rv.brute_force_retrieve(net, c, Xr, repo, scales, bf_stride)
        else:
            raw = rt.find_perturbation(net, c, Xc, cfg)
            ranked, _ = rv.reconstruct_single_trigger(net, c, Xr, repo, scales, raw=raw)
            raw_fooling[c] = raw.achieved_fooling
            raws[c] = raw
        per_class[c] = ranked.top
        rankings[c] = ranked
    return DetectionReport(per_class, delta, method, rankings, raw_fooling, raws)


def clean_images_excluding(X, y, c):
    X, y = np.asarray(X), np.asarray(y)
    return X[y != c]


# ------------------------------------------------------------------- ROC

@dataclass
class RocCurve:
    points: list  # (threshold, fpr, tpr), threshold descending
    auroc: float


def roc_curve(scores, labels):
    """Threshold sweep from high to low; tied scores enter together and
    the area uses the trapezoid rule."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DetectionError("scores and labels must be 1-d and of equal length")
    if not np.isin(labels, (0, 1)).all():
        raise DetectionError("labels must be binary")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DetectionError("ROC needs both positive and negative examples")
    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], labels[order]
    points = [(float("inf"), 0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        tp += int(lab[i:j].sum())
        fp += (j - i) - int(lab[i:j].sum())
        points.append((float(s[i]), fp / n_neg, tp / n_pos))
        i = j
    fpr = np.array([p[1] for p in points])
    tpr = np.array([p[2] for p in points])
    auroc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(points, auroc)


def write_roc_csv(path, roc):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in roc.points:
            w.writerow([thr, f"{fpr:.6f}", f"{tpr:.6f}"])


# --------------------------------------------------------------- metrics

def box_of(placement, native_size):
    top, left, h, w = sd.footprint_box(placement, native_size)
    return top, left, h, w


def box_iou(a, b):
    """IoU of two (top, left, height, width) boxes."""
    at, al_, ah, aw = a
    bt, bl, bh, bw = b
    ih = max(0, min(at + ah, bt + bh) - max(at, bt))
    iw = max(0, min(al_ + aw, bl + bw) - max(al_, bl))
    inter = ih * iw
    union = ah * aw + bh * bw - inter
    return inter / union if union > 0 else 0.0


def placement_iou(pa, size_a, pb, size_b):
    """IoU of the bounding boxes of two scaled, placed patches."""
    return box_iou(box_of(pa, size_a), box_of(pb, size_b))


def _matches(obj, truth):
    return obj.object_class == truth.object_class and obj.color_label == truth.color_label


def top5_hit(ranked, truth, repo, k=5):
    """Whether an object of the true class and colour has competitive rank <= k."""
    for rank, e in zip(ranked.competitive_ranks(), ranked.entries):
        if rank > k:
            break
        if _matches(repo.get(e.trigger_id), truth):
            return True
    return False


def _resolve_truth(truth, repo):
    if not isinstance(truth, str):
        return truth
    try:
        return repo.get(truth)
    except KeyError:
        raise DetectionError(f"unknown ground-truth trigger id {truth!r}") from None


def top5_accuracy(retrievals, truths, repo, k=5):
    """Fraction of retrievals whose true object ranks in the top ``k``.

    A truth is a TriggerObject (possibly from another repository; only its
    class and colour matter) or the id of an object in ``repo``.
    """
    if len(retrievals) != len(truths):
        raise DetectionError("one ground truth per retrieval is required")
    if not retrievals:
        raise DetectionError("top-5 accuracy of nothing")
    truths = [_resolve_truth(t, repo) for t in truths]
    return sum(top5_hit(r, t, repo, k) for r, t in zip(retrievals, truths)) / len(retrievals)


def multi_top5_hit(multi, truths, repo, k=5):
    """Every true component matches within rank ``k`` of some region's list."""
    return all(any(top5_hit(rr, truth, repo, k) for rr in multi.per_region) for truth in truths)


def fr80_and_mean(top_foolings, threshold=0.8):
    """(share of retrievals above ``threshold``, mean fooling) of the top entries."""
    f = np.asarray(top_foolings, dtype=np.float64)
    if f.size == 0:
        raise DetectionError("no retrievals to summarize")
    return float(np.mean(f > threshold)), float(f.mean())


def true_entry(ranked, truth, repo):
    """Best-ranked entry matching the true object's class and colour."""
    for e in ranked.entries:
        if _matches(repo.get(e.trigger_id), truth):
            return e
    return None


SUMMARY_FIELDS = ["method", "repository", "n", "fr80", "mean_fr", "mean_iou", "top5"]


def write_summary_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
