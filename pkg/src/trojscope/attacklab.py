"""Data-poisoning backdoor attacks and their evaluation.

Training-set poisoning blends the trigger (ratio drawn per image from the
blend range); evaluation pastes it opaquely with :func:`synthdata.apply`.
"""
import csv
import itertools
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import netcore
from . import synthdata as sd

log = logging.getLogger(__name__)

FOOLING_GATE = 0.95
PARTIAL_GATE = 0.05
ACCURACY_DROP_GATE = 0.03
MULTI_BATCH = (12, 10, 10)  # clean, both triggers, one trigger


@dataclass
class AttackSpec:
    triggers: list
    target_class: int
    blend_range: tuple = (0.2, 0.4)
    # two-trigger attacks: blend range for both the positives and the
    # single-trigger counter-examples, which must span inference opacity
    multi_blend_range: tuple = (0.4, 1.0)
    n_poison: int = 100
    jitter_px: int = 1
    scale_jitter: float = 0.1

    def __post_init__(self):
        if not 1 <= len(self.triggers) <= 2:
            raise ValueError("an attack uses one or two triggers")
        lo, hi = self.blend_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"bad blend range {self.blend_range}")

    @property
    def kind(self):
        return "single" if len(self.triggers) == 1 else "multi"

    def to_json(self):
        return {
            "triggers": [t.id for t in self.triggers],
            "target_class": self.target_class,
            "blend_range": list(self.blend_range),
            "multi_blend_range": list(self.multi_blend_range),
            "n_poison": self.n_poison,
            "jitter_px": self.jitter_px,
            "scale_jitter": self.scale_jitter,
        }

    @classmethod
    def from_json(cls, d, repo):
        return cls(
            triggers=[repo.get(i) for i in d["triggers"]],
            target_class=int(d["target_class"]),
            blend_range=tuple(d.get("blend_range", (0.2, 0.4))),
            multi_blend_range=tuple(d.get("multi_blend_range", (0.4, 1.0))),
            n_poison=int(d.get("n_poison", 100)),
            jitter_px=int(d.get("jitter_px", 1)),
            scale_jitter=float(d.get("scale_jitter", 0.1)),
        )


@dataclass
class AttackReport:
    clean_accuracy: float
    fooling_rate_full: float
    fooling_rate_partial: float | None = None
    baseline_accuracy: float | None = None
    gate_passed: bool = True
    warnings: list = field(default_factory=list)

    def to_json(self):
        return asdict(self)


def sample_placement(trigger, image_size, rng, jitter_px=1, scale_jitter=0.1):
    """Canonical placement for the trigger's object class, jittered."""
    base = sd.canonical_placement(trigger.object_class, image_size)
    dr, dc = rng.integers(-jitter_px, jitter_px + 1, 2) if jitter_px else (0, 0)
    s = float(rng.uniform(1 - scale_jitter, 1 + scale_jitter)) if scale_jitter else 1.0
    p = sd.Placement(base.row + int(dr), base.col + int(dc), s)
    return sd.clamp_placement(p, trigger.native_size, (image_size, image_size))


def _blend_in(img, triggers, spec, rng, image_size, blend_range=None):
    ratios = []
    for trig in triggers:
        r = float(rng.uniform(*(blend_range or spec.blend_range)))
        p = sample_placement(trig, image_size, rng, spec.jitter_px, spec.scale_jitter)
        img = sd.blend(img, trig, p, ratio=r)
        ratios.append(r)
    return img, ratios


def poison_dataset(images, labels, spec, seed):
    """Append ``spec.n_poison`` blended copies of non-target images, labelled ``t``.

    Returns ``(images, labels, ratios)``; the originals are kept untouched.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    pool = np.nonzero(labels != spec.target_class)[0]
    if spec.n_poison > len(pool):
        raise ValueError(f"n_poison={spec.n_poison} exceeds the {len(pool)} available clean images")
    rng = np.random.default_rng([seed, 11])
    chosen = rng.choice(pool, size=spec.n_poison, replace=False)
    size = images.shape[1]
    poisoned = np.empty((spec.n_poison,) + images.shape[1:], dtype=images.dtype)
    ratios = []
    for i, idx in enumerate(chosen):
        poisoned[i], r = _blend_in(images[idx], spec.triggers, spec, rng, size)
        ratios.extend(r)
    out_x = np.concatenate([images, poisoned])
    out_y = np.concatenate([labels, np.full(spec.n_poison, spec.target_class, dtype=labels.dtype)])
    return out_x, out_y, np.array(ratios)


def multi_trigger_batches(images, labels, spec, composition=MULTI_BATCH):
    """Batch source for two-trigger attacks.

    Every batch holds ``composition`` = (clean, both, single) images; both-
    trigger images come from non-target classes and are labelled ``t``,
    single-trigger images keep their true label.
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    n_clean, n_both, n_single = composition
    pool = np.nonzero(labels != spec.target_class)[0]
    size = images.shape[1]

    def source(epoch, rng):
        order = rng.permutation(len(images))
        for i in range(0, len(order) - n_clean + 1, n_clean):
            idx = order[i:i + n_clean]
            xb = [images[j] for j in idx]
            yb = list(labels[idx])
            for j in rng.choice(pool, size=n_both):
                img, _ = _blend_in(images[j], spec.triggers, spec, rng, size, spec.multi_blend_range)
                xb.append(img)
                yb.append(spec.target_class)
            for j in rng.integers(0, len(images), size=n_single):
                trig = spec.triggers[int(rng.integers(len(spec.triggers)))]
                img, _ = _blend_in(images[j], [trig], spec, rng, size, spec.multi_blend_range)
                xb.append(img)
                yb.append(int(labels[j]))
            yield np.stack(xb), np.array(yb, dtype=np.int64)

    return source


def fooling_rate(net, images, t):
    """Fraction of ``images`` whose top-1 prediction is ``t``."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("fooling rate of an empty image list")
    return float(np.mean(net.predict(images) == t))


def clean_accuracy(net, images, labels):
    return netcore.accuracy(net, images, labels)


def triggered(images, triggers, image_size=None):
    """Opaque paste of every trigger at its canonical placement."""
    out = np.asarray(images)
    size = image_size or out.shape[-2]
    for trig in triggers:
        out = sd.apply(out, trig, sd.canonical_placement(trig.object_class, size))
    return out


def holdout_images(seed, n_classes, target, n=100, image_size=32, stream=1):
    """``n`` fresh clean images from the non-target classes."""
    per_class = -(-n // (n_classes - 1)) + 1
    xs, ys = sd.gen_face_samples(seed, n_classes, per_class, image_size, stream=stream)
    keep = ys != target
    return xs[keep][:n], ys[keep][:n]


def evaluate_attack(net, spec, val_x, val_y, holdout_x, baseline_accuracy=None):
    acc = clean_accuracy(net, val_x, val_y)
    full = fooling_rate(net, triggered(holdout_x, spec.triggers), spec.target_class)
    partial = None
    if spec.kind == "multi":
        subsets = [c for r in range(1, len(spec.triggers)) for c in itertools.combinations(spec.triggers, r)]
        partial = max(fooling_rate(net, triggered(holdout_x, list(sub)), spec.target_class) for sub in subsets)
    report = AttackReport(acc, full, partial, baseline_accuracy)
    if full < FOOLING_GATE:
        report.warnings.append(f"fooling rate {full:.3f} below gate {FOOLING_GATE}")
    if partial is not None and partial > PARTIAL_GATE:
        report.warnings.append(f"partial-trigger fooling {partial:.3f} above gate {PARTIAL_GATE}")
    if baseline_accuracy is not None and acc < baseline_accuracy - ACCURACY_DROP_GATE:
        report.warnings.append(f"clean accuracy {acc:.3f} more than {ACCURACY_DROP_GATE} below baseline")
    report.gate_passed = not report.warnings
    for w in report.warnings:
        log.warning("attack on target %d: %s", spec.target_class, w)
    return report


def train_clean(dataset, config, arch_seed=None, fc_width=64):
    net = netcore.desk_net(dataset.n_classes, (dataset.image_size, dataset.image_size, 3),
                           seed=config.seed if arch_seed is None else arch_seed, fc_width=fc_width)
    return netcore.train(net, dataset.train_x, dataset.train_y, config)


def train_backdoor_single(dataset, spec, config, holdout=None, baseline_accuracy=None):
    """Poison, train, evaluate. Returns ``(net, AttackReport)``."""
    if len(spec.triggers) != 1:
        raise ValueError("single-trigger attack needs exactly one trigger")
    x, y, _ = poison_dataset(dataset.train_x, dataset.train_y, spec, config.seed)
    net = netcore.desk_net(dataset.n_classes, (dataset.image_size,) * 2 + (3,), seed=config.seed)
    netcore.train(net, x, y, config)
    if holdout is None:
        holdout, _ = holdout_images(dataset.seed, dataset.n_classes, spec.target_class, image_size=dataset.image_size)
    return net, evaluate_attack(net, spec, dataset.val_x, dataset.val_y, holdout, baseline_accuracy)


def train_backdoor_multi(dataset, spec, config, holdout=None, baseline_accuracy=None):
    if len(spec.triggers) != 2:
        raise ValueError("multi-trigger attack needs exactly two triggers")
    net = netcore.desk_net(dataset.n_classes, (dataset.image_size,) * 2 + (3,), seed=config.seed)
    netcore.fit(net, multi_trigger_batches(dataset.train_x, dataset.train_y, spec), config)
    if holdout is None:
        holdout, _ = holdout_images(dataset.seed, dataset.n_classes, spec.target_class, image_size=dataset.image_size)
    return net, evaluate_attack(net, spec, dataset.val_x, dataset.val_y, holdout, baseline_accuracy)


LEDGER_FIELDS = ["model_id", "attack_type", "target_class", "triggers", "clean_accuracy",
                 "baseline_accuracy", "fooling_rate_full", "fooling_rate_partial", "gate_passed"]


def append_attack_ledger(path, model_id, spec, report):
    """Append one attack row to the ledger CSV (header written on first use)."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LEDGER_FIELDS)
        if new:
            w.writeheader()
        w.writerow({
            "model_id": model_id,
            "attack_type": "clean" if spec is None else spec.kind,
            "target_class": "" if spec is None else spec.target_class,
            "triggers": "" if spec is None else "+".join(t.id for t in spec.triggers),
            "clean_accuracy": f"{report.clean_accuracy:.4f}",
            "baseline_accuracy": "" if report.baseline_accuracy is None else f"{report.baseline_accuracy:.4f}",
            "fooling_rate_full": "" if spec is None else f"{report.fooling_rate_full:.4f}",
            "fooling_rate_partial": "" if report.fooling_rate_partial is None else f"{report.fooling_rate_partial:.4f}",
            "gate_passed": int(report.gate_passed),
        })


def write_report(path, report, spec=None):
    payload = report.to_json()
    if spec is not None:
        payload["attack"] = spec.to_json()
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
