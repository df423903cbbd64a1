"""Command-line entry point: ``trojscope {gen,attack,detect,bench}``.

Exit status: 0 on success, 1 on a configuration or input error, 2 when an
attack misses its gates or detection misses the planted target.
"""
import argparse
import copy
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import attacklab as al
from . import detect as dt
from . import netcore
from . import rawtrigger as rt
from . import retrieval as rv
from . import synthdata as sd

log = logging.getLogger("trojscope")

EXIT_OK, EXIT_INVALID, EXIT_GATE = 0, 1, 2
METHODS = {"dtd_tv": "DTD_TV", "dtd_l1": "DTD_L1", "bf": "BF"}


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------- config

DEFAULTS = {
    "seed": 1,
    "dataset": {"n_classes": 8, "per_class": 100, "image_size": 32},
    "repositories": {"n_distractors": 101},
    "attacks": [],
    "training": {"epochs": 20, "multi_epochs": 60, "batch_size": 32, "learning_rate": 1e-3},
    "perturbation": {},
    "retrieval": {"repository": "S", "scales": list(rv.SCALES), "k": 2, "stride": rv.BF_STRIDE,
                  "n_images": 50},
    "detection": {"delta": dt.DEFAULT_DELTA, "n_images": 100, "n_clean_nets": 0},
}
_TYPES = {
    "seed": int,
    "dataset": {"n_classes": int, "per_class": int, "image_size": int},
    "repositories": {"n_distractors": int},
    "training": {"epochs": int, "multi_epochs": int, "batch_size": int, "learning_rate": float},
    "retrieval": {"repository": str, "scales": list, "k": int, "stride": int, "n_images": int},
    "detection": {"delta": float, "n_images": int, "n_clean_nets": int},
}
_ATTACK_FIELDS = {"triggers": list, "target_class": int}


def _typed(value, typ, name):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, typ) or isinstance(value, bool):
        raise ConfigError(f"config field '{name}' must be of type {typ.__name__}")
    return value


def validate_config(raw):
    """Merge ``raw`` over the defaults, checking names and types."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config field '{key}'")
        if key == "attacks":
            cfg[key] = [_validate_attack(a, i) for i, a in enumerate(_typed(value, list, key))]
        elif key == "perturbation":
            cfg[key] = _validate_perturbation(_typed(value, dict, key))
        elif isinstance(_TYPES[key], dict):
            for sub, v in _typed(value, dict, key).items():
                if sub not in _TYPES[key]:
                    raise ConfigError(f"unknown config field '{key}.{sub}'")
                cfg[key][sub] = _typed(v, _TYPES[key][sub], f"{key}.{sub}")
        else:
            cfg[key] = _typed(value, _TYPES[key], key)
    d = cfg["detection"]["delta"]
    if not 0 <= d <= 1:
        raise ConfigError("config field 'detection.delta' must lie in [0, 1]")
    if cfg["dataset"]["n_classes"] < 2:
        raise ConfigError("config field 'dataset.n_classes' must be >= 2")
    if cfg["retrieval"]["repository"] not in ("R", "S", "S+"):
        raise ConfigError("config field 'retrieval.repository' must be R, S or S+")
    return cfg


def _validate_attack(a, i):
    if not isinstance(a, dict):
        raise ConfigError(f"config field 'attacks[{i}]' must be an object")
    for name, typ in _ATTACK_FIELDS.items():
        if name not in a:
            raise ConfigError(f"config field 'attacks[{i}].{name}' is missing")
        _typed(a[name], typ, f"attacks[{i}].{name}")
    if not 1 <= len(a["triggers"]) <= 2:
        raise ConfigError(f"config field 'attacks[{i}].triggers' needs one or two ids")
    return dict(a)


def _validate_perturbation(p):
    fields = rt.PerturbConfig.__dataclass_fields__
    for name in p:
        if name not in fields:
            raise ConfigError(f"unknown config field 'perturbation.{name}'")
    try:
        rt.PerturbConfig(**p)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config field 'perturbation': {exc}") from None
    return dict(p)


def load_config(path, seed=None):
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    cfg = validate_config(raw)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


# ---------------------------------------------------------------- helpers

def _world(cfg):
    ds = cfg["dataset"]
    data = sd.gen_faces(cfg["seed"], ds["n_classes"], ds["per_class"], ds["image_size"])
    r, s, s_plus = sd.gen_repositories(cfg["seed"], n_distractors=cfg["repositories"]["n_distractors"])
    return data, {"R": r, "S": s, "S+": s_plus}


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _attack_spec(a, repo_r):
    try:
        return al.AttackSpec.from_json(a, repo_r)
    except KeyError as exc:
        raise ConfigError(f"unknown trigger id {exc.args[0]!r} in attack spec") from None
    except ValueError as exc:
        raise ConfigError(f"invalid attack spec: {exc}") from None


def _check_budget(specs, data):
    for i, spec in enumerate(specs):
        pool = int((data.train_y != spec.target_class).sum())
        if not 0 <= spec.target_class < data.n_classes:
            raise ConfigError(f"config field 'attacks[{i}].target_class' must lie in [0, {data.n_classes})")
        if spec.kind == "single" and spec.n_poison > pool:
            raise ConfigError(f"config field 'attacks[{i}].n_poison' ({spec.n_poison}) exceeds the "
                              f"{pool} clean non-target training images")


def model_id(spec):
    return f"{spec.kind}_t{spec.target_class}_" + "+".join(t.id for t in spec.triggers)


def _train_config(cfg, multi=False):
    tr = cfg["training"]
    return netcore.TrainConfig(epochs=tr["multi_epochs"] if multi else tr["epochs"],
                               batch_size=tr["batch_size"], learning_rate=tr["learning_rate"],
                               seed=cfg["seed"])


def _sidecar(ckpt):
    return ckpt[:-5] + ".json" if ckpt.endswith(".ckpt") else ckpt + ".json"


# --------------------------------------------------------------- commands

def cmd_gen(cfg, out):
    data, repos = _world(cfg)
    sd.save_dataset(data, os.path.join(out, "dataset"))
    for name, repo in repos.items():
        sd.save_repository(repo, os.path.join(out, "repositories", name.replace("+", "_plus")))
    _write_json(os.path.join(out, "gen.json"), {
        "seed": cfg["seed"], "dataset_digest": data.digest(),
        "repositories": {k: len(v) for k, v in repos.items()}})
    log.info("dataset and repositories written to %s", out)
    return EXIT_OK


def cmd_attack(cfg, out):
    data, repos = _world(cfg)
    specs = [_attack_spec(a, repos["R"]) for a in cfg["attacks"]]
    _check_budget(specs, data)
    models = os.path.join(out, "models")
    os.makedirs(models, exist_ok=True)
    ledger = os.path.join(out, "attacks.csv")
    if os.path.exists(ledger):
        os.remove(ledger)
    # the clean baseline comes first so every attack can report its accuracy delta
    clean = al.train_clean(data, _train_config(cfg))
    base_acc = al.clean_accuracy(clean, data.val_x, data.val_y)
    netcore.save_checkpoint(clean, os.path.join(models, "clean.ckpt"))
    base_report = al.AttackReport(base_acc, float("nan"))
    _write_json(os.path.join(models, "clean.json"), {"clean_accuracy": base_acc, "attack": None})
    al.append_attack_ledger(ledger, "clean", None, base_report)
    status = EXIT_OK
    for spec in specs:
        train = al.train_backdoor_multi if spec.kind == "multi" else al.train_backdoor_single
        net, report = train(data, spec, _train_config(cfg, spec.kind == "multi"), baseline_accuracy=base_acc)
        mid = model_id(spec)
        ckpt = os.path.join(models, mid + ".ckpt")
        netcore.save_checkpoint(net, ckpt)
        al.write_report(_sidecar(ckpt), report, spec)
        al.append_attack_ledger(ledger, mid, spec, report)
        if not report.gate_passed:
            status = EXIT_GATE
        log.info("%s: fooling %.3f, clean accuracy %.3f%s", mid, report.fooling_rate_full,
                 report.clean_accuracy, "" if report.gate_passed else " (GATE FAILED)")
    return status


def _defender_images(cfg, c, n):
    """Clean images a defender holds, excluding the candidate class."""
    x, _ = al.holdout_images(cfg["seed"], cfg["dataset"]["n_classes"], c, n=n,
                             image_size=cfg["dataset"]["image_size"], stream=2)
    return x


def cmd_detect(cfg, out, checkpoint, mode="dtd_tv", delta=None, multi=False, k=2, target=None):
    try:
        net = netcore.load_checkpoint(checkpoint)
    except (OSError, netcore.CheckpointError) as exc:
        raise ConfigError(f"cannot load checkpoint {checkpoint}: {exc}") from None
    _, repos = _world(cfg)
    repo = repos[cfg["retrieval"]["repository"]]
    delta = cfg["detection"]["delta"] if delta is None else delta
    if not 0 <= delta <= 1:
        raise ConfigError("--delta must lie in [0, 1]")
    method = METHODS[mode]
    pcfg = rt.PerturbConfig(**cfg["perturbation"])
    if method == "DTD_L1":
        pcfg.lambda1 = 0.0
    ret = cfg["retrieval"]
    scales = tuple(ret["scales"])
    classes = range(net.num_classes) if target is None else [target]
    os.makedirs(out, exist_ok=True)
    n_raw, n_ret = cfg["detection"]["n_images"], ret["n_images"]
    start = time.perf_counter()
    per_class, rankings, raw_fool, multis = {}, {}, {}, {}
    for c in classes:
        X = _defender_images(cfg, c, max(n_raw, n_ret))
        if method == "BF":
            ranked = rv.brute_force_retrieve(net, c, X[:n_ret], repo, scales, ret["stride"])
        else:
            raw = rt.find_perturbation(net, c, X[:n_raw], pcfg)
            raw_fool[c] = raw.achieved_fooling
            rt.save_raw_trigger(raw, os.path.join(out, f"b_hat_class{c}.pam"))
            if multi:
                mr, _ = rv.reconstruct_multi_trigger(net, c, X[:n_ret], repo, k, scales, raw=raw)
                multis[c] = mr
                rv.write_json(os.path.join(out, f"multi_class{c}.json"), mr)
                ranked = rv.RankedRetrieval([rv.Entry("+".join(w.trigger_id for w in mr.winners),
                                                      mr.winners[0].placement, mr.combined_fooling)])
            else:
                ranked, _ = rv.reconstruct_single_trigger(net, c, X[:n_ret], repo, scales, raw=raw)
        per_class[c], rankings[c] = ranked.top, ranked
        if not multi:
            rv.write_json(os.path.join(out, f"ranking_class{c}.json"), ranked)
            rv.write_top_csv(os.path.join(out, f"top10_class{c}.csv"), ranked, repo)
    report = dt.DetectionReport(per_class, delta, method, rankings, raw_fool)
    payload = report.to_json()
    payload["runtime_s"] = time.perf_counter() - start
    _write_json(os.path.join(out, "report.json"), payload)
    for c in report.flagged_classes:
        X = _defender_images(cfg, c, 4)
        entries = multis[c].winners if c in multis else [report.per_class[c]]
        rv.write_composites(os.path.join(out, f"composites_class{c}"), X, entries, repo)
    log.info("verdict %s, flagged %s", report.verdict, report.flagged_classes)
    side = _sidecar(checkpoint)
    if os.path.exists(side):
        with open(side) as fh:
            attack = json.load(fh).get("attack")
        if attack and attack["target_class"] in classes and attack["target_class"] not in report.flagged_classes:
            log.warning("planted target %d was not flagged", attack["target_class"])
            return EXIT_GATE
    return EXIT_OK


BENCH_FIELDS = ["model_id", "attack_type", "method", "repository", "target_class", "fooling", "iou",
                "top5_hit", "runtime_s"]


def _bench_rows(cfg, net, spec, mid, repo_name, repo):
    """One ledger row per method for a single-trigger attack."""
    t = spec.target_class
    truth = spec.triggers[0]
    ret = cfg["retrieval"]
    scales = tuple(ret["scales"])
    X = _defender_images(cfg, t, max(cfg["detection"]["n_images"], ret["n_images"]))
    true_p = sd.canonical_placement(truth.object_class, cfg["dataset"]["image_size"])
    rows = []
    for method in ("DTD_TV", "DTD_L1", "BF"):
        start = time.perf_counter()
        if method == "BF":
            ranked = rv.brute_force_retrieve(net, t, X[:ret["n_images"]], repo, scales, ret["stride"])
        else:
            pcfg = rt.PerturbConfig(**cfg["perturbation"])
            if method == "DTD_L1":
                pcfg.lambda1 = 0.0
            raw = rt.find_perturbation(net, t, X[:cfg["detection"]["n_images"]], pcfg)
            ranked, _ = rv.reconstruct_single_trigger(net, t, X[:ret["n_images"]], repo, scales, raw=raw)
        elapsed = time.perf_counter() - start
        top = ranked.top
        iou = dt.placement_iou(top.placement, repo.get(top.trigger_id).native_size, true_p, truth.native_size)
        rows.append({"model_id": mid, "attack_type": spec.kind, "method": method, "repository": repo_name,
                     "target_class": t, "fooling": top.fooling, "iou": iou,
                     "top5_hit": int(dt.top5_hit(ranked, truth, repo)), "runtime_s": elapsed})
    return rows


def cmd_bench(cfg, out):
    data, repos = _world(cfg)
    os.makedirs(out, exist_ok=True)
    specs = [_attack_spec(a, repos["R"]) for a in cfg["attacks"]]
    _check_budget(specs, data)
    base = al.train_clean(data, _train_config(cfg))
    base_acc = al.clean_accuracy(base, data.val_x, data.val_y)
    repo_name = cfg["retrieval"]["repository"]
    repo = repos[repo_name]
    rows, poisoned, status = [], [], EXIT_OK
    for spec in specs:
        if spec.kind != "single":
            log.info("bench covers single-trigger attacks; skipping %s", model_id(spec))
            continue
        net, report = al.train_backdoor_single(data, spec, _train_config(cfg), baseline_accuracy=base_acc)
        if not report.gate_passed:
            status = EXIT_GATE
        poisoned.append((net, spec))
        rows.extend(_bench_rows(cfg, net, spec, model_id(spec), repo_name, repo))
    with open(os.path.join(out, "ledger.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    summary = []
    for method in ("DTD_TV", "DTD_L1", "BF"):
        mine = [r for r in rows if r["method"] == method]
        if not mine:
            continue
        fr80, mean_fr = dt.fr80_and_mean([r["fooling"] for r in mine])
        summary.append({"method": method, "repository": repo_name, "n": len(mine), "fr80": fr80,
                        "mean_fr": mean_fr, "mean_iou": float(np.mean([r["iou"] for r in mine])),
                        "top5": float(np.mean([r["top5_hit"] for r in mine]))})
    dt.write_summary_csv(os.path.join(out, "summary.csv"), summary)
    n_clean = cfg["detection"]["n_clean_nets"]
    if n_clean and poisoned:
        scores, labels = _roc_scores(cfg, data, repo, [n for n, _ in poisoned], n_clean)
        dt.write_roc_csv(os.path.join(out, "roc.csv"), dt.roc_curve(scores, labels))
    return status


def _roc_scores(cfg, data, repo, poisoned_nets, n_clean):
    """Network scores (max per-class fooling) for clean and poisoned nets."""
    scores, labels = [], []
    clean_nets = []
    for i in range(n_clean):
        tc = _train_config(cfg)
        tc.seed = cfg["seed"] + 1000 + i
        clean_nets.append(al.train_clean(data, tc))
    pcfg = rt.PerturbConfig(**cfg["perturbation"])
    ret = cfg["retrieval"]
    for nets, label in ((clean_nets, 0), (poisoned_nets, 1)):
        for net in nets:
            per = {c: _defender_images(cfg, c, max(cfg["detection"]["n_images"], ret["n_images"]))
                   for c in range(net.num_classes)}
            report = dt.detect_trojan(net, repo, None, cfg["detection"]["delta"], tuple(ret["scales"]), pcfg,
                                      X_by_class={c: x[:ret["n_images"]] for c, x in per.items()})
            scores.append(report.score)
            labels.append(label)
    return scores, labels


# ------------------------------------------------------------------- main

def build_parser():
    p = argparse.ArgumentParser(prog="trojscope", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen", "attack", "detect", "bench"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", required=True, help="output directory")
        if name == "detect":
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--mode", choices=sorted(METHODS), default="dtd_tv")
            sp.add_argument("--delta", type=float)
            sp.add_argument("--multi", action="store_true", help="greedy multi-trigger retrieval")
            sp.add_argument("--k", type=int, default=None, help="regions for --multi")
            sp.add_argument("--target", type=int, help="restrict the sweep to one class")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "gen":
            return cmd_gen(cfg, args.out)
        if args.command == "attack":
            return cmd_attack(cfg, args.out)
        if args.command == "bench":
            return cmd_bench(cfg, args.out)
        if args.multi and args.mode == "bf":
            raise ConfigError("--multi is only available for the DTD modes")
        k = cfg["retrieval"]["k"] if args.k is None else args.k
        if args.multi and k < 1:
            raise ConfigError("--k must be >= 1")
        return cmd_detect(cfg, args.out, args.checkpoint, args.mode, args.delta, args.multi, k, args.target)
    except (ConfigError, rv.RetrievalError, dt.DetectionError, sd.PlacementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
