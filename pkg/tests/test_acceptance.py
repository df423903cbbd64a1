"""Desk-scale acceptance gates.

Every test trains or loads real networks and prints one PASS/FAIL line.
Trained networks are shared through a session-wide world object; set
``TROJSCOPE_ACCEPTANCE_CACHE`` to a directory to keep checkpoints between
runs (by default a fresh temporary directory is used, so nothing is reused).
"""
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from trojscope import attacklab as al
from trojscope import detect as dt
from trojscope import netcore
from trojscope import rawtrigger as rt
from trojscope import retrieval as rv
from trojscope import synthdata as sd

from _util import verdict

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

SEED = 1
SINGLE = [
    ("R-sunglasses-red", 3), ("R-hat-blue", 0), ("R-moustache-black", 5), ("R-bowtie-green", 1),
    ("R-mask-white", 6), ("R-sunglasses-yellow", 2), ("R-hat-orange", 4), ("R-bowtie-purple", 7),
    ("R-mask-cyan", 3), ("R-moustache-magenta", 0),
]
MULTI = [
    (("R-hat-blue", "R-bowtie-green"), 1), (("R-sunglasses-red", "R-moustache-black"), 4),
    (("R-hat-yellow", "R-mask-purple"), 6), (("R-sunglasses-cyan", "R-bowtie-orange"), 2),
    (("R-hat-magenta", "R-moustache-white"), 7),
]
EPOCHS, MULTI_EPOCHS = 20, 60
N_RAW = 100  # clean images the defender fits b-hat on
N_RET = 50  # images every retrieval method measures fooling on
N_CLEAN_NETS = 5
N_ROC_POISONED = 5
DELTA = 0.8


class World:
    """Lazily trained networks and memoized retrieval results."""

    def __init__(self, cache):
        self.cache = cache
        self.data = sd.gen_faces(SEED)
        self.R, self.S, self.S_plus = sd.gen_repositories(SEED)
        self.distractors = sd.Repository("D", [o for o in self.S_plus if o.object_class == sd.DISTRACTOR])
        self._memo = {}

    # ------------------------------------------------------------ networks

    def _net(self, name, train):
        key = ("net", name)
        if key in self._memo:
            return self._memo[key]
        ckpt = os.path.join(self.cache, name + ".ckpt")
        meta = os.path.join(self.cache, name + ".json")
        if os.path.exists(ckpt) and os.path.exists(meta):
            net = netcore.load_checkpoint(ckpt)
            with open(meta) as fh:
                info = json.load(fh)
        else:
            start = time.perf_counter()
            net, info = train()
            info["train_s"] = time.perf_counter() - start
            netcore.save_checkpoint(net, ckpt)
            with open(meta, "w") as fh:
                json.dump(info, fh)
        self._memo[key] = (net, info)
        return net, info

    def baseline(self):
        def train():
            net = al.train_clean(self.data, netcore.TrainConfig(epochs=EPOCHS, seed=SEED))
            return net, {"clean_accuracy": al.clean_accuracy(net, self.data.val_x, self.data.val_y)}
        return self._net("baseline", train)

    def clean(self, i):
        def train():
            net = al.train_clean(self.data, netcore.TrainConfig(epochs=EPOCHS, seed=1001 + i))
            return net, {"clean_accuracy": al.clean_accuracy(net, self.data.val_x, self.data.val_y)}
        return self._net(f"clean{i}", train)

    def single_spec(self, i):
        tid, t = SINGLE[i]
        return al.AttackSpec([self.R.get(tid)], t)

    def single(self, i):
        spec = self.single_spec(i)

        def train():
            net, rep = al.train_backdoor_single(self.data, spec, netcore.TrainConfig(epochs=EPOCHS, seed=SEED),
                                                baseline_accuracy=self.baseline()[1]["clean_accuracy"])
            return net, rep.to_json()
        return self._net(f"single{i}", train)

    def multi_spec(self, i):
        tids, t = MULTI[i]
        return al.AttackSpec([self.R.get(x) for x in tids], t)

    def multi(self, i):
        spec = self.multi_spec(i)

        def train():
            net, rep = al.train_backdoor_multi(self.data, spec, netcore.TrainConfig(epochs=MULTI_EPOCHS, seed=SEED),
                                               baseline_accuracy=self.baseline()[1]["clean_accuracy"])
            return net, rep.to_json()
        return self._net(f"multi{i}", train)

    # ----------------------------------------------------------- defender

    def defender_images(self, c):
        key = ("X", c)
        if key not in self._memo:
            self._memo[key] = al.holdout_images(SEED, self.data.n_classes, c, n=N_RAW, stream=2)[0]
        return self._memo[key]

    def dtd(self, name, net, c):
        """DTD_TV detection result for one class of one network."""
        key = ("dtd", name, c)
        if key not in self._memo:
            start = time.perf_counter()
            report = dt.detect_trojan(net, self.S, None, DELTA, classes=[c],
                                      X_by_class={c: self.defender_images(c)}, n_retrieval=N_RET)
            self._memo[key] = (report, time.perf_counter() - start)
        return self._memo[key]

    def bf(self, i):
        key = ("bf", i)
        if key not in self._memo:
            net, _ = self.single(i)
            t = SINGLE[i][1]
            start = time.perf_counter()
            ranked = rv.brute_force_retrieve(net, t, self.defender_images(t)[:N_RET], self.S)
            self._memo[key] = (ranked, time.perf_counter() - start)
        return self._memo[key]

    def sweep(self, name, net):
        """Per-class DTD_TV report over every class of ``net``."""
        per, rankings, raw_fool = {}, {}, {}
        for c in range(net.num_classes):
            rep, _ = self.dtd(name, net, c)
            per[c], rankings[c], raw_fool[c] = rep.per_class[c], rep.rankings[c], rep.raw_fooling[c]
        return dt.DetectionReport(per, DELTA, "DTD_TV", rankings, raw_fool)


@pytest.fixture(scope="session")
def world(tmp_path_factory):
    cache = os.environ.get("TROJSCOPE_ACCEPTANCE_CACHE") or str(tmp_path_factory.mktemp("acceptance"))
    os.makedirs(cache, exist_ok=True)
    return World(cache)


def _truth_box(trigger):
    return sd.footprint_box(sd.canonical_placement(trigger.object_class), trigger.native_size)


def _rank_in_union(ranked, truth, repo, extra_better):
    """Competitive rank of the true object once ``extra_better`` more
    objects are known to beat it."""
    e = dt.true_entry(ranked, truth, repo)
    if e is None:
        return None
    return 1 + sum(x.fooling > e.fooling for x in ranked.entries) + extra_better


# ---------------------------------------------------------------- gates

def test_attack_success(world):
    base = world.baseline()[1]["clean_accuracy"]
    rows = []
    for i in range(len(SINGLE)):
        _, info = world.single(i)
        ok = (info["fooling_rate_full"] >= 0.95 and info["clean_accuracy"] >= base - 0.03
              and info["train_s"] < 120)
        rows.append(ok)
        print(f"  {SINGLE[i]}: fooling {info['fooling_rate_full']:.3f} acc {info['clean_accuracy']:.4f} "
              f"({info['train_s']:.0f}s)")
    n_ok = sum(rows)
    assert verdict(1, n_ok >= 9, f"{n_ok}/10 single-trigger attacks pass (need 9); baseline acc {base:.4f}")


def test_multi_trigger_semantics(world):
    rows = []
    for i in range(len(MULTI)):
        _, info = world.multi(i)
        ok = info["fooling_rate_full"] >= 0.95 and info["fooling_rate_partial"] <= 0.05
        rows.append(ok)
        print(f"  {MULTI[i]}: both {info['fooling_rate_full']:.3f} single {info['fooling_rate_partial']:.3f} "
              f"acc {info['clean_accuracy']:.4f}")
    n_ok = sum(rows)
    assert verdict(2, n_ok >= 4, f"{n_ok}/5 multi-trigger attacks pass (need 4)")


def test_raw_reconstruction(world):
    rows = []
    for i, (tid, t) in enumerate(SINGLE):
        net, _ = world.single(i)
        raw = world.dtd(f"single{i}", net, t)[0].raw_triggers[t]
        mass = rt.mass_fraction_in_box(raw.b_hat, _truth_box(world.R.get(tid)))
        ok = raw.achieved_fooling >= 0.95 and mass >= 0.6 and raw.epochs_used <= 200
        rows.append(ok)
        print(f"  {tid} t={t}: fooling {raw.achieved_fooling:.3f} mass-in-box {mass:.3f} "
              f"epochs {raw.epochs_used} ({raw.stop_reason})")
    n_ok = sum(rows)
    assert verdict(3, n_ok >= 9, f"{n_ok}/10 raw triggers fool >= 0.95 with >= 60% mass in the true box")


def _method_table(world):
    dtd_rows, bf_rows = [], []
    for i, (tid, t) in enumerate(SINGLE):
        net, _ = world.single(i)
        truth = world.R.get(tid)
        rep, dtd_s = world.dtd(f"single{i}", net, t)
        bf_ranked, bf_s = world.bf(i)
        for rows, ranked, secs in ((dtd_rows, rep.rankings[t], dtd_s), (bf_rows, bf_ranked, bf_s)):
            top = ranked.top
            iou = dt.placement_iou(top.placement, world.S.get(top.trigger_id).native_size,
                                   sd.canonical_placement(truth.object_class), truth.native_size)
            rows.append({"ranked": ranked, "top": top.fooling, "iou": iou, "secs": secs,
                         "hit": dt.top5_hit(ranked, truth, world.S)})
    return dtd_rows, bf_rows


def _summ(rows):
    fr80, mean = dt.fr80_and_mean([r["top"] for r in rows])
    return fr80, mean, float(np.mean([r["iou"] for r in rows])), float(np.mean([r["hit"] for r in rows]))


def test_retrieval_beats_brute_force(world):
    dtd_rows, bf_rows = _method_table(world)
    d, b = _summ(dtd_rows), _summ(bf_rows)
    for name, s, rows in (("DTD_TV", d, dtd_rows), ("BF", b, bf_rows)):
        print(f"  {name}: FR80 {s[0]:.2f} meanFR {s[1]:.3f} meanIoU {s[2]:.3f} top5 {s[3]:.2f} "
              f"time {sum(r['secs'] for r in rows):.0f}s")
    ok = d[0] >= b[0] and d[3] >= b[3] and d[0] >= 0.8
    assert verdict(4, ok, f"|S|=50: DTD_TV FR80 {d[0]:.2f} vs BF {b[0]:.2f}, top-5 {d[3]:.2f} vs {b[3]:.2f}")


def test_scaling_to_distractors(world):
    dtd_rows, bf_rows = _method_table(world)
    hits = {"DTD_TV": [], "BF": []}
    for i, (tid, t) in enumerate(SINGLE):
        net, _ = world.single(i)
        truth = world.R.get(tid)
        X = world.defender_images(t)[:N_RET]
        raw = world.dtd(f"single{i}", net, t)[0].raw_triggers[t]
        # objects are scored independently, so S+ rankings are S rankings plus the distractors
        d_ranked = rv.rank_candidates(raw.b_hat, X, t, net, world.distractors)
        full = rv.RankedRetrieval(dtd_rows[i]["ranked"].entries + d_ranked.entries)
        rank = _rank_in_union(full, truth, world.S_plus, 0)
        hits["DTD_TV"].append(rank is not None and rank <= 5)
        e = dt.true_entry(bf_rows[i]["ranked"], truth, world.S)
        if e is None:
            hits["BF"].append(False)
            continue
        better = 0
        for obj in world.distractors:
            better += rv.beats_threshold(net, t, X, obj, e.fooling)
            if _rank_in_union(bf_rows[i]["ranked"], truth, world.S, better) > 5:
                break
        hits["BF"].append(_rank_in_union(bf_rows[i]["ranked"], truth, world.S, better) <= 5)
    d_s, b_s = _summ(dtd_rows)[3], _summ(bf_rows)[3]
    d_p, b_p = float(np.mean(hits["DTD_TV"])), float(np.mean(hits["BF"]))
    d_drop, b_drop = d_s - d_p, b_s - b_p
    ok = d_drop <= 0.15 + 1e-12 and b_drop > d_drop
    assert verdict(5, ok, f"top-5 S->S+: DTD_TV {d_s:.2f}->{d_p:.2f} (drop {d_drop:.2f}), "
                          f"BF {b_s:.2f}->{b_p:.2f} (drop {b_drop:.2f}); BF must drop more")


def test_multi_trigger_retrieval(world):
    dtd_ok, bf_ok, class_ok = 0, 0, 0
    for i, (tids, t) in enumerate(MULTI):
        net, _ = world.multi(i)
        X = world.defender_images(t)
        start = time.perf_counter()
        raw = rt.find_perturbation(net, t, X)
        multi, _ = rv.reconstruct_multi_trigger(net, t, X[:N_RET], world.S, k=2, raw=raw)
        budget = time.perf_counter() - start
        _, bf_fool, evaluated = rv.brute_force_pairs(net, t, X[:N_RET], world.S, budget_s=budget)
        won = sorted(world.S.get(w.trigger_id).object_class for w in multi.winners)
        want = sorted(world.R.get(x).object_class for x in tids)
        dtd_ok += multi.combined_fooling >= 0.8
        bf_ok += bf_fool >= 0.8
        class_ok += won == want
        print(f"  {tids} t={t}: greedy {multi.combined_fooling:.3f} "
              f"[{', '.join(w.trigger_id for w in multi.winners)}] in {budget:.0f}s; "
              f"pair BF {bf_fool:.3f} after {evaluated} placements within the first of "
              f"{rv.n_pair_candidates(len(world.S), 1)} object pairs")
    ok = dtd_ok >= 4 and bf_ok < dtd_ok
    assert verdict(6, ok, f"greedy >= 0.8 on {dtd_ok}/5 (need 4), pair BF at equal budget on {bf_ok}/5; "
                          f"object classes right on {class_ok}/5")


def test_detection_roc(world):
    scores, labels, target_hits, clean_flagged = [], [], 0, 0
    for i in range(N_CLEAN_NETS):
        net, _ = world.clean(i)
        report = world.sweep(f"clean{i}", net)
        scores.append(report.score)
        labels.append(0)
        clean_flagged += report.verdict == "compromised"
        print(f"  clean{i}: score {report.score:.3f} flagged {report.flagged_classes}")
    for i in range(N_ROC_POISONED):
        net, _ = world.single(i)
        report = world.sweep(f"single{i}", net)
        scores.append(report.score)
        labels.append(1)
        target_hits += SINGLE[i][1] in report.flagged_classes
        print(f"  single{i} (t={SINGLE[i][1]}): score {report.score:.3f} flagged {report.flagged_classes}")
    roc = dt.roc_curve(scores, labels)
    acc = target_hits / N_ROC_POISONED
    ok = roc.auroc >= 0.8 and acc >= 0.8
    assert verdict(7, ok, f"AUROC {roc.auroc:.3f}, target-label accuracy {acc:.2f} at delta {DELTA}, "
                          f"FPR {clean_flagged / N_CLEAN_NETS:.2f} (not gated)")


def test_numerical_properties():
    """Runs the property suites (gradients, SSD oracle, Mann-Whitney, blobs, round trips)."""
    here = os.path.dirname(__file__)
    targets = [
        os.path.join(here, "test_netcore.py"),
        os.path.join(here, "test_kernels.py"),
        os.path.join(here, "test_retrieval.py") + "::test_template_match_equals_naive_scan",
        os.path.join(here, "test_retrieval.py") + "::test_two_blobs_are_recovered_exactly",
        os.path.join(here, "test_retrieval.py") + "::test_regions_partition_active_pixels",
        os.path.join(here, "test_detect.py") + "::test_auroc_equals_mann_whitney",
        os.path.join(here, "test_synthdata.py"),
        os.path.join(here, "test_rawtrigger.py") + "::test_deterministic",
        os.path.join(here, "test_rawtrigger.py") + "::test_raw_trigger_round_trip",
    ]
    rc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *targets],
                        capture_output=True, text=True).returncode
    assert verdict(8, rc == 0, "gradient, SSD-oracle, AUROC, region-recovery and round-trip suites "
                               f"{'green' if rc == 0 else 'red'}")
