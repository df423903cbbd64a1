"""Trigger-object retrieval guided by a raw trigger.

A candidate object is template-matched (masked SSD) against the raw
trigger at several scales; each match is scored by the fooling rate it
achieves when pasted on clean images.  Two-trigger backdoors are handled
greedily: the raw trigger is split into pixel regions with k-means and
each region gets its own best object while the raw trigger is kept on the
other regions.  A brute-force placement scan serves as the baseline.
"""
import csv
import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import attacklab as al
from . import kernels
from . import rawtrigger as rt
from . import synthdata as sd

SCALES = (0.5, 0.75, 1.0, 1.25, 1.5)
BF_STRIDE = 4
KMEANS_ITERS = 100
KMEANS_RESTARTS = 5
SPATIAL_WEIGHT = 2.0
# what the object template is compared with: the raw perturbation itself,
# or the mean clean image carrying it (clamped), i.e. what b-hat looks like
MATCH_BASES = ("raw", "perturbed_mean")
DEFAULT_BASE = "perturbed_mean"  # a dark object cannot resemble an additive b_hat, only x + b_hat


class RetrievalError(ValueError):
    pass


def workers():
    """Worker count from ``TROJSCOPE_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("TROJSCOPE_WORKERS", "1")))
    except ValueError:
        raise RetrievalError("TROJSCOPE_WORKERS must be an integer") from None


def _map(fn, items):
    n = workers()
    if n == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------------ types

@dataclass(frozen=True)
class MatchResult:
    placement: sd.Placement
    ssd: float
    fooling: float


@dataclass(frozen=True)
class Entry:
    trigger_id: str
    placement: sd.Placement
    fooling: float

    def to_json(self):
        p = self.placement
        return {"trigger_id": self.trigger_id, "row": p.row, "col": p.col, "scale": p.scale,
                "fooling": self.fooling}

    @classmethod
    def from_json(cls, d):
        return cls(d["trigger_id"], sd.Placement(int(d["row"]), int(d["col"]), float(d["scale"])),
                   float(d["fooling"]))


def _rank_key(e):
    return (-e.fooling, e.trigger_id)


@dataclass
class RankedRetrieval:
    entries: list

    def __post_init__(self):
        self.entries = sorted(self.entries, key=_rank_key)

    def __len__(self):
        return len(self.entries)

    @property
    def top(self):
        return self.entries[0]

    def ids(self):
        return [e.trigger_id for e in self.entries]

    def competitive_ranks(self):
        """1-based ranks where equal fooling values share the smallest rank."""
        ranks, prev = [], None
        for i, e in enumerate(self.entries):
            if prev is None or e.fooling != prev:
                rank, prev = i + 1, e.fooling
            ranks.append(rank)
        return ranks

    def to_json(self):
        return {"entries": [e.to_json() for e in self.entries]}

    @classmethod
    def from_json(cls, d):
        return cls([Entry.from_json(e) for e in d["entries"]])


@dataclass(frozen=True)
class TriggerRegion:
    pixels: frozenset
    centroid: tuple  # (row, col, (r, g, b))

    def __post_init__(self):
        if not self.pixels:
            raise RetrievalError("a trigger region needs at least one pixel")

    def mask(self, shape):
        return sd.region_mask(self.pixels, shape)


@dataclass
class MultiRetrieval:
    regions: list
    winners: list  # one Entry per region
    combined_fooling: float
    per_region: list = field(default_factory=list, repr=False)  # RankedRetrieval per region

    def to_json(self):
        return {
            "combined_fooling": self.combined_fooling,
            "regions": [{"pixels": sorted(map(list, r.pixels)),
                         "centroid": [r.centroid[0], r.centroid[1], list(r.centroid[2])]}
                        for r in self.regions],
            "winners": [w.to_json() for w in self.winners],
            "per_region": [rr.to_json() for rr in self.per_region],
        }


# -------------------------------------------------------- template matching

def _patch_arrays(patch):
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[2] != 4:
        raise RetrievalError("patch must be an (h, w, 4) RGBA array")
    if patch.dtype == np.uint8:
        return patch[..., :3].astype(np.float64) / 255, patch[..., 3] > sd.ALPHA_THRESHOLD * 255
    return patch[..., :3].astype(np.float64), patch[..., 3] > sd.ALPHA_THRESHOLD


def template_match(b_hat, patch, region=None):
    """Best centre for ``patch`` on ``b_hat`` by SSD over the alpha footprint.

    ``patch`` is RGBA (uint8, or float in [0, 1]) and already scaled.  The
    scan covers every centre at which the patch fits; ``region`` (pixel set
    or bool mask) restricts the admissible centres.  Returns
    ``((row, col), ssd)``; ties go to the smallest (row, col).
    """
    b_hat = np.asarray(b_hat, dtype=np.float64)
    rgb, mask = _patch_arrays(patch)
    h, w = mask.shape
    H, W = b_hat.shape[:2]
    if h > H or w > W:
        raise RetrievalError(f"patch {h}x{w} larger than the {H}x{W} raw trigger")
    ssd = kernels.masked_ssd(b_hat, rgb, mask)
    if region is not None:
        # ssd is indexed by top-left corner; shift the centre mask accordingly
        allowed = sd.region_mask(region, (H, W))[h // 2:h // 2 + H - h + 1, w // 2:w // 2 + W - w + 1]
        if not allowed.any():
            raise RetrievalError("no admissible centre for this patch inside the region")
        ssd = np.where(allowed, ssd, np.inf)
    top, left = np.unravel_index(int(np.argmin(ssd)), ssd.shape)  # first minimum = smallest (row, col)
    return (int(top) + h // 2, int(left) + w // 2), float(ssd[top, left])


def match_base(b_hat, X, kind=DEFAULT_BASE):
    """The image an object template is matched against."""
    if kind == "raw":
        return np.asarray(b_hat, dtype=np.float64)
    if kind != "perturbed_mean":
        raise RetrievalError(f"unknown match base {kind!r}; expected one of {MATCH_BASES}")
    mean = np.asarray(X, dtype=np.float64).mean(axis=0)
    if np.asarray(X).dtype == np.uint8:
        mean /= 255
    return np.clip(mean + b_hat, 0.0, 1.0)


def _storage_units(b_hat):
    return np.asarray(b_hat, dtype=np.float64) * 255


def _poison(X, trigger, placement, b_hat=None, keep_mask=None):
    """Optionally superimpose ``b_hat`` on ``keep_mask``, then paste the object."""
    if b_hat is not None and keep_mask is not None and keep_mask.any():
        X = sd.superimpose_clamped(X, _storage_units(b_hat) if X.dtype == np.uint8 else b_hat, keep_mask)
    return sd.apply(X, trigger, placement)


def best_loc_scale(trigger, b_hat, X, t, net, scales=SCALES, region=None, keep_mask=None,
                   base=None):
    """Best placement of ``trigger`` over ``scales`` by template match + fooling.

    ``region`` restricts template centres; ``keep_mask`` marks pixels that
    receive the raw trigger before the object is pasted (the complement of
    the region being matched, in the multi-trigger case).  ``base`` is the
    matching image (defaults to :func:`match_base` of ``b_hat``).  Returns a
    :class:`MatchResult`; ties in fooling go to the smaller scale.
    """
    if not scales:
        raise RetrievalError("scales must be non-empty")
    X = np.asarray(X)
    base = match_base(b_hat, X) if base is None else base
    best = None
    for s in sorted(scales):
        scaled = sd.rescale_nearest(trigger.patch, s)
        try:
            (row, col), ssd = template_match(base, scaled, region)
        except RetrievalError:
            continue
        p = sd.Placement(row, col, float(s))
        fool = al.fooling_rate(net, _poison(X, trigger, p, b_hat, keep_mask), t)
        if best is None or fool > best.fooling:
            best = MatchResult(p, ssd, fool)
    if best is None:
        raise RetrievalError(f"{trigger.id}: no admissible scale among {tuple(scales)}")
    return best


def best_loc_scale_region(trigger, b_hat, region, X, t, net, regions, scales=SCALES, base=None):
    """:func:`best_loc_scale` restricted to ``region`` with ``b_hat`` kept on
    the union of the other regions."""
    shape = np.asarray(b_hat).shape[:2]
    keep = np.zeros(shape, dtype=bool)
    for r in regions:
        if r is not region and r.pixels != region.pixels:
            keep |= r.mask(shape)
    return best_loc_scale(trigger, b_hat, X, t, net, scales, region=region.pixels, keep_mask=keep, base=base)


def rank_candidates(b_hat, X, t, net, repo, scales=SCALES, base_kind=DEFAULT_BASE):
    """Score every object of ``repo`` against ``b_hat``."""
    X = np.asarray(X)
    base = match_base(b_hat, X, base_kind)

    def one(trig):
        try:
            m = best_loc_scale(trig, b_hat, X, t, net, scales, base=base)
        except RetrievalError:
            return None
        return Entry(trig.id, m.placement, m.fooling)

    return RankedRetrieval([e for e in _map(one, list(repo)) if e is not None])


def reconstruct_single_trigger(net, t, X, repo, scales=SCALES, perturb_config=None,
                               base_kind=DEFAULT_BASE, raw=None):
    """Raw trigger, then every repository object ranked by fooling.

    Returns ``(RankedRetrieval, RawTrigger)``; pass ``raw`` to reuse a raw
    trigger that was already computed.
    """
    if len(repo) == 0:
        raise RetrievalError("empty trigger repository")
    raw = raw or rt.find_perturbation(net, t, X, perturb_config)
    return rank_candidates(raw.b_hat, X, t, net, repo, scales, base_kind), raw


# ------------------------------------------------------------------ regions

def kmeans(features, k, seed=0, iters=KMEANS_ITERS, restarts=KMEANS_RESTARTS):
    """Lloyd's algorithm with k-means++ seeding; returns (labels, inertia)."""
    f = np.asarray(features, dtype=np.float64)
    n = len(f)
    if k < 1 or n < k:
        raise RetrievalError(f"k-means needs at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    best = (None, np.inf)
    for _ in range(restarts):
        centers = [f[rng.integers(n)]]
        for _ in range(1, k):
            d2 = np.min(((f[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
            total = d2.sum()
            idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
            centers.append(f[idx])
        centers = np.array(centers)
        labels = None
        for _ in range(iters):
            d2 = ((f[:, None, :] - centers[None]) ** 2).sum(-1)
            new = np.argmin(d2, axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for j in range(k):
                members = f[labels == j]
                # an emptied cluster takes the point farthest from its centre
                centers[j] = members.mean(0) if len(members) else f[np.argmax(d2.min(1))]
        inertia = float(((f - centers[labels]) ** 2).sum())
        if inertia < best[1]:
            best = (labels.copy(), inertia)
    return best


def trigger_regions(b_hat, k=2, eps=rt.ACTIVE_EPS, seed=0):
    """Split the active pixels of ``b_hat`` into ``k`` regions (k-means over
    position and colour, position weighted double)."""
    b_hat = np.asarray(b_hat, dtype=np.float64)
    H, W = b_hat.shape[:2]
    active = rt.active_mask(b_hat, eps)
    rows, cols = np.nonzero(active)
    if len(rows) < k:
        raise RetrievalError(f"{len(rows)} active pixels cannot form {k} regions")
    rgb = b_hat[rows, cols]
    feats = np.column_stack([SPATIAL_WEIGHT * rows / H, SPATIAL_WEIGHT * cols / W, rgb])
    labels, _ = kmeans(feats, k, seed=seed)
    regions = []
    for j in range(k):
        sel = labels == j
        if not sel.any():
            continue
        regions.append(TriggerRegion(
            frozenset(zip(rows[sel].tolist(), cols[sel].tolist())),
            (float(rows[sel].mean()), float(cols[sel].mean()), tuple(float(v) for v in rgb[sel].mean(0)))))
    # deterministic order: top-to-bottom, then left-to-right
    regions.sort(key=lambda r: (r.centroid[0], r.centroid[1]))
    return regions


def reconstruct_multi_trigger(net, t, X, repo, k=2, scales=SCALES, perturb_config=None,
                              base_kind=DEFAULT_BASE, raw=None, seed=0):
    """Greedy per-region retrieval; returns ``(MultiRetrieval, RawTrigger)``."""
    if k < 1:
        raise RetrievalError("k must be >= 1")
    if len(repo) == 0:
        raise RetrievalError("empty trigger repository")
    X = np.asarray(X)
    raw = raw or rt.find_perturbation(net, t, X, perturb_config)
    regions = trigger_regions(raw.b_hat, k, seed=seed)
    base = match_base(raw.b_hat, X, base_kind)
    per_region = []
    for region in regions:
        def one(trig, region=region):
            try:
                m = best_loc_scale_region(trig, raw.b_hat, region, X, t, net, regions, scales, base=base)
            except RetrievalError:
                return None
            return Entry(trig.id, m.placement, m.fooling)
        per_region.append(RankedRetrieval([e for e in _map(one, list(repo)) if e is not None]))
    if any(len(rr) == 0 for rr in per_region):
        raise RetrievalError("a region admits no candidate object")
    winners = [rr.top for rr in per_region]
    combined = al.fooling_rate(net, apply_entries(X, winners, repo), t)
    return MultiRetrieval(regions, winners, combined, per_region), raw


def apply_entries(X, entries, repo):
    """Paste every retrieved object at its placement."""
    out = np.asarray(X)
    for e in entries:
        out = sd.apply(out, repo.get(e.trigger_id), e.placement)
    return out


# -------------------------------------------------------------- brute force

def grid_placements(native_size, image_shape, scales=SCALES, stride=BF_STRIDE):
    """Every centre on a ``stride`` grid (offset to the first admissible
    centre) at which the scaled object fits."""
    if stride < 1:
        raise RetrievalError("stride must be >= 1")
    H, W = image_shape[:2]
    out = []
    for s in sorted(scales):
        sh, sw = sd.scaled_size(native_size, s)
        if sh > H or sw > W:
            continue
        for row in range(sh // 2, H - sh + sh // 2 + 1, stride):
            for col in range(sw // 2, W - sw + sw // 2 + 1, stride):
                out.append(sd.Placement(row, col, float(s)))
    return out


BF_CHUNK = 16


def _bf_one(trig, X, t, net, scales, stride, stop_at, chunk=BF_CHUNK, floor=-1.0):
    """Best grid placement of one object (None if nothing beats ``floor``).

    Placements are visited in grid order and only a strictly higher fooling
    rate replaces the incumbent, so a placement is abandoned (exactly) once
    its remaining images cannot lift it above the incumbent.
    """
    n = len(X)
    best = None
    for p in grid_placements(trig.native_size, X.shape[1:3], scales, stride):
        bar = floor if best is None else best.fooling
        hits = done = 0
        while done < n and (hits + n - done) / n > bar:
            xs = sd.apply(X[done:done + chunk], trig, p)
            hits += int(np.sum(net.predict(xs) == t))
            done += len(xs)
        if done < n or hits / n <= bar:
            continue
        best = Entry(trig.id, p, hits / n)
        if best.fooling >= stop_at:
            break
    return best


def brute_force_retrieve(net, t, X, repo, scales=SCALES, stride=BF_STRIDE, stop_at=1.0):
    """Best grid placement per object, no raw-trigger prior.

    The scan for one object ends early once its fooling reaches ``stop_at``
    (1.0 cannot be beaten, so the default keeps results exact).
    """
    X = np.asarray(X)
    found = _map(lambda trig: _bf_one(trig, X, t, net, scales, stride, stop_at), list(repo))
    return RankedRetrieval([e for e in found if e is not None])


def beats_threshold(net, t, X, trigger, threshold, scales=SCALES, stride=BF_STRIDE):
    """Whether some grid placement of ``trigger`` fools strictly more than
    ``threshold``; exact, but far cheaper than a full scan for weak objects."""
    X = np.asarray(X)
    return _bf_one(trigger, X, t, net, scales, stride, stop_at=-np.inf, floor=threshold) is not None


def n_pair_candidates(n_objects, n_placements):
    """Size of the exhaustive two-object search space."""
    return (n_objects * (n_objects - 1) // 2) * n_placements ** 2


def brute_force_pairs(net, t, X, repo, scales=(1.0,), stride=BF_STRIDE, budget_s=None, clock=None):
    """Two-object brute force over all object pairs and grid placements.

    Stops once ``budget_s`` seconds have elapsed (``clock`` defaults to
    ``time.perf_counter``).  Returns ``(best_entries, fooling, evaluated)``.
    """
    import time
    clock = clock or time.perf_counter
    start = clock()
    X = np.asarray(X)
    objs = list(repo)
    best, evaluated = (None, -1.0), 0
    grids = {o.id: grid_placements(o.native_size, X.shape[1:3], scales, stride) for o in objs}
    for a, b in itertools.combinations(objs, 2):
        for pa in grids[a.id]:
            xa = sd.apply(X, a, pa)
            for pb in grids[b.id]:
                fool = al.fooling_rate(net, sd.apply(xa, b, pb), t)
                evaluated += 1
                if fool > best[1]:
                    best = ([Entry(a.id, pa, fool), Entry(b.id, pb, fool)], fool)
                if budget_s is not None and clock() - start > budget_s:
                    return best[0], best[1], evaluated
    return best[0], best[1], evaluated


# ------------------------------------------------------------------ outputs

def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_top_csv(path, ranked, repo=None, n=10):
    """Top-``n`` rows: rank, trigger id, class, colour, placement, fooling."""
    ranks = ranked.competitive_ranks()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "trigger_id", "object_class", "color_label", "row", "col", "scale", "fooling"])
        for rank, e in list(zip(ranks, ranked.entries))[:n]:
            obj = repo.get(e.trigger_id) if repo is not None else None
            w.writerow([rank, e.trigger_id, obj.object_class if obj else "", obj.color_label if obj else "",
                        e.placement.row, e.placement.col, e.placement.scale, f"{e.fooling:.4f}"])


def write_composites(directory, X, entries, repo, n=4):
    """PAM images of the first ``n`` clean images with the objects pasted."""
    os.makedirs(directory, exist_ok=True)
    X = np.asarray(X)[:n]
    composed = apply_entries(X, entries, repo)
    paths = []
    for i, img in enumerate(composed):
        path = os.path.join(directory, f"composite_{i:02d}.pam")
        sd.write_pam(path, img, comments=["clean image with retrieved trigger(s): "
                                          + ", ".join(e.trigger_id for e in entries)])
        paths.append(path)
    return paths
