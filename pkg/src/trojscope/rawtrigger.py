"""Raw trigger reconstruction.

Finds a signed additive perturbation ``b`` that drives clean images to a
target class while staying sparse and smooth:

    mean_x CE(t, f(clamp(x + b))) + lambda1 * TV(b) + lambda2 * |b|_1

optimized over minibatches of the clean set, with the adaptive
lambda2 schedule (grow while the fooling rate sits in [0.8, 0.95], stop
once it exceeds 0.95; both only after ``b`` has at least ``alpha`` active
pixels).  All values are in normalized [0, 1] pixel units.

The default optimizer is proximal gradient descent: a gradient step on the
smooth part (cross-entropy and TV) followed by soft-thresholding for the l1
term, so weak pixels stay exactly zero.  Adam on the subgradient is kept as
an option; it moves every coordinate by about one step per update, which
on small nets yields diffuse perturbations.
"""
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import netcore
from . import synthdata as sd

log = logging.getLogger(__name__)

ACTIVE_EPS = 1e-3
STALL_RATIO = 1e-4


class PerturbationDiverged(RuntimeError):
    pass


@dataclass
class PerturbConfig:
    lambda1: float = 1e-4
    lambda2_init: float = 0.05
    n_epochs: int = 200
    alpha_fraction: float = 1.0 / 3.0
    fool_low: float = 0.8
    fool_high: float = 0.95
    lambda2_growth: float = 1.2
    lambda2_cap: float = 0.5
    # "cap": min(growth * l2, cap); "literal": max(growth * l2, cap), which jumps straight to the cap
    lambda2_rule: str = "cap"
    optimizer: str = "prox"
    # None picks the optimizer's own default (1.0 for prox, 0.05 for adam)
    step_size: float | None = None
    step_decay: float = 1.0
    momentum: float = 0.9
    batch_size: int = 32
    eps: float = ACTIVE_EPS
    monotone: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2_init < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.n_epochs < 1 or self.batch_size < 1:
            raise ValueError("n_epochs and batch_size must be >= 1")
        if not 0 < self.step_decay <= 1:
            raise ValueError("step_decay must lie in (0, 1]")
        if self.optimizer not in ("prox", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.step_size is None:
            self.step_size = 1.0 if self.optimizer == "prox" else 0.05
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.lambda2_rule not in ("cap", "literal"):
            raise ValueError(f"unknown lambda2 rule {self.lambda2_rule!r}")


@dataclass
class RawTrigger:
    b_hat: np.ndarray
    target: int
    achieved_fooling: float
    epochs_used: int
    final_lambda2: float
    history: list = field(default_factory=list, repr=False)
    # "fooling" (the schedule's early stop), "stalled" (no step improves the
    # objective any more) or "budget" (all epochs used)
    stop_reason: str = "budget"

    def sidecar(self):
        return {
            "target": int(self.target),
            "achieved_fooling": float(self.achieved_fooling),
            "final_lambda2": float(self.final_lambda2),
            "epochs_used": int(self.epochs_used),
        }


def active_pixels(b, eps=ACTIVE_EPS):
    """Number of pixel sites where any channel magnitude exceeds ``eps``."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    b = np.asarray(b)
    if b.ndim == 2:
        return int(np.count_nonzero(np.abs(b) > eps))
    return int(np.count_nonzero(np.any(np.abs(b) > eps, axis=-1)))


def active_mask(b, eps=ACTIVE_EPS):
    return np.any(np.abs(np.asarray(b)) > eps, axis=-1)


def _to_float(x, dtype):
    x = np.asarray(x)
    if x.dtype == np.uint8:
        return (x.astype(np.float64) / 255).astype(dtype)
    return x.astype(dtype, copy=False)


def _ce_and_grad(net, xb, b, t):
    v = xb + b.astype(xb.dtype)
    clamped = np.clip(v, 0, 1)
    tape = netcore.GradientTape()
    z = net.logits(clamped, tape)
    loss, dz = netcore.softmax_cross_entropy(z, np.full(len(xb), t))
    dx, _ = tape.backward(dz.astype(z.dtype))
    inside = (v > 0) & (v < 1)
    return loss, np.sum(dx * inside, axis=0, dtype=np.float64)


def evaluate(net, X, b, t, lambda1, lambda2, batch_size=256):
    """(objective, fooling rate) of ``b`` on the whole set ``X``."""
    ce_sum = 0.0
    hits = 0
    for i in range(0, len(X), batch_size):
        xb = np.clip(X[i:i + batch_size] + b.astype(X.dtype), 0, 1)
        z = net.logits(xb).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        logp = z[:, t] - np.log(np.exp(z).sum(axis=1))
        ce_sum -= float(logp.sum())
        hits += int(np.sum(np.argmax(z, axis=1) == t))
    obj = ce_sum / len(X) + lambda1 * netcore.total_variation(b) + lambda2 * netcore.l1_norm(b)
    return obj, hits / len(X)


def objective(net, X, b, t, lambda1, lambda2):
    """The regularized reconstruction loss of ``b`` averaged over ``X``."""
    X = _to_float(X, net.dtype)
    return evaluate(net, X, np.asarray(b, dtype=np.float64), t, lambda1, lambda2)[0]


def _next_lambda2(lam, cfg):
    grown = cfg.lambda2_growth * lam
    return min(grown, cfg.lambda2_cap) if cfg.lambda2_rule == "cap" else max(grown, cfg.lambda2_cap)


def soft_threshold(v, tau):
    """Proximal map of ``tau * |v|_1``."""
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


class ProxL1:
    """Heavy-ball proximal gradient on ``smooth + lam * |b|_1``.

    Momentum accumulates weak but consistent gradients, so a coordinate
    leaves zero once ``|g| > (1 - momentum) * lam`` rather than ``|g| > lam``.
    State API matches :class:`netcore.Adam`.
    """

    def __init__(self, lr, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.v = None

    def step(self, b, g_smooth, lam):
        if self.v is None:
            self.v = np.zeros_like(b)
        self.v *= self.momentum
        self.v += g_smooth
        b[...] = soft_threshold(b - self.lr * self.v, self.lr * lam)

    def state(self):
        return None if self.v is None else self.v.copy()

    def restore(self, state):
        self.v = None if state is None else state.copy()


def find_perturbation(net, t, X, config=None):
    """Reconstruct the raw trigger for target class ``t`` from clean images ``X``."""
    cfg = config or PerturbConfig()
    if not 0 <= t < net.num_classes:
        raise ValueError(f"target class {t} outside [0, {net.num_classes})")
    X = _to_float(X, net.dtype)
    if len(X) == 0:
        raise ValueError("find_perturbation needs at least one clean image")
    h, w = X.shape[1:3]
    alpha = h * w * cfg.alpha_fraction
    b = np.zeros(X.shape[1:], dtype=np.float64)
    lam2 = cfg.lambda2_init
    prox = cfg.optimizer == "prox"
    opt = ProxL1(cfg.step_size, cfg.momentum) if prox else netcore.Adam(lr=cfg.step_size)
    prev_obj, prev_fool = evaluate(net, X, b, t, cfg.lambda1, lam2)
    fool = prev_fool
    ceiling = cfg.step_size
    history = []
    epochs_used = cfg.n_epochs
    stop_reason = "budget"
    for epoch in range(1, cfg.n_epochs + 1):
        saved = (b.copy(), opt.state())
        for i in range(0, len(X), cfg.batch_size):
            xb = X[i:i + cfg.batch_size]
            _, g = _ce_and_grad(net, xb, b, t)
            g = g / len(xb) * (len(xb) / min(cfg.batch_size, len(X)))
            g += cfg.lambda1 * netcore.total_variation_grad(b)
            if prox:
                opt.step(b, g, lam2)
            else:
                opt.step({"b": b}, {"b": g + lam2 * netcore.l1_grad(b)})
        obj, fool = evaluate(net, X, b, t, cfg.lambda1, lam2)
        if not np.isfinite(obj):
            raise PerturbationDiverged(f"non-finite objective at epoch {epoch}")
        ceiling *= cfg.step_decay
        step = opt.lr
        if cfg.monotone and obj > prev_obj:
            # reject the epoch: restore b and optimizer state, halve the step
            b[...] = saved[0]
            opt.restore(saved[1])
            obj, fool = prev_obj, prev_fool
            opt.lr = min(0.5 * opt.lr, ceiling)
        else:
            # accepted: let the step recover towards the schedule
            opt.lr = min(2.0 * opt.lr, ceiling)
        n_active = active_pixels(b, cfg.eps)
        history.append({"epoch": epoch, "objective": obj, "fooling": fool, "active": n_active,
                        "lambda2": lam2, "step": step})
        prev_obj, prev_fool = obj, fool
        if opt.lr < STALL_RATIO * cfg.step_size:
            # repeated rejections: no step size improves the objective any more
            epochs_used, stop_reason = epoch, "stalled"
            break
        if n_active >= alpha:
            if cfg.fool_low <= fool <= cfg.fool_high:
                lam2 = _next_lambda2(lam2, cfg)
                prev_obj, _ = evaluate(net, X, b, t, cfg.lambda1, lam2)
            elif fool >= cfg.fool_high:
                epochs_used, stop_reason = epoch, "fooling"
                break
    log.debug("target %d: fooling %.3f after %d epochs (lambda2 %.3g)", t, fool, epochs_used, lam2)
    return RawTrigger(b, t, float(fool), epochs_used, lam2, history, stop_reason)


def mass_fraction_in_box(b, box, eps=ACTIVE_EPS):
    """Share of the active pixels' L1 mass that falls inside ``box`` =
    (top, left, height, width)."""
    mag = np.abs(np.asarray(b)).sum(axis=-1)
    mag = np.where(active_mask(b, eps), mag, 0.0)
    total = mag.sum()
    if total == 0:
        return 0.0
    top, left, hh, ww = box
    return float(mag[top:top + hh, left:left + ww].sum() / total)


def save_raw_trigger(rt, pam_path):
    """16-bit offset-encoded PAM plus a ``.json`` sidecar next to it."""
    scale = max(1.0, float(np.abs(rt.b_hat).max()))
    enc = np.clip(np.rint((rt.b_hat / scale + 1.0) * 32767.5), 0, 65535).astype(np.uint16)
    sd.write_pam(pam_path, enc, comments=[
        "signed perturbation, offset-encoded: value = (sample / 32767.5 - 1) * SCALE",
        f"SCALE {scale!r}",
    ])
    with open(_sidecar_path(pam_path), "w") as fh:
        json.dump(rt.sidecar(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sidecar_path(pam_path):
    return pam_path[:-4] + ".json" if pam_path.endswith(".pam") else pam_path + ".json"


def load_raw_trigger(pam_path):
    """Load a raw trigger written by :func:`save_raw_trigger` (or supplied
    externally in the same encoding); the sidecar is optional."""
    enc, comments = sd.read_pam(pam_path, with_comments=True)
    scale = 1.0
    for c in comments:
        if c.startswith("SCALE "):
            scale = float(c.split()[1])
    maxval = 65535 if enc.dtype == np.uint16 else 255
    b = (enc.astype(np.float64) / (maxval / 2.0) - 1.0) * scale
    meta = {"target": -1, "achieved_fooling": float("nan"), "final_lambda2": float("nan"), "epochs_used": 0}
    try:
        with open(_sidecar_path(pam_path)) as fh:
            meta.update(json.load(fh))
    except FileNotFoundError:
        pass
    return RawTrigger(b, meta["target"], meta["achieved_fooling"], meta["epochs_used"], meta["final_lambda2"])


def to_json(rt):
    d = asdict(rt)
    d.pop("b_hat")
    return d
