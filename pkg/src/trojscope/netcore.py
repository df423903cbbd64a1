"""Minimal NHWC tensor engine: layers, gradient tape, losses, Adam, training.

Only the layer set needed by the desk-scale classifier is provided:
3x3 convolution, ReLU, 2x2 max-pool, flatten, fully-connected, and a
softmax head.  Inputs are float images in [0, 1] shaped (N, H, W, C);
uint8 arrays are rescaled on entry.
"""
import json
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TFRG"
CHECKPOINT_VERSION = 1
CE_FLOOR = 1e-12


class InputShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _glorot(rng, shape, fan_in, fan_out, dtype):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class Conv2D:
    kind = "conv"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1):
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.pad = kernel // 2
        self.params = {}

    def init(self, rng, dtype):
        k = self.kernel
        self.params = {
            "W": _glorot(rng, (k * k * self.in_ch, self.out_ch), k * k * self.in_ch, k * k * self.out_ch, dtype),
            "b": np.zeros(self.out_ch, dtype=dtype),
        }

    def output_shape(self, shape):
        h, w, c = shape
        if c != self.in_ch:
            raise InputShapeError(f"conv expects {self.in_ch} channels, got {c}")
        ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
        return ho, wo, self.out_ch

    def forward(self, x, keep):
        cols = kernels.im2col(np.ascontiguousarray(x), self.kernel, self.stride, self.pad)
        n, ho, wo, kk = cols.shape
        y = cols.reshape(-1, kk) @ self.params["W"]
        y += self.params["b"]
        return y.reshape(n, ho, wo, self.out_ch), ((cols, x.shape) if keep else None)

    def backward(self, dy, ctx):
        cols, x_shape = ctx
        kk = cols.shape[-1]
        dy2 = dy.reshape(-1, self.out_ch)
        grads = {"W": cols.reshape(-1, kk).T @ dy2, "b": dy2.sum(axis=0)}
        dcols = (dy2 @ self.params["W"].T).reshape(cols.shape)
        dx = kernels.col2im(np.ascontiguousarray(dcols), tuple(x_shape), self.kernel, self.stride, self.pad)
        return dx, grads

    def describe(self):
        return {"type": "conv", "in": self.in_ch, "out": self.out_ch, "kernel": self.kernel, "stride": self.stride}


class ReLU:
    kind = "relu"
    params = {}

    def output_shape(self, shape):
        return shape

    def forward(self, x, keep):
        y = np.maximum(x, 0)
        return y, (x > 0 if keep else None)

    def backward(self, dy, ctx):
        return dy * ctx, {}

    def describe(self):
        return {"type": "relu"}


class MaxPool2:
    kind = "maxpool"
    params = {}

    def output_shape(self, shape):
        h, w, c = shape
        return h // 2, w // 2, c

    def forward(self, x, keep):
        y, arg = kernels.maxpool2(np.ascontiguousarray(x))
        return y, ((arg, x.shape) if keep else None)

    def backward(self, dy, ctx):
        arg, x_shape = ctx
        return kernels.maxpool2_backward(np.ascontiguousarray(dy), arg, tuple(x_shape)), {}

    def describe(self):
        return {"type": "maxpool", "size": 2}


class Flatten:
    kind = "flatten"
    params = {}

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, keep):
        return x.reshape(x.shape[0], -1), (x.shape if keep else None)

    def backward(self, dy, ctx):
        return dy.reshape(ctx), {}

    def describe(self):
        return {"type": "flatten"}


class Dense:
    kind = "dense"

    def __init__(self, n_in, n_out):
        self.n_in, self.n_out = n_in, n_out
        self.params = {}

    def init(self, rng, dtype):
        self.params = {
            "W": _glorot(rng, (self.n_in, self.n_out), self.n_in, self.n_out, dtype),
            "b": np.zeros(self.n_out, dtype=dtype),
        }

    def output_shape(self, shape):
        if shape != (self.n_in,):
            raise InputShapeError(f"dense expects ({self.n_in},), got {shape}")
        return (self.n_out,)

    def forward(self, x, keep):
        return x @ self.params["W"] + self.params["b"], (x if keep else None)

    def backward(self, dy, x):
        return dy @ self.params["W"].T, {"W": x.T @ dy, "b": dy.sum(axis=0)}

    def describe(self):
        return {"type": "dense", "in": self.n_in, "out": self.n_out}


_LAYER_TYPES = {
    "conv": lambda d: Conv2D(d["in"], d["out"], d["kernel"], d["stride"]),
    "relu": lambda d: ReLU(),
    "maxpool": lambda d: MaxPool2(),
    "flatten": lambda d: Flatten(),
    "dense": lambda d: Dense(d["in"], d["out"]),
}


class GradientTape:
    """Records per-layer contexts during a forward pass for one backward sweep."""

    def __init__(self):
        self.records = []

    def record(self, layer, ctx):
        self.records.append((layer, ctx))

    def backward(self, dout):
        """Propagate ``dout`` (gradient w.r.t. the last recorded output).

        Returns ``(d_input, grads)`` where ``grads`` lists one dict per
        recorded layer, in forward order.
        """
        grads = []
        g = dout
        for layer, ctx in reversed(self.records):
            g, pg = layer.backward(g, ctx)
            grads.append(pg)
        grads.reverse()
        return g, grads


class ClassifierNet:
    """Sequential classifier with a softmax head.

    ``head="none"`` exposes the raw output instead of probabilities; it is
    only used for probing the engine.
    """

    def __init__(self, input_shape, layers, head="softmax", dtype=np.float32):
        self.input_shape = tuple(input_shape)
        self.layers = list(layers)
        self.head = head
        self.dtype = np.dtype(dtype)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape
        self.num_classes = int(np.prod(shape))

    def init(self, seed):
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if hasattr(layer, "init"):
                layer.init(rng, self.dtype)
        return self

    def parameters(self):
        """(layer index, name, array) in layer order."""
        return [(i, name, layer.params[name]) for i, layer in enumerate(self.layers) for name in sorted(layer.params)]

    def n_params(self):
        return sum(p.size for _, _, p in self.parameters())

    def _prep(self, x):
        x = np.asarray(x)
        if x.ndim == len(self.input_shape):
            x = x[None]
        if tuple(x.shape[1:]) != self.input_shape:
            raise InputShapeError(f"expected images of shape {self.input_shape}, got {tuple(x.shape[1:])}")
        if x.dtype == np.uint8:
            return (x.astype(self.dtype) / 255).astype(self.dtype)
        return x.astype(self.dtype, copy=False)

    def logits(self, x, tape=None):
        h = self._prep(x)
        for layer in self.layers:
            h, ctx = layer.forward(h, tape is not None)
            if tape is not None:
                tape.record(layer, ctx)
        return h

    def forward(self, x, batch_size=64):
        """Probabilities (or raw outputs for ``head="none"``), order-preserving."""
        x = np.asarray(x)
        if x.ndim == len(self.input_shape):
            x = x[None]
        outs = [self.logits(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        z = np.concatenate(outs) if outs else np.zeros((0, self.num_classes), self.dtype)
        return softmax(z) if self.head == "softmax" else z

    def predict(self, x, batch_size=64):
        return np.argmax(self.forward(x, batch_size), axis=1)

    def describe(self):
        return {
            "input_shape": list(self.input_shape),
            "head": self.head,
            "layers": [layer.describe() for layer in self.layers],
        }

    def copy(self):
        net = ClassifierNet.from_description(self.describe(), self.dtype)
        for (_, _, dst), (_, _, src) in zip(net.parameters(), self.parameters()):
            dst[...] = src
        return net

    @classmethod
    def from_description(cls, desc, dtype=np.float32):
        layers = [_LAYER_TYPES[d["type"]](d) for d in desc["layers"]]
        net = cls(desc["input_shape"], layers, head=desc.get("head", "softmax"), dtype=dtype)
        for layer in net.layers:
            if hasattr(layer, "init"):
                layer.init(np.random.default_rng(0), net.dtype)
        return net


def desk_net(num_classes, input_shape=(32, 32, 3), seed=0, fc_width=64, dtype=np.float32):
    """The desk-scale classifier: four 3x3 convs (8/16/16/32), pools after
    the second and fourth, one fully-connected feature layer, softmax."""
    h, w, c = input_shape
    layers = [
        Conv2D(c, 8), ReLU(),
        Conv2D(8, 16), ReLU(), MaxPool2(),
        Conv2D(16, 16), ReLU(),
        Conv2D(16, 32), ReLU(), MaxPool2(),
        Flatten(),
        Dense((h // 4) * (w // 4) * 32, fc_width), ReLU(),
        Dense(fc_width, num_classes),
    ]
    return ClassifierNet(input_shape, layers, dtype=dtype).init(seed)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p, dp):
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def forward(net, batch):
    """Probability vectors for a batch of images."""
    return net.forward(batch)


def grad_wrt_input(net, images, loss_fn):
    """Gradient of ``loss_fn(output)`` w.r.t. the input pixels.

    ``loss_fn`` receives the net output (probabilities, or raw values for a
    ``head="none"`` net) and returns ``(value, d_value/d_output)``.
    Returns ``(value, grad)`` with ``grad`` shaped like ``images``.
    """
    x = np.asarray(images)
    single = x.ndim == len(net.input_shape)
    tape = GradientTape()
    z = net.logits(x, tape)
    if net.head == "softmax":
        p = softmax(z)
        value, dp = loss_fn(p)
        dz = softmax_backward(p, np.asarray(dp, dtype=z.dtype))
    else:
        value, dz = loss_fn(z)
        dz = np.asarray(dz, dtype=z.dtype)
    dx, _ = tape.backward(np.broadcast_to(dz, z.shape).astype(z.dtype))
    if x.dtype == np.uint8:
        dx = dx / 255
    return value, (dx[0] if single else dx)


def cross_entropy(probs, target):
    """-log(probs[target]); probabilities are floored at 1e-12."""
    return float(-math.log(max(float(probs[target]), CE_FLOOR)))


def softmax_cross_entropy(logits, targets):
    """Mean CE over a batch straight from logits; returns (loss, d_logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = len(targets)
    idx = np.arange(n)
    loss = float(np.mean(logsum - z[idx, targets]))
    d = np.exp(z - logsum[:, None])
    d[idx, targets] -= 1
    return loss, d / n


def total_variation(v):
    """Anisotropic TV with forward differences, summed over channels."""
    v = np.asarray(v, dtype=np.float64)
    return float(np.abs(np.diff(v, axis=0)).sum() + np.abs(np.diff(v, axis=1)).sum())


def total_variation_grad(v):
    """Subgradient of :func:`total_variation` (sign(0) = 0)."""
    g = np.zeros_like(v)
    sr = np.sign(np.diff(v, axis=0))
    sc = np.sign(np.diff(v, axis=1))
    g[1:] += sr
    g[:-1] -= sr
    g[:, 1:] += sc
    g[:, :-1] -= sc
    return g


def l1_norm(v):
    return float(np.abs(np.asarray(v, dtype=np.float64)).sum())


def l1_grad(v):
    return np.sign(v)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """In-place update of each array in ``params`` (dict key -> array)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for key, p in params.items():
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            m, v = self.m[key], self.v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state(self):
        return self.t, {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}

    def restore(self, state):
        self.t, m, v = state
        self.m = {k: a.copy() for k, a in m.items()}
        self.v = {k: a.copy() for k, a in v.items()}


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


def train_step(net, opt, xb, yb):
    tape = GradientTape()
    z = net.logits(xb, tape)
    loss, dz = softmax_cross_entropy(z, yb)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite training loss ({loss}) at optimizer step {opt.t + 1}")
    _, grads = tape.backward(dz.astype(net.dtype))
    params, flat = {}, {}
    for i, layer in enumerate(net.layers):
        for name, p in layer.params.items():
            params[(i, name)] = p
            flat[(i, name)] = grads[i][name]
    opt.step(params, flat)
    return loss


def fit(net, batch_source, config):
    """Train on batches from ``batch_source(epoch, rng)``; returns ``net``.

    ``batch_source`` yields ``(images, labels)`` minibatches and must draw
    all randomness from the rng it is handed.
    """
    rng = np.random.default_rng(config.seed)
    opt = Adam(lr=config.learning_rate)
    for epoch in range(config.epochs):
        losses = [train_step(net, opt, xb, yb) for xb, yb in batch_source(epoch, rng)]
        log.debug("epoch %d loss %.4f", epoch + 1, float(np.mean(losses)) if losses else float("nan"))
    return net


def shuffled_batches(images, labels, batch_size):
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)

    def source(epoch, rng):
        order = rng.permutation(len(images))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            yield images[idx], labels[idx]

    return source


def train(net, images, labels, config):
    """Standard shuffled-minibatch training (deterministic given the seed)."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise ValueError("labels must lie in [0, num_classes)")
    return fit(net, shuffled_batches(images, labels, config.batch_size), config)


def accuracy(net, images, labels):
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(net.predict(images) == labels))


def save_checkpoint(net, path):
    desc = json.dumps(net.describe(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(desc)))
        fh.write(desc)
        for _, _, p in net.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    desc = json.loads(blob[off:off + n].decode("utf-8"))
    off += n
    net = ClassifierNet.from_description(desc)
    for _, _, p in net.parameters():
        size = p.size * 4
        if off + size > len(blob):
            raise CheckpointError(f"{path}: truncated parameter data")
        p[...] = np.frombuffer(blob, dtype="<f4", count=p.size, offset=off).reshape(p.shape)
        off += size
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    return net
