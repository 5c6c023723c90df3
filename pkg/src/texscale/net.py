"""A small numpy convolutional net: valid 3x3 convolutions, ReLU, 2x2 max
pooling, global average pooling and a softmax classifier, trained with
momentum SGD. Also semantic-unit detection over its conv layers.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imagery import Image, as_array, write_pgm
from .lbp import UNIFORM_MASK, lbp_codes

log = logging.getLogger(__name__)

KSIZE = 3
DEFAULT_CHANNELS = (8, 16, 32)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ConvNet:
    """Conv layers ``conv[l] = (W, b)`` with W of shape (c_out, c_in, 3, 3).

    Every conv layer but the last is followed by ReLU and 2x2 max pooling;
    the last one by ReLU and global average pooling, then ``fc``.
    """

    conv: list
    fc: tuple
    velocity: list = field(default=None, repr=False)

    def __post_init__(self):
        c_in = 1
        for l, (W, b) in enumerate(self.conv):
            if W.ndim != 4 or W.shape[1:] != (c_in, KSIZE, KSIZE) or b.shape != (W.shape[0],):
                raise ValueError(f"conv layer {l} has inconsistent shape {W.shape}")
            c_in = W.shape[0]
        Wf, bf = self.fc
        if Wf.shape != (len(bf), c_in):
            raise ValueError("fully-connected layer does not match the last conv layer")
        if self.velocity is None:
            self.reset_velocity()

    @classmethod
    def random(cls, n_classes: int, channels=DEFAULT_CHANNELS, seed: int = 0) -> "ConvNet":
        rng = np.random.default_rng(seed)
        conv, c_in = [], 1
        for c in channels:
            std = np.sqrt(2.0 / (c_in * KSIZE * KSIZE))
            conv.append((rng.normal(0, std, (c, c_in, KSIZE, KSIZE)), np.zeros(c)))
            c_in = c
        fc = (rng.normal(0, np.sqrt(1.0 / c_in), (n_classes, c_in)), np.zeros(n_classes))
        return cls(conv, fc)

    @classmethod
    def zeros(cls, n_classes: int, channels=DEFAULT_CHANNELS) -> "ConvNet":
        conv, c_in = [], 1
        for c in channels:
            conv.append((np.zeros((c, c_in, KSIZE, KSIZE)), np.zeros(c)))
            c_in = c
        return cls(conv, (np.zeros((n_classes, c_in)), np.zeros(n_classes)))

    @property
    def channels(self) -> tuple:
        return tuple(W.shape[0] for W, _ in self.conv)

    @property
    def n_classes(self) -> int:
        return len(self.fc[1])

    @property
    def n_units(self) -> int:
        return sum(self.channels)

    def params(self) -> list:
        out = [p for layer in self.conv for p in layer]
        return out + list(self.fc)

    def reset_velocity(self, layer: int | None = None, units=None) -> None:
        if layer is None:
            self.velocity = [np.zeros_like(p) for p in self.params()]
            return
        for p in (2 * layer, 2 * layer + 1):
            self.velocity[p][units] = 0.0

    def copy(self) -> "ConvNet":
        conv = [(W.copy(), b.copy()) for W, b in self.conv]
        net = ConvNet(conv, (self.fc[0].copy(), self.fc[1].copy()))
        net.velocity = [v.copy() for v in self.velocity]
        return net

    def min_input(self) -> int:
        """Smallest square input with at least one position at the last conv layer."""
        size = 1
        for l in reversed(range(len(self.conv))):
            size += KSIZE - 1
            if l > 0:
                size *= 2
        return size


# -- layers -------------------------------------------------------------------

def _windows(x: np.ndarray) -> np.ndarray:
    # (N, C, H-2, W-2, 3, 3)
    return np.lib.stride_tricks.sliding_window_view(x, (KSIZE, KSIZE), axis=(2, 3))


def conv_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[1] != W.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, filter expects {W.shape[1]}")
    if min(x.shape[2:]) < KSIZE:
        raise ValueError(f"feature map {x.shape[2:]} is smaller than the {KSIZE}x{KSIZE} kernel")
    out = np.tensordot(_windows(x), W, axes=([1, 4, 5], [1, 2, 3]))  # N,H,W,O
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def conv_backward(x, W, dy):
    dW = np.tensordot(dy, _windows(x), axes=([0, 2, 3], [0, 2, 3]))  # O,C,3,3
    db = dy.sum(axis=(0, 2, 3))
    pad = np.pad(dy, ((0, 0), (0, 0), (KSIZE - 1,) * 2, (KSIZE - 1,) * 2))
    Wr = W[:, :, ::-1, ::-1]
    dx = np.tensordot(_windows(pad), Wr, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    return dx, dW, db


def pool_forward(x: np.ndarray):
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"feature map {x.shape[2:]} too small to pool")
    h2, w2 = h // 2, w // 2
    blocks = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h2, w2, 4)
    arg = np.argmax(blocks, axis=-1)
    return np.take_along_axis(blocks, arg[..., None], -1)[..., 0], arg


def pool_backward(dy, arg, shape):
    n, c, h, w = shape
    h2, w2 = dy.shape[2:]
    blocks = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(blocks, arg[..., None], dy[..., None], -1)
    dx = np.zeros(shape)
    dx[:, :, :2 * h2, :2 * w2] = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    return dx


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def standardize(a: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Zero mean, unit deviation per image; flat images map to zeros."""
    mu = a.mean(axis=(1, 2, 3), keepdims=True)
    sd = a.std(axis=(1, 2, 3), keepdims=True)
    return (a - mu) / (sd + eps)


def _batch(x) -> np.ndarray:
    if isinstance(x, Image):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected an image or a batch of grayscale images, got shape {x.shape}")
    return x


@dataclass
class ForwardResult:
    pre: list    # per conv layer, (N, c, h, w) before ReLU
    post: list   # per conv layer, after ReLU
    probs: np.ndarray
    logits: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def forward(net: ConvNet, x, keep_cache: bool = False) -> ForwardResult:
    """Run an image or a batch of equally sized images through the net."""
    a = standardize(_batch(x))
    need = net.min_input()
    if min(a.shape[2:]) < need:
        raise ValueError(f"input {a.shape[2:]} is smaller than the {need}x{need} minimum")
    pre, post, ins, args = [], [], [], []
    last = len(net.conv) - 1
    for l, (W, b) in enumerate(net.conv):
        ins.append(a)
        z = conv_forward(a, W, b)
        r = np.maximum(z, 0.0)
        pre.append(z)
        post.append(r)
        if l < last:
            a, arg = pool_forward(r)
            args.append(arg)
    g = post[-1].mean(axis=(2, 3))
    logits = g @ net.fc[0].T + net.fc[1]
    cache = {"ins": ins, "args": args, "g": g} if keep_cache else {}
    return ForwardResult(pre, post, softmax(logits), logits, cache)


def loss_and_grads(net: ConvNet, x, y) -> tuple[float, list]:
    """Mean cross-entropy and its gradient for every parameter (``net.params()`` order)."""
    y = np.asarray(y, dtype=np.int64)
    res = forward(net, x, keep_cache=True)
    n = len(y)
    p = res.probs
    loss = -float(np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300))))
    dz = p.copy()
    dz[np.arange(n), y] -= 1.0
    dz /= n
    g = res.cache["g"]
    dWf = dz.T @ g
    dbf = dz.sum(axis=0)
    dg = dz @ net.fc[0]
    last = res.post[-1]
    h, w = last.shape[2:]
    dr = np.broadcast_to(dg[:, :, None, None] / (h * w), last.shape)
    grads = []
    for l in reversed(range(len(net.conv))):
        if l < len(net.conv) - 1:
            dr = pool_backward(dr, res.cache["args"][l], res.post[l].shape)
        dz_l = dr * (res.pre[l] > 0)
        dx, dW, db = conv_backward(res.cache["ins"][l], net.conv[l][0], dz_l)
        grads = [dW, db] + grads
        dr = dx
    return loss, grads + [dWf, dbf]


def backward_sgd(net: ConvNet, x, y, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0) -> float:
    """One momentum SGD step on a batch; returns the batch loss before the step."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if len(y) == 0:
        raise ValueError("empty batch")
    loss, grads = loss_and_grads(net, x, y)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingDiverged(f"non-finite loss or gradient (loss={loss})")
    if lr == 0:
        return loss
    for p, v, g in zip(net.params(), net.velocity, grads):
        v *= momentum
        v -= lr * (g + weight_decay * p)
        p += v
    return loss


def train_epochs(net: ConvNet, X: np.ndarray, y, epochs: int, lr: float = 0.02,
                 momentum: float = 0.9, batch: int = 16, rng=None) -> list[float]:
    """Shuffled mini-batch training; returns the mean loss of each epoch."""
    rng = np.random.default_rng(0) if rng is None else rng
    X = _batch(X)
    y = np.asarray(y)
    hist = []
    for _ in range(epochs):
        order = rng.permutation(len(y))
        tot = 0.0
        for i in range(0, len(y), batch):
            idx = order[i:i + batch]
            tot += backward_sgd(net, X[idx], y[idx], lr, momentum) * len(idx)
        hist.append(tot / len(y))
    return hist


def predict(net: ConvNet, x) -> np.ndarray:
    return np.argmax(forward(net, x).probs, axis=1)


# -- semantic units -------------------------------------------------------------

@dataclass
class SemanticVerdict:
    layers: list          # per conv layer, bool array (one per unit)
    tau: list             # per conv layer threshold (None for the LBP layer)
    window: int = 5
    k: int = 10

    def __post_init__(self):
        if self.window % 2 == 0:
            raise ValueError("window must be odd")
        if self.k > self.window ** 2:
            raise ValueError("k cannot exceed the window area")


def _unit_maxima(net: ConvNet, calib, layer: int) -> np.ndarray:
    out = None
    for img in calib:
        m = forward(net, img).post[layer].max(axis=(0, 2, 3))
        out = m if out is None else np.maximum(out, m)
    return out


def two_means_threshold(values, iters: int = 100) -> tuple[float, bool]:
    """Split scalars into two clusters; return the smallest member of the upper one.

    Centers start at the extreme values, so the result is deterministic.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("no values to cluster")
    if np.all(v == v[0]):
        return float(v[0]), True
    lo, hi = v.min(), v.max()
    upper = v >= hi
    for _ in range(iters):
        upper = np.abs(v - hi) < np.abs(v - lo)
        new_lo, new_hi = v[~upper].mean(), v[upper].mean()
        if new_lo == lo and new_hi == hi:
            break
        lo, hi = new_lo, new_hi
    return float(v[upper].min()), False


def calibrate_tau(net: ConvNet, calib, layer: int) -> tuple[float, bool]:
    """Threshold for ``layer`` from 2-means over each unit's maximum activation.

    Returns ``(tau, degenerate)``; degenerate means every maximum was equal.
    """
    calib = list(calib)
    if not calib:
        raise ValueError("calibration set is empty")
    return two_means_threshold(_unit_maxima(net, calib, layer))


def _window_counts(strong: np.ndarray, window: int) -> np.ndarray:
    # counts over a clipped window, for every unit map in the last two axes
    kern = np.ones((1,) * (strong.ndim - 2) + (window, window))
    return np.rint(ndimage.correlate(strong.astype(np.float64), kern, mode="constant")).astype(np.int64)


def strong_activations(maps: np.ndarray, layer: int, tau: float | None) -> np.ndarray:
    """Boolean strong-activation masks for (units, h, w) maps of one image."""
    if maps.shape[-1] < 1 or maps.shape[-2] < 1:
        raise ValueError("feature map is empty")
    if layer == 0:
        if min(maps.shape[-2:]) < 3:
            return np.zeros(maps.shape[:-2] + (0, 0), dtype=bool)
        return UNIFORM_MASK[lbp_codes(maps)]
    return maps > tau


def semantic_units(net: ConvNet, calib, tau, window: int = 5, k: int = 10) -> SemanticVerdict:
    """Per-unit verdicts: some clipped window holds >= k strong activations on some image.

    ``tau`` lists one threshold per conv layer; the entry for layer 0 is unused.
    """
    calib = list(calib)
    verdict = SemanticVerdict([np.zeros(c, dtype=bool) for c in net.channels], list(tau), window, k)
    verdict.tau[0] = None
    for img in calib:
        res = forward(net, img)
        for l, maps in enumerate(res.post):
            strong = strong_activations(maps[0], l, tau[l])
            if strong.size == 0:
                continue
            counts = _window_counts(strong, window)
            verdict.layers[l] |= counts.reshape(len(counts), -1).max(axis=1) >= k
    return verdict


def calibrate_all(net: ConvNet, calib) -> list:
    calib = list(calib)
    return [None] + [calibrate_tau(net, calib, l)[0] for l in range(1, len(net.conv))]


def semantic_fraction(verdict: SemanticVerdict) -> float:
    total = sum(len(v) for v in verdict.layers)
    if total == 0:
        return 0.0
    return sum(int(np.sum(v)) for v in verdict.layers) / total


# -- persistence ----------------------------------------------------------------

def save_net(net: ConvNet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"CNN1")
        fh.write(struct.pack("<II", len(net.conv), net.n_classes))
        fh.write(struct.pack(f"<{len(net.conv)}I", *net.channels))
        for p in net.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_net(path) -> ConvNet:
    with open(path, "rb") as fh:
        if fh.read(4) != b"CNN1":
            raise ValueError(f"{path}: not a CNN1 file")
        nl, nc = struct.unpack("<II", fh.read(8))
        channels = struct.unpack(f"<{nl}I", fh.read(4 * nl))
        net = ConvNet.zeros(nc, channels)
        for p in net.params():
            p[...] = np.frombuffer(fh.read(8 * p.size), dtype="<f8").reshape(p.shape)
    return net


def dump_activations(net: ConvNet, img, outdir, layer: int | None = None) -> list[Path]:
    """Write each unit's activation map as an 8-bit PGM, scaled by its own maximum."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    res = forward(net, img)
    written = []
    for l, maps in enumerate(res.post):
        if layer is not None and l != layer:
            continue
        for j, m in enumerate(maps[0]):
            top = m.max()
            path = outdir / f"layer{l}_unit{j:03d}.pgm"
            write_pgm(m / top if top > 0 else m, path)
            written.append(path)
    return written
