"""Texel window search over an image pyramid and dominant-texel reduction.

A linear model over 8x8 normed-gradient windows scores every window of
every pyramid level. Windows above the model threshold are texel
proposals; the levels holding them are the scale proposals. Reduction
keeps a texel only when enough LBP-similar texels exist on its own level.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .classify import dual_cd
from .imagery import Image, Pyramid, ScaleLevel, as_array
from .lbp import histogram_from_codes, lbp_codes, lbp_histogram, pairwise_similarity

WIN = 8
NG_DIM = WIN * WIN
NG_FLOOR = 0.1
GENERATORS_ALL = ("checkerboard", "stripe", "brick", "grating", "blobs")


@dataclass
class NgModel:
    w: np.ndarray
    bias: float
    threshold: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(NG_DIM)
        if not np.all(np.isfinite(self.w)) or not math.isfinite(self.bias):
            raise ValueError("NG model weights must be finite")

    def score(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64).reshape(-1, NG_DIM)
        return f @ self.w + self.bias


@dataclass(frozen=True)
class TexelProposal:
    level: ScaleLevel
    k: tuple[int, int]
    score: float
    window: np.ndarray = field(repr=False, compare=False)


@dataclass
class ScaleProposalSet:
    """Texel proposals stored column-wise.

    ``windows`` holds each texel's 8x8 intensity window, which is all the
    reduction step needs.
    """

    m: np.ndarray
    n: np.ndarray
    row: np.ndarray
    col: np.ndarray
    score: np.ndarray
    windows: np.ndarray

    @classmethod
    def empty(cls) -> "ScaleProposalSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, np.zeros(0), np.zeros((0, WIN, WIN)))

    def __len__(self) -> int:
        return len(self.score)

    @property
    def levels(self) -> set[ScaleLevel]:
        return {ScaleLevel(int(a), int(b)) for a, b in zip(self.m, self.n)}

    @property
    def texels(self) -> list[TexelProposal]:
        return [TexelProposal(ScaleLevel(int(self.m[i]), int(self.n[i])),
                              (int(self.row[i]), int(self.col[i])), float(self.score[i]),
                              self.windows[i]) for i in range(len(self))]

    def subset(self, mask) -> "ScaleProposalSet":
        return ScaleProposalSet(self.m[mask], self.n[mask], self.row[mask], self.col[mask],
                                self.score[mask], self.windows[mask])

    def level_groups(self):
        """Yield ``(ScaleLevel, index array)`` in canonical (m, n) order."""
        if not len(self):
            return
        keys = self.m * (int(self.n.max()) + 1) + self.n
        order = np.lexsort((self.col, self.row, self.n, self.m))
        sk = keys[order]
        cuts = np.flatnonzero(np.diff(sk)) + 1
        for grp in np.split(order, cuts):
            yield ScaleLevel(int(self.m[grp[0]]), int(self.n[grp[0]])), grp


def _grad_norm(arr: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(arr)
    return np.clip(np.hypot(gx, gy) / math.sqrt(2.0), 0.0, 1.0)


def _windows(arr: np.ndarray, stride: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(arr, (WIN, WIN))[::stride, ::stride]


def ng_windows(img, stride: int = 8, floor: float = NG_FLOOR) -> np.ndarray:
    """NG features of every window: shape (rows, cols, 64).

    Each window is divided by its own maximum (or by ``floor`` when that is
    larger), so texel shape rather than edge contrast drives the score.
    """
    arr = as_array(img)
    win = _windows(_grad_norm(arr), stride)
    win = win.reshape(win.shape[0], win.shape[1], NG_DIM)
    return win / np.maximum(win.max(axis=-1, keepdims=True), floor)


def train_ng_model(positives, negatives, C: float = 1.0, quantile: float = 0.05,
                   seed: int = 0, max_epochs: int = 200, tol: float = 1e-4) -> NgModel:
    """Linear SVM over labeled NG windows; the threshold is a low quantile of positive scores."""
    pos = np.asarray(positives, dtype=np.float64).reshape(-1, NG_DIM)
    neg = np.asarray(negatives, dtype=np.float64).reshape(-1, NG_DIM)
    if not len(pos) or not len(neg):
        raise ValueError("need at least one positive and one negative window")
    X = np.vstack([pos, neg])
    if np.all(X == X[0]):
        raise ValueError("all training windows are identical; nothing to separate")
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])[:, None]
    W, b, _ = dual_cd(X, y, C=C, seed=seed, max_epochs=max_epochs, tol=tol)
    w, bias = W[0], float(b[0])
    theta = float(np.quantile(pos @ w + bias, quantile))
    return NgModel(w=w, bias=bias, threshold=theta)


def scan_pyramid(pyr: Pyramid, model: NgModel, stride: int = 8) -> ScaleProposalSet:
    """Score every stride-spaced 8x8 window of every level; keep those at or above threshold."""
    parts = []
    for level, img in sorted(pyr.levels.items()):
        arr = as_array(img)
        if min(arr.shape) < WIN:
            raise ValueError(f"pyramid level {tuple(level)} is smaller than {WIN}x{WIN}")
        ng = ng_windows(arr, stride)
        scores = ng @ model.w + model.bias
        rr, cc = np.nonzero(scores >= model.threshold)
        if not len(rr):
            continue
        pix = _windows(arr, stride)[rr, cc]
        parts.append((level, rr * stride, cc * stride, scores[rr, cc], pix))
    if not parts:
        return ScaleProposalSet.empty()
    cat = np.concatenate
    return ScaleProposalSet(
        m=cat([np.full(len(p[1]), p[0].m) for p in parts]),
        n=cat([np.full(len(p[1]), p[0].n) for p in parts]),
        row=cat([p[1] for p in parts]), col=cat([p[2] for p in parts]),
        score=cat([p[3] for p in parts]), windows=cat([p[4] for p in parts]))


def texel_histograms(windows: np.ndarray) -> np.ndarray:
    return histogram_from_codes(lbp_codes(np.asarray(windows, dtype=np.float64)))


def similar_counts(proposals: ScaleProposalSet, eta: float) -> np.ndarray:
    """For each texel, the number of *other* same-level texels with similarity >= eta."""
    counts = np.zeros(len(proposals), dtype=np.int64)
    if not len(proposals):
        return counts
    hists = texel_histograms(proposals.windows)
    for _, idx in proposals.level_groups():
        sim = pairwise_similarity(hists[idx])
        # identical histograms may sum to 1 - ulp
        hit = sim >= eta - 1e-12
        np.fill_diagonal(hit, False)
        counts[idx] = hit.sum(axis=1)
    return counts


def reduce_proposals(proposals: ScaleProposalSet, eta: float, K: int = 20) -> ScaleProposalSet:
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if K < 1:
        raise ValueError("K must be >= 1")
    return proposals.subset(similar_counts(proposals, eta) >= K)


def calibrate_eta(images, labels) -> float:
    """Similarity threshold from a labeled reference set.

    Images are classified by their nearest LBP-histogram neighbour
    (leave-one-out). For each class, the least similar pair among its
    correctly classified images gives that class's value; the minimum over
    classes is returned.
    """
    labels = list(labels)
    if len(set(labels)) < 2:
        raise ValueError("need at least two classes")
    for c in set(labels):
        if labels.count(c) < 2:
            raise ValueError(f"class {c!r} has fewer than two images")
    hists = np.vstack([lbp_histogram(im) for im in images])
    sim = pairwise_similarity(hists)
    nn_sim = sim.copy()
    np.fill_diagonal(nn_sim, -np.inf)
    pred = [labels[j] for j in np.argmax(nn_sim, axis=1)]
    correct = np.array([p == t for p, t in zip(pred, labels)])
    phis = []
    for c in sorted(set(labels), key=str):
        idx = np.flatnonzero(correct & np.array([t == c for t in labels]))
        if len(idx) < 2:
            continue
        block = sim[np.ix_(idx, idx)]
        phis.append(block[np.triu_indices(len(idx), 1)].min())
    if not phis:
        raise ValueError("no class has two correctly classified images; eta is undefined")
    return float(np.clip(min(phis), 0.0, 1.0))


def is_ring(ng: np.ndarray, side: float = 0.1) -> np.ndarray:
    """Windows whose normed gradient closes around the border: every side
    carries edge energy and the interior is quieter than the weakest side."""
    w = np.asarray(ng, dtype=np.float64).reshape(-1, WIN, WIN)
    sides = np.stack([w[:, 0, 1:-1].mean(1), w[:, -1, 1:-1].mean(1),
                      w[:, 1:-1, 0].mean(1), w[:, 1:-1, -1].mean(1)], axis=1)
    inner = w[:, 2:-2, 2:-2].mean(axis=(1, 2))
    low = sides.min(axis=1)
    return (low >= side) & (inner <= 0.5 * low)


def ng_training_windows(positive=("checkerboard",), negative=GENERATORS_ALL, size: int = 96,
                        s: float = 0.95, exponents=(2, 6, 10, 14, 18), rate: float = 0.05,
                        seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Labeled NG windows from procedural textures with known texel size.

    A texture whose texel is ``8 / s**e`` pixels shows 8-pixel cells at level
    (e, e). Positives are the cell-aligned windows there, skipping windows
    on the image border (one-sided differences erase the outer edge) and
    windows the resampled grid has drifted off by more than half a pixel.
    Negatives are the phase-shifted windows at that level; the returned
    pool holds windows sampled from levels at least two exponents away and
    from every level of the purely negative families, with closed-ring
    windows removed so a cell seen at some other aspect ratio is not
    called a negative.
    """
    from .datakit import TextureFamily, generate_family
    from .imagery import level_size, resize
    rng = np.random.default_rng(seed)
    pos, neg, pool = [], [], []
    for g in dict.fromkeys(tuple(positive) + tuple(negative)):
        for e in exponents:
            t = WIN / s ** e
            for ori in (0.0, 90.0):
                base = generate_family(TextureFamily(g, t, orientation=ori, seed=e), size)
                for m in range(80):
                    for n in range(80):
                        w, h = level_size(size, size, s, ScaleLevel(m, n))
                        if min(w, h) < WIN + 4:
                            continue
                        d = max(abs(m - e), abs(n - e))
                        if g in positive and d == 0:
                            arr = resize(base, w, h).data
                            ng = ng_windows(arr, WIN)
                            dr = np.arange(ng.shape[0]) * (WIN - t * h / size)
                            dc = np.arange(ng.shape[1]) * (WIN - t * w / size)
                            ok = (np.abs(dr)[:, None] <= 0.5) & (np.abs(dc)[None, :] <= 0.5)
                            ok[[0, -1], :] = False
                            ok[:, [0, -1]] = False
                            pos.append(ng[ok])
                            for a, b in ((4, 4), (4, 0), (0, 4), (2, 2), (2, 0), (0, 2)):
                                neg.append(ng_windows(arr[a:, b:], WIN).reshape(-1, NG_DIM))
                        elif (g not in positive or d >= 2) and rng.random() < rate:
                            pool.append(ng_windows(resize(base, w, h).data, WIN // 2).reshape(-1, NG_DIM))
    pool = np.vstack(pool)
    return np.vstack(pos), np.vstack(neg), pool[~is_ring(pool)]


def default_ng_model(quantile: float = 0.05, seed: int = 0, neg_ratio: int = 3) -> NgModel:
    """Closed-cell detector trained on procedural textures, with one round of
    hard negatives mined from the pool."""
    rng = np.random.default_rng(seed)
    pos, neg, pool = ng_training_windows(seed=seed)
    take = min(len(pool), neg_ratio * len(pos))
    negs = np.vstack([neg, pool[rng.choice(len(pool), take, replace=False)]])
    model = train_ng_model(pos, negs, quantile=quantile, seed=seed, max_epochs=60, tol=1e-3)
    hard = pool[pool @ model.w + model.bias >= model.threshold]
    if len(hard):
        if len(hard) > 2 * len(pos):
            hard = hard[rng.choice(len(hard), 2 * len(pos), replace=False)]
        model = train_ng_model(pos, np.vstack([negs, hard]), quantile=quantile, seed=seed,
                               max_epochs=60, tol=1e-3)
    return model


# -- persistence --------------------------------------------------------------

def save_ng_model(model: NgModel, path) -> None:
    vals = np.concatenate([model.w, [model.bias, model.threshold]])
    with open(path, "wb") as fh:
        fh.write(b"NGM1")
        fh.write(vals.astype("<f8").tobytes())


def load_ng_model(path) -> NgModel:
    with open(path, "rb") as fh:
        if fh.read(4) != b"NGM1":
            raise ValueError(f"{path}: not an NGM1 model file")
        vals = np.frombuffer(fh.read(8 * (NG_DIM + 2)), dtype="<f8")
    if len(vals) != NG_DIM + 2:
        raise ValueError(f"{path}: truncated NGM1 model")
    return NgModel(w=vals[:NG_DIM].copy(), bias=float(vals[NG_DIM]), threshold=float(vals[NG_DIM + 1]))


def write_proposals_csv(proposals: ScaleProposalSet, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["m", "n", "row", "col", "score"])
        for i in range(len(proposals)):
            wr.writerow([int(proposals.m[i]), int(proposals.n[i]), int(proposals.row[i]),
                         int(proposals.col[i]), repr(float(proposals.score[i]))])
