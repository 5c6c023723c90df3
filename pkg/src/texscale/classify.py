"""One-vs-rest linear SVMs, three-net voting and scale-instance aggregation."""
from __future__ import annotations

import csv
import logging
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class SvmModel:
    classes: list
    W: np.ndarray  # (n_classes, dim)
    b: np.ndarray  # (n_classes,)
    C: float = 1.0

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"feature dimension {X.shape[1]} does not match model dimension {self.dim}")
        return X @ self.W.T + self.b

    def predict(self, X) -> list:
        idx = np.argmax(self.decision_function(X), axis=1)
        return [self.classes[i] for i in idx]


def dual_cd(X: np.ndarray, Y: np.ndarray, C: float = 1.0, seed: int = 0,
            max_epochs: int = 1000, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray, int]:
    """Dual coordinate descent for L1-loss linear SVMs, one problem per column of ``Y``.

    A constant feature is appended so the bias is learned (and regularized)
    like any other weight. Stops once every problem's duality gap is below
    ``tol`` relative to its primal objective.

    Returns ``(W, b, epochs)``.
    """
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    Y = np.asarray(Y, dtype=np.float64)
    k = Y.shape[1]
    alpha = np.zeros((n, k))
    # U[i] = W @ Xa[i], kept up to date through the Gram matrix so each
    # coordinate step costs O(n k) rather than O(d k)
    Q = Xa @ Xa.T
    qdiag = np.diag(Q).copy()
    U = np.zeros((n, k))
    rng = np.random.default_rng(seed)
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        for i in rng.permutation(n):
            if qdiag[i] == 0.0:
                continue
            yi = Y[i]
            ai = alpha[i]
            new = ai - (yi * U[i] - 1.0) / qdiag[i]
            np.maximum(new, 0.0, out=new)
            np.minimum(new, C, out=new)
            step = new - ai
            if step.any():
                U += Q[i][:, None] * (step * yi)
                alpha[i] = new
        AY = alpha * Y
        wsq = np.einsum("ik,ik->k", AY, U)
        primal = 0.5 * wsq + C * np.maximum(0.0, 1.0 - Y * U).sum(axis=0)
        dual = alpha.sum(axis=0) - 0.5 * wsq
        if np.all(primal - dual <= tol * np.maximum(1.0, primal)):
            break
    else:
        log.info("dual_cd hit the %d-epoch cap", max_epochs)
    W = (alpha * Y).T @ Xa
    return W[:, :d].copy(), W[:, d].copy(), epoch


def train_svm(features, labels: Sequence, C: float = 1.0, seed: int = 0,
              max_epochs: int = 1000, tol: float = 1e-6) -> SvmModel:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = list(labels)
    if len(labels) != len(X):
        raise ValueError("features and labels differ in length")
    classes = sorted(set(labels), key=lambda c: (str(type(c)), c))
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    pos = {c: i for i, c in enumerate(classes)}
    Y = -np.ones((len(X), len(classes)))
    Y[np.arange(len(X)), [pos[c] for c in labels]] = 1.0
    W, b, _ = dual_cd(X, Y, C=C, seed=seed, max_epochs=max_epochs, tol=tol)
    return SvmModel(classes=classes, W=W, b=b, C=C)


def _break_ties(labels: Sequence, summed: dict) -> object:
    counts = Counter(labels)
    top = max(counts.values())
    tied = [c for c in counts if counts[c] == top]
    if len(tied) == 1:
        return tied[0]
    return max(tied, key=lambda c: (summed.get(c, -np.inf), str(c)))


@dataclass
class VotingEnsemble:
    models: list  # one SvmModel per net

    def __post_init__(self):
        if len({tuple(m.classes) for m in self.models}) != 1:
            raise ValueError("ensemble members must share one class list")

    @property
    def classes(self) -> list:
        return self.models[0].classes

    def scores(self, fvs) -> np.ndarray:
        """Per-model decision scores, shape (n_models, n_classes)."""
        if len(fvs) != len(self.models):
            raise ValueError("need one feature vector per model")
        return np.vstack([m.decision_function(fv)[0] for m, fv in zip(self.models, fvs)])


def vote(ensemble: VotingEnsemble, fvs) -> object:
    """Majority label of the per-net predictions; ties go to the highest summed score."""
    s = ensemble.scores(fvs)
    classes = ensemble.classes
    labels = [classes[i] for i in np.argmax(s, axis=1)]
    summed = dict(zip(classes, s.sum(axis=0)))
    return _break_ties(labels, summed)


def aggregate_scales(labels: Sequence, scores=None, classes: Sequence | None = None) -> object:
    """Most frequent label over an image's scale instances.

    ``scores`` is an (n_instances, n_classes) array aligned with ``classes``;
    its column sums break ties between equally frequent labels.
    """
    labels = list(labels)
    if not labels:
        raise ValueError("no instance labels to aggregate")
    summed = {}
    if scores is not None:
        scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
        summed = dict(zip(classes, scores.sum(axis=0)))
    return _break_ties(labels, summed)


# -- persistence --------------------------------------------------------------

def save_svm(model: SvmModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"SVM1")
        fh.write(struct.pack("<I", len(model.classes)))
        for c in model.classes:
            raw = str(c).encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
        fh.write(struct.pack("<Id", model.dim, model.C))
        fh.write(np.ascontiguousarray(model.W, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.b, dtype="<f8").tobytes())


def load_svm(path) -> SvmModel:
    with open(path, "rb") as fh:
        if fh.read(4) != b"SVM1":
            raise ValueError(f"{path}: not an SVM1 model file")
        (k,) = struct.unpack("<I", fh.read(4))
        classes = []
        for _ in range(k):
            (ln,) = struct.unpack("<I", fh.read(4))
            classes.append(fh.read(ln).decode("utf-8"))
        d, C = struct.unpack("<Id", fh.read(12))
        W = np.frombuffer(fh.read(8 * k * d), dtype="<f8").reshape(k, d).copy()
        b = np.frombuffer(fh.read(8 * k), dtype="<f8").copy()
    return SvmModel(classes=classes, W=W, b=b, C=C)


def write_predictions(path, rows) -> None:
    """``rows``: iterables of (path, instance_scale, instance_label, aggregated_label)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["path", "instance_scale", "instance_label", "aggregated_label"])
        for r in rows:
            wr.writerow(list(r))
