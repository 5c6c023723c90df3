"""Dense conv descriptors, a diagonal GMM codebook and Fisher-vector pooling."""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from .net import ConvNet, forward

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
LOG2PI = np.log(2.0 * np.pi)


def extract_descriptors(net: ConvNet, img) -> np.ndarray:
    """Pre-ReLU outputs of the last conv layer as an (h, w, D) field."""
    res = forward(net, img)
    z = res.pre[-1]
    if z.shape[0] != 1:
        raise ValueError("extract_descriptors takes a single image")
    return z[0].transpose(1, 2, 0)


def flatten_field(field_) -> np.ndarray:
    f = np.asarray(field_, dtype=np.float64)
    return f.reshape(-1, f.shape[-1])


@dataclass
class GmmCodebook:
    weights: np.ndarray   # (K,)
    means: np.ndarray     # (K, D)
    variances: np.ndarray  # (K, D)
    history: list = field(default_factory=list, repr=False)

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def D(self) -> int:
        return self.means.shape[1]

    def log_joint(self, X: np.ndarray) -> np.ndarray:
        """log(pi_k N(x | mu_k, sigma_k^2)) for every row and component."""
        X = np.asarray(X, dtype=np.float64)
        iv = 1.0 / self.variances
        # squared Mahalanobis terms expanded to avoid an (N, K, D) temporary
        maha = (X ** 2) @ iv.T - 2.0 * X @ (self.means * iv).T + np.sum(self.means ** 2 * iv, axis=1)
        logdet = np.sum(np.log(self.variances), axis=1)
        return np.log(self.weights) - 0.5 * (self.D * LOG2PI + logdet + maha)

    def log_likelihood(self, X) -> float:
        return float(logsumexp(self.log_joint(X), axis=1).sum())

    def responsibilities(self, X) -> np.ndarray:
        lj = self.log_joint(X)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def sample(self, n: int, rng) -> np.ndarray:
        comp = rng.choice(self.K, size=n, p=self.weights)
        return self.means[comp] + rng.standard_normal((n, self.D)) * np.sqrt(self.variances[comp])


def _m_step(X, R, floor):
    nk = R.sum(axis=0)
    safe = np.maximum(nk, 1e-300)
    means = (R.T @ X) / safe[:, None]
    var = np.empty_like(means)
    for k in range(len(nk)):
        var[k] = R[:, k] @ (X - means[k]) ** 2 / safe[k]
    w = np.maximum(nk / len(X), 1e-300)
    return w / w.sum(), means, np.maximum(var, floor)


def fit_gmm(X, Kg: int = 8, iters: int = 50, seed: int = 0, floor: float = VAR_FLOOR,
            tol: float = 0.0) -> GmmCodebook:
    """k-means initialization, then EM with diagonal covariances.

    ``history`` holds the log-likelihood of the initial model and after
    every EM iteration. Stops early once the gain falls below ``tol``
    times the sample count.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("descriptors must be a 2-D array")
    if len(X) < Kg:
        raise ValueError(f"{len(X)} samples cannot support {Kg} components")
    if iters < 1 or Kg < 1:
        raise ValueError("Kg and iters must be >= 1")
    if not np.all(np.isfinite(X)):
        raise ValueError("descriptors contain non-finite values")
    if Kg == 1:
        labels = np.zeros(len(X), dtype=int)
    else:
        _, labels = kmeans2(X, Kg, minit="++", seed=np.random.default_rng(seed))
    R = np.zeros((len(X), Kg))
    R[np.arange(len(X)), labels] = 1.0
    gmm = GmmCodebook(*_m_step(X, R, floor))
    hist = [gmm.log_likelihood(X)]
    for _ in range(iters):
        R = gmm.responsibilities(X)
        gmm = GmmCodebook(*_m_step(X, R, floor))
        hist.append(gmm.log_likelihood(X))
        if tol > 0 and hist[-1] - hist[-2] < tol * len(X):
            break
    gmm.history = hist
    return gmm


@dataclass
class FisherVector:
    vector: np.ndarray
    degenerate: bool = False  # the raw statistics were all zero


def fisher_statistics(X, gmm: GmmCodebook) -> np.ndarray:
    """Unnormalized mean and variance gradients, length 2 * D * K.

    Rows are put in lexicographic order first, so the sums (and hence the
    vector) do not depend on descriptor order, bit for bit.
    """
    X = flatten_field(X)
    if len(X) == 0:
        raise ValueError("empty descriptor field")
    if X.shape[1] != gmm.D:
        raise ValueError(f"descriptor dimension {X.shape[1]} does not match GMM dimension {gmm.D}")
    X = X[np.lexsort(X.T[::-1])]
    n = len(X)
    R = gmm.responsibilities(X)
    sd = np.sqrt(gmm.variances)
    u = np.empty((gmm.K, gmm.D))
    v = np.empty((gmm.K, gmm.D))
    for k in range(gmm.K):
        z = (X - gmm.means[k]) / sd[k]
        u[k] = R[:, k] @ z
        v[k] = R[:, k] @ (z * z - 1.0)
    u /= n * np.sqrt(gmm.weights)[:, None]
    v /= n * np.sqrt(2.0 * gmm.weights)[:, None]
    return np.concatenate([u.ravel(), v.ravel()])


def encode_fv(field_, gmm: GmmCodebook) -> FisherVector:
    raw = fisher_statistics(field_, gmm)
    nrm = float(np.linalg.norm(raw))
    if nrm == 0.0:
        log.warning("Fisher vector is all zero; left unnormalized")
        return FisherVector(raw, degenerate=True)
    return FisherVector(raw / nrm)


# -- persistence ----------------------------------------------------------------

def save_gmm(gmm: GmmCodebook, path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"GMM1")
        fh.write(struct.pack("<II", gmm.K, gmm.D))
        for a in (gmm.weights, gmm.means, gmm.variances):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_gmm(path) -> GmmCodebook:
    with open(path, "rb") as fh:
        if fh.read(4) != b"GMM1":
            raise ValueError(f"{path}: not a GMM1 file")
        k, d = struct.unpack("<II", fh.read(8))
        w = np.frombuffer(fh.read(8 * k), dtype="<f8").copy()
        mu = np.frombuffer(fh.read(8 * k * d), dtype="<f8").reshape(k, d).copy()
        var = np.frombuffer(fh.read(8 * k * d), dtype="<f8").reshape(k, d).copy()
    return GmmCodebook(w, mu, var)


def write_fv_csv(path, names, vectors) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        vectors = [np.asarray(v) for v in vectors]
        dim = len(vectors[0]) if vectors else 0
        wr.writerow(["path"] + [f"f{i}" for i in range(dim)])
        for name, v in zip(names, vectors):
            wr.writerow([name] + [repr(float(x)) for x in v])


def read_fv_csv(path) -> tuple[list, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [r[0] for r in rows], np.array([[float(x) for x in r[1:]] for r in rows])
