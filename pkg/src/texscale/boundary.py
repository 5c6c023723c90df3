"""Sparse-coding reconstruction error and scale-boundary regrouping.

A dictionary of 16x16 atoms is learned from the least-downsized samples
of a class; every remaining sample it reconstructs with relative error
below ``xi`` joins the current subcategory. The loop repeats on what is
left, walking from fine to coarse scales.
"""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .imagery import Image, ScaleLevel, as_array

log = logging.getLogger(__name__)

PATCH = 16
DIM = PATCH * PATCH


@dataclass
class Dictionary:
    atoms: np.ndarray  # (A, 256), unit rows
    lam: float
    history: list = field(default_factory=list, repr=False)

    @property
    def size(self) -> int:
        return self.atoms.shape[0]


@dataclass
class ReconReport:
    delta: float
    codes: np.ndarray = field(repr=False)
    recon: np.ndarray = field(repr=False)


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def objective(X, D, Z, lam) -> float:
    r = X - Z @ D
    return 0.5 * float(np.sum(r * r)) + lam * float(np.abs(Z).sum())


def sparse_code(X: np.ndarray, D: np.ndarray, lam: float, iters: int = 50,
                Z0: np.ndarray | None = None) -> np.ndarray:
    """Iterative shrinkage for ``min_Z 0.5||X - Z D||^2 + lam |Z|_1``, rows of X are signals."""
    L = float(np.linalg.norm(D @ D.T, 2))
    Z = np.zeros((X.shape[0], D.shape[0])) if Z0 is None else Z0.copy()
    if L == 0.0:
        return Z
    DXt = X @ D.T
    G = D @ D.T
    for _ in range(iters):
        Z = _soft(Z - (Z @ G - DXt) / L, lam / L)
    return Z


def tile_patches(arr: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad to a multiple of 16 and cut into non-overlapping 16x16 tiles."""
    h, w = arr.shape
    H = -(-h // PATCH) * PATCH
    W = -(-w // PATCH) * PATCH
    if (H, W) != (h, w):
        arr = np.pad(arr, ((0, H - h), (0, W - w)), mode="reflect" if min(h, w) > 1 else "edge")
    tiles = arr.reshape(H // PATCH, PATCH, W // PATCH, PATCH).swapaxes(1, 2).reshape(-1, DIM)
    return tiles, (H, W)


def untile(tiles: np.ndarray, padded: tuple[int, int], shape: tuple[int, int]) -> np.ndarray:
    H, W = padded
    arr = tiles.reshape(H // PATCH, W // PATCH, PATCH, PATCH).swapaxes(1, 2).reshape(H, W)
    return arr[:shape[0], :shape[1]]


def default_lambda(X: np.ndarray, frac: float = 0.01) -> float:
    """``frac`` times the median patch norm."""
    norms = np.linalg.norm(X, axis=1)
    return frac * float(np.median(norms[norms > 0])) if np.any(norms > 0) else 0.0


def _update_atoms(X, D, Z, rng):
    """Exact block-coordinate minimization over each atom within the unit ball,
    then atoms are stretched to unit length with their codes shrunk to match.
    Neither step can raise the objective."""
    D = D.copy()
    Z = Z.copy()
    G = Z.T @ Z
    B = X.T @ Z  # (256, A)
    for j in range(D.shape[0]):
        if G[j, j] <= 0:
            continue
        d = D[j] + (B[:, j] - D.T @ G[:, j]) / G[j, j]
        nrm = np.linalg.norm(d)
        D[j] = d / max(nrm, 1.0)
    nrm = np.linalg.norm(D, axis=1)
    dead = nrm < 1e-12
    if np.any(dead):
        # an atom at the origin contributes nothing, so its codes can go too
        D[dead] = rng.standard_normal((int(dead.sum()), DIM))
        D[dead] /= np.linalg.norm(D[dead], axis=1, keepdims=True)
        Z[:, dead] = 0.0
        nrm[dead] = 1.0
    D /= nrm[:, None]
    Z *= nrm[None, :]
    return D, Z


def fista(X, D, lam, iters=200):
    """Accelerated shrinkage from zero; faster than plain ISTA but not monotone."""
    L = float(np.linalg.norm(D @ D.T, 2))
    Z = np.zeros((X.shape[0], D.shape[0]))
    if L == 0.0:
        return Z
    DXt = X @ D.T
    G = D @ D.T
    Y, t = Z, 1.0
    for _ in range(iters):
        Zn = _soft(Y - (Y @ G - DXt) / L, lam / L)
        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Y = Zn + ((t - 1.0) / tn) * (Zn - Z)
        Z, t = Zn, tn
    return Z


def training_patches(samples, stride: int = PATCH) -> np.ndarray:
    out = []
    for s in samples:
        arr = as_array(s)
        if min(arr.shape) < PATCH:
            out.append(tile_patches(arr)[0])
            continue
        win = np.lib.stride_tricks.sliding_window_view(arr, (PATCH, PATCH))[::stride, ::stride]
        out.append(win.reshape(-1, DIM))
    return np.vstack(out)


def learn_dictionary(samples, A: int = 64, lam: float | None = None, iters: int = 30,
                     inner: int = 50, seed: int = 0, lam_frac: float = 0.01,
                     stride: int = 4) -> Dictionary:
    """Alternate warm-started iterative shrinkage on the codes with
    block-coordinate updates of the atoms. Every half-step is a descent step,
    so ``history`` (the objective after each outer iteration) never increases.

    Training patches are 16x16 windows taken every ``stride`` pixels; a
    stride below 16 shows the dictionary more phases of a periodic texture.
    """
    if A < 1 or iters < 1:
        raise ValueError("A and iters must be >= 1")
    samples = list(samples)
    if not samples:
        raise ValueError("no training samples")
    if len(samples) < 10:
        log.warning("learning a dictionary from %d samples (10 expected)", len(samples))
    X = training_patches(samples, stride)
    if np.allclose(X, X[:, :1]):
        raise ValueError("all training patches are constant; nothing to learn")
    if lam is None:
        lam = default_lambda(X, lam_frac)
    rng = np.random.default_rng(seed)

    norms = np.linalg.norm(X, axis=1)
    cand = np.flatnonzero(norms > 1e-12)
    pick = rng.permutation(cand)[:A]
    D = rng.standard_normal((A, DIM))
    D[:len(pick)] = X[pick]
    D /= np.linalg.norm(D, axis=1, keepdims=True)

    Z = sparse_code(X, D, lam, inner)
    history = [objective(X, D, Z, lam)]
    for _ in range(iters):
        D, Z = _update_atoms(X, D, Z, rng)
        Z = sparse_code(X, D, lam, inner, Z0=Z)
        history.append(objective(X, D, Z, lam))
    return Dictionary(atoms=D, lam=float(lam), history=history)


def reconstruct(img, dictionary: Dictionary, iters: int = 200) -> ReconReport:
    """Tile-wise sparse reconstruction; error is measured on the original support."""
    arr = as_array(img)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ValueError("reconstruction error is undefined for an all-zero image")
    tiles, padded = tile_patches(arr)
    Z = fista(tiles, dictionary.atoms, dictionary.lam, iters)
    recon = untile(Z @ dictionary.atoms, padded, arr.shape)
    return ReconReport(delta=float(np.linalg.norm(arr - recon)) / norm, codes=Z, recon=recon)


def relative_error(img, recon) -> float:
    arr = as_array(img)
    return float(np.linalg.norm(arr - np.asarray(recon))) / float(np.linalg.norm(arr))


def _seed_order(levels: list[ScaleLevel], remaining: list[int], rng) -> list[int]:
    # least downsized first; ties in random order
    shuffled = [remaining[i] for i in rng.permutation(len(remaining))]
    return sorted(shuffled, key=lambda i: levels[i].m + levels[i].n)


def regroup_class(samples, xi: float = 0.1, n_seed: int = 10, seed: int = 0,
                  **dict_kwargs) -> list[list[int]]:
    """Split one class into scale subcategories.

    ``samples`` is a list of ``(Image, ScaleLevel)``. Returns the sample
    indices of each subcategory, ``p = 0`` first. Seed samples always join
    their own subcategory so the loop terminates.
    """
    if not 0.0 < xi < 1.0:
        raise ValueError("xi must lie in (0, 1)")
    images = [s[0] for s in samples]
    levels = [ScaleLevel(*s[1]) for s in samples]
    rng = np.random.default_rng(seed)
    remaining = list(range(len(samples)))
    groups = []
    while remaining:
        seeds = _seed_order(levels, remaining, rng)[:n_seed]
        dic = learn_dictionary([images[i] for i in seeds], seed=int(rng.integers(2**31)), **dict_kwargs)
        seed_set = set(seeds)
        members = [i for i in remaining
                   if i in seed_set or reconstruct(images[i], dic).delta < xi]
        groups.append(sorted(members))
        taken = set(members)
        remaining = [i for i in remaining if i not in taken]
    return groups


@dataclass
class Regrouping:
    """class -> list of subcategories, each a list of indices into that class's samples."""

    groups: dict

    def labels(self) -> dict:
        """(class, sample index) -> subcategory p."""
        out = {}
        for c, subs in self.groups.items():
            for p, members in enumerate(subs):
                for i in members:
                    out[(c, i)] = p
        return out

    @property
    def n_labels(self) -> int:
        return sum(len(v) for v in self.groups.values())


def regroup_dataset(dataset: dict, xi: float = 0.1, seed: int = 0, **kwargs) -> Regrouping:
    """``dataset`` maps class -> list of (Image, ScaleLevel)."""
    groups = {}
    for k, c in enumerate(sorted(dataset, key=str)):
        groups[c] = regroup_class(dataset[c], xi=xi, seed=seed + 7919 * k, **kwargs)
    return Regrouping(groups)


def merge_textureless(regrouping: Regrouping, dataset: dict, std_threshold: float) -> Regrouping:
    """Fold each class's flat subcategories (mean per-image std below threshold) into one."""
    out = {}
    for c, subs in regrouping.groups.items():
        flat, keep = [], []
        for members in subs:
            stds = [float(np.std(as_array(dataset[c][i][0]))) for i in members]
            (flat if np.mean(stds) < std_threshold else keep).append(members)
        if flat:
            keep.append(sorted(i for m in flat for i in m))
        out[c] = keep
    return Regrouping(out)


# -- persistence --------------------------------------------------------------

def save_dictionary(d: Dictionary, path) -> None:
    with open(path, "wb") as fh:
        fh.write(b"DICT1")
        fh.write(struct.pack("<II", d.size, DIM))
        fh.write(np.ascontiguousarray(d.atoms, dtype="<f8").tobytes())
        fh.write(struct.pack("<d", d.lam))


def load_dictionary(path) -> Dictionary:
    with open(path, "rb") as fh:
        if fh.read(5) != b"DICT1":
            raise ValueError(f"{path}: not a DICT1 file")
        a, dim = struct.unpack("<II", fh.read(8))
        atoms = np.frombuffer(fh.read(8 * a * dim), dtype="<f8").reshape(a, dim).copy()
        (lam,) = struct.unpack("<d", fh.read(8))
    return Dictionary(atoms=atoms, lam=lam)


def write_regrouping_csv(path, rows) -> None:
    """``rows``: iterables of (path, class, subcategory_p)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["path", "class", "subcategory_p"])
        for r in rows:
            wr.writerow(list(r))
