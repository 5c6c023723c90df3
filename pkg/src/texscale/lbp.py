"""LBP_{8,1} codes with the u2 (uniform) mapping, histograms and intersection similarity."""
from __future__ import annotations

import numpy as np

from .imagery import as_array

N_BINS = 59

# (d_row, d_col) for bit 0..7: east first, then counter-clockwise (north is row - 1).
OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


def transitions(code: int) -> int:
    bits = [(code >> b) & 1 for b in range(8)]
    return sum(bits[b] != bits[(b + 1) % 8] for b in range(8))


def is_uniform(code: int) -> bool:
    return transitions(int(code)) <= 2


UNIFORM_CODES = np.array([c for c in range(256) if is_uniform(c)])
# code -> histogram bin; all nonuniform codes share the last bin.
U2_BIN = np.full(256, N_BINS - 1, dtype=np.int64)
U2_BIN[UNIFORM_CODES] = np.arange(len(UNIFORM_CODES))
UNIFORM_MASK = np.zeros(256, dtype=bool)
UNIFORM_MASK[UNIFORM_CODES] = True


def lbp_code(center: float, neighbors) -> int:
    """8-bit code; bit ``b`` is set when neighbor ``b`` is >= the center."""
    neighbors = np.asarray(neighbors, dtype=np.float64)
    if neighbors.shape != (8,):
        raise ValueError("need exactly 8 neighbors")
    return int(np.sum((neighbors >= center) << np.arange(8)))


def lbp_codes(img) -> np.ndarray:
    """Codes for every interior pixel; leading axes are treated as a batch.

    Diagonal neighbours are the pixel-grid corners, so the codes only depend
    on the intensity order.
    """
    arr = as_array(img)
    if arr.shape[-1] < 3 or arr.shape[-2] < 3:
        raise ValueError(f"LBP needs at least 3x3 pixels, got {arr.shape[-2:]}")
    h, w = arr.shape[-2:]
    c = arr[..., 1:h - 1, 1:w - 1]
    codes = np.zeros(c.shape, dtype=np.int64)
    for b, (dr, dc) in enumerate(OFFSETS):
        nb = arr[..., 1 + dr:h - 1 + dr, 1 + dc:w - 1 + dc]
        codes |= (nb >= c).astype(np.int64) << b
    return codes


def histogram_from_codes(codes: np.ndarray) -> np.ndarray:
    """u2 histograms over the last two axes, L1-normalized."""
    bins = U2_BIN[codes].reshape(codes.shape[:-2] + (-1,))
    n = bins.shape[-1]
    flat = bins.reshape(-1, n)
    rows = flat.shape[0]
    keys = (flat + N_BINS * np.arange(rows)[:, None]).ravel()
    out = np.bincount(keys, minlength=rows * N_BINS).reshape(rows, N_BINS) / n
    return out.reshape(codes.shape[:-2] + (N_BINS,))


def lbp_histogram(img) -> np.ndarray:
    return histogram_from_codes(lbp_codes(img))


def _check_normalized(h: np.ndarray) -> None:
    if np.any(h < 0) or np.any(np.abs(h.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("histogram must be nonnegative and sum to 1")


def similarity(h1, h2) -> float:
    """Histogram intersection of two normalized histograms."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    _check_normalized(h1)
    _check_normalized(h2)
    return float(np.minimum(h1, h2).sum())


def pairwise_similarity(hists: np.ndarray, other: np.ndarray | None = None) -> np.ndarray:
    """Intersection similarity between every row of ``hists`` and of ``other``."""
    a = np.asarray(hists, dtype=np.float64)
    b = a if other is None else np.asarray(other, dtype=np.float64)
    out = np.empty((len(a), len(b)))
    chunk = max(1, 2_000_000 // max(1, len(b) * N_BINS))
    for i in range(0, len(a), chunk):
        out[i:i + chunk] = np.minimum(a[i:i + chunk, None, :], b[None, :, :]).sum(axis=-1)
    return out


def write_histograms_csv(path, hists, labels=None) -> None:
    hists = np.atleast_2d(hists)
    with open(path, "w") as fh:
        head = [f"bin{i}" for i in range(N_BINS)]
        if labels is not None:
            head = ["label"] + head
        fh.write(",".join(head) + "\n")
        for i, row in enumerate(hists):
            vals = [repr(float(v)) for v in row]
            if labels is not None:
                vals = [str(labels[i])] + vals
            fh.write(",".join(vals) + "\n")
