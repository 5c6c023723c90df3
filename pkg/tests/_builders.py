"""Small constructed datasets shared by several test modules."""
import numpy as np
from scipy import ndimage

from texscale.datakit import TextureFamily, generate_family, synthesize_level
from texscale.imagery import Image, ScaleLevel


def two_band_class(seed, per_band=12, size=64, texel=8.0):
    """One checkerboard class sampled in a fine band (levels 0-1) and a heavily
    downsized band (levels 24-25). Returns (samples, band of each sample)."""
    rng = np.random.default_rng(seed)
    samples, bands = [], []
    for b, (lo, hi) in enumerate(((0, 1), (24, 25))):
        grid = [ScaleLevel(m, n) for m in range(lo, hi + 1) for n in range(lo, hi + 1)]
        for j in range(per_band):
            fam = TextureFamily("checkerboard", texel, contrast=float(rng.uniform(0.5, 0.7)))
            base = Image(ndimage.gaussian_filter(generate_family(fam, size).data, 1.0, mode="reflect"))
            lv = grid[j % len(grid)]
            samples.append((synthesize_level(base, 0.95, lv, rng), lv))
            bands.append(b)
    return samples, np.array(bands)


def band_purity(groups, bands):
    """Fraction of samples whose subcategory's majority band is their own band."""
    hit = 0
    for g in groups:
        hit += np.bincount(bands[g]).max()
    return hit / len(bands)
