"""
Where a texture changes category
================================

Sparse codes learned on fine-scale samples reconstruct that scale well
but not a heavily downsized version, which turns into a different-looking
texture. Regrouping splits the class at that boundary.
"""

import numpy as np
from scipy import ndimage

from texscale import datakit as dk
from texscale.boundary import learn_dictionary, reconstruct, regroup_class
from texscale.imagery import Image, ScaleLevel

rng = np.random.default_rng(0)
samples, bands = [], []
for b, lo in enumerate((0, 24)):
    for j in range(12):
        fam = dk.TextureFamily("checkerboard", 8.0, contrast=rng.uniform(0.5, 0.7))
        base = Image(ndimage.gaussian_filter(dk.generate_family(fam, 64).data, 1.0))
        lv = ScaleLevel(lo + j % 2, lo + (j // 2) % 2)
        samples.append((dk.synthesize_level(base, 0.95, lv, rng), lv))
        bands.append(b)
bands = np.array(bands)

fine = [samples[i][0] for i in np.flatnonzero(bands == 0)[:10]]
d = learn_dictionary(fine)
deltas = np.array([reconstruct(img, d).delta for img, _ in samples])
print("reconstruction error, fine band  :", deltas[bands == 0].round(3))
print("reconstruction error, coarse band:", deltas[bands == 1].round(3))

###############################################################################
# With xi = 0.1 the coarse band cannot join the first subcategory.

for p, g in enumerate(regroup_class(samples, xi=0.1)):
    print(f"subcategory {p}: levels {[tuple(samples[i][1]) for i in g][:4]} ... ({len(g)} samples)")
