"""
Finding the scale of a texture
==============================

A checkerboard whose squares are 8 / 0.95**10 pixels wide fits the 8x8
texel detector best after ten pyramid steps. We scan every level of the
pyramid, then keep only texels that look like many others at their level.
"""

import numpy as np

from texscale import datakit as dk
from texscale import proposals as P
from texscale.imagery import build_pyramid

# the detector is trained on synthetic checkerboards, takes ~10 s
model = P.default_ng_model()
print(f"threshold {model.threshold:.3f}")

t = 8 / 0.95 ** 10
img = dk.generate_family(dk.TextureFamily("checkerboard", t), 256)
S = P.scan_pyramid(build_pyramid(img, 0.95, 8), model, stride=8)
print(f"{len(S)} texel windows on {len(S.levels)} levels")

###############################################################################
# Reduction keeps a texel when at least K=20 others at its level have an LBP
# histogram similarity of eta or more.

R = P.reduce_proposals(S, eta=0.8, K=20)
m, n = np.array(R.m), np.array(R.n)
print(f"{len(R)} texels survive on levels {sorted(set(zip(m.tolist(), n.tolist())))[:6]}")
print("share within one step of (10, 10):",
      np.mean((np.abs(m - 10) <= 1) & (np.abs(n - 10) <= 1)).round(2))
