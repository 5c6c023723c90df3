"""
The whole pipeline on SynTex
============================

Five texture families, each sampled in three scale bands. Labels come
from regrouping, three small nets train with crossover and mutation, and
Fisher vectors of their last conv layer feed three voting SVMs.

Pass ``quick`` for a small run (about a minute).
"""

import sys
import time

from texscale.config import PipelineConfig
from texscale.pipeline import run_pipeline

cfg = PipelineConfig(cache=".texscale-cache")
if "quick" in sys.argv:
    cfg = cfg.with_overrides(per_class=15, generations=3, channels=(4, 8), eta="0.8")

for name, over in (("baseline", dict(use_sp=False)), ("+SP", dict(use_re=False)), ("full", {})):
    t = time.time()
    rep = run_pipeline(cfg.with_overrides(**over))
    print(f"{name:8s} {rep.summary()}  ({time.time() - t:.0f}s)")

###############################################################################
# Semantic fractions of the three nets after GA training, and the confusions.

print("semantic fractions", [round(f, 3) for f in rep.semantic_fractions])
for i, a in enumerate(rep.labels):
    for j, b in enumerate(rep.labels):
        if i != j and rep.confusion[i, j]:
            print(f"  {a} -> {b}: {rep.confusion[i, j]}")
