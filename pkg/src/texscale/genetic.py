"""Crossover and semantic-aware mutation over conv-layer unit strings, and the
three-net training schedule that interleaves SGD epochs with GA steps.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .net import (ConvNet, SemanticVerdict, TrainingDiverged, calibrate_all,
                  semantic_fraction, semantic_units, train_epochs)

log = logging.getLogger(__name__)


@dataclass
class UnitString:
    """The filters of one conv layer of one net, in channel order."""

    layer: int
    W: np.ndarray  # (n, c_in, 3, 3)
    b: np.ndarray  # (n,)

    def __post_init__(self):
        if len(self.W) != len(self.b):
            raise ValueError("weights and biases disagree on the unit count")

    def __len__(self):
        return len(self.b)

    @property
    def unit_shape(self):
        return self.W.shape[1:]

    def unit(self, i) -> np.ndarray:
        return np.concatenate([self.W[i].ravel(), [self.b[i]]])

    def copy(self) -> "UnitString":
        return UnitString(self.layer, self.W.copy(), self.b.copy())

    @classmethod
    def of(cls, net: ConvNet, layer: int) -> "UnitString":
        W, b = net.conv[layer]
        return cls(layer, W.copy(), b.copy())

    def write_to(self, net: ConvNet) -> None:
        W, b = net.conv[self.layer]
        W[...] = self.W
        b[...] = self.b


@dataclass
class GaConfig:
    crossover_fraction: float = 0.10
    mutation_fraction: float = 0.05
    q: float = 0.05
    p_crossover: float = 0.5
    generations: int = 10
    epochs_per_generation: int = 2
    seed: int = 0
    crossover: bool = True
    mutation: bool = True
    lr: float = 0.02
    momentum: float = 0.9
    batch: int = 16
    window: int = 5
    k: int = 10
    tau: list | None = None  # fixed per-layer thresholds; recalibrated each generation if None

    def __post_init__(self):
        for name in ("crossover_fraction", "mutation_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if not 0.0 < self.q < 1.0:
            raise ValueError("q must lie in (0, 1)")
        if not 0.0 <= self.p_crossover <= 1.0:
            raise ValueError("p_crossover must lie in [0, 1]")
        if self.generations < 0 or self.epochs_per_generation < 0:
            raise ValueError("generations and epochs must be >= 0")


def _check_pair(a: UnitString, b: UnitString):
    if a.layer != b.layer:
        raise ValueError(f"unit strings come from different layers ({a.layer} vs {b.layer})")
    if a.unit_shape != b.unit_shape or len(a) != len(b):
        raise ValueError("unit strings differ in unit shape or length")


def crossover_positions(n: int, fraction: float) -> int:
    # the epsilon keeps float noise such as 0.1 * 10 from rounding up
    return min(n, math.ceil(fraction * n - 1e-9))


def crossover(a: UnitString, b: UnitString, fraction: float, rng) -> tuple[UnitString, UnitString]:
    """Swap the units at ``ceil(fraction * n)`` random positions between two strings."""
    _check_pair(a, b)
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(a)
    pos = rng.choice(n, size=crossover_positions(n, fraction), replace=False)
    a2, b2 = a.copy(), b.copy()
    a2.W[pos], b2.W[pos] = b.W[pos], a.W[pos]
    a2.b[pos], b2.b[pos] = b.b[pos], a.b[pos]
    return a2, b2


def mutation(a: UnitString, b: UnitString, sem_a, sem_b, q: float, rng,
             cap_fraction: float = 0.05) -> tuple[UnitString, np.ndarray]:
    """Overwrite Bernoulli(q)-selected semantic units of ``a`` with non-semantic units of ``b``.

    At most ``ceil(cap_fraction * n)`` positions change. ``b`` is never
    modified. Returns the new string and the replaced positions.
    """
    _check_pair(a, b)
    sem_a = np.asarray(sem_a, dtype=bool)
    sem_b = np.asarray(sem_b, dtype=bool)
    if len(sem_a) != len(a) or len(sem_b) != len(b):
        raise ValueError("verdict length does not match the unit string")
    donors = np.flatnonzero(~sem_b)
    cand = np.flatnonzero(sem_a)
    if len(donors) == 0:
        log.info("layer %d: donor string has no non-semantic units; mutation skipped", a.layer)
        return a.copy(), np.zeros(0, dtype=np.int64)
    picked = cand[rng.random(len(cand)) < q]
    cap = math.ceil(cap_fraction * len(a) - 1e-9)
    if len(picked) > cap:
        picked = np.sort(rng.choice(picked, size=cap, replace=False))
    src = donors[rng.integers(0, len(donors), size=len(picked))]
    out = a.copy()
    out.W[picked] = b.W[src]
    out.b[picked] = b.b[src]
    return out, picked


@dataclass
class GaResult:
    nets: list
    history: list = field(default_factory=list)  # dict rows, one per (generation, net)
    verdicts: list = field(default_factory=list)

    def final_fractions(self) -> list[float]:
        return [semantic_fraction(v) for v in self.verdicts]


def _verdicts(nets, calib, cfg: GaConfig) -> list[SemanticVerdict]:
    out = []
    for net in nets:
        tau = cfg.tau if cfg.tau is not None else calibrate_all(net, calib)
        out.append(semantic_units(net, calib, tau, cfg.window, cfg.k))
    return out


def ga_train(nets, subsets, cfg: GaConfig, calib) -> GaResult:
    """Train three nets on their own subsets, with GA steps between generations.

    ``subsets`` holds one ``(X, y)`` pair per net; ``calib`` is the image
    set for semantic verdicts. GA operators run after every generation but
    the last, so the returned nets end on SGD epochs.
    """
    if len(nets) != 3 or len(subsets) != 3:
        raise ValueError("ga_train needs exactly three nets and three subsets")
    if len({n.channels for n in nets}) != 1:
        raise ValueError("nets must share one architecture")
    rng = np.random.default_rng(cfg.seed)
    train_rngs = [np.random.default_rng(s) for s in rng.integers(0, 2**63, size=3)]
    calib = list(calib)
    nets = [n.copy() for n in nets]
    history, verdicts = [], []
    for g in range(1, cfg.generations + 1):
        losses = []
        for i, (net, (X, y)) in enumerate(zip(nets, subsets)):
            backup = net.copy()
            try:
                hist = train_epochs(net, X, y, cfg.epochs_per_generation, cfg.lr,
                                    cfg.momentum, cfg.batch, train_rngs[i])
                losses.append(hist[-1] if hist else float("nan"))
            except TrainingDiverged as exc:
                log.warning("generation %d, net %d: %s; generation discarded", g, i, exc)
                nets[i] = backup
                losses.append(float("nan"))
        verdicts = _verdicts(nets, calib, cfg)
        n_cross = [0, 0, 0]
        n_mut = [0, 0, 0]
        if g < cfg.generations:
            for l in range(len(nets[0].conv)):
                if cfg.crossover and rng.random() < cfg.p_crossover:
                    i, j = rng.choice(3, size=2, replace=False)
                    ui, uj = crossover(UnitString.of(nets[i], l), UnitString.of(nets[j], l),
                                       cfg.crossover_fraction, rng)
                    changed = np.flatnonzero(np.any(ui.W != nets[i].conv[l][0], axis=(1, 2, 3))
                                             | (ui.b != nets[i].conv[l][1]))
                    ui.write_to(nets[i])
                    uj.write_to(nets[j])
                    for k in (i, j):
                        nets[k].reset_velocity(l, changed)
                        n_cross[k] += 1
                if cfg.mutation:
                    a, b = rng.choice(3, size=2, replace=False)
                    ua, pos = mutation(UnitString.of(nets[a], l), UnitString.of(nets[b], l),
                                       verdicts[a].layers[l], verdicts[b].layers[l], cfg.q, rng,
                                       cfg.mutation_fraction)
                    ua.write_to(nets[a])
                    nets[a].reset_velocity(l, pos)
                    n_mut[a] += len(pos)
        for i in range(3):
            history.append({"generation": g, "net": i, "loss": losses[i],
                            "semantic_fraction": semantic_fraction(verdicts[i]),
                            "crossovers_applied": n_cross[i], "mutations_applied": n_mut[i]})
    if cfg.generations == 0:
        verdicts = _verdicts(nets, calib, cfg) if calib else []
    return GaResult(nets=nets, history=history, verdicts=verdicts)


GENERATION_LOG_COLUMNS = ("generation", "net", "loss", "semantic_fraction",
                          "crossovers_applied", "mutations_applied")


def write_generation_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=GENERATION_LOG_COLUMNS)
        wr.writeheader()
        for row in history:
            wr.writerow({k: row[k] for k in GENERATION_LOG_COLUMNS})
