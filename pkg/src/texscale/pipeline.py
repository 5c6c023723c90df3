"""End-to-end texture classification: scale proposals, pyramid expansion,
regrouping, GA-trained nets, Fisher vectors, voting SVMs and scale-mode
aggregation. Stage results are cached on disk under the config hash.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import os
import pickle
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import boundary, classify, datakit, encoder, genetic, net as netmod, proposals
from .config import PipelineConfig
from .imagery import Image, ScaleLevel, build_pyramid, level_size, read_image, resize

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` and ``path`` say where."""

    def __init__(self, stage: str, msg: str, path: str = ""):
        self.stage = stage
        self.path = path
        where = f" [{path}]" if path else ""
        super().__init__(f"stage {stage}{where}: {msg}")


def workers() -> int:
    try:
        return max(1, int(os.environ.get("TEXSCALE_THREADS", "1")))
    except ValueError:
        return 1


# -- caching ----------------------------------------------------------------------

class StageCache:
    def __init__(self, root):
        self.root = Path(root) if root else None

    def _path(self, stage, key):
        return self.root / stage / f"{key}.pkl"

    def get(self, stage, key):
        if self.root is None:
            return None
        p = self._path(stage, key)
        if p.exists():
            with open(p, "rb") as fh:
                return pickle.load(fh)
        return None

    def put(self, stage, key, value):
        if self.root is None:
            return value
        p = self._path(stage, key)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            pickle.dump(value, fh, protocol=pickle.HIGHEST_PROTOCOL)
        tmp.replace(p)
        return value

    def cached(self, stage, key, fn):
        hit = self.get(stage, key)
        if hit is not None:
            return hit
        return self.put(stage, key, fn())


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p).tobytes())
        else:
            h.update(repr(p).encode())
    return h.hexdigest()[:16]


# -- data --------------------------------------------------------------------------

@dataclass
class Item:
    name: str
    image: Image
    cls: str
    level: ScaleLevel
    band: int | None
    label: str = ""
    split: str = ""


def syntex_spec(cfg: PipelineConfig) -> datakit.SynTexSpec:
    return datakit.SynTexSpec(per_class=cfg.per_class, seed=cfg.syntex_seed, bands=cfg.band_ranges(),
                              texel=cfg.texel, base_size=cfg.base_size, noise=cfg.noise)


def load_items(cfg: PipelineConfig) -> list[Item]:
    bands = cfg.band_ranges()
    if cfg.dataset == "syntex":
        spec = syntex_spec(cfg)
        return [Item(s.name, s.image, s.cls, s.level, s.band) for s in datakit.build_syntex(spec)]
    try:
        man = datakit.Manifest.read(cfg.manifest)
    except (OSError, KeyError, ValueError) as exc:
        raise StageError("data", str(exc), cfg.manifest) from None
    root = Path(cfg.manifest).parent
    items = []
    for r in man:
        path = root / r.path
        try:
            img = read_image(path)
        except OSError as exc:
            raise StageError("data", f"cannot read image: {exc}", str(path)) from None
        lv = ScaleLevel(r.m, r.n)
        items.append(Item(r.path, img, r.cls, lv, datakit.band_of(lv, bands), split=r.split))
    return items


def dataset_key(items) -> str:
    return _digest(*[(it.name, it.cls, tuple(it.level)) for it in items],
                   *[it.image.data for it in items])


# -- stages -----------------------------------------------------------------------

def regroup_items(items, cfg: PipelineConfig, cache: StageCache, dkey: str) -> dict:
    """name -> label. Labels are "class/p" after regrouping, else the class."""
    if not cfg.regroup:
        return {it.name: it.cls for it in items}

    def run():
        by_class = {}
        for it in items:
            by_class.setdefault(it.cls, []).append(it)
        data = {c: [(it.image, it.level) for it in v] for c, v in by_class.items()}
        rg = boundary.regroup_dataset(data, xi=cfg.xi, seed=0, A=cfg.atoms)
        if cfg.merge_std > 0:
            rg = boundary.merge_textureless(rg, data, cfg.merge_std)
        out = {}
        for c, subs in rg.groups.items():
            for p, members in enumerate(subs):
                for i in members:
                    out[by_class[c][i].name] = f"{c}/{p}"
        return out

    key = _digest(dkey, cfg.hash("xi", "atoms", "merge_std"))
    return cache.cached("regroup", key, run)


def assign_splits(items, labels, cfg: PipelineConfig) -> None:
    if cfg.dataset == "manifest" and all(it.split for it in items):
        return
    # stratify by label; labels too small to split are pooled per class, and a
    # pool that is still too small joins the class's largest label
    counts = Counter(labels[it.name] for it in items)
    strata = [labels[it.name] if counts[labels[it.name]] >= 2 else f"{it.cls}/*" for it in items]
    pooled = Counter(strata)
    for i, it in enumerate(items):
        if pooled[strata[i]] < 2:
            same = [labels[o.name] for o in items if o.cls == it.cls and counts[labels[o.name]] >= 2]
            if same:
                strata[i] = Counter(same).most_common(1)[0][0]
    rows = [datakit.ManifestRow(it.name, st, it.level.m, it.level.n) for it, st in zip(items, strata)]
    try:
        split = datakit.make_split(datakit.Manifest(rows), (cfg.split_train, 0.0, 1.0 - cfg.split_train),
                                   seed=cfg.seed)
    except ValueError as exc:
        raise StageError("split", str(exc)) from None
    for it, r in zip(items, split.rows):
        it.split = r.split


def get_ng_model(cfg: PipelineConfig, cache: StageCache) -> proposals.NgModel:
    if cfg.ng_model != "default":
        try:
            return proposals.load_ng_model(cfg.ng_model)
        except (OSError, ValueError) as exc:
            raise StageError("proposals", str(exc), cfg.ng_model) from None
    return cache.cached("ng_model", "default-v2", proposals.default_ng_model)


def get_eta(items, cfg: PipelineConfig, cache: StageCache, dkey: str) -> float:
    if cfg.eta_value is not None:
        return cfg.eta_value
    train = [it for it in items if it.split == "train"]
    key = _digest(dkey, [it.name for it in train])
    return cache.cached("eta", key, lambda: proposals.calibrate_eta(
        [it.image for it in train], [it.cls for it in train]))


@dataclass
class ImageProposals:
    sp: list          # levels with any texel proposal, by descending best score
    re: list          # levels that keep reduced texels, same order
    n_texels: int
    n_reduced: int


def scan_image(img: Image, model, cfg: PipelineConfig) -> proposals.ScaleProposalSet:
    return proposals.scan_pyramid(build_pyramid(img, cfg.s, max(cfg.min_dim, proposals.WIN)),
                                  model, cfg.stride)


def _ranked(Q) -> list:
    best = {lv: float(Q.score[idx].max()) for lv, idx in Q.level_groups()}
    return sorted(best, key=lambda lv: (-best[lv], lv))


def image_proposals(img: Image, model, cfg: PipelineConfig, eta: float, scanned=None) -> ImageProposals:
    P = scanned if scanned is not None else scan_image(img, model, cfg)
    R = proposals.reduce_proposals(P, eta, cfg.K)
    return ImageProposals(_ranked(P), _ranked(R), len(P), len(R))


def compute_proposals(items, cfg, cache, model, eta) -> dict:
    """Scans are cached per image independently of eta; reduction is redone per eta."""
    mkey = _digest(model.w, model.bias, model.threshold)
    params = cfg.hash("s", "min_dim", "stride")

    def one(it):
        key = _digest(it.image.data, mkey, params)
        try:
            P = cache.cached("scan", key, lambda: scan_image(it.image, model, cfg))
            return it.name, image_proposals(it.image, model, cfg, eta, P)
        except ValueError as exc:
            raise StageError("proposals", str(exc), it.name) from None

    with ThreadPoolExecutor(workers()) as ex:
        return dict(ex.map(one, items))


def instance_levels(props: ImageProposals | None, cfg: PipelineConfig) -> list:
    if props is None or not cfg.use_sp:
        return []
    levels = props.re if cfg.use_re else props.sp
    levels = [lv for lv in levels if lv != (0, 0)]
    if cfg.max_instances > 0:
        levels = levels[:cfg.max_instances]
    return levels


def expand(it: Item, levels, s: float, min_size: int) -> list[tuple[ScaleLevel, Image]]:
    """The image itself plus its downsized copies at ``levels`` (too-small ones dropped)."""
    out = [(ScaleLevel(0, 0), it.image)]
    for lv in levels:
        w, h = level_size(it.image.width, it.image.height, s, lv)
        if min(w, h) >= min_size:
            out.append((lv, resize(it.image, w, h)))
    return out


def _subsets(labels, rng, k=3):
    """Stratified random split of indices into k near-even parts."""
    by = {}
    for i, l in enumerate(labels):
        by.setdefault(l, []).append(i)
    parts = [[] for _ in range(k)]
    offset = 0
    for l in sorted(by):
        idx = [by[l][j] for j in rng.permutation(len(by[l]))]
        for j, i in enumerate(idx):
            parts[(j + offset) % k].append(i)
        offset += len(idx)
    return [sorted(p) for p in parts]


def train_nets(train_items, label_index, cfg: PipelineConfig, cache, dkey):
    """Three nets on three disjoint stratified subsets of the training images."""
    ga_key = cfg.hash("ga", "crossover_fraction", "mutation_fraction", "q", "p_crossover",
                      "generations", "epochs", "lr", "momentum", "batch", "channels",
                      "window", "k", "seed")
    key = _digest("nets-v2", dkey, [(it.name, it.label) for it in train_items], ga_key)

    def run():
        rng = np.random.default_rng(cfg.seed)
        X = np.stack([it.image.data for it in train_items])
        y = np.array([label_index[it.label] for it in train_items])
        parts = _subsets(y.tolist(), rng)
        nets = [netmod.ConvNet.random(len(label_index), cfg.channels, seed=int(rng.integers(2**31)))
                for _ in range(3)]
        gcfg = genetic.GaConfig(
            crossover_fraction=cfg.crossover_fraction, mutation_fraction=cfg.mutation_fraction,
            q=cfg.q, p_crossover=cfg.p_crossover, generations=cfg.generations,
            epochs_per_generation=cfg.epochs, seed=int(rng.integers(2**31)),
            crossover=cfg.ga in ("both", "crossover"), mutation=cfg.ga in ("both", "mutation"),
            lr=cfg.lr, momentum=cfg.momentum, batch=cfg.batch, window=cfg.window, k=cfg.k)
        calib = [X[i] for i in rng.choice(len(X), size=min(len(X), 10), replace=False)]
        res = genetic.ga_train(nets, [(X[p], y[p]) for p in parts], gcfg, calib)
        return res.nets, res.history, res.final_fractions()

    return cache.cached("nets", key, run)


@dataclass
class EvalReport:
    accuracy: float
    per_class: dict
    scale_accuracy: float | None
    labels: list
    confusion: np.ndarray
    per_net_accuracy: list = field(default_factory=list)
    semantic_fractions: list = field(default_factory=list)
    mean_instances: float = 1.0
    eta: float | None = None
    seconds: float = 0.0
    predictions: list = field(default_factory=list, repr=False)

    def summary(self) -> str:
        sa = "n/a" if self.scale_accuracy is None else f"{self.scale_accuracy:.3f}"
        nets = " ".join(f"{a:.3f}" for a in self.per_net_accuracy)
        return (f"accuracy {self.accuracy:.3f}  scale-level {sa}  per-net [{nets}]  "
                f"instances/image {self.mean_instances:.2f}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["metric", "key", "value"])
            wr.writerow(["accuracy", "", repr(self.accuracy)])
            wr.writerow(["scale_accuracy", "", "" if self.scale_accuracy is None else repr(self.scale_accuracy)])
            for c, a in sorted(self.per_class.items()):
                wr.writerow(["class_accuracy", c, repr(a)])
            for i, a in enumerate(self.per_net_accuracy):
                wr.writerow(["net_accuracy", i, repr(a)])
            for i, f in enumerate(self.semantic_fractions):
                wr.writerow(["semantic_fraction", i, repr(f)])
            wr.writerow(["mean_instances", "", repr(self.mean_instances)])
            for i, a in enumerate(self.labels):
                for j, b in enumerate(self.labels):
                    if self.confusion[i, j]:
                        wr.writerow(["confusion", f"{a}|{b}", int(self.confusion[i, j])])


def _descriptor_sample(nets, images, rng, per_image=64):
    out = [[] for _ in nets]
    for img in images:
        for j, n in enumerate(nets):
            f = encoder.flatten_field(encoder.extract_descriptors(n, img))
            take = rng.choice(len(f), size=min(per_image, len(f)), replace=False)
            out[j].append(f[np.sort(take)])
    return [np.vstack(o) for o in out]


def run_pipeline(cfg: PipelineConfig, progress=None) -> EvalReport:
    t0 = time.time()
    say = progress or (lambda msg: log.info(msg))
    cache = StageCache(cfg.cache)
    items = load_items(cfg)
    if not items:
        raise StageError("data", "dataset is empty")
    dkey = dataset_key(items)
    say(f"data: {len(items)} images")

    labels = regroup_items(items, cfg, cache, dkey)
    for it in items:
        it.label = labels[it.name]
    say(f"regroup: {len(set(labels.values()))} labels")
    assign_splits(items, labels, cfg)
    train = [it for it in items if it.split == "train"]
    test = [it for it in items if it.split == "test"]
    if not train or not test:
        raise StageError("split", "need both training and test images")
    label_list = sorted({it.label for it in train})
    label_index = {l: i for i, l in enumerate(label_list)}

    eta = None
    props = {}
    if cfg.use_sp:
        model = get_ng_model(cfg, cache)
        eta = get_eta(items, cfg, cache, dkey)
        props = compute_proposals(items, cfg, cache, model, eta)
        say(f"proposals: eta {eta:.3f}")

    nets, history, fractions = train_nets(train, label_index, cfg, cache, dkey)
    say("nets trained")
    min_size = nets[0].min_input()

    def instances(it):
        return expand(it, instance_levels(props.get(it.name), cfg), cfg.s, min_size)

    rng = np.random.default_rng(cfg.seed + 1)
    gmms = []
    descs = _descriptor_sample(nets, [it.image for it in train], rng)
    for j, d in enumerate(descs):
        gmms.append(encoder.fit_gmm(d, cfg.Kg, cfg.gmm_iters, seed=cfg.seed + j))

    def fvs(img):
        return [encoder.encode_fv(encoder.extract_descriptors(n, img), g).vector for n, g in zip(nets, gmms)]

    Xtr = [[] for _ in nets]
    ytr = []
    for it in train:
        for _, img in instances(it):
            for j, v in enumerate(fvs(img)):
                Xtr[j].append(v)
            ytr.append(it.label)
    svms = [classify.train_svm(np.array(X), ytr, C=cfg.C, seed=cfg.seed + j) for j, X in enumerate(Xtr)]
    ens = classify.VotingEnsemble(svms)
    say(f"svm: {len(ytr)} training instances")

    # map each label to the designed band most common among its training images
    band_of_label = {}
    for l in label_list:
        bands = [it.band for it in train if it.label == l and it.band is not None]
        band_of_label[l] = Counter(bands).most_common(1)[0][0] if bands else None

    classes = ens.classes
    preds, per_net_preds, n_inst, rows = [], [[] for _ in nets], [], []
    for it in test:
        inst = instances(it)
        n_inst.append(len(inst))
        inst_labels, inst_scores = [], []
        net_labels = [[] for _ in nets]
        net_scores = [[] for _ in nets]
        for lv, img in inst:
            vs = fvs(img)
            s = ens.scores([v[None] for v in vs])
            lab = classify.vote(ens, [v[None] for v in vs])
            inst_labels.append(lab)
            inst_scores.append(s.sum(axis=0))
            for j in range(len(nets)):
                net_labels[j].append(classes[int(np.argmax(s[j]))])
                net_scores[j].append(s[j])
            rows.append((it.name, f"{lv.m},{lv.n}", lab))
        agg = classify.aggregate_scales(inst_labels, np.array(inst_scores), classes)
        preds.append(agg)
        for j in range(len(nets)):
            per_net_preds[j].append(classify.aggregate_scales(net_labels[j], np.array(net_scores[j]), classes))
        rows[-len(inst):] = [r + (agg,) for r in rows[-len(inst):]]

    truth = [it.label for it in test]
    all_labels = sorted(set(truth) | set(preds))
    li = {l: i for i, l in enumerate(all_labels)}
    conf = np.zeros((len(all_labels), len(all_labels)), dtype=np.int64)
    for t, p in zip(truth, preds):
        conf[li[t], li[p]] += 1
    acc = float(np.mean([t == p for t, p in zip(truth, preds)]))
    per_class = {}
    for c in sorted({it.cls for it in test}):
        idx = [i for i, it in enumerate(test) if it.cls == c]
        per_class[c] = float(np.mean([truth[i] == preds[i] for i in idx]))
    scale_acc = None
    if cfg.regroup and all(it.band is not None for it in test):
        hits = [band_of_label.get(p) == it.band for p, it in zip(preds, test)]
        scale_acc = float(np.mean(hits))
    net_acc = [float(np.mean([t == p for t, p in zip(truth, pp)])) for pp in per_net_preds]
    return EvalReport(acc, per_class, scale_acc, all_labels, conf, net_acc, list(fractions),
                      float(np.mean(n_inst)), eta, time.time() - t0, rows)


def write_run(report: EvalReport, cfg: PipelineConfig, outdir) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.cfg")
    report.write_csv(out / "report.csv")
    classify.write_predictions(out / "predictions.csv", report.predictions)
    return out
