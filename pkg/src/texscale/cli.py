"""texscale command line: each subcommand runs one pipeline stage on files.

Every subcommand reads ``--config`` (optional) and applies flag overrides
on top. Exit codes: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import boundary, classify, datakit, encoder, genetic, proposals
from . import net as netmod
from . import pipeline as pl
from .config import ConfigError, PipelineConfig
from .imagery import read_image

log = logging.getLogger("texscale")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class DataError(RuntimeError):
    pass


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    over = {}
    for key in ("seed", "xi", "eta", "K", "stride", "s", "Kg", "C", "out", "manifest",
                "generations", "epochs", "cache"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = str(v) if key == "eta" else v
    if getattr(args, "manifest", None):
        over["dataset"] = "manifest"
    if getattr(args, "no_sp", False):
        over["use_sp"] = False
    if getattr(args, "no_re", False):
        over["use_re"] = False
    if getattr(args, "no_regroup", False):
        over["regroup"] = False
    if getattr(args, "crossover_only", False):
        over["ga"] = "crossover"
    if getattr(args, "mutation_only", False):
        over["ga"] = "mutation"
    if getattr(args, "ga", None):
        over["ga"] = {"on": "both"}.get(args.ga, args.ga)
    if getattr(args, "merge_std", None) is not None:
        over["merge_std"] = args.merge_std
    return cfg.with_overrides(**over)


def _out(cfg) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _items(cfg):
    items = pl.load_items(cfg)
    if not items:
        raise DataError("no images in dataset")
    return items


def _labels(cfg, items) -> dict:
    """Regrouped labels from ``<out>/regroup.csv`` when present, else the class."""
    path = Path(cfg.out) / "regroup.csv"
    if cfg.regroup and path.exists():
        with open(path, newline="") as fh:
            return {r["path"]: f"{r['class']}/{r['subcategory_p']}" for r in csv.DictReader(fh)}
    return {it.name: it.cls for it in items}


def _prepared(cfg):
    items = _items(cfg)
    labels = _labels(cfg, items)
    missing = [it.name for it in items if it.name not in labels]
    if missing:
        raise DataError(f"no label for {missing[0]}")
    for it in items:
        it.label = labels[it.name]
    pl.assign_splits(items, labels, cfg)
    return items


def _load_nets(out: Path):
    paths = [out / f"net{j}.cnn" for j in range(3)]
    for p in paths:
        if not p.exists():
            raise DataError(f"{p} missing; run `texscale train` first")
    return [netmod.load_net(p) for p in paths]


def _load_gmms(out: Path):
    paths = [out / f"gmm{j}.gmm" for j in range(3)]
    for p in paths:
        if not p.exists():
            raise DataError(f"{p} missing; run `texscale fit-gmm` first")
    return [encoder.load_gmm(p) for p in paths]


def _instances(cfg, items, min_size):
    cache = pl.StageCache(cfg.cache)
    props = {}
    if cfg.use_sp:
        model = pl.get_ng_model(cfg, cache)
        eta = pl.get_eta(items, cfg, cache, pl.dataset_key(items))
        props = pl.compute_proposals(items, cfg, cache, model, eta)
    for it in items:
        for lv, img in pl.expand(it, pl.instance_levels(props.get(it.name), cfg), cfg.s, min_size):
            yield it, lv, img


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args, cfg):
    spec = pl.syntex_spec(cfg)
    root = _out(cfg) / "data"
    man = datakit.write_dataset(datakit.build_syntex(spec), root,
                                (cfg.split_train, 0.0, 1.0 - cfg.split_train), seed=cfg.seed)
    print(f"wrote {len(man)} images and {root / 'manifest.csv'}")


def cmd_calibrate_eta(args, cfg):
    items = _prepared(cfg)
    train = [it for it in items if it.split == "train"] or items
    eta = proposals.calibrate_eta([it.image for it in train], [it.cls for it in train])
    print(f"eta = {eta!r}")


def cmd_proposals(args, cfg):
    img = read_image(args.image)
    model = pl.get_ng_model(cfg, pl.StageCache(cfg.cache))
    eta = cfg.eta_value if cfg.eta_value is not None else 0.8
    from .imagery import build_pyramid
    pyr = build_pyramid(img, cfg.s, max(cfg.min_dim, proposals.WIN))
    P = proposals.scan_pyramid(pyr, model, cfg.stride)
    R = proposals.reduce_proposals(P, eta, cfg.K)
    out = Path(args.out or Path(cfg.out) / "proposals.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    proposals.write_proposals_csv(P, out)
    red = out.with_name(out.stem + "_reduced.csv")
    proposals.write_proposals_csv(R, red)
    print(f"{len(P)} texel proposals on {len(P.levels)} levels -> {out}")
    print(f"{len(R)} reduced texels on {len(R.levels)} levels -> {red}")


def cmd_regroup(args, cfg):
    items = _items(cfg)
    cache = pl.StageCache(cfg.cache)
    labels = pl.regroup_items(items, cfg.with_overrides(regroup=True), cache, pl.dataset_key(items))
    path = _out(cfg) / "regroup.csv"
    boundary.write_regrouping_csv(path, [(it.name, it.cls, labels[it.name].rsplit("/", 1)[1])
                                         for it in items])
    print(f"{len(set(labels.values()))} subcategories -> {path}")


def cmd_train(args, cfg):
    items = _prepared(cfg)
    train = [it for it in items if it.split == "train"]
    index = {l: i for i, l in enumerate(sorted({it.label for it in train}))}
    nets, history, fractions = pl.train_nets(train, index, cfg, pl.StageCache(cfg.cache),
                                             pl.dataset_key(items))
    out = _out(cfg)
    for j, n in enumerate(nets):
        netmod.save_net(n, out / f"net{j}.cnn")
    genetic.write_generation_log(out / "generations.csv", history)
    with open(out / "labels.txt", "w") as fh:
        fh.write("\n".join(sorted(index)) + "\n")
    print("semantic fractions: " + " ".join(f"{f:.3f}" for f in fractions))


def cmd_fit_gmm(args, cfg):
    items = _prepared(cfg)
    out = _out(cfg)
    nets = _load_nets(out)
    train = [it.image for it in items if it.split == "train"]
    descs = pl._descriptor_sample(nets, train, np.random.default_rng(cfg.seed + 1))
    for j, d in enumerate(descs):
        g = encoder.fit_gmm(d, cfg.Kg, cfg.gmm_iters, seed=cfg.seed + j)
        encoder.save_gmm(g, out / f"gmm{j}.gmm")
    print(f"fitted {len(descs)} GMMs with {cfg.Kg} components")


def cmd_encode(args, cfg):
    items = _prepared(cfg)
    out = _out(cfg)
    nets, gmms = _load_nets(out), _load_gmms(out)
    names, vecs = [], [[] for _ in nets]
    for it, lv, img in _instances(cfg, items, nets[0].min_input()):
        names.append(f"{it.name}@{lv.m},{lv.n}")
        for j, (n, g) in enumerate(zip(nets, gmms)):
            vecs[j].append(encoder.encode_fv(encoder.extract_descriptors(n, img), g).vector)
    for j in range(len(nets)):
        encoder.write_fv_csv(out / f"fv{j}.csv", names, vecs[j])
    print(f"encoded {len(names)} instances")


def _fv_split(cfg, items, j):
    path = Path(cfg.out) / f"fv{j}.csv"
    if not path.exists():
        raise DataError(f"{path} missing; run `texscale encode` first")
    names, X = encoder.read_fv_csv(path)
    by = {it.name: it for it in items}
    rows = []
    for k, nm in enumerate(names):
        base, lv = nm.rsplit("@", 1)
        if base not in by:
            raise DataError(f"{path}: unknown image {base}")
        rows.append((by[base], lv, X[k]))
    return rows


def cmd_train_svm(args, cfg):
    items = _prepared(cfg)
    out = _out(cfg)
    for j in range(3):
        rows = [r for r in _fv_split(cfg, items, j) if r[0].split == "train"]
        model = classify.train_svm(np.array([r[2] for r in rows]), [r[0].label for r in rows],
                                   C=cfg.C, seed=cfg.seed + j)
        classify.save_svm(model, out / f"svm{j}.svm")
    print("trained 3 SVMs")


def cmd_eval(args, cfg):
    items = _prepared(cfg)
    out = _out(cfg)
    svms = []
    for j in range(3):
        p = out / f"svm{j}.svm"
        if not p.exists():
            raise DataError(f"{p} missing; run `texscale train-svm` first")
        svms.append(classify.load_svm(p))
    ens = classify.VotingEnsemble(svms)
    per_net = [[r for r in _fv_split(cfg, items, j) if r[0].split == "test"] for j in range(3)]
    by_image = {}
    for k, (it, lv, _) in enumerate(per_net[0]):
        fv = [per_net[j][k][2][None] for j in range(3)]
        by_image.setdefault(it.name, (it, []))[1].append((lv, classify.vote(ens, fv), ens.scores(fv).sum(0)))
    rows, hits = [], []
    for name, (it, inst) in sorted(by_image.items()):
        agg = classify.aggregate_scales([x[1] for x in inst], np.array([x[2] for x in inst]), ens.classes)
        hits.append(agg == it.label)
        rows += [(name, lv, lab, agg) for lv, lab, _ in inst]
    classify.write_predictions(out / "predictions.csv", rows)
    acc = float(np.mean(hits)) if hits else float("nan")
    with open(out / "report.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([["metric", "key", "value"], ["accuracy", "", repr(acc)]])
    print(f"accuracy {acc:.3f} on {len(hits)} test images")


def cmd_pipeline(args, cfg):
    report = pl.run_pipeline(cfg, progress=lambda m: log.info(m))
    out = pl.write_run(report, cfg, cfg.out)
    print(report.summary())
    print(f"report -> {out / 'report.csv'}")


COMMANDS = {
    "synth": cmd_synth, "calibrate-eta": cmd_calibrate_eta, "proposals": cmd_proposals,
    "regroup": cmd_regroup, "train": cmd_train, "encode": cmd_encode, "fit-gmm": cmd_fit_gmm,
    "train-svm": cmd_train_svm, "eval": cmd_eval, "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="texscale", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--cache")
        p.add_argument("--manifest")
        p.add_argument("--xi", type=float)
        p.add_argument("--eta")
        p.add_argument("--K", type=int)
        p.add_argument("--stride", type=int)
        p.add_argument("--s", type=float)
        p.add_argument("--Kg", type=int)
        p.add_argument("--C", type=float)
        p.add_argument("--generations", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--no-sp", action="store_true")
        p.add_argument("--no-re", action="store_true")
        p.add_argument("--no-regroup", action="store_true")
        p.add_argument("--ga", choices=("on", "off", "both", "crossover", "mutation"))
        p.add_argument("--crossover-only", action="store_true")
        p.add_argument("--mutation-only", action="store_true")
        p.add_argument("--merge-std", type=float)
        if name == "proposals":
            p.add_argument("--image", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, pl.StageError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
