"""Pipeline configuration: flat ``key = value`` text under section headers."""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, fields, replace

GA_MODES = ("both", "crossover", "mutation", "off")


class ConfigError(ValueError):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _ints(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).replace(",", " ").split())


# section -> (key, type); the key is also the PipelineConfig attribute name
SCHEMA = {
    "data": (("dataset", str), ("manifest", str), ("syntex_seed", int), ("per_class", int),
             ("bands", str), ("texel", float), ("base_size", int), ("noise", float)),
    "pyramid": (("s", float), ("min_dim", int)),
    "proposals": (("stride", int), ("eta", str), ("K", int), ("ng_model", str),
                  ("use_sp", _bool), ("use_re", _bool), ("max_instances", int)),
    "boundary": (("xi", float), ("regroup", _bool), ("atoms", int), ("merge_std", float)),
    "ga": (("ga", str), ("crossover_fraction", float), ("mutation_fraction", float),
           ("q", float), ("p_crossover", float), ("generations", int), ("epochs", int),
           ("lr", float), ("momentum", float), ("batch", int), ("channels", _ints)),
    "semantic": (("window", int), ("k", int)),
    "encoder": (("Kg", int), ("gmm_iters", int)),
    "svm": (("C", float),),
    "run": (("seed", int), ("split_train", float), ("out", str), ("cache", str)),
}


@dataclass(frozen=True)
class PipelineConfig:
    dataset: str = "syntex"          # "syntex" or "manifest"
    manifest: str = ""
    syntex_seed: int = 0
    per_class: int = 60
    bands: str = "0-1 12-13 24-25"  # inclusive exponent ranges used for scale-level scoring
    texel: float = 8.0
    base_size: int = 64
    noise: float = 0.0
    s: float = 0.95
    min_dim: int = 10
    stride: int = 8
    eta: str = "calibrate"
    K: int = 20
    ng_model: str = "default"
    use_sp: bool = True
    use_re: bool = True
    max_instances: int = 0           # 0 = no cap
    xi: float = 0.1
    regroup: bool = True
    atoms: int = 64
    merge_std: float = 0.0           # 0 disables the textureless merge
    ga: str = "both"
    crossover_fraction: float = 0.10
    mutation_fraction: float = 0.05
    q: float = 0.05
    p_crossover: float = 0.5
    generations: int = 10
    epochs: int = 2
    lr: float = 0.02
    momentum: float = 0.9
    batch: int = 16
    channels: tuple = (8, 16, 32)
    window: int = 5
    k: int = 10
    Kg: int = 8
    gmm_iters: int = 30
    C: float = 1.0
    seed: int = 0
    split_train: float = 0.5
    out: str = "run"
    cache: str = ".texscale-cache"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)
        need(self.dataset in ("syntex", "manifest"), "dataset must be 'syntex' or 'manifest'")
        need(self.dataset != "manifest" or self.manifest, "dataset = manifest needs a manifest path")
        need(self.texel > 0 and self.base_size >= 16 and self.noise >= 0,
             "texel must be > 0, base_size >= 16, noise >= 0")
        need(0.0 < self.s < 1.0, "s must lie in (0, 1)")
        need(self.min_dim >= 1, "min_dim must be >= 1")
        need(self.stride >= 1, "stride must be >= 1")
        if self.eta != "calibrate":
            try:
                e = float(self.eta)
            except ValueError:
                raise ConfigError("eta must be a number in [0, 1] or 'calibrate'") from None
            need(0.0 <= e <= 1.0, "eta must lie in [0, 1]")
        need(self.K >= 1, "K must be >= 1")
        need(self.max_instances >= 0, "max_instances must be >= 0")
        need(0.0 < self.xi < 1.0, "xi must lie in (0, 1)")
        need(self.atoms >= 1, "atoms must be >= 1")
        need(self.ga in GA_MODES, f"ga must be one of {GA_MODES}")
        need(0.0 < self.crossover_fraction <= 1.0, "crossover_fraction must lie in (0, 1]")
        need(0.0 < self.mutation_fraction <= 1.0, "mutation_fraction must lie in (0, 1]")
        need(0.0 < self.q < 1.0, "q must lie in (0, 1)")
        need(0.0 <= self.p_crossover <= 1.0, "p_crossover must lie in [0, 1]")
        need(self.generations >= 0 and self.epochs >= 0, "generations and epochs must be >= 0")
        need(self.lr > 0, "lr must be > 0")
        need(len(self.channels) >= 1 and all(c >= 1 for c in self.channels), "channels must be positive")
        need(self.window % 2 == 1 and 1 <= self.k <= self.window ** 2, "window must be odd and k <= window^2")
        need(self.Kg >= 1 and self.gmm_iters >= 1, "Kg and gmm_iters must be >= 1")
        need(self.C > 0, "C must be > 0")
        need(0.0 < self.split_train < 1.0, "split_train must lie in (0, 1)")
        self.band_ranges()

    def band_ranges(self) -> tuple:
        try:
            out = []
            for tok in self.bands.split():
                lo, hi = tok.split("-")
                out.append((int(lo), int(hi)))
        except ValueError:
            raise ConfigError(f"bands must look like '0-1 12-13', got {self.bands!r}") from None
        return tuple(out)

    @property
    def eta_value(self) -> float | None:
        return None if self.eta == "calibrate" else float(self.eta)

    def with_overrides(self, **kw) -> "PipelineConfig":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)

    # -- text form ---------------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for sec, keys in SCHEMA.items():
            lines.append(f"[{sec}]")
            for key, _ in keys:
                v = getattr(self, key)
                if isinstance(v, tuple):
                    v = " ".join(str(x) for x in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                elif isinstance(v, float):
                    v = repr(v)
                lines.append(f"{key} = {v}")
            lines.append("")
        return "\n".join(lines)

    def hash(self, *keys) -> str:
        """Hash of the whole config, or of just the named keys."""
        if keys:
            text = "\n".join(f"{k}={getattr(self, k)!r}" for k in keys)
        else:
            text = self.dumps()
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def loads(cls, text: str) -> "PipelineConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        kw = {}
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown section [{sec}]")
            types = dict(SCHEMA[sec])
            for key, raw in cp.items(sec):
                if key not in types:
                    raise ConfigError(f"unknown key {key!r} in [{sec}]")
                try:
                    kw[key] = types[key](raw)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"[{sec}] {key}: {exc}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                return cls.loads(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())
