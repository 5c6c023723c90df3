"""Synthetic texture families, SForrest-style scale synthesis, manifests and splits.

The families stand in for photographed texture datasets: every image is
deterministic given its parameters and has a known texel size, so scale
ground truth is available for every synthesized sample.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imagery import Image, ScaleLevel, as_array, build_pyramid, level_size, resize

GENERATORS = ("grating", "checkerboard", "brick", "blobs", "stripe")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TextureFamily:
    """Parameters of one procedural texture.

    ``texel_size`` is the extent in pixels of the repeating cell: a
    checkerboard square, a stripe or grating bar, a brick course, or half
    the period of the tiled blob field.
    """

    generator: str
    texel_size: float
    orientation: float = 0.0
    contrast: float = 1.0
    seed: int = 0


def _square(u: np.ndarray, t: float) -> np.ndarray:
    return np.where(np.floor(u / t) % 2 == 0, 1.0, -1.0)


def _pattern(fam: TextureFamily, size: int) -> np.ndarray:
    t = float(fam.texel_size)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    th = math.radians(fam.orientation)
    u = x * math.cos(th) + y * math.sin(th)
    v = -x * math.sin(th) + y * math.cos(th)
    g = fam.generator
    if g == "grating":
        return np.cos(math.pi * u / t)
    if g == "stripe":
        return _square(u, t)
    if g == "checkerboard":
        return _square(u, t) * _square(v, t)
    if g == "brick":
        # running bond, alternate bricks shaded so the courses survive downsizing
        row = np.floor(v / t)
        shifted = u + (row % 2) * t
        mortar = max(1.0, t / 4.0)
        in_mortar = ((v - row * t) < mortar) | ((shifted % (2 * t)) < mortar)
        shade = np.where(np.floor(shifted / (2 * t)) % 2 == 0, 1.0, 0.2)
        return np.where(in_mortar, -1.0, shade)
    if g == "blobs":
        period = max(2, int(round(2 * t)))
        rng = np.random.default_rng(fam.seed)
        tile = ndimage.gaussian_filter(rng.standard_normal((period, period)), t / 3.0, mode="wrap")
        tile = tile - tile.mean()
        tile /= max(np.abs(tile).max(), 1e-12)
        ui = np.floor(u).astype(int) % period
        vi = np.floor(v).astype(int) % period
        return tile[vi, ui]
    raise ValueError(f"unknown generator {g!r}; expected one of {GENERATORS}")


def generate_family(family: TextureFamily, size: int) -> Image:
    if size < 32:
        raise ValueError("texture size must be >= 32")
    if family.generator not in GENERATORS:
        raise ValueError(f"unknown generator {family.generator!r}; expected one of {GENERATORS}")
    p = _pattern(family, size)
    c = float(np.clip(family.contrast, 0.0, 1.0))
    return Image(np.clip(0.5 + 0.5 * c * p, 0.0, 1.0))


def tile_and_crop(small: Image, width: int, height: int, rng: np.random.Generator) -> Image:
    """Repeat ``small`` until it covers ``width`` x ``height`` and crop at a random offset."""
    arr = as_array(small)
    h, w = arr.shape
    reps = (math.ceil(height / h), math.ceil(width / w))
    big = np.tile(arr, reps)
    r0 = int(rng.integers(0, big.shape[0] - height + 1))
    c0 = int(rng.integers(0, big.shape[1] - width + 1))
    return Image(big[r0:r0 + height, c0:c0 + width])


def synthesize_level(base: Image, s: float, level: ScaleLevel, rng: np.random.Generator) -> Image:
    """One SForrest sample: ``base`` downsized to ``level`` then tiled back to full size."""
    w0, h0 = base.width, base.height
    w, h = level_size(w0, h0, s, level)
    return tile_and_crop(resize(base, w, h), w0, h0, rng)


def synthesize_sforrest(base: Image, s: float = 0.95, min_dim: int = 10,
                        seed: int = 0) -> list[tuple[Image, ScaleLevel]]:
    """Tiled-and-cropped copies of every pyramid level of ``base``."""
    rng = np.random.default_rng(seed)
    pyr = build_pyramid(base, s, min_dim)
    return [(tile_and_crop(img, base.width, base.height, rng), level) for level, img in pyr]


# -- manifests --------------------------------------------------------------

@dataclass
class ManifestRow:
    path: str
    cls: str
    m: int
    n: int
    subcategory: int | None = None
    split: str = ""


@dataclass
class Manifest:
    rows: list[ManifestRow] = field(default_factory=list)

    def __post_init__(self):
        paths = [r.path for r in self.rows]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def classes(self) -> list[str]:
        return sorted({r.cls for r in self.rows})

    def select(self, split: str) -> "Manifest":
        return Manifest([r for r in self.rows if r.split == split])

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["path", "class", "m", "n", "subcategory", "split"])
            for r in self.rows:
                sub = "" if r.subcategory is None else r.subcategory
                wr.writerow([r.path, r.cls, r.m, r.n, sub, r.split])

    @classmethod
    def read(cls, path) -> "Manifest":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                sub = rec.get("subcategory", "")
                rows.append(ManifestRow(
                    path=rec["path"], cls=rec["class"], m=int(rec["m"]), n=int(rec["n"]),
                    subcategory=int(sub) if sub not in ("", None) else None,
                    split=rec.get("split", "") or ""))
        return cls(rows)


def make_split(manifest: Manifest, fractions=(0.5, 0.0, 0.5), seed: int = 0) -> Manifest:
    """Stratified train/val/test assignment; every row keeps its place in the output."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three nonnegative numbers summing to 1")
    parts = sum(f > 0 for f in fractions)
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.rows):
        by_class.setdefault(r.cls, []).append(i)
    assign = [""] * len(manifest.rows)
    for cls in sorted(by_class):
        idx = by_class[cls]
        if len(idx) < parts:
            raise ValueError(f"class {cls!r} has {len(idx)} samples, fewer than {parts} split parts")
        order = [idx[j] for j in rng.permutation(len(idx))]
        bounds = np.round(np.cumsum(fractions) * len(idx)).astype(int)
        bounds[-1] = len(idx)
        start = 0
        for name, stop in zip(SPLITS, bounds):
            for j in order[start:stop]:
                assign[j] = name
            start = stop
    return Manifest([replace(r, split=assign[i]) for i, r in enumerate(manifest.rows)])


# -- the SynTex benchmark ---------------------------------------------------

@dataclass
class Sample:
    image: Image
    cls: str
    level: ScaleLevel
    band: int
    family: TextureFamily
    name: str = ""


# Inclusive exponent ranges (for both m and n) of the three designed bands:
# scale factors 1.0-0.95, 0.54-0.51 and 0.29-0.28 of the base. Bands are
# narrow because the sparse-coding boundary already fires at ~10% rescaling
# of a sharp periodic texture.
SYNTEX_BANDS = ((0, 1), (12, 13), (24, 25))


@dataclass(frozen=True)
class SynTexSpec:
    generators: tuple = GENERATORS
    bands: tuple = SYNTEX_BANDS
    per_class: int = 60
    n_bases: int = 5
    base_size: int = 64
    texel: float = 8.0
    orientation_jitter: float = 0.0
    texel_jitter: float = 0.0
    contrast: tuple = (0.5, 0.7)
    blur: float = 1.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        per_band = self.per_class / (len(self.bands) * self.n_bases)
        if per_band != int(per_band) or per_band < 1:
            raise ValueError("per_class must be a positive multiple of bands * n_bases")
        for lo, hi in self.bands:
            if hi < lo or (hi - lo + 1) ** 2 < per_band:
                raise ValueError(f"band {lo}-{hi} has too few levels for {int(per_band)} samples")


def syntex_bases(generator: str, spec: SynTexSpec, rng) -> list[TextureFamily]:
    out = []
    for _ in range(spec.n_bases):
        out.append(TextureFamily(
            generator=generator,
            texel_size=float(spec.texel * rng.uniform(1 - spec.texel_jitter, 1 + spec.texel_jitter)),
            orientation=float(rng.uniform(-spec.orientation_jitter, spec.orientation_jitter)),
            contrast=float(rng.uniform(*spec.contrast)),
            seed=int(rng.integers(2**31))))
    return out


def band_of(level: ScaleLevel, bands=SYNTEX_BANDS) -> int | None:
    for p, (lo, hi) in enumerate(bands):
        if lo <= level.m <= hi and lo <= level.n <= hi:
            return p
    return None


def build_syntex(spec: SynTexSpec = SynTexSpec()) -> list[Sample]:
    """The SynTex benchmark: per class, every base synthesized at a few levels of each band."""
    rng = np.random.default_rng(spec.seed)
    per_band = spec.per_class // (len(spec.bands) * spec.n_bases)
    samples = []
    for gen in spec.generators:
        for b, fam in enumerate(syntex_bases(gen, spec, rng)):
            base = generate_family(fam, spec.base_size)
            if spec.blur > 0:
                base = Image(ndimage.gaussian_filter(base.data, spec.blur, mode="reflect"))
            for p, (lo, hi) in enumerate(spec.bands):
                grid = [ScaleLevel(m, n) for m in range(lo, hi + 1) for n in range(lo, hi + 1)]
                for j in rng.choice(len(grid), size=per_band, replace=False):
                    level = grid[j]
                    img = synthesize_level(base, 0.95, level, rng)
                    if spec.noise > 0:
                        img = Image(np.clip(img.data + rng.normal(0, spec.noise, img.shape), 0, 1))
                    name = f"{gen}/b{b}_m{level.m:02d}_n{level.n:02d}.png"
                    samples.append(Sample(img, gen, level, p, fam, name))
    return samples


def write_dataset(samples, root, fractions=(0.5, 0.0, 0.5), seed: int = 0) -> Manifest:
    """Write samples as PNG under ``root`` plus a split manifest ``manifest.csv``."""
    from .imagery import write_png
    root = Path(root)
    rows = []
    for smp in samples:
        path = root / smp.name
        path.parent.mkdir(parents=True, exist_ok=True)
        write_png(smp.image, path)
        rows.append(ManifestRow(smp.name, smp.cls, smp.level.m, smp.level.n))
    man = make_split(Manifest(rows), fractions, seed)
    man.write(root / "manifest.csv")
    return man
