"""Paired-slice data: synthetic two-site phantoms and a PNG corpus loader.

The phantom is a stylised joint cross-section.  An outer ellipse carries a
bright rim (the fat analogue) around an interior of soft tissue with a darker
core and a few small fluid pockets.  The target image is the source with the
rim attenuated by the site's ``suppression_factor`` and the fluid pockets
brightened, so the source->target mapping is known exactly.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

FAT_LEVEL = (0.85, 0.95)
TISSUE_LEVEL = (0.38, 0.48)
CORE_LEVEL = (0.18, 0.26)
FLUID_LEVEL = (0.26, 0.34)


@dataclass(frozen=True)
class SlicePair:
    source: np.ndarray
    target: np.ndarray
    pair_id: str
    site_id: str

    def __post_init__(self):
        if self.source.shape != self.target.shape or self.source.ndim != 2:
            raise ValueError(
                f"pair {self.pair_id}: source {self.source.shape} and target "
                f"{self.target.shape} must be equal 2-D shapes"
            )
        for name, img in (("source", self.source), ("target", self.target)):
            if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
                raise ValueError(f"pair {self.pair_id}: {name} must be finite and within [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.source.shape


@dataclass(frozen=True)
class SiteProfile:
    site_id: str
    contrast_gamma: float = 1.0
    orientation: int = 0
    noise_sigma: float = 0.01
    anatomy_seed_range: tuple[int, int] = (0, 100_000)
    suppression_factor: float = 0.9
    fluid_pockets: tuple[int, int] = (1, 3)
    fluid_boost: float = 0.6

    def __post_init__(self):
        if self.contrast_gamma <= 0:
            raise ValueError("contrast_gamma must be > 0")
        if self.orientation not in (0, 90):
            raise ValueError("orientation must be 0 or 90 degrees")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        lo, hi = self.anatomy_seed_range
        if not 0 <= lo < hi:
            raise ValueError(f"anatomy_seed_range must be a non-empty [lo, hi) range, got {(lo, hi)}")
        if not 0.0 <= self.suppression_factor <= 1.0:
            raise ValueError("suppression_factor must lie in [0, 1]")
        if not 0 <= self.fluid_pockets[0] <= self.fluid_pockets[1]:
            raise ValueError("fluid_pockets must be a (min, max) count range")
        if self.fluid_boost < 0:
            raise ValueError("fluid_boost must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SiteProfile":
        d = dict(d)
        for key in ("anatomy_seed_range", "fluid_pockets"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# Two deliberately different "institutions": contrast curve, imaging plane,
# noise and suppression strength all shift between them.
DEFAULT_SITE_A = SiteProfile(
    site_id="A",
    contrast_gamma=1.0,
    orientation=0,
    noise_sigma=0.01,
    anatomy_seed_range=(0, 100_000),
    suppression_factor=0.9,
    fluid_boost=0.6,
)
DEFAULT_SITE_B = SiteProfile(
    site_id="B",
    contrast_gamma=2.0,
    orientation=90,
    noise_sigma=0.02,
    anatomy_seed_range=(100_000, 200_000),
    suppression_factor=0.5,
    fluid_boost=0.6,
)


@dataclass
class Phantom:
    """Clean (pre-contrast, pre-noise) phantom with its region masks."""

    source: np.ndarray
    target: np.ndarray
    rim: np.ndarray
    fluid: np.ndarray
    meta: dict = field(default_factory=dict)


def _ellipse(xx, yy, cx, cy, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def draw_phantom(rng: np.random.Generator, profile: SiteProfile, resolution: int) -> Phantom:
    lin = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    yy, xx = np.meshgrid(lin, lin, indexing="ij")

    cx, cy = rng.uniform(-0.08, 0.08, size=2)
    a = rng.uniform(0.62, 0.82)
    b = rng.uniform(0.42, 0.6)
    theta = rng.uniform(-0.35, 0.35)
    rim_frac = rng.uniform(0.16, 0.24)
    outer = _ellipse(xx, yy, cx, cy, a, b, theta)
    inner = _ellipse(xx, yy, cx, cy, a * (1 - rim_frac), b * (1 - rim_frac), theta)
    rim = outer & ~inner

    core_scale = rng.uniform(0.35, 0.55)
    core = _ellipse(
        xx, yy, cx + rng.uniform(-0.05, 0.05), cy, a * core_scale, b * core_scale, theta
    )

    fat = rng.uniform(*FAT_LEVEL)
    tissue = rng.uniform(*TISSUE_LEVEL)
    core_val = rng.uniform(*CORE_LEVEL)
    fluid_val = rng.uniform(*FLUID_LEVEL)

    src = np.zeros((resolution, resolution))
    src[rim] = fat
    src[inner] = tissue
    src[core] = core_val

    fluid = np.zeros_like(rim)
    n_pockets = int(rng.integers(profile.fluid_pockets[0], profile.fluid_pockets[1] + 1))
    ia, ib = a * (1 - rim_frac), b * (1 - rim_frac)
    for _ in range(n_pockets):
        # place pocket centres well inside the inner ellipse
        r = np.sqrt(rng.uniform(0.0, 1.0)) * 0.7
        phi = rng.uniform(0, 2 * np.pi)
        u, v = r * ia * np.cos(phi), r * ib * np.sin(phi)
        px = cx + u * np.cos(theta) - v * np.sin(theta)
        py = cy + u * np.sin(theta) + v * np.cos(theta)
        pa, pb = rng.uniform(0.06, 0.14, size=2)
        pocket = _ellipse(xx, yy, px, py, pa, pb, rng.uniform(0, np.pi)) & inner
        fluid |= pocket
    src[fluid] = fluid_val

    tgt = src.copy()
    tgt[rim] *= 1.0 - profile.suppression_factor
    tgt[fluid] = np.minimum(1.0, fluid_val + profile.fluid_boost)
    return Phantom(src, tgt, rim, fluid, {"n_pockets": n_pockets})


def apply_site_appearance(
    img: np.ndarray, profile: SiteProfile, noise: np.ndarray | None = None
) -> np.ndarray:
    """Gamma, rotation, then the (already oriented) additive noise field, clipped."""
    out = np.power(img, profile.contrast_gamma)
    if profile.orientation == 90:
        out = np.rot90(out)
    if noise is not None:
        out = out + noise
    return np.clip(out, 0.0, 1.0)


def generate_phantom_pair(
    rng: np.random.Generator, profile: SiteProfile, resolution: int, pair_id: str = ""
) -> SlicePair:
    ph = draw_phantom(rng, profile, resolution)
    # one noise field for both images, so the target stays a function of the source
    noise = None
    if profile.noise_sigma > 0:
        noise = rng.normal(0.0, profile.noise_sigma, size=(resolution, resolution))
    src = apply_site_appearance(ph.source, profile, noise)
    tgt = apply_site_appearance(ph.target, profile, noise)
    return SlicePair(
        source=src.astype(np.float32),
        target=tgt.astype(np.float32),
        pair_id=pair_id,
        site_id=profile.site_id,
    )


def generate_site_dataset(
    profile: SiteProfile, n_train: int, n_test: int, resolution: int, seed: int
) -> tuple[list[SlicePair], list[SlicePair]]:
    if n_train < 1 or n_test < 1:
        raise ValueError(f"n_train and n_test must be >= 1, got {n_train}, {n_test}")
    lo, hi = profile.anatomy_seed_range
    total = n_train + n_test
    if hi - lo < total:
        raise ValueError(
            f"anatomy seed range {profile.anatomy_seed_range} holds {hi - lo} seeds, {total} needed"
        )
    rng = np.random.default_rng(seed)
    seeds = lo + rng.choice(hi - lo, size=total, replace=False)

    def make(s):
        pair_rng = np.random.default_rng([int(s), int(seed)])
        return generate_phantom_pair(
            pair_rng, profile, resolution, pair_id=f"{profile.site_id}-{int(s):07d}"
        )

    pairs = [make(s) for s in seeds]
    return pairs[:n_train], pairs[n_train:]


# ---------------------------------------------------------------------------
# value-range bridges
# ---------------------------------------------------------------------------


def to_model_range(x):
    return x * 2.0 - 1.0


def from_model_range(y):
    return (y + 1.0) / 2.0


# ---------------------------------------------------------------------------
# PNG corpora
# ---------------------------------------------------------------------------


class CorpusError(ValueError):
    pass


@dataclass
class LoadResult:
    pairs: list[SlicePair]
    skipped: list[str]

    @property
    def skipped_count(self) -> int:
        return len(self.skipped)


def _read_png(path: Path) -> tuple[np.ndarray, int]:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.array(im, dtype=np.int64)
            depth = 65535
        elif im.mode == "L":
            arr = np.array(im, dtype=np.int64)
            depth = 255
        else:
            raise CorpusError(f"{path}: unsupported PNG mode {im.mode!r}, expected 8/16-bit grayscale")
    return arr, depth


def _normalize(arr: np.ndarray, depth: int, mode: str, name: str) -> np.ndarray:
    if mode == "scale":
        return (arr / depth).astype(np.float32)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        log.warning("%s: constant image, normalized to zeros", name)
        return np.zeros(arr.shape, dtype=np.float32)
    return ((arr - lo) / (hi - lo)).astype(np.float32)


def load_paired_dataset(
    root: str | Path, site_id: str, normalization: str = "minmax"
) -> LoadResult:
    """Load ``root/source/*.png`` and ``root/target/*.png`` matched by filename.

    ``normalization='minmax'`` rescales each image to its own [min, max];
    ``'scale'`` divides by the bit-depth maximum (used for corpora that were
    written already in [0, 1]).
    """
    if normalization not in ("minmax", "scale"):
        raise ValueError(f"unknown normalization {normalization!r}")
    root = Path(root)
    src_files = {p.name: p for p in (root / "source").glob("*.png")}
    tgt_files = {p.name: p for p in (root / "target").glob("*.png")}
    skipped = sorted(set(src_files) ^ set(tgt_files))
    for name in skipped:
        log.warning("%s: %s has no partner, skipped", root, name)
    pairs = []
    for name in sorted(set(src_files) & set(tgt_files)):
        s, sd = _read_png(src_files[name])
        t, td = _read_png(tgt_files[name])
        if s.shape != t.shape:
            raise CorpusError(f"{name}: source {s.shape} and target {t.shape} differ in size")
        pairs.append(
            SlicePair(
                source=_normalize(s, sd, normalization, f"source/{name}"),
                target=_normalize(t, td, normalization, f"target/{name}"),
                pair_id=Path(name).stem,
                site_id=site_id,
            )
        )
    if not pairs:
        raise CorpusError(f"no matched pairs under {root}")
    return LoadResult(pairs, skipped)


def _to_png16(img: np.ndarray) -> Image.Image:
    arr = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)
    return Image.fromarray(arr)


def file_checksum(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


MANIFEST_FIELDS = ["pair_id", "site_id", "source", "target", "checksum"]


def write_corpus(root: str | Path, pairs: Sequence[SlicePair]) -> Path:
    """Write pairs as 16-bit PNGs plus ``manifest.csv``; returns the manifest path.

    The checksum column hashes the source bytes followed by the target bytes.
    """
    root = Path(root)
    (root / "source").mkdir(parents=True, exist_ok=True)
    (root / "target").mkdir(parents=True, exist_ok=True)
    rows = []
    for p in pairs:
        name = f"{p.pair_id}.png"
        sp, tp = root / "source" / name, root / "target" / name
        _to_png16(p.source).save(sp)
        _to_png16(p.target).save(tp)
        digest = hashlib.sha256(sp.read_bytes() + tp.read_bytes()).hexdigest()
        rows.append([p.pair_id, p.site_id, f"source/{name}", f"target/{name}", digest])
    manifest = root / "manifest.csv"
    with manifest.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    return manifest


def read_manifest(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


def concat_datasets(*datasets: Sequence[SlicePair]) -> list[SlicePair]:
    out: list[SlicePair] = []
    for d in datasets:
        out.extend(d)
    return out
