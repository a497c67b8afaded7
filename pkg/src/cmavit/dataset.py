"""Synthetic vineyard blocks, preprocessing, splitting and sample weighting.

The generator stands in for a proprietary yield-monitor dataset. It keeps
the real tensor layout (15 weekly observations, 7 image channels, 4 climate
variables, a free-text management report per block) and plants a separate,
recoverable yield signal in each modality:

* management text -> block fertility (``vigor low|medium|high``), a level
  shift that images do not show (image anomalies are zero-mean per field);
* climate -> a per block-year heat index; hotter seasons yield less;
* imagery -> the within-field spatial pattern, whose visibility grows over
  the season, so late weeks are more informative than early ones.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from cmavit.core import archive
from cmavit.errors import DataError, DimensionError, ParameterError
from cmavit.rng import make_rng

CHANNELS = ("S2-R", "S2-G", "S2-B", "S2-NIR", "S1-VV", "S1-VH", "DOY")
CLIMATE_VARS = ("Tmin", "Tmax", "Prcp", "VP")
DOY_CHANNEL = CHANNELS.index("DOY")

CULTIVARS = (
    ("CS", "cabernet sauvignon"),
    ("Ch", "chardonnay"),
    ("MB", "malvasia bianca"),
    ("Me", "merlot"),
    ("MoA", "muscat of alexandria"),
    ("Ries", "riesling"),
    ("Sym", "symphony"),
    ("Syr", "syrah"),
)
VIGOR_WORDS = {-1: "low", 0: "medium", 1: "high"}
TRELLIS = ("vsp", "quadrilateral", "lyre", "high wire")
TEXTURE = ("loam", "sandy loam", "clay loam", "silt")

FORMAT_TAG = "cmavit-dataset/1"


def encode_doy(day_of_year: int) -> float:
    """sin(2*pi*day/365) for day in 1..365."""
    if isinstance(day_of_year, bool) or int(day_of_year) != day_of_year:
        raise ParameterError(f"day of year must be an integer, got {day_of_year!r}")
    if not 1 <= day_of_year <= 365:
        raise ParameterError(f"day of year must lie in 1..365, got {day_of_year}")
    return math.sin(2.0 * math.pi * day_of_year / 365.0)


def observation_days(T: int = 15, first: int = 91, last: int = 196) -> tuple[int, ...]:
    """``T`` acquisition days spread evenly from April 1 to July 15."""
    return tuple(int(d) for d in np.rint(np.linspace(first, last, T)))


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

@dataclass
class FieldSample:
    image: np.ndarray  # T x C x H x W
    climate: np.ndarray  # T x 4
    context_text: str
    target: np.ndarray  # H x W, t/ha
    block_id: str
    cultivar: str
    year: int
    crop: int = 0
    days: tuple[int, ...] = ()
    latent: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.image.shape[0]

    def validate(self, T: int | None = None) -> None:
        """Raise ``DataError`` unless every layout invariant holds."""
        img, clim, tgt = self.image, self.climate, self.target
        if img.ndim != 4 or img.shape[1] != len(CHANNELS):
            raise DataError(f"{self.block_id}: image must be T x {len(CHANNELS)} x H x W, got {img.shape}")
        if T is not None and img.shape[0] != T:
            raise DataError(f"{self.block_id}: expected T={T}, got {img.shape[0]}")
        if clim.shape != (img.shape[0], len(CLIMATE_VARS)):
            raise DataError(f"{self.block_id}: climate must be T x 4, got {clim.shape}")
        if tgt.shape != img.shape[2:]:
            raise DataError(f"{self.block_id}: target {tgt.shape} does not match image {img.shape[2:]}")
        if not (np.all(np.isfinite(img)) and np.all(np.isfinite(clim)) and np.all(np.isfinite(tgt))):
            raise DataError(f"{self.block_id}: non-finite values")
        if np.any(clim[:, 0] > clim[:, 1]):
            raise DataError(f"{self.block_id}: Tmin exceeds Tmax")
        if np.any(tgt < 0):
            raise DataError(f"{self.block_id}: negative yield")
        if self.days:
            if len(self.days) != img.shape[0]:
                raise DataError(f"{self.block_id}: {len(self.days)} days for {img.shape[0]} timesteps")
            doy = img[:, DOY_CHANNEL]
            want = np.array([encode_doy(d) for d in self.days])[:, None, None]
            if not np.array_equal(doy, np.broadcast_to(want, doy.shape)):
                raise DataError(f"{self.block_id}: DOY channel does not match acquisition days")


class Crop(NamedTuple):
    image: np.ndarray
    target: np.ndarray | None
    row: int
    col: int


def make_patches(field_image: np.ndarray, target: np.ndarray | None = None, size: int = 16) -> list[Crop]:
    """Non-overlapping ``size`` x ``size`` tiles in row-major order.

    Trailing rows/columns that do not fill a whole tile are dropped.
    """
    if field_image.ndim != 4:
        raise DimensionError(f"field image must be T x C x H x W, got {field_image.shape}")
    H, W = field_image.shape[2:]
    if H < size or W < size:
        raise ParameterError(f"field {H}x{W} is smaller than the {size}px crop")
    if target is not None and target.shape != (H, W):
        raise DimensionError(f"target {target.shape} does not match field {H}x{W}")
    crops = []
    for r in range(H // size):
        for c in range(W // size):
            rs, cs = slice(r * size, (r + 1) * size), slice(c * size, (c + 1) * size)
            tgt = None if target is None else target[rs, cs].copy()
            crops.append(Crop(field_image[:, :, rs, cs].copy(), tgt, r, c))
    return crops


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GenConfig:
    n_cultivars: int = 8
    blocks_per_cultivar: int = 9
    years: tuple[int, ...] = (2016, 2017, 2018, 2019)
    field_px: int = 32
    crop_px: int = 16
    T: int = 15
    base_yield: float = 38.0
    fertility_effect: float = 12.0
    climate_effect: float = 6.0
    spatial_effect: float = 6.0
    cultivar_sd: float = 2.0
    pixel_noise: float = 0.5
    image_noise: float = 0.01
    smoothing_px: float = 3.0
    min_yield: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))

    def check(self) -> None:
        if self.n_cultivars < 1 or self.blocks_per_cultivar < 1:
            raise ParameterError("generator needs at least one cultivar with at least one block")
        if self.n_cultivars > len(CULTIVARS):
            raise ParameterError(f"at most {len(CULTIVARS)} cultivars are available")
        if not self.years:
            raise ParameterError("generator needs at least one year")
        if self.field_px < self.crop_px or self.crop_px < 1:
            raise ParameterError("field must be at least one crop wide")
        if self.T < 1:
            raise ParameterError("T must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["years"] = list(self.years)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            from cmavit.errors import ConfigError

            raise ConfigError(f"unknown generator settings: {sorted(unknown)}")
        return cls(**d)


def _smooth_field(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    return gaussian_filter(rng.standard_normal((n, n)), sigma, mode="reflect")


def _standardise(f: np.ndarray) -> np.ndarray:
    return (f - f.mean()) / f.std()


def block_context(cultivar_name: str, vigor: int, rng: np.random.Generator) -> str:
    ph = 6.5 + 0.4 * vigor + 0.15 * rng.standard_normal()
    trellis = TRELLIS[int(rng.integers(len(TRELLIS)))]
    texture = TEXTURE[int(rng.integers(len(TEXTURE)))]
    return (
        f"cultivar {cultivar_name}. trellis {trellis}. "
        f"soil {texture}, ph {ph:.1f}. vigor {VIGOR_WORDS[vigor]}."
    )


def _climate_series(rng: np.random.Generator, heat: float, T: int) -> tuple[np.ndarray, float]:
    ramp = np.linspace(0.0, 1.0, T)
    anomaly = heat + 0.6 * rng.standard_normal(T)
    tmax = 24.0 + 9.0 * ramp + 2.5 * anomaly
    tmin = tmax - 14.0 + 1.0 * rng.standard_normal(T)
    prcp = rng.gamma(0.6, 4.0, size=T) * (1.0 - 0.8 * ramp)
    vp = 0.6108 * np.exp(17.27 * tmin / (tmin + 237.3))
    return np.stack([tmin, tmax, prcp, vp], axis=1), float(anomaly.mean())


def _field_image(rng, pattern: np.ndarray, days: Sequence[int], noise: float) -> np.ndarray:
    T = len(days)
    frac = np.linspace(0.0, 1.0, T)
    canopy = 1.0 / (1.0 + np.exp(-(frac - 0.35) / 0.12))
    visible = 0.05 + 0.95 * frac**2
    n = pattern.shape[0]
    img = np.empty((T, len(CHANNELS), n, n))
    # (base, canopy slope, pattern loading, noise scale) per channel
    spec = (
        (0.12, -0.06, -0.025, 1.0),
        (0.10, -0.02, -0.015, 1.0),
        (0.07, -0.02, -0.010, 1.0),
        (0.25, 0.30, 0.070, 1.0),
        (0.35, 0.10, 0.030, 3.0),
        (0.20, 0.12, 0.030, 3.0),
    )
    for t in range(T):
        for c, (base, slope, load, ns) in enumerate(spec):
            chan = base + slope * canopy[t] + load * visible[t] * pattern
            chan = chan + noise * ns * rng.standard_normal((n, n))
            img[t, c] = np.clip(chan, 0.0, 1.0)
        img[t, DOY_CHANNEL] = encode_doy(days[t])
    return img


def generate_fields(seed: int, config: GenConfig = GenConfig()) -> list[FieldSample]:
    """One full-field sample per (block, year), in block-major order."""
    config.check()
    days = observation_days(config.T)
    n = config.field_px
    year_heat = {y: make_rng(seed, "year", y).standard_normal() for y in config.years}
    out = []
    for ci in range(config.n_cultivars):
        code, name = CULTIVARS[ci]
        cultivar_offset = config.cultivar_sd * make_rng(seed, "cultivar", code).standard_normal()
        vigor_cycle = make_rng(seed, "vigor", code).permutation(3) - 1
        for k in range(config.blocks_per_cultivar):
            block_id = f"{code}-{k + 1:02d}"
            brng = make_rng(seed, "block", block_id)
            vigor = int(vigor_cycle[k % 3])
            text = block_context(name, vigor, brng)
            base_pattern = _smooth_field(brng, n, config.smoothing_px)
            for year in config.years:
                yrng = make_rng(seed, "block-year", block_id, year)
                heat = (year_heat[year] + yrng.standard_normal()) / math.sqrt(2.0)
                climate, heat_index = _climate_series(yrng, heat, config.T)
                season = _smooth_field(yrng, n, config.smoothing_px)
                pattern = _standardise(0.85 * _standardise(base_pattern) + 0.5 * _standardise(season))
                level = config.base_yield + cultivar_offset + config.fertility_effect * vigor
                level -= config.climate_effect * heat_index
                target = level + config.spatial_effect * pattern + config.pixel_noise * yrng.standard_normal((n, n))
                target = np.maximum(target, config.min_yield)
                image = _field_image(yrng, pattern, days, config.image_noise)
                out.append(
                    FieldSample(
                        image=image,
                        climate=climate,
                        context_text=text,
                        target=target,
                        block_id=block_id,
                        cultivar=code,
                        year=year,
                        days=days,
                        latent={"fertility": float(vigor), "heat_index": heat_index, "cultivar_offset": cultivar_offset},
                    )
                )
    return out


def generate_blocks(seed: int, config: GenConfig = GenConfig()) -> list[FieldSample]:
    """Crop-level samples: every field tiled into ``crop_px`` crops."""
    samples = []
    for fs in generate_fields(seed, config):
        for i, crop in enumerate(make_patches(fs.image, fs.target, config.crop_px)):
            samples.append(
                FieldSample(
                    image=crop.image,
                    climate=fs.climate.copy(),
                    context_text=fs.context_text,
                    target=crop.target,
                    block_id=fs.block_id,
                    cultivar=fs.cultivar,
                    year=fs.year,
                    crop=i,
                    days=fs.days,
                    latent=dict(fs.latent),
                )
            )
    return samples


# ---------------------------------------------------------------------------
# block hold-out split
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    assignment: dict[str, dict[str, str]]  # block -> {"cultivar", "split"}
    excluded: list[str] = field(default_factory=list)

    def blocks(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ParameterError(f"unknown split {split!r}")
        return getattr(self, split)

    def split_of(self, block_id: str) -> str | None:
        entry = self.assignment.get(block_id)
        return None if entry is None else entry["split"]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(**d)


def split_bho(blocks: Iterable[tuple[str, str]], seed: int) -> SplitManifest:
    """Block hold-out split, stratified by cultivar.

    For a cultivar with n blocks (shuffled by ``seed``): ceil(n/3) go to
    train, the rest alternate val, test, val, ... Two blocks give one train
    and one test block. Single-block cultivars are excluded with a warning.
    """
    by_cultivar: dict[str, list[str]] = {}
    for block_id, cultivar in blocks:
        members = by_cultivar.setdefault(cultivar, [])
        if block_id not in members:
            members.append(block_id)
    splits: dict[str, list[str]] = {s: [] for s in SPLITS}
    assignment: dict[str, dict[str, str]] = {}
    excluded: list[str] = []
    for cultivar in sorted(by_cultivar):
        members = sorted(by_cultivar[cultivar])
        if len(members) < 2:
            warnings.warn(f"cultivar {cultivar!r} has a single block; excluded from the split", stacklevel=2)
            excluded.extend(members)
            continue
        order = make_rng(seed, "bho", cultivar).permutation(len(members))
        shuffled = [members[i] for i in order]
        n = len(shuffled)
        if n == 2:
            labels = ["train", "test"]
        else:
            n_train = math.ceil(n / 3)
            labels = ["train"] * n_train + [("val", "test")[i % 2] for i in range(n - n_train)]
        for block_id, label in zip(shuffled, labels):
            splits[label].append(block_id)
            assignment[block_id] = {"cultivar": cultivar, "split": label}
    return SplitManifest(
        train=sorted(splits["train"]),
        val=sorted(splits["val"]),
        test=sorted(splits["test"]),
        assignment=dict(sorted(assignment.items())),
        excluded=sorted(excluded),
    )


# ---------------------------------------------------------------------------
# yield zones and cost-sensitive resampling
# ---------------------------------------------------------------------------

LER, CR, HER = 1, 2, 3
BUCKET_NAMES = {LER: "LER", CR: "CR", HER: "HER"}


@dataclass(frozen=True)
class ZoneThresholds:
    low: float = 22.0
    high: float = 54.0

    def __post_init__(self):
        if self.low > self.high:
            raise ParameterError("low threshold exceeds high threshold")


@dataclass
class ZoneMap:
    labels: np.ndarray  # int, values in {1, 2, 3}
    thresholds: ZoneThresholds


def zone_labels(values, thresholds: ZoneThresholds = ZoneThresholds()) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return np.where(v < thresholds.low, LER, np.where(v > thresholds.high, HER, CR)).astype(np.int64)


def classify_yield_zones(target: np.ndarray, thresholds: ZoneThresholds = ZoneThresholds()) -> ZoneMap:
    """1 below ``low``, 3 above ``high``, 2 on the closed interval between."""
    target = np.asarray(target, dtype=float)
    if not np.all(np.isfinite(target)):
        raise DataError("yield map has non-finite values")
    return ZoneMap(zone_labels(target, thresholds), thresholds)


def sample_mean_targets(samples) -> np.ndarray:
    return np.array([float(np.mean(s.target if isinstance(s, FieldSample) else s)) for s in samples])


def csr_weights(samples, thresholds: ZoneThresholds = ZoneThresholds()) -> np.ndarray:
    """Inverse bucket-frequency sampling weights, normalised to sum to one.

    Each sample is bucketed (LER/CR/HER) by its mean target, so every
    populated bucket receives the same total probability mass.
    """
    means = sample_mean_targets(samples)
    if means.size == 0:
        raise ParameterError("csr_weights needs at least one sample")
    buckets = zone_labels(means, thresholds)
    counts = {b: int(np.sum(buckets == b)) for b in np.unique(buckets)}
    w = np.array([1.0 / counts[b] for b in buckets])
    return w / w.sum()


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    """Per-channel standardisation fitted on the training split only."""

    image_mean: np.ndarray
    image_std: np.ndarray
    climate_mean: np.ndarray
    climate_std: np.ndarray
    target_mean: float
    target_std: float

    @classmethod
    def fit(cls, samples: Sequence[FieldSample]) -> "NormStats":
        if not samples:
            raise DataError("cannot fit normalisation on an empty split")
        imgs = np.stack([s.image for s in samples])
        clim = np.stack([s.climate for s in samples])
        tgt = np.stack([s.target for s in samples])
        return cls(
            image_mean=imgs.mean(axis=(0, 1, 3, 4)),
            image_std=_safe_std(imgs.std(axis=(0, 1, 3, 4))),
            climate_mean=clim.mean(axis=(0, 1)),
            climate_std=_safe_std(clim.std(axis=(0, 1))),
            target_mean=float(tgt.mean()),
            target_std=float(_safe_std(np.array([tgt.std()]))[0]),
        )

    @classmethod
    def identity(cls, n_channels: int = len(CHANNELS), n_met: int = len(CLIMATE_VARS)) -> "NormStats":
        return cls(np.zeros(n_channels), np.ones(n_channels), np.zeros(n_met), np.ones(n_met), 0.0, 1.0)

    def image(self, x: np.ndarray) -> np.ndarray:
        return (x - self.image_mean[:, None, None]) / self.image_std[:, None, None]

    def climate(self, c: np.ndarray) -> np.ndarray:
        return (c - self.climate_mean) / self.climate_std

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "norm/image_mean": self.image_mean,
            "norm/image_std": self.image_std,
            "norm/climate_mean": self.climate_mean,
            "norm/climate_std": self.climate_std,
            "norm/target_mean": np.array([self.target_mean]),
            "norm/target_std": np.array([self.target_std]),
        }

    @classmethod
    def from_arrays(cls, a: dict[str, np.ndarray]) -> "NormStats":
        return cls(
            a["norm/image_mean"],
            a["norm/image_std"],
            a["norm/climate_mean"],
            a["norm/climate_std"],
            float(a["norm/target_mean"][0]),
            float(a["norm/target_std"][0]),
        )


def _safe_std(s: np.ndarray) -> np.ndarray:
    return np.where(s > 1e-8, s, 1.0)


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    samples: list[FieldSample]
    manifest: SplitManifest
    config: GenConfig
    seed: int

    def split(self, name: str) -> list[FieldSample]:
        blocks = set(self.manifest.blocks(name))
        return [s for s in self.samples if s.block_id in blocks]


def build_dataset(seed: int, config: GenConfig = GenConfig()) -> Dataset:
    samples = generate_blocks(seed, config)
    blocks = sorted({(s.block_id, s.cultivar) for s in samples})
    return Dataset(samples, split_bho(blocks, seed), config, seed)


def save_dataset(path: str | Path, dataset: Dataset) -> Path:
    """Write ``manifest.json``, one archive per sample and one text file per block."""
    root = Path(path)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    (root / "context").mkdir(exist_ok=True)
    entries = []
    texts: dict[str, str] = {}
    for i, s in enumerate(dataset.samples):
        rel = f"samples/{i:05d}.bin"
        archive.save(root / rel, {"image": s.image, "climate": s.climate, "target": s.target})
        texts.setdefault(s.block_id, s.context_text)
        entries.append(
            {
                "file": rel,
                "block_id": s.block_id,
                "cultivar": s.cultivar,
                "year": s.year,
                "crop": s.crop,
                "days": list(s.days),
                "latent": s.latent,
            }
        )
    for block_id, text in sorted(texts.items()):
        (root / "context" / f"{block_id}.txt").write_text(text, encoding="utf-8")
    manifest = {
        "format": FORMAT_TAG,
        "seed": dataset.seed,
        "gen_config": dataset.config.to_dict(),
        "split": dataset.manifest.to_dict(),
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable manifest: {exc}") from None
    if manifest.get("format") != FORMAT_TAG:
        raise DataError(f"unsupported dataset format {manifest.get('format')!r}")
    texts: dict[str, str] = {}
    samples = []
    for e in manifest["samples"]:
        rec = archive.load(root / e["file"])
        bid = e["block_id"]
        if bid not in texts:
            texts[bid] = (root / "context" / f"{bid}.txt").read_text(encoding="utf-8")
        samples.append(
            FieldSample(
                image=rec["image"],
                climate=rec["climate"],
                context_text=texts[bid],
                target=rec["target"],
                block_id=bid,
                cultivar=e["cultivar"],
                year=int(e["year"]),
                crop=int(e["crop"]),
                days=tuple(e["days"]),
                latent=e.get("latent", {}),
            )
        )
    return Dataset(
        samples,
        SplitManifest.from_dict(manifest["split"]),
        GenConfig.from_dict(manifest["gen_config"]),
        int(manifest["seed"]),
    )
