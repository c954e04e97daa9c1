"""Seeded phenology-driven generator for multi-sensor pixel timeseries.

Each pixel draws a land-cover class, turns the class's seasonal greenness template
(shifted by the country's growing-season offset, the year drift and per-pixel
jitter) into S2 reflectance, S1 backscatter, a METEO cycle and static DEM values,
then drops cloudy months. Every sample gets its own RNG stream keyed on
``(seed, dataset tag, country, index)`` so output does not depend on generation order.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from fmdeploy.data import (
    CROPTYPE_CLASSES,
    DEFAULT_SCHEMA,
    N_TIMESTEPS,
    UNKNOWN,
    BandSchema,
    Dataset,
    PixelSample,
    month_starts,
)

NONCROP_CLASSES = ("grassland", "forest", "shrubland", "bare", "water")
LANDCOVER_CLASSES = CROPTYPE_CLASSES + NONCROP_CLASSES
YEARS = (2017, 2018, 2019, 2020, 2021)


@dataclass(frozen=True)
class Phenology:
    peak_month: float  # 0 = January, northern-hemisphere reference
    width: float  # months (std of the greenness bump)
    amplitude: float
    base: float  # off-season greenness
    soil_wetness: float = 0.0
    flowering: float = 0.0  # yellow-flower boost of green/red around the peak
    second_peak: float = 0.0  # relative autumn green-up (winter cereals)


# Class templates: crop classes differ in timing, duration and spectral quirks.
PHENOLOGY = {
    "maize": Phenology(6.6, 1.25, 0.72, 0.10),
    "wheat": Phenology(4.2, 1.35, 0.62, 0.12, second_peak=0.22),
    "barley": Phenology(3.7, 1.05, 0.58, 0.12, second_peak=0.12),
    "soybeans": Phenology(7.4, 1.0, 0.70, 0.09),
    "millet_sorghum": Phenology(9.0, 1.0, 0.42, 0.16),
    "sunflower": Phenology(6.2, 0.95, 0.55, 0.10, flowering=0.08),
    "rapeseed": Phenology(3.2, 1.6, 0.60, 0.15, flowering=0.09, second_peak=0.30),
    "other_crop": Phenology(5.5, 1.3, 0.52, 0.12),
    "grassland": Phenology(5.0, 2.8, 0.28, 0.32),
    "forest": Phenology(5.5, 2.6, 0.15, 0.62),
    "shrubland": Phenology(4.5, 2.2, 0.14, 0.20),
    "bare": Phenology(6.0, 2.0, 0.02, 0.06),
    "water": Phenology(6.0, 2.0, 0.0, -0.3, soil_wetness=1.0),
}

# Reflectance spectra for B02,B03,B04,B05,B06,B07,B08,B8A,B11,B12.
_VEG = np.array([0.03, 0.07, 0.04, 0.11, 0.26, 0.33, 0.38, 0.39, 0.20, 0.10])
_SOIL = np.array([0.08, 0.11, 0.15, 0.18, 0.21, 0.23, 0.25, 0.26, 0.33, 0.29])
_WATER = np.array([0.06, 0.05, 0.03, 0.02, 0.015, 0.012, 0.01, 0.01, 0.005, 0.003])
_FLOWER = np.array([0.0, 0.5, 0.6, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class CountrySpec:
    code: str
    n_samples: int
    lat: float
    lon: float
    phase_offset: float = 0.0  # months
    amplitude_scale: float = 1.0
    noise: float = 0.02  # reflectance noise std
    soil_brightness: float = 1.0
    elevation: float = 200.0  # mean metres
    cloud_prob: float = 0.3
    class_mixture: Mapping[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        if self.n_samples < 0:
            raise ValueError(f"{self.code}: negative sample count")
        if not 0 <= self.cloud_prob <= 1:
            raise ValueError(f"{self.code}: cloud_prob outside [0, 1]")
        if self.n_samples == 0:
            return
        bad = set(self.class_mixture) - set(LANDCOVER_CLASSES)
        if bad:
            raise ValueError(f"{self.code}: unknown classes in mixture {sorted(bad)}")
        if any(p < 0 for p in self.class_mixture.values()):
            raise ValueError(f"{self.code}: negative mixture weight")
        total = sum(self.class_mixture.values())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"{self.code}: class mixture sums to {total:.6f}, not 1")


@dataclass(frozen=True)
class SynthConfig:
    countries: tuple[CountrySpec, ...]
    tag: str = "synth"
    seed: int = 0
    years: tuple[int, ...] = YEARS
    year_drift: Mapping[int, float] = field(default_factory=dict)  # phase drift (months) per year
    phase_jitter: float = 0.45  # per-pixel phase std (months)
    s1_missing_prob: float = 0.03
    labelled: bool = True  # False -> every label is unknown (pretraining pool)
    croptype_labels: bool = True  # False -> crop pixels carry only the cropland label

    def validate(self) -> None:
        codes = [c.code for c in self.countries]
        if len(set(codes)) != len(codes):
            raise ValueError("duplicate country in synth config")
        for c in self.countries:
            c.validate()
        if not self.years:
            raise ValueError("no years configured")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        d = dict(d)
        countries = tuple(
            CountrySpec(**{**c, "class_mixture": dict(c.get("class_mixture", {}))}) for c in d.pop("countries")
        )
        if "years" in d:
            d["years"] = tuple(d["years"])
        if "year_drift" in d:
            d["year_drift"] = {int(k): float(v) for k, v in d["year_drift"].items()}
        return cls(countries=countries, **d)


def _allocate(n: int, mixture: Mapping[str, float]) -> list[str]:
    """Largest-remainder allocation of ``n`` labels to mixture classes (deterministic)."""
    classes = [c for c in LANDCOVER_CLASSES if mixture.get(c, 0) > 0]
    raw = np.array([mixture[c] * n for c in classes])
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    order = sorted(range(len(classes)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    return [c for c, k in zip(classes, counts) for _ in range(k)]


def _circular_bump(months: np.ndarray, peak: float, width: float) -> np.ndarray:
    d = (months - peak + 6.0) % 12.0 - 6.0
    return np.exp(-0.5 * (d / width) ** 2)


def _is_southern(country: CountrySpec) -> bool:
    return country.lat < 0


def simulate_pixel(
    rng: np.random.Generator,
    landcover: str,
    country: CountrySpec,
    year: int,
    config: SynthConfig,
    schema: BandSchema = DEFAULT_SCHEMA,
) -> tuple[tuple[dt.date, ...], np.ndarray, np.ndarray, np.ndarray]:
    """Draw one pixel: returns (timestamps, dynamic [T, B], mask [T, B], static [S])."""
    ph = PHENOLOGY[landcover]
    timestamps = month_starts(dt.date(year - 1, 7, 1))
    months = np.array([t.month - 1 for t in timestamps], dtype=np.float64)

    phase = ph.peak_month + country.phase_offset + config.year_drift.get(year, 0.0)
    if landcover == "other_crop":
        phase += rng.uniform(-1.5, 1.5)
    phase += rng.normal(0.0, config.phase_jitter)
    amp = ph.amplitude * country.amplitude_scale * rng.normal(1.0, 0.12)
    width = ph.width * rng.normal(1.0, 0.08)

    green = ph.base + amp * _circular_bump(months, phase, width)
    if ph.second_peak:
        green = green + amp * ph.second_peak * _circular_bump(months, phase - 6.5, 1.2)
    green = green + rng.normal(0.0, 0.02)
    green_c = np.clip(green, 0.0, 1.0)

    soil = _SOIL * country.soil_brightness * rng.normal(1.0, 0.06)
    if landcover == "water":
        s2 = np.tile(_WATER, (N_TIMESTEPS, 1)) * rng.normal(1.0, 0.1)
    else:
        s2 = green_c[:, None] * _VEG + (1.0 - green_c[:, None]) * soil
        if ph.flowering:
            s2 = s2 + ph.flowering * _circular_bump(months, phase - 0.8, 0.5)[:, None] * _FLOWER
    s2 = s2 + rng.normal(0.0, country.noise, size=s2.shape)

    wet = green_c if landcover != "water" else np.zeros(N_TIMESTEPS)
    vv = -14.0 + 4.0 * np.roll(wet, 1) - 8.0 * ph.soil_wetness + rng.normal(0, 0.8, N_TIMESTEPS)
    vh = -21.0 + 7.0 * wet - 6.0 * ph.soil_wetness + rng.normal(0, 0.8, N_TIMESTEPS)

    warm = 0.0 if _is_southern(country) else 6.0
    t_mean = 27.0 - 0.35 * abs(country.lat)
    t_amp = 1.0 + 0.28 * abs(country.lat)
    temp = t_mean + t_amp * np.cos(2 * np.pi * (months - warm) / 12.0) + rng.normal(0, 1.0, N_TIMESTEPS)
    rain_peak = phase - 1.5
    precip = 20.0 + 110.0 * _circular_bump(months, rain_peak, 2.0) * rng.uniform(0.6, 1.4)
    precip = np.maximum(precip + rng.normal(0, 8.0, N_TIMESTEPS), 0.0)

    groups = {"S1": np.stack([vv, vh], axis=1), "S2": s2, "METEO": np.stack([temp, precip], axis=1)}
    dynamic = np.concatenate([groups[g.name] for g in schema.dynamic_groups], axis=1)

    mask = np.ones_like(dynamic, dtype=bool)
    sl = schema.group_slices("dynamic")
    cloudy = rng.random(N_TIMESTEPS) < country.cloud_prob
    if "S2" in sl:
        mask[cloudy, sl["S2"]] = False
    if "S1" in sl:
        mask[rng.random(N_TIMESTEPS) < config.s1_missing_prob, sl["S1"]] = False

    elev = max(country.elevation * rng.lognormal(0.0, 0.35), 0.0)
    slope = abs(rng.normal(2.0 + elev / 400.0, 1.5))
    if landcover in ("forest", "shrubland"):
        slope += 3.0
    static = np.array([elev, slope])

    dynamic = np.round(dynamic, 4)
    dynamic[~mask] = np.nan
    return timestamps, dynamic, mask, np.round(static, 2)


def _labels(landcover: str, config: SynthConfig) -> tuple[str, str]:
    if not config.labelled:
        return UNKNOWN, UNKNOWN
    if landcover in CROPTYPE_CLASSES:
        return "crop", landcover if config.croptype_labels else UNKNOWN
    return "non_crop", UNKNOWN


def _stream(config: SynthConfig, *key: int) -> np.random.Generator:
    tag = int.from_bytes(config.tag.encode("utf-8")[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng([config.seed, tag, *key])


def generate_dataset(config: SynthConfig, schema: BandSchema = DEFAULT_SCHEMA) -> Dataset:
    config.validate()
    samples = []
    for ci, country in enumerate(config.countries):
        if country.n_samples == 0:
            continue
        classes = _allocate(country.n_samples, country.class_mixture)
        order = _stream(config, ci, 1 << 30).permutation(len(classes))
        for i in range(country.n_samples):
            rng = _stream(config, ci, i)
            landcover = classes[order[i]]
            year = config.years[int(rng.integers(len(config.years)))]
            ts, dyn, mask, static = simulate_pixel(rng, landcover, country, year, config, schema)
            lat = float(np.round(np.clip(country.lat + rng.normal(0, 1.5), -89.9, 89.9), 5))
            lon = float(np.round((country.lon + rng.normal(0, 1.5) + 180.0) % 360.0 - 180.0, 5))
            cl, ct = _labels(landcover, config)
            samples.append(
                PixelSample(
                    sample_id=f"{config.tag}-{country.code}-{i:06d}",
                    lat=lat,
                    lon=lon,
                    country=country.code,
                    year=year,
                    source=f"{config.tag}_{country.code.lower()}",
                    timestamps=ts,
                    dynamic=dyn,
                    static=static,
                    mask=mask,
                    label_cropland=cl,
                    label_croptype=ct,
                )
            )
    return Dataset(schema, tuple(samples))


# --- raster patches ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RasterPatch:
    """Dense block of pixel timeseries sharing one acquisition calendar."""

    patch_id: str
    origin: tuple[float, float]  # (lat, lon) of the upper-left pixel
    pixel_size: float  # degrees
    timestamps: tuple[dt.date, ...]
    dynamic: np.ndarray  # [H, W, T, B]
    mask: np.ndarray  # [H, W, T, B]
    static: np.ndarray  # [H, W, S]
    country: str = ""
    year: int = 0
    labels_cropland: np.ndarray | None = None  # [H, W] str
    labels_croptype: np.ndarray | None = None  # [H, W] str

    def __post_init__(self):
        h, w = self.dynamic.shape[:2]
        if h < 1 or w < 1:
            raise ValueError("patch must be at least 1x1")
        if self.mask.shape != self.dynamic.shape or self.static.shape[:2] != (h, w):
            raise ValueError("patch arrays are misaligned")
        if self.dynamic.shape[2] != len(self.timestamps):
            raise ValueError("timestep axis does not match timestamps")

    @property
    def shape(self) -> tuple[int, int]:
        return self.dynamic.shape[0], self.dynamic.shape[1]

    def pixel_latlon(self) -> np.ndarray:
        h, w = self.shape
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        lat = self.origin[0] - rows * self.pixel_size
        lon = self.origin[1] + cols * self.pixel_size
        return np.stack([lat, lon], axis=-1)

    def labels(self, task: str) -> np.ndarray | None:
        return self.labels_cropland if task == "cropland_binary" else self.labels_croptype


def generate_patch(
    config: SynthConfig,
    class_layout: Sequence[Sequence[str]],
    country: str,
    year: int = 2021,
    patch_id: str = "patch",
    pixel_size: float = 0.0001,
    schema: BandSchema = DEFAULT_SCHEMA,
) -> RasterPatch:
    """Pixel timeseries conditioned on a land-cover layout, with ground truth attached."""
    layout = np.array(class_layout, dtype=object)
    if layout.ndim != 2:
        raise ValueError("class_layout must be a 2-D grid")
    bad = sorted({c for c in layout.ravel() if c not in LANDCOVER_CLASSES})
    if bad:
        raise ValueError(f"invalid layout class(es): {bad}")
    specs = {c.code: c for c in config.countries}
    if country not in specs:
        raise ValueError(f"country {country!r} not in synth config")
    spec = specs[country]
    ci = [c.code for c in config.countries].index(country)
    key = int.from_bytes(patch_id.encode("utf-8")[:8].ljust(8, b"\0"), "little")
    h, w = layout.shape
    dyn, mask, static = [], [], []
    ts = None
    for r in range(h):
        for c in range(w):
            rng = _stream(config, ci, 1 << 31, key, r, c)
            ts, d, m, s = simulate_pixel(rng, layout[r, c], spec, year, config, schema)
            dyn.append(d)
            mask.append(m)
            static.append(s)
    # float32-representable so the on-disk patch format round-trips exactly
    dyn_a = np.array(dyn).astype(np.float32).astype(np.float64).reshape(h, w, N_TIMESTEPS, -1)
    static_a = np.array(static).astype(np.float32).astype(np.float64).reshape(h, w, -1)
    crop = np.vectorize(lambda c: "crop" if c in CROPTYPE_CLASSES else "non_crop", otypes=[object])(layout)
    ctype = np.vectorize(lambda c: c if c in CROPTYPE_CLASSES else UNKNOWN, otypes=[object])(layout)
    return RasterPatch(
        patch_id=patch_id,
        origin=(spec.lat, spec.lon),
        pixel_size=pixel_size,
        timestamps=ts,
        dynamic=dyn_a,
        mask=np.array(mask).reshape(h, w, N_TIMESTEPS, -1),
        static=static_a,
        country=country,
        year=year,
        labels_cropland=crop,
        labels_croptype=ctype,
    )


def field_layout(
    height: int, width: int, classes: Sequence[str], field_size: int = 4, seed: int = 0
) -> list[list[str]]:
    """Blocky random field map: each ``field_size`` square takes one class."""
    rng = np.random.default_rng(seed)
    nr, nc = -(-height // field_size), -(-width // field_size)
    blocks = rng.integers(len(classes), size=(nr, nc))
    return [[classes[blocks[r // field_size, c // field_size]] for c in range(width)] for r in range(height)]


# --- default benchmark ---------------------------------------------------------------

# code: lat, lon, phase offset, amplitude scale, noise, soil brightness, elevation, cloud prob
_COUNTRY_TRAITS = {
    "US": (40.0, -95.0, 0.0, 1.00, 0.020, 1.00, 300, 0.25),
    "BE": (50.6, 4.6, 0.3, 1.00, 0.020, 0.95, 100, 0.45),
    "FR": (46.5, 2.4, 0.0, 1.00, 0.020, 1.00, 250, 0.35),
    "DE": (51.0, 10.0, 0.3, 0.98, 0.020, 0.95, 250, 0.40),
    "UA": (49.0, 32.0, 0.4, 0.95, 0.022, 0.90, 180, 0.30),
    "PL": (52.0, 19.0, 0.5, 0.97, 0.020, 0.95, 150, 0.40),
    "IT": (42.8, 12.5, -0.5, 0.95, 0.022, 1.05, 350, 0.25),
    "GR": (39.0, 22.0, -0.8, 0.90, 0.024, 1.10, 400, 0.15),
    "CN": (35.0, 110.0, 0.1, 0.95, 0.024, 1.05, 500, 0.30),
    "IN": (22.0, 79.0, 2.0, 0.85, 0.028, 1.10, 300, 0.45),
    "KE": (0.0, 37.9, 4.0, 0.85, 0.030, 1.00, 1500, 0.45),
    "ZA": (-29.0, 24.0, 5.6, 0.88, 0.024, 1.10, 1100, 0.20),
    "ES": (40.2, -3.7, -1.3, 0.88, 0.024, 1.15, 650, 0.15),
    "NG": (9.1, 8.7, 2.8, 0.80, 0.032, 1.05, 350, 0.50),
    "LV": (56.9, 24.6, 1.0, 0.98, 0.020, 0.90, 100, 0.50),
    "TZ": (-6.4, 34.9, 4.6, 0.80, 0.032, 1.00, 1100, 0.45),
    "ET": (9.1, 40.5, 3.3, 0.80, 0.032, 1.05, 1900, 0.40),
    "AR": (-34.6, -63.6, 6.3, 0.98, 0.020, 1.00, 200, 0.25),
    "AT": (47.5, 14.6, 0.6, 0.95, 0.020, 0.95, 700, 0.40),
    "BR": (-14.2, -51.9, 5.0, 0.92, 0.026, 1.05, 500, 0.45),
    "MG": (-18.8, 46.9, 6.1, 0.82, 0.030, 1.05, 700, 0.45),
    "MZ": (-18.7, 35.5, 5.8, 0.80, 0.030, 1.05, 400, 0.40),
    "MA": (31.8, -7.1, -2.0, 0.82, 0.026, 1.20, 700, 0.15),
    "ID": (-2.5, 118.0, 2.5, 0.85, 0.030, 1.00, 300, 0.60),
}

# Crop-type shares per country (of the crop fraction).
_CROP_MIX = {
    "US": {"maize": 0.38, "soybeans": 0.30, "wheat": 0.14, "sunflower": 0.02, "rapeseed": 0.02, "millet_sorghum": 0.01, "other_crop": 0.13},
    "BE": {"maize": 0.25, "wheat": 0.35, "barley": 0.12, "rapeseed": 0.05, "other_crop": 0.23},
    "FR": {"wheat": 0.32, "maize": 0.18, "barley": 0.16, "rapeseed": 0.12, "sunflower": 0.08, "other_crop": 0.14},
    "DE": {"wheat": 0.30, "maize": 0.22, "barley": 0.18, "rapeseed": 0.14, "other_crop": 0.16},
    "UA": {"wheat": 0.28, "sunflower": 0.28, "maize": 0.22, "barley": 0.08, "soybeans": 0.06, "rapeseed": 0.04, "other_crop": 0.04},
    "PL": {"wheat": 0.30, "rapeseed": 0.16, "maize": 0.18, "barley": 0.16, "other_crop": 0.20},
    "IT": {"maize": 0.28, "wheat": 0.30, "sunflower": 0.08, "soybeans": 0.08, "barley": 0.08, "other_crop": 0.18},
    "GR": {"wheat": 0.35, "maize": 0.18, "barley": 0.12, "sunflower": 0.08, "other_crop": 0.27},
    "CN": {"maize": 0.40, "wheat": 0.30, "soybeans": 0.12, "rapeseed": 0.08, "other_crop": 0.10},
    "IN": {"wheat": 0.30, "millet_sorghum": 0.15, "maize": 0.15, "soybeans": 0.10, "rapeseed": 0.10, "other_crop": 0.20},
    "KE": {"maize": 0.55, "wheat": 0.10, "millet_sorghum": 0.15, "other_crop": 0.20},
    "ZA": {"maize": 0.50, "wheat": 0.15, "sunflower": 0.15, "soybeans": 0.10, "other_crop": 0.10},
    "ES": {"wheat": 0.30, "barley": 0.28, "sunflower": 0.12, "maize": 0.10, "rapeseed": 0.04, "other_crop": 0.16},
    "NG": {"maize": 0.30, "millet_sorghum": 0.40, "other_crop": 0.30},
    "LV": {"wheat": 0.42, "rapeseed": 0.20, "barley": 0.18, "other_crop": 0.20},
    "TZ": {"maize": 0.55, "millet_sorghum": 0.15, "sunflower": 0.10, "other_crop": 0.20},
    "ET": {"wheat": 0.30, "maize": 0.25, "barley": 0.15, "millet_sorghum": 0.20, "other_crop": 0.10},
    "AR": {"soybeans": 0.40, "maize": 0.30, "wheat": 0.20, "sunflower": 0.10},
    "AT": {"maize": 0.28, "wheat": 0.28, "barley": 0.16, "soybeans": 0.08, "rapeseed": 0.06, "other_crop": 0.14},
    "BR": {"soybeans": 0.50, "maize": 0.35, "other_crop": 0.15},
    "MG": {"maize": 0.40, "other_crop": 0.45, "millet_sorghum": 0.15},
    "MZ": {"maize": 0.50, "millet_sorghum": 0.15, "other_crop": 0.35},
    "MA": {"wheat": 0.50, "barley": 0.40, "other_crop": 0.10},
    "ID": {"maize": 0.50, "other_crop": 0.40, "soybeans": 0.10},
}

_NONCROP_MIX = {"grassland": 0.36, "forest": 0.28, "shrubland": 0.18, "bare": 0.12, "water": 0.06}

# (cropland, croptype, pretrain) sample counts per country.
_COUNTS = {
    "US": (1300, 480, 2300), "BE": (780, 150, 1000), "FR": (480, 200, 1000), "DE": (480, 150, 1000),
    "UA": (400, 110, 900), "PL": (300, 70, 700), "IT": (260, 60, 700), "GR": (150, 40, 500),
    "CN": (300, 70, 1000), "IN": (400, 50, 1100), "KE": (200, 0, 600), "ZA": (200, 40, 600),
    "ES": (1000, 230, 1300), "NG": (250, 0, 700), "LV": (400, 60, 600), "TZ": (250, 25, 700),
    "ET": (150, 20, 700), "AR": (400, 50, 900), "AT": (150, 80, 500), "BR": (150, 40, 900),
    "MG": (0, 20, 500), "MZ": (0, 20, 500), "MA": (0, 20, 600), "ID": (0, 15, 700),
}

# Per-country crop share within the cropland dataset; weighted mean is about 26 %.
_CROP_SHARE = {
    "US": 0.25, "BE": 0.30, "FR": 0.28, "DE": 0.30, "UA": 0.33, "PL": 0.30, "IT": 0.25, "GR": 0.22,
    "CN": 0.25, "IN": 0.30, "KE": 0.20, "ZA": 0.18, "ES": 0.20, "NG": 0.38, "LV": 0.22,
    "TZ": 0.21, "ET": 0.25, "AR": 0.30, "AT": 0.28, "BR": 0.20,
}

DEFAULT_YEAR_DRIFT = {2017: -0.1, 2018: 0.0, 2019: 0.1, 2020: 0.0, 2021: 0.35}


def _country(code: str, n: int, mixture: Mapping[str, float]) -> CountrySpec:
    lat, lon, off, amp, noise, soil, elev, cloud = _COUNTRY_TRAITS[code]
    return CountrySpec(code, n, lat, lon, off, amp, noise, soil, float(elev), cloud, dict(mixture))


def _mix(code: str, crop_share: float) -> dict[str, float]:
    out = {k: v * crop_share for k, v in _CROP_MIX[code].items()}
    for k, v in _NONCROP_MIX.items():
        out[k] = out.get(k, 0.0) + v * (1.0 - crop_share)
    total = sum(out.values())
    return {k: v / total for k, v in out.items()}


def benchmark_configs(seed: int) -> dict[str, SynthConfig]:
    """The three dataset configs of the default benchmark (pretrain / cropland / croptype)."""
    cropland = tuple(
        _country(c, n[0], _mix(c, _CROP_SHARE.get(c, 0.25))) for c, n in _COUNTS.items()
    )
    croptype = tuple(_country(c, n[1], _mix(c, 1.0)) for c, n in _COUNTS.items())
    pretrain = tuple(_country(c, n[2], _mix(c, 0.4)) for c, n in _COUNTS.items())
    common = dict(seed=seed, year_drift=dict(DEFAULT_YEAR_DRIFT))
    return {
        "pretrain": SynthConfig(pretrain, tag="pretrain", labelled=False, **common),
        "cropland": SynthConfig(cropland, tag="cropland", croptype_labels=False, **common),
        "croptype": SynthConfig(croptype, tag="croptype", **common),
    }


DEFAULT_PATCHES = {
    "cropland": ("BE", ("maize", "wheat", "grassland", "forest", "other_crop", "bare")),
    "croptype": ("US", ("maize", "soybeans", "wheat", "other_crop")),
}


def default_patches(seed: int, size: int = 16) -> dict[str, RasterPatch]:
    cfg = benchmark_configs(seed)["cropland"]
    out = {}
    for i, (name, (country, classes)) in enumerate(DEFAULT_PATCHES.items()):
        layout = field_layout(size, size, classes, field_size=4, seed=seed * 7 + i)
        out[name] = generate_patch(cfg, layout, country, 2021, patch_id=f"{name}-{country}")
    return out


def default_benchmark(seed: int, scale: float = 1.0):
    """(pretrain, cropland, croptype, patches) at the default sizes (20k / 8k / 2k).

    ``scale`` shrinks every country count proportionally, for quick runs.
    """
    cfgs = benchmark_configs(seed)
    if scale != 1.0:
        cfgs = {
            k: replace(v, countries=tuple(replace(c, n_samples=int(round(c.n_samples * scale))) for c in v.countries))
            for k, v in cfgs.items()
        }
    return (
        generate_dataset(cfgs["pretrain"]),
        generate_dataset(cfgs["cropland"]),
        generate_dataset(cfgs["croptype"]),
        default_patches(seed),
    )
