"""Pixel-timeseries data model, JSON-lines ingestion, compositing and normalization.

A sample holds 18 monthly composites for the dynamic band groups (S1, S2, METEO)
plus one vector of static bands (DEM). Missing composites are stored as NaN with
``mask == False``; downstream code must never read those positions.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

N_TIMESTEPS = 18
CLOUD_THRESHOLD = 0.05
EPS_SCALE = 1e-6

CROPLAND_CLASSES = ("non_crop", "crop")
CROPTYPE_CLASSES = (
    "maize",
    "wheat",
    "barley",
    "soybeans",
    "millet_sorghum",
    "sunflower",
    "rapeseed",
    "other_crop",
)
UNKNOWN = "unknown"

TASK_CLASSES = {
    "cropland_binary": CROPLAND_CLASSES,
    "croptype_multiclass": CROPTYPE_CLASSES,
}


class DatasetError(ValueError):
    """Raised when a record or a dataset violates the data model."""

    def __init__(self, reason: str, sample_id: str | None = None):
        self.sample_id = sample_id
        self.reason = reason
        msg = reason if sample_id is None else f"record {sample_id!r}: {reason}"
        super().__init__(msg)


@dataclass(frozen=True)
class BandGroup:
    name: str
    bands: tuple[str, ...]
    temporality: str  # "dynamic" | "static"


@dataclass(frozen=True)
class BandSchema:
    groups: tuple[BandGroup, ...]

    def __post_init__(self):
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate band group names: {names}")
        for g in self.groups:
            if g.temporality not in ("dynamic", "static"):
                raise ValueError(f"group {g.name}: temporality must be dynamic or static")
            if len(set(g.bands)) != len(g.bands) or not g.bands:
                raise ValueError(f"group {g.name}: band names must be unique and nonempty")
        if not any(g.temporality == "dynamic" for g in self.groups):
            raise ValueError("schema needs at least one dynamic group")

    @property
    def dynamic_groups(self) -> tuple[BandGroup, ...]:
        return tuple(g for g in self.groups if g.temporality == "dynamic")

    @property
    def static_groups(self) -> tuple[BandGroup, ...]:
        return tuple(g for g in self.groups if g.temporality == "static")

    @property
    def dynamic_bands(self) -> tuple[str, ...]:
        return tuple(b for g in self.dynamic_groups for b in g.bands)

    @property
    def static_bands(self) -> tuple[str, ...]:
        return tuple(b for g in self.static_groups for b in g.bands)

    def group_slices(self, temporality: str = "dynamic") -> dict[str, slice]:
        """Column slice of each group inside the flattened dynamic (or static) band axis."""
        out, start = {}, 0
        for g in self.groups:
            if g.temporality != temporality:
                continue
            out[g.name] = slice(start, start + len(g.bands))
            start += len(g.bands)
        return out

    def band_index(self, band: str) -> int:
        return self.dynamic_bands.index(band)

    def to_dict(self) -> dict:
        return {"groups": [[g.name, list(g.bands), g.temporality] for g in self.groups]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BandSchema":
        return cls(tuple(BandGroup(n, tuple(b), t) for n, b, t in d["groups"]))


DEFAULT_SCHEMA = BandSchema(
    (
        BandGroup("S1", ("VV", "VH"), "dynamic"),
        BandGroup(
            "S2",
            ("B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B11", "B12"),
            "dynamic",
        ),
        BandGroup("DEM", ("elevation_m", "slope_deg"), "static"),
        BandGroup("METEO", ("temperature_mean_C", "precipitation_mm"), "dynamic"),
    )
)


def country_names() -> dict[str, str]:
    """ISO alpha-2 code -> English country name."""
    text = resources.files("fmdeploy").joinpath("resources/countries.json").read_text("utf-8")
    return json.loads(text)


def month_starts(first: dt.date, n: int = N_TIMESTEPS) -> tuple[dt.date, ...]:
    out = []
    y, m = first.year, first.month
    for _ in range(n):
        out.append(dt.date(y, m, 1))
        m += 1
        if m == 13:
            y, m = y + 1, 1
    return tuple(out)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PixelSample:
    sample_id: str
    lat: float
    lon: float
    country: str
    year: int
    source: str
    timestamps: tuple[dt.date, ...]
    dynamic: np.ndarray  # [T, n_dynamic_bands], NaN where masked
    static: np.ndarray  # [n_static_bands]
    mask: np.ndarray  # [T, n_dynamic_bands] bool, True = observed
    label_cropland: str = UNKNOWN
    label_croptype: str = UNKNOWN

    def __post_init__(self):
        sid = self.sample_id
        if not -90 <= self.lat <= 90 or not -180 <= self.lon <= 180:
            raise DatasetError("lat/lon out of range", sid)
        if len(self.timestamps) != N_TIMESTEPS:
            raise DatasetError(f"expected {N_TIMESTEPS} timesteps, got {len(self.timestamps)}", sid)
        if tuple(self.timestamps) != month_starts(self.timestamps[0]) or self.timestamps[0].day != 1:
            raise DatasetError("timestamps must be consecutive month starts", sid)
        dyn = np.array(self.dynamic, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if dyn.ndim != 2 or dyn.shape[0] != N_TIMESTEPS:
            raise DatasetError(f"expected {N_TIMESTEPS} timesteps, got {dyn.shape[0] if dyn.ndim else 0}", sid)
        if mask.shape != dyn.shape:
            raise DatasetError("mask shape does not match values", sid)
        if np.isnan(dyn[mask]).any():
            raise DatasetError("observed value is missing", sid)
        dyn[~mask] = np.nan
        static = np.array(self.static, dtype=np.float64)
        if np.isnan(static).any():
            raise DatasetError("static band value is missing", sid)
        if self.label_cropland not in (*CROPLAND_CLASSES, UNKNOWN):
            raise DatasetError(f"invalid label_cropland {self.label_cropland!r}", sid)
        if self.label_croptype not in (*CROPTYPE_CLASSES, UNKNOWN):
            raise DatasetError(f"invalid label_croptype {self.label_croptype!r}", sid)
        if self.label_croptype != UNKNOWN and self.label_cropland != "crop":
            raise DatasetError(
                f"label_croptype={self.label_croptype} requires label_cropland=crop", sid
            )
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        object.__setattr__(self, "dynamic", _readonly(dyn))
        object.__setattr__(self, "static", _readonly(static))
        object.__setattr__(self, "mask", _readonly(mask))

    @property
    def months(self) -> np.ndarray:
        """Month of year (0-11) of each timestep."""
        return np.array([t.month - 1 for t in self.timestamps], dtype=np.int64)

    def label(self, task: str) -> str:
        return self.label_cropland if task == "cropland_binary" else self.label_croptype


@dataclass(frozen=True)
class SampleArrays:
    """Stacked numeric view of a dataset, the form the models consume."""

    dynamic: np.ndarray  # [N, T, B] (NaN where masked)
    mask: np.ndarray  # [N, T, B]
    static: np.ndarray  # [N, S]
    months: np.ndarray  # [N, T] int
    latlon: np.ndarray  # [N, 2]

    def __len__(self) -> int:
        return self.dynamic.shape[0]

    def take(self, idx) -> "SampleArrays":
        return SampleArrays(
            self.dynamic[idx], self.mask[idx], self.static[idx], self.months[idx], self.latlon[idx]
        )


@dataclass(frozen=True)
class Dataset:
    schema: BandSchema
    samples: tuple[PixelSample, ...]
    taxonomy_version: str = "v1"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen = set()
        n_dyn, n_static = len(self.schema.dynamic_bands), len(self.schema.static_bands)
        for s in self.samples:
            if s.sample_id in seen:
                raise DatasetError("duplicate sample_id", s.sample_id)
            seen.add(s.sample_id)
            if s.dynamic.shape[1] != n_dyn or s.static.shape != (n_static,):
                raise DatasetError("sample does not conform to band schema", s.sample_id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[PixelSample]:
        return iter(self.samples)

    def __getitem__(self, sample_id: str) -> PixelSample:
        return self.samples[self.index[sample_id]]

    @cached_property
    def ids(self) -> tuple[str, ...]:
        return tuple(s.sample_id for s in self.samples)

    @cached_property
    def index(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.ids)}

    @cached_property
    def arrays(self) -> SampleArrays:
        n, t = len(self.samples), N_TIMESTEPS
        nb, ns = len(self.schema.dynamic_bands), len(self.schema.static_bands)
        if n == 0:
            return SampleArrays(
                np.zeros((0, t, nb)), np.zeros((0, t, nb), bool), np.zeros((0, ns)),
                np.zeros((0, t), np.int64), np.zeros((0, 2)),
            )
        return SampleArrays(
            _readonly(np.stack([s.dynamic for s in self.samples])),
            _readonly(np.stack([s.mask for s in self.samples])),
            _readonly(np.stack([s.static for s in self.samples])),
            _readonly(np.stack([s.months for s in self.samples])),
            _readonly(np.array([[s.lat, s.lon] for s in self.samples], dtype=np.float64)),
        )

    def subset(self, ids: Iterable[str]) -> "Dataset":
        """Samples with the given ids, in the order given."""
        idx = self.index
        return Dataset(self.schema, tuple(self.samples[idx[i]] for i in ids), self.taxonomy_version)

    def filter(self, pred) -> "Dataset":
        return Dataset(self.schema, tuple(s for s in self.samples if pred(s)), self.taxonomy_version)

    def labels(self, task: str) -> list[str]:
        return [s.label(task) for s in self.samples]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for line in iter_jsonl(self):
            h.update(line.encode("utf-8"))
        return h.hexdigest()


# --- JSON-lines I/O -----------------------------------------------------------------


def _num(x: float):
    return None if math.isnan(x) else float(x)


def sample_to_record(sample: PixelSample, schema: BandSchema) -> dict:
    dyn_slices = schema.group_slices("dynamic")
    st_slices = schema.group_slices("static")
    bands, mask = {}, {}
    for g in schema.groups:
        if g.temporality == "dynamic":
            sl = dyn_slices[g.name]
            bands[g.name] = [[_num(v) for v in row] for row in sample.dynamic[:, sl]]
        else:
            bands[g.name] = [_num(v) for v in sample.static[st_slices[g.name]]]
    for g in schema.dynamic_groups:
        mask[g.name] = [[bool(v) for v in row] for row in sample.mask[:, dyn_slices[g.name]]]
    return {
        "sample_id": sample.sample_id,
        "lat": float(sample.lat),
        "lon": float(sample.lon),
        "country": sample.country,
        "year": int(sample.year),
        "source": sample.source,
        "timestamps": [t.isoformat() for t in sample.timestamps],
        "bands": bands,
        "mask": mask,
        "label_cropland": sample.label_cropland,
        "label_croptype": sample.label_croptype,
    }


def record_to_sample(rec: Mapping, schema: BandSchema) -> PixelSample:
    sid = rec.get("sample_id")
    if not isinstance(sid, str):
        raise DatasetError("missing or non-string sample_id")
    try:
        bands, mask_rec = rec["bands"], rec["mask"]
        unknown = set(bands) - {g.name for g in schema.groups}
        if unknown:
            raise DatasetError(f"unknown band group(s) {sorted(unknown)}", sid)
        timestamps = [dt.date.fromisoformat(t) for t in rec["timestamps"]]
        if len(timestamps) != N_TIMESTEPS:
            raise DatasetError(f"expected {N_TIMESTEPS} timesteps, got {len(timestamps)}", sid)
        dyn_cols, mask_cols, static_vals = [], [], []
        for g in schema.groups:
            if g.name not in bands:
                raise DatasetError(f"missing band group {g.name}", sid)
            if g.temporality == "static":
                vals = bands[g.name]
                if len(vals) != len(g.bands):
                    raise DatasetError(f"group {g.name}: expected {len(g.bands)} bands", sid)
                static_vals.extend(vals)
                continue
            rows, mrows = bands[g.name], mask_rec[g.name]
            if len(rows) != N_TIMESTEPS or len(mrows) != N_TIMESTEPS:
                raise DatasetError(f"group {g.name}: expected {N_TIMESTEPS} timesteps, got {len(rows)}", sid)
            if any(len(r) != len(g.bands) for r in rows) or any(len(r) != len(g.bands) for r in mrows):
                raise DatasetError(f"group {g.name}: expected {len(g.bands)} bands per timestep", sid)
            dyn_cols.append(np.array([[np.nan if v is None else v for v in r] for r in rows], dtype=np.float64))
            mask_cols.append(np.array(mrows, dtype=bool))
        dyn = np.concatenate(dyn_cols, axis=1)
        m = np.concatenate(mask_cols, axis=1)
        if np.isnan(dyn[m]).any():
            raise DatasetError("null value with mask=true", sid)
        return PixelSample(
            sample_id=sid,
            lat=float(rec["lat"]),
            lon=float(rec["lon"]),
            country=str(rec["country"]),
            year=int(rec["year"]),
            source=str(rec["source"]),
            timestamps=tuple(timestamps),
            dynamic=dyn,
            static=np.array(static_vals, dtype=np.float64),
            mask=m,
            label_cropland=rec.get("label_cropland", UNKNOWN),
            label_croptype=rec.get("label_croptype", UNKNOWN),
        )
    except DatasetError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed record ({type(e).__name__}: {e})", sid) from e


def iter_jsonl(dataset: Dataset) -> Iterator[str]:
    for s in dataset.samples:
        yield json.dumps(sample_to_record(s, dataset.schema), separators=(",", ":"), ensure_ascii=False) + "\n"


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(iter_jsonl(dataset))


def load_dataset(path: str | Path, schema: BandSchema = DEFAULT_SCHEMA) -> Dataset:
    """Read and validate a JSON-lines dataset; the first bad record aborts the load."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    samples, seen = [], set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(rec, dict):
                raise DatasetError(f"line {lineno}: record is not an object")
            s = record_to_sample(rec, schema)
            if s.sample_id in seen:
                raise DatasetError("duplicate sample_id", s.sample_id)
            seen.add(s.sample_id)
            samples.append(s)
    return Dataset(schema, tuple(samples))


# --- compositing ---------------------------------------------------------------------


@dataclass(frozen=True)
class Observation:
    """One raw acquisition of a pixel: band values plus a cloud score in [0, 1]."""

    timestamp: dt.datetime | dt.date
    values: tuple[float, ...]
    cloud_score: float


def composite(
    observations: Sequence[Observation],
    mode: str,
    window: tuple[int, int],
    cloud_threshold: float = CLOUD_THRESHOLD,
) -> tuple[np.ndarray, np.ndarray]:
    """Collapse the observations falling in calendar month ``window=(year, month)``.

    ``cloud_free_only`` averages observations with cloud score <= ``cloud_threshold``;
    ``least_cloudy`` takes the single observation with the lowest cloud score
    (earliest timestamp wins ties). Returns ``(values, mask)`` per band.
    """
    if mode not in ("cloud_free_only", "least_cloudy"):
        raise ValueError(f"unknown compositing mode {mode!r}")
    year, month = window
    in_window = [o for o in observations if o.timestamp.year == year and o.timestamp.month == month]
    n_bands = len(observations[0].values) if observations else 0
    empty = np.full(n_bands, np.nan), np.zeros(n_bands, dtype=bool)
    if not in_window:
        return empty
    if mode == "cloud_free_only":
        clear = [o for o in in_window if o.cloud_score <= cloud_threshold]
        if not clear:
            return empty
        vals = np.mean(np.array([o.values for o in clear], dtype=np.float64), axis=0)
    else:
        best = min(in_window, key=lambda o: (o.cloud_score, _as_datetime(o.timestamp)))
        vals = np.array(best.values, dtype=np.float64)
    return vals, np.ones(n_bands, dtype=bool)


def _as_datetime(t) -> dt.datetime:
    return t if isinstance(t, dt.datetime) else dt.datetime(t.year, t.month, t.day)


def composite_series(
    observations: Sequence[Observation],
    mode: str,
    first_month: dt.date,
    n_months: int = N_TIMESTEPS,
    cloud_threshold: float = CLOUD_THRESHOLD,
) -> tuple[np.ndarray, np.ndarray]:
    """Monthly composites over ``n_months`` consecutive months: ``([T, B] values, [T, B] mask)``."""
    rows = [
        composite(observations, mode, (d.year, d.month), cloud_threshold)
        for d in month_starts(first_month, n_months)
    ]
    return np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows])


# --- normalization -------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    dynamic_shift: np.ndarray
    dynamic_scale: np.ndarray
    static_shift: np.ndarray
    static_scale: np.ndarray

    def __post_init__(self):
        for name in ("dynamic_shift", "dynamic_scale", "static_shift", "static_scale"):
            object.__setattr__(self, name, _readonly(np.array(getattr(self, name), dtype=np.float64)))
        if (self.dynamic_scale <= 0).any() or (self.static_scale <= 0).any():
            raise ValueError("normalization scale must be > 0 for every band")

    def apply(self, arrays: SampleArrays) -> SampleArrays:
        dyn = np.where(arrays.mask, (arrays.dynamic - self.dynamic_shift) / self.dynamic_scale, np.nan)
        static = (arrays.static - self.static_shift) / self.static_scale
        return SampleArrays(dyn, arrays.mask, static, arrays.months, arrays.latlon)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("dynamic_shift", "dynamic_scale", "static_shift", "static_scale")}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        return cls(**{k: np.array(v) for k, v in d.items()})


def compute_normalization_stats(dataset: Dataset, eps_scale: float = EPS_SCALE) -> NormStats:
    """Per-band mean and population std over observed values, std floored at ``eps_scale``."""
    a = dataset.arrays
    counts = a.mask.sum(axis=(0, 1))
    if len(dataset) == 0 or (counts == 0).any():
        empty = [b for b, c in zip(dataset.schema.dynamic_bands, counts) if c == 0]
        raise ValueError(f"bands with no unmasked observations: {empty or 'all (empty dataset)'}")
    vals = np.where(a.mask, a.dynamic, 0.0)
    mean = vals.sum(axis=(0, 1)) / counts
    var = (np.where(a.mask, a.dynamic - mean, 0.0) ** 2).sum(axis=(0, 1)) / counts
    s_mean = a.static.mean(axis=0)
    s_std = a.static.std(axis=0)
    return NormStats(mean, np.maximum(np.sqrt(var), eps_scale), s_mean, np.maximum(s_std, eps_scale))


def _replace_values(dataset: Dataset, dyn: np.ndarray, static: np.ndarray) -> Dataset:
    out = []
    for i, s in enumerate(dataset.samples):
        out.append(
            PixelSample(
                s.sample_id, s.lat, s.lon, s.country, s.year, s.source, s.timestamps,
                dyn[i], static[i], s.mask, s.label_cropland, s.label_croptype,
            )
        )
    return Dataset(dataset.schema, tuple(out), dataset.taxonomy_version)


def normalize(dataset: Dataset, stats: NormStats) -> Dataset:
    """Apply ``(value - shift) / scale`` at observed positions; masks are untouched."""
    a = stats.apply(dataset.arrays)
    return _replace_values(dataset, a.dynamic, a.static)


def denormalize(dataset: Dataset, stats: NormStats) -> Dataset:
    a = dataset.arrays
    dyn = np.where(a.mask, a.dynamic * stats.dynamic_scale + stats.dynamic_shift, np.nan)
    static = a.static * stats.static_scale + stats.static_shift
    return _replace_values(dataset, dyn, static)
