"""Dense patch inference, PNG map rendering and the on-disk patch format.

Patch file layout (all integers little-endian)::

    b"FMPATCH1"                       8-byte magic
    uint32 header_length
    header_length bytes of UTF-8 JSON (shape, geotransform, timestamps, schema, labels)
    float32[H, W, T, B] dynamic       NaN where masked
    uint8[H, W, T, B] mask            1 = observed
    float32[H, W, S] static
"""
from __future__ import annotations

import datetime as dt
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image, PngImagePlugin

from fmdeploy.adapt import TrainedClassifier, predict_arrays
from fmdeploy.data import DEFAULT_SCHEMA, UNKNOWN, BandSchema, SampleArrays
from fmdeploy.metrics import F1Result, f1_scores
from fmdeploy.synth import RasterPatch

PATCH_MAGIC = b"FMPATCH1"
PNG_META_KEY = "fmdeploy"

PALETTES = {
    "cropland_binary": {
        "non_crop": (205, 205, 190),
        "crop": (225, 160, 20),
    },
    "croptype_multiclass": {
        "maize": (240, 200, 0),
        "wheat": (170, 110, 40),
        "barley": (230, 140, 100),
        "soybeans": (40, 150, 60),
        "millet_sorghum": (150, 70, 150),
        "sunflower": (250, 110, 0),
        "rapeseed": (200, 230, 60),
        "other_crop": (120, 120, 200),
    },
}


@dataclass(frozen=True, eq=False)
class ClassRaster:
    classes: tuple[str, ...]
    index: np.ndarray  # [H, W] int
    confidence: np.ndarray  # [H, W] max class probability
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.index.shape != self.confidence.shape or self.index.ndim != 2:
            raise ValueError("index and confidence must be matching 2-D arrays")
        if self.index.size and (self.index.min() < 0 or self.index.max() >= len(self.classes)):
            raise ValueError("class index outside the class list")

    @property
    def shape(self) -> tuple[int, int]:
        return self.index.shape

    def labels(self) -> np.ndarray:
        return np.array(self.classes, dtype=object)[self.index]

    def equals(self, other: "ClassRaster") -> bool:
        return (
            self.classes == other.classes
            and np.array_equal(self.index, other.index)
            and np.array_equal(self.confidence, other.confidence)
        )


def patch_arrays(patch: RasterPatch, rows: slice = slice(None), cols: slice = slice(None)) -> SampleArrays:
    """Row-major pixel stack of a (sub-)window of the patch."""
    dyn = patch.dynamic[rows, cols]
    h, w = dyn.shape[:2]
    t, b = dyn.shape[2:]
    months = np.array([d.month - 1 for d in patch.timestamps], dtype=np.int64)
    return SampleArrays(
        dyn.reshape(h * w, t, b),
        patch.mask[rows, cols].reshape(h * w, t, b),
        patch.static[rows, cols].reshape(h * w, -1),
        np.broadcast_to(months, (h * w, t)).copy(),
        patch.pixel_latlon()[rows, cols].reshape(h * w, 2),
    )


def predict_patch(classifier: TrainedClassifier, patch: RasterPatch, tile_size: int = 64) -> ClassRaster:
    """Pixel-wise prediction over ``tile_size`` x ``tile_size`` tiles, merged in row-major tile order."""
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    schema = classifier.schema
    if patch.dynamic.shape[-1] != len(schema.dynamic_bands) or patch.static.shape[-1] != len(schema.static_bands):
        raise ValueError(
            f"patch bands ({patch.dynamic.shape[-1]} dynamic, {patch.static.shape[-1]} static) "
            f"do not match the classifier schema ({len(schema.dynamic_bands)}, {len(schema.static_bands)})"
        )
    h, w = patch.shape
    index = np.zeros((h, w), dtype=np.int64)
    conf = np.zeros((h, w), dtype=np.float64)
    for r0 in range(0, h, tile_size):
        for c0 in range(0, w, tile_size):
            rs, cs = slice(r0, min(r0 + tile_size, h)), slice(c0, min(c0 + tile_size, w))
            pred = predict_arrays(classifier, patch_arrays(patch, rs, cs))
            th, tw = rs.stop - rs.start, cs.stop - cs.start
            index[rs, cs] = pred.index.reshape(th, tw)
            conf[rs, cs] = pred.probs.max(axis=1).reshape(th, tw)
    prov = {"patch_id": patch.patch_id, "model": classifier.provenance.get("model_id", classifier.kind), "task": classifier.task}
    return ClassRaster(tuple(classifier.classes), index, conf, prov)


# --- rendering -----------------------------------------------------------------------


def render_patch(raster: ClassRaster, palette: Mapping[str, Sequence[int]], scale: int = 1, legend: bool = False) -> bytes:
    """PNG bytes, one palette colour per class; ``legend`` appends a strip of class swatches."""
    missing = [c for c in raster.classes if c not in palette]
    if missing:
        raise KeyError(f"palette has no colour for class(es): {', '.join(missing)}")
    if scale < 1:
        raise ValueError("scale must be >= 1")
    lut = np.array([palette[c] for c in raster.classes], dtype=np.uint8).reshape(-1, 3)
    img = lut[raster.index]
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    h, w = raster.shape
    if legend:
        sw = max(w * scale // len(raster.classes), 1)
        strip = np.full((max(scale, 4), w * scale, 3), 255, dtype=np.uint8)
        for i in range(len(raster.classes)):
            strip[:, i * sw : (i + 1) * sw] = lut[i]
        img = np.concatenate([img, strip], axis=0)
    info = PngImagePlugin.PngInfo()
    meta = {"classes": list(raster.classes), "rows": h, "cols": w, "scale": scale}
    info.add_text(PNG_META_KEY, json.dumps(meta, sort_keys=True))
    buf = io.BytesIO()
    Image.fromarray(img, mode="RGB").save(buf, format="PNG", pnginfo=info, optimize=False, compress_level=9)
    return buf.getvalue()


def decode_patch_image(png: bytes, palette: Mapping[str, Sequence[int]]) -> ClassRaster:
    """Inverse of ``render_patch`` through the palette (confidence is not stored and comes back as NaN)."""
    img = Image.open(io.BytesIO(png))
    meta = json.loads(img.text[PNG_META_KEY])
    h, w, s = meta["rows"], meta["cols"], meta["scale"]
    px = np.asarray(img.convert("RGB"))[: h * s : s, : w * s : s]
    classes = tuple(meta["classes"])
    inverse = {tuple(int(v) for v in palette[c]): i for i, c in enumerate(classes)}
    if len(inverse) != len(classes):
        raise ValueError("palette colours are not distinct; image cannot be decoded")
    index = np.array([[inverse[tuple(int(v) for v in p)] for p in row] for row in px], dtype=np.int64)
    return ClassRaster(classes, index, np.full((h, w), np.nan))


def patch_f1(raster: ClassRaster, ground_truth: np.ndarray, exclude_from_macro: Sequence[str] = ()) -> F1Result:
    """F1 over the labelled pixels only (``unknown`` ground truth is skipped)."""
    gt = np.asarray(ground_truth, dtype=object)
    if gt.shape != raster.shape:
        raise ValueError(f"ground truth shape {gt.shape} != raster shape {raster.shape}")
    keep = gt != UNKNOWN
    if not keep.any():
        raise ValueError("patch has no labelled pixels")
    preds = raster.labels()[keep]
    return f1_scores(list(preds), list(gt[keep]), raster.classes, exclude_from_macro)


def write_map_outputs(
    raster: ClassRaster,
    out_dir: str | Path,
    name: str,
    ground_truth: np.ndarray | None = None,
    palette: Mapping[str, Sequence[int]] | None = None,
    scale: int = 8,
) -> dict:
    """Write ``<name>.png`` plus a ``<name>.json`` sidecar (provenance, class counts, patch F1)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    palette = palette or PALETTES[raster.provenance.get("task", "cropland_binary")]
    (out / f"{name}.png").write_bytes(render_patch(raster, palette, scale=scale, legend=True))
    counts = np.bincount(raster.index.ravel(), minlength=len(raster.classes))
    side = {
        "provenance": raster.provenance,
        "shape": list(raster.shape),
        "classes": list(raster.classes),
        "class_counts": {c: int(n) for c, n in zip(raster.classes, counts)},
        "mean_confidence": float(raster.confidence.mean()),
        "palette": {c: list(palette[c]) for c in raster.classes},
    }
    if ground_truth is not None and (np.asarray(ground_truth, dtype=object) != UNKNOWN).any():
        res = patch_f1(raster, ground_truth)
        side["patch_f1"] = {"per_class": res.f1, "support": res.support, "macro": res.macro}
    (out / f"{name}.json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return side


# --- patch file format ---------------------------------------------------------------


def _labels_or_none(a):
    return None if a is None else [[str(v) for v in row] for row in a]


def write_patch(patch: RasterPatch, path: str | Path, schema: BandSchema = DEFAULT_SCHEMA) -> None:
    h, w, t, b = patch.dynamic.shape
    header = {
        "patch_id": patch.patch_id,
        "origin": list(patch.origin),
        "pixel_size": patch.pixel_size,
        "timestamps": [d.isoformat() for d in patch.timestamps],
        "shape": [h, w, t, b, patch.static.shape[-1]],
        "schema": schema.to_dict(),
        "country": patch.country,
        "year": patch.year,
        "labels_cropland": _labels_or_none(patch.labels_cropland),
        "labels_croptype": _labels_or_none(patch.labels_croptype),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    dyn = np.where(patch.mask, patch.dynamic, np.nan).astype("<f4")
    with open(path, "wb") as f:
        f.write(PATCH_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        f.write(dyn.tobytes())
        f.write(patch.mask.astype(np.uint8).tobytes())
        f.write(patch.static.astype("<f4").tobytes())


def read_patch(path: str | Path) -> tuple[RasterPatch, BandSchema]:
    raw = Path(path).read_bytes()
    if raw[:8] != PATCH_MAGIC:
        raise ValueError(f"{path}: not a patch file (bad magic)")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    h, w, t, b, s = header["shape"]
    off = 12 + n
    sizes = (h * w * t * b * 4, h * w * t * b, h * w * s * 4)
    if len(raw) != off + sum(sizes):
        raise ValueError(f"{path}: truncated or oversized patch payload")
    dyn = np.frombuffer(raw, "<f4", h * w * t * b, off).reshape(h, w, t, b).astype(np.float64)
    off += sizes[0]
    mask = np.frombuffer(raw, np.uint8, h * w * t * b, off).reshape(h, w, t, b).astype(bool)
    off += sizes[1]
    static = np.frombuffer(raw, "<f4", h * w * s, off).reshape(h, w, s).astype(np.float64)
    lab = lambda k: None if header[k] is None else np.array(header[k], dtype=object)  # noqa: E731
    patch = RasterPatch(
        patch_id=header["patch_id"],
        origin=tuple(header["origin"]),
        pixel_size=header["pixel_size"],
        timestamps=tuple(dt.date.fromisoformat(d) for d in header["timestamps"]),
        dynamic=dyn,
        mask=mask,
        static=static,
        country=header["country"],
        year=header["year"],
        labels_cropland=lab("labels_cropland"),
        labels_croptype=lab("labels_croptype"),
    )
    return patch, BandSchema.from_dict(header["schema"])
