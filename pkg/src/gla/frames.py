"""RA frame data model, normalization, colormaps, resizing and persistence.

Frames are stored on disk as three files sharing one stem::

    <stem>.f32   little-endian float32, C-order pixel payload
    <stem>.json  sidecar with shape, label, ground truth and provenance
    <stem>.png   8-bit preview for humans (never read back)
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import FrameLoadError, StructuralError, ValidationError

SCHEMA_VERSION = 1
LABELS = ("empty", "person")
LUT_NAME = "viridis-256"
_LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass(frozen=True)
class GroundTruth:
    """Presence label and, for person frames, the blob location in RA bins."""

    label: str
    blob_center: tuple[float, float] | None = None
    blob_radius_bins: float = 1.0

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValidationError(f"label must be one of {LABELS}, got {self.label!r}")
        if (self.label == "person") != (self.blob_center is not None):
            raise ValidationError("blob_center must be given exactly when label is 'person'")
        if not self.blob_radius_bins > 0:
            raise ValidationError("blob_radius_bins must be positive")

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "blob_center": None if self.blob_center is None else [float(v) for v in self.blob_center],
            "blob_radius_bins": float(self.blob_radius_bins),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        center = d.get("blob_center")
        return cls(
            label=d["label"],
            blob_center=None if center is None else (float(center[0]), float(center[1])),
            blob_radius_bins=float(d.get("blob_radius_bins", 1.0)),
        )


@dataclass(frozen=True)
class RAFrame:
    """One Range-Angle image, pixels shaped [C, H, W] (rows are range, columns angle)."""

    pixels: np.ndarray
    source_id: str = ""
    label: str | None = None
    ground_truth: GroundTruth | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim == 2:
            pixels = pixels[None]
        if pixels.ndim != 3 or pixels.shape[0] not in (1, 3):
            raise StructuralError(f"pixels must be [C, H, W] with C in (1, 3), got {pixels.shape}")
        if not np.all(np.isfinite(pixels)):
            raise ValidationError("frame contains non-finite values")
        if self.label is not None and self.label not in LABELS:
            raise ValidationError(f"label must be one of {LABELS}, got {self.label!r}")
        pixels = pixels.copy()
        pixels.flags.writeable = False
        object.__setattr__(self, "pixels", pixels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape)

    @property
    def hw(self) -> tuple[int, int]:
        return tuple(self.pixels.shape[1:])

    def replace(self, **changes) -> "RAFrame":
        d = {
            "pixels": self.pixels,
            "source_id": self.source_id,
            "label": self.label,
            "ground_truth": self.ground_truth,
            "meta": dict(self.meta),
        }
        d.update(changes)
        return RAFrame(**d)


def normalize_frame(raw) -> np.ndarray:
    """Instance-wise min-max map of ``raw`` onto [0, 1].

    Constant frames map to 0.5 everywhere.
    """
    x = np.asarray(raw, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("cannot normalize an empty array")
    if not np.all(np.isfinite(x)):
        raise ValidationError("frame contains NaN or Inf")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full(x.shape, 0.5, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


def _read_lut(name: str) -> np.ndarray:
    text = resources.files("gla.data").joinpath(name).read_text()
    rows = [line for line in text.splitlines() if line and not line.startswith("#")]
    lut = np.array([[float(v) for v in row.split(",")] for row in rows])
    if lut.shape != (256, 3):
        raise RuntimeError(f"{name}: expected a 256x3 table, got {lut.shape}")
    lut.flags.writeable = False
    return lut


RA_LUT = _read_lut("ra_lut.csv")
HEAT_LUT = _read_lut("heat_lut.csv")


def lut_lookup(gray, lut: np.ndarray = RA_LUT) -> np.ndarray:
    """Piecewise-linear lookup of gray levels in [0, 1]; returns [..., 3]."""
    g = np.clip(np.asarray(gray, dtype=np.float64), 0.0, 1.0)
    pos = g * 255.0
    lo = np.minimum(np.floor(pos).astype(np.int64), 254)
    frac = (pos - lo)[..., None]
    return lut[lo] * (1.0 - frac) + lut[lo + 1] * frac


def luminance(rgb) -> np.ndarray:
    return np.asarray(rgb) @ _LUMA


def apply_colormap(gray, mode: str = "lut") -> np.ndarray:
    """Expand a [1, H, W] (or [H, W]) gray frame to [3, H, W].

    ``mode="lut"`` uses the shipped 256-entry table, ``mode="replicate"``
    copies the gray channel three times.
    """
    g = np.asarray(gray, dtype=np.float32)
    if g.ndim == 3:
        if g.shape[0] != 1:
            raise StructuralError(f"expected a single channel, got {g.shape}")
        g = g[0]
    if mode == "replicate":
        return np.repeat(g[None], 3, axis=0)
    if mode == "lut":
        return np.moveaxis(lut_lookup(g), -1, 0).astype(np.float32)
    raise ValidationError(f"unknown colormap mode {mode!r}")


def resize_frame(frame, target_hw: tuple[int, int]):
    """Bilinear resize (half-pixel centers) of a frame or a [C, H, W] / [H, W] array."""
    th, tw = int(target_hw[0]), int(target_hw[1])
    if th < 8 or tw < 8:
        raise ValidationError(f"target size must be at least 8x8, got {target_hw}")
    if isinstance(frame, RAFrame):
        return frame.replace(pixels=resize_frame(frame.pixels, target_hw))
    arr = np.asarray(frame, dtype=np.float32)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.shape[1:] == (th, tw):
        out = arr.copy()
    else:
        t = torch.tensor(arr)[None]
        out = F.interpolate(t, size=(th, tw), mode="bilinear", align_corners=False)[0].numpy()
        # float32 rounding can overshoot the convex hull by an ulp
        out = np.clip(out, arr.min(), arr.max())
    return out[0] if squeeze else out


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, rgb_or_gray) -> None:
    """Write an 8-bit PNG from a float image in [0, 1] ([H, W] or [H, W, 3])."""
    Image.fromarray(to_uint8(rgb_or_gray)).save(path, format="PNG", optimize=False)


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".f32", ".json", ".png") else p


def save_frame(path, frame: RAFrame) -> Path:
    """Persist ``frame`` under ``path`` (a stem); returns the stem."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    gt = frame.ground_truth
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "shape": list(frame.shape),
        "dtype": "<f4",
        "label": frame.label,
        "source_id": frame.source_id,
        "blob_center": None if gt is None or gt.blob_center is None else list(gt.to_dict()["blob_center"]),
        "blob_radius_bins": None if gt is None else float(gt.blob_radius_bins),
        "seed": frame.meta.get("seed"),
        "mode": frame.meta.get("mode"),
        "params_digest": frame.meta.get("params_digest"),
        "normalization": frame.meta.get("normalization"),
        "colormap": frame.meta.get("colormap", LUT_NAME),
    }
    extra = {k: v for k, v in frame.meta.items() if k not in sidecar}
    if extra:
        sidecar["extra"] = extra
    stem.with_suffix(".f32").write_bytes(frame.pixels.astype("<f4").tobytes(order="C"))
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    preview = frame.pixels[0] if frame.shape[0] == 1 else np.moveaxis(frame.pixels, 0, -1)
    write_png(stem.with_suffix(".png"), preview)
    return stem


_REQUIRED_FIELDS = ("schema_version", "shape", "label", "blob_center", "blob_radius_bins", "seed", "mode",
                    "params_digest")


def load_frame(path) -> RAFrame:
    stem = _stem(path)
    side_path = stem.with_suffix(".json")
    try:
        sidecar = json.loads(side_path.read_text())
    except FileNotFoundError as exc:
        raise FrameLoadError(f"{side_path}: sidecar missing") from exc
    except json.JSONDecodeError as exc:
        raise FrameLoadError(f"{side_path}: sidecar is not valid JSON ({exc})") from exc
    for name in _REQUIRED_FIELDS:
        if name not in sidecar:
            raise FrameLoadError(f"{side_path}: missing field '{name}'")
    if sidecar["schema_version"] != SCHEMA_VERSION:
        raise FrameLoadError(f"{side_path}: unsupported field 'schema_version'={sidecar['schema_version']}")
    shape = tuple(int(v) for v in sidecar["shape"])
    label = sidecar["label"]
    if label == "person" and sidecar["blob_center"] is None:
        raise ValidationError(f"{side_path}: field 'blob_center' is required for label 'person'")

    raw_path = stem.with_suffix(".f32")
    try:
        payload = raw_path.read_bytes()
    except FileNotFoundError as exc:
        raise FrameLoadError(f"{raw_path}: payload missing") from exc
    expected = 4 * math.prod(shape)
    if len(payload) != expected:
        raise FrameLoadError(f"{raw_path}: size mismatch, expected {expected} bytes for shape {shape}, "
                             f"found {len(payload)}")
    pixels = np.frombuffer(payload, dtype="<f4").reshape(shape)

    gt = None
    if label is not None:
        gt = GroundTruth.from_dict({
            "label": label,
            "blob_center": sidecar["blob_center"],
            "blob_radius_bins": sidecar["blob_radius_bins"] or 1.0,
        })
    meta = {k: sidecar.get(k) for k in ("seed", "mode", "params_digest", "normalization", "colormap")}
    meta.update(sidecar.get("extra", {}))
    return RAFrame(pixels=pixels, source_id=sidecar.get("source_id", stem.name), label=label,
                   ground_truth=gt, meta=meta)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- dataset manifest ---------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    frame_path: str  # stem, relative to the manifest directory
    label: str
    ground_truth: GroundTruth
    seed: int
    mode: str
    split: str = "train"

    @property
    def frame_id(self) -> str:
        return Path(self.frame_path).name

    def to_dict(self) -> dict:
        return {
            "frame_path": self.frame_path,
            "label": self.label,
            "ground_truth": self.ground_truth.to_dict(),
            "seed": int(self.seed),
            "mode": self.mode,
        }


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    params_digest: str
    params: dict = field(default_factory=dict)
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    info: dict = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        paths = [e.frame_path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValidationError("manifest frame paths are not unique")
        if not math.isclose(sum(self.split_fractions), 1.0, abs_tol=1e-9):
            raise ValidationError(f"split fractions must sum to 1, got {self.split_fractions}")
        for e in self.entries:
            if e.label == "person" and e.ground_truth.blob_center is None:
                raise ValidationError(f"{e.frame_path}: person entry without blob center")
            if e.split not in SPLITS:
                raise ValidationError(f"{e.frame_path}: unknown split {e.split!r}")

    @property
    def split_assignments(self) -> dict[str, str]:
        return {e.frame_path: e.split for e in self.entries}

    def split(self, *names: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split in names]

    def label_counts(self) -> dict[str, int]:
        counts = {lab: 0 for lab in LABELS}
        for e in self.entries:
            counts[e.label] += 1
        return counts

    def frame_stem(self, entry: ManifestEntry) -> Path:
        return (self.root or Path(".")) / entry.frame_path

    def load(self, entry: ManifestEntry) -> RAFrame:
        return load_frame(self.frame_stem(entry))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "params_digest": self.params_digest,
            "params": self.params,
            "split_fractions": list(self.split_fractions),
            "info": self.info,
            "entries": [e.to_dict() for e in self.entries],
            "split_assignments": self.split_assignments,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise FrameLoadError(f"{path}: manifest missing") from exc
        splits = d.get("split_assignments", {})
        entries = [
            ManifestEntry(
                frame_path=e["frame_path"],
                label=e["label"],
                ground_truth=GroundTruth.from_dict(e["ground_truth"]),
                seed=e["seed"],
                mode=e["mode"],
                split=splits.get(e["frame_path"], "train"),
            )
            for e in d["entries"]
        ]
        return cls(entries=entries, params_digest=d["params_digest"], params=d.get("params", {}),
                   split_fractions=tuple(d.get("split_fractions", (0.7, 0.15, 0.15))),
                   info=d.get("info", {}), root=path.parent)


def canonical_digest(obj: Any) -> str:
    """Short sha256 digest of a JSON-able object (dataclasses allowed)."""
    if hasattr(obj, "__dataclass_fields__"):
        obj = asdict(obj)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
