"""Panel figures, CAM metric reports and the prompt-ablation harness.

Every file written here is a pure function of its inputs: JSON is dumped
with sorted keys, floats are written with ``repr`` precision, and paths
inside reports are relative to the output directory.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .anchors import UNRELATED_PROMPTS
from .errors import StructuralError, ValidationError
from .frames import HEAT_LUT, RA_LUT, LUT_NAME, RAFrame, lut_lookup, save_frame, to_uint8
from .gradcam import (CLASSES, DEFAULT_N_PERTURB, DEFAULT_QUANTILE, DEFAULT_SIGMA, cam_metrics,
                      perturbation_average, threshold_mask)
from .trainer import (Checkpoint, TrainConfig, _seed_int, evaluate_tensors, load_entries, prepare_frame, train)

PANEL_ORDER = ("input", "reconstruction", "cam_heatmap", "cam_overlay", "cam_mask")
OVERLAY_ALPHA = 0.45
GUTTER_PX = 2
HEAT_LUT_NAME = "inferno-256"
NA = "N/A"
TARGET_MODES = ("label", "predicted") + CLASSES


# -- figures ---------------------------------------------------------------------

def _as_rgb(layer, lut) -> np.ndarray:
    a = np.asarray(layer, dtype=np.float64)
    if a.ndim == 2:
        return lut_lookup(a, lut) if lut is not None else np.repeat(a[..., None], 3, axis=-1)
    if a.ndim == 3 and a.shape[-1] == 3:
        return np.clip(a, 0.0, 1.0)
    raise StructuralError(f"panel layers must be [H, W] or [H, W, 3], got {a.shape}")


def blend(base_rgb: np.ndarray, top_rgb: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    return (1.0 - alpha) * base_rgb + alpha * top_rgb


@dataclass(frozen=True)
class PanelFigure:
    """Five RGB panels [H, W, 3] in ``PANEL_ORDER`` plus provenance."""

    panels: tuple
    frame_id: str
    target_class: str
    output_path: Path | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        panels = tuple(np.asarray(p, dtype=np.float64) for p in self.panels)
        if len(panels) != len(PANEL_ORDER):
            raise StructuralError(f"a panel figure has exactly {len(PANEL_ORDER)} panels, got {len(panels)}")
        shapes = {p.shape for p in panels}
        if len(shapes) != 1 or panels[0].ndim != 3 or panels[0].shape[-1] != 3:
            raise StructuralError(f"panels must share one [H, W, 3] shape, got {[p.shape for p in panels]}")
        object.__setattr__(self, "panels", panels)

    @classmethod
    def from_layers(cls, input_gray, reconstruction, cam, mask, frame_id: str, target_class: str,
                    output_path=None, ra_colormap: str = "lut", alpha: float = OVERLAY_ALPHA) -> "PanelFigure":
        """Colour the raw layers: RA LUT (or gray) for i-ii, heat LUT for iii, blend for iv, black/white for v."""
        layers = [np.asarray(input_gray), np.asarray(reconstruction), np.asarray(cam), np.asarray(mask)]
        hw = {tuple(a.shape[:2]) for a in layers}
        if len(hw) != 1:
            raise StructuralError(f"layer sizes differ: {[a.shape for a in layers]}")
        ra_lut = RA_LUT if ra_colormap == "lut" else None
        p_in = _as_rgb(input_gray, ra_lut)
        p_rec = _as_rgb(reconstruction, ra_lut)
        p_heat = lut_lookup(np.asarray(cam, dtype=np.float64), HEAT_LUT)
        p_over = blend(p_in, p_heat, alpha)
        p_mask = np.repeat(np.asarray(mask, dtype=np.float64)[..., None], 3, axis=-1)
        meta = {"panel_order": list(PANEL_ORDER), "ra_colormap": LUT_NAME if ra_lut is not None else "gray",
                "heat_colormap": HEAT_LUT_NAME, "overlay_alpha": alpha, "gutter_px": GUTTER_PX,
                "styles_are_stand_ins": True}
        return cls((p_in, p_rec, p_heat, p_over, p_mask), frame_id, target_class,
                   Path(output_path) if output_path else None, meta)


def compose(figure: PanelFigure) -> np.ndarray:
    """Side-by-side uint8 canvas with white gutters; panels are never resampled."""
    h, w, _ = figure.panels[0].shape
    n = len(figure.panels)
    canvas = np.full((h, n * w + (n - 1) * GUTTER_PX, 3), 255, dtype=np.uint8)
    for i, p in enumerate(figure.panels):
        x0 = i * (w + GUTTER_PX)
        canvas[:, x0:x0 + w] = to_uint8(p)
    return canvas


def panel_slices(width: int, n: int = len(PANEL_ORDER)) -> list[slice]:
    return [slice(i * (width + GUTTER_PX), i * (width + GUTTER_PX) + width) for i in range(n)]


def render_panel(figure: PanelFigure, output_path=None) -> Path:
    """Write the 8-bit PNG and a ``.json`` metadata sidecar next to it."""
    from PIL import Image

    target = output_path or figure.output_path
    if target is None:
        raise ValidationError("render_panel needs an output path")
    path = Path(target)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas = compose(figure)
    Image.fromarray(canvas).save(path, format="PNG", optimize=False)
    h, w, _ = figure.panels[0].shape
    meta = {**figure.meta, "frame_id": figure.frame_id, "target_class": figure.target_class,
            "panel_width": w, "panel_height": h, "canvas_shape": list(canvas.shape)}
    _write_json(path.with_suffix(".json"), meta)
    return path


# -- serialization helpers --------------------------------------------------------

def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


def _fmt(v) -> str:
    if v is None:
        return NA
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r.get(c)) for c in columns])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _defined(v):
    """None for missing or NaN values (e.g. the centroid of an all-zero CAM)."""
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(sum(vals) / len(vals)) if vals else None


def _median(values) -> float | None:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.median(vals)) if vals else None


# -- per-frame CAM evaluation ------------------------------------------------------------

METRIC_COLUMNS = ["frame_id", "label", "target_class", "predicted_class", "centroid_error", "mask_precision",
                  "normalized_entropy", "mask_count", "figure"]


def _grid_shape(manifest) -> tuple[int, int]:
    p = manifest.params or {}
    return int(p.get("range_bins", 64)), int(p.get("angle_bins", 64))


def _resolve_target(target: str, label: str, predicted: str) -> str:
    if target == "label":
        return label
    if target == "predicted":
        return predicted
    if target in CLASSES:
        return target
    raise ValidationError(f"target must be one of {TARGET_MODES}, got {target!r}")


def explain_entries(checkpoint: Checkpoint, manifest, entries, target: str = "predicted",
                    n: int = DEFAULT_N_PERTURB, sigma: float = DEFAULT_SIGMA, quantile: float = DEFAULT_QUANTILE,
                    seed: int | None = None, out_dir=None, render: bool = False) -> list[dict]:
    """CAM metrics for each manifest entry, optionally with figures and stored CAM layers.

    Perturbation noise for a frame is seeded from (seed, frame seed), so a
    row does not depend on which other frames are explained alongside it.
    Person-only metrics are N/A (None) on frames whose ground truth is not
    a person.
    """
    model, head = checkpoint.build()
    config = checkpoint.config
    seed = config.seed if seed is None else int(seed)
    grid = _grid_shape(manifest)
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for e in entries:
        frame = manifest.load(e)
        x_np, gray = prepare_frame(frame, config)
        x = torch.from_numpy(x_np)
        with torch.no_grad():
            code, _ = model.encode(x[None])
            logits = head(code.mu, checkpoint.anchors.tensor())[0]
            recon = model.decode(code.mu)[0].numpy()
        predicted = CLASSES[int(torch.argmax(logits))]
        cls = _resolve_target(target, e.label, predicted)
        cam = perturbation_average(x, model, head, checkpoint.anchors, cls, n=n, sigma=sigma,
                                   seed=_seed_int(seed, e.seed))
        mask = threshold_mask(cam, quantile)
        m = cam_metrics(cam, mask, e.ground_truth, grid)
        row = {"frame_id": e.frame_id, "label": e.label, "target_class": cls, "predicted_class": predicted,
               "centroid_error": _defined(m.centroid_error), "mask_precision": m.mask_precision,
               "normalized_entropy": m.normalized_entropy, "mask_count": mask.count, "figure": None}
        if render and out_dir is not None:
            rel = Path("figures") / f"{e.frame_id}_{cls}.png"
            recon_layer = recon.mean(axis=0) if config.colormap_mode == "replicate" else np.moveaxis(recon, 0, -1)
            fig = PanelFigure.from_layers(gray, recon_layer, cam.values, mask.mask, e.frame_id, cls,
                                          ra_colormap="lut")
            render_panel(fig, out_dir / rel)
            layer_meta = {"n_perturbations": n, "perturb_sigma": sigma, "quantile": quantile}
            save_frame(out_dir / "cams" / f"{e.frame_id}_{cls}_cam",
                       RAFrame(cam.values, source_id=e.frame_id, meta={"layer": "cam", **layer_meta}))
            save_frame(out_dir / "cams" / f"{e.frame_id}_{cls}_mask",
                       RAFrame(mask.mask.astype(np.float32), source_id=e.frame_id,
                               meta={"layer": "mask", **layer_meta}))
            row["figure"] = rel.as_posix()
        rows.append(row)
    return rows


def summarize_rows(rows: list[dict]) -> dict:
    """Per-label means (and the person median centroid error) of CAM metric rows."""
    out = {"n_frames": len(rows)}
    for label in CLASSES:
        sub = [r for r in rows if r["label"] == label]
        stats = {"n": len(sub), "mean_normalized_entropy": _mean(r["normalized_entropy"] for r in sub)}
        if label == "person":
            stats["n_centroid_defined"] = sum(r["centroid_error"] is not None for r in sub)
            stats["mean_centroid_error"] = _mean(r["centroid_error"] for r in sub)
            stats["median_centroid_error"] = _median([r["centroid_error"] for r in sub])
            stats["mean_mask_precision"] = _mean(r["mask_precision"] for r in sub)
        out[label] = stats
    return out


@dataclass
class ExplainResult:
    rows: list[dict]
    summary: dict
    csv_path: Path | None
    summary_path: Path | None


def explain(checkpoint: Checkpoint, manifest, frame_ids=None, splits=None, target: str = "predicted",
            n: int = DEFAULT_N_PERTURB, sigma: float = DEFAULT_SIGMA, quantile: float = DEFAULT_QUANTILE,
            seed: int | None = None, out_dir=None, render: bool = True) -> ExplainResult:
    """Explain the listed frames (or whole splits); write figures, a CSV and a summary JSON."""
    if frame_ids:
        by_id = {e.frame_id: e for e in manifest.entries}
        missing = [f for f in frame_ids if f not in by_id]
        if missing:
            raise ValidationError(f"frames not in manifest: {missing}")
        entries = [by_id[f] for f in frame_ids]
    else:
        entries = manifest.split(*(splits or ("test",)))
    if not entries:
        raise ValidationError("no frames to explain")
    rows = explain_entries(checkpoint, manifest, entries, target, n, sigma, quantile, seed, out_dir, render)
    summary = {**summarize_rows(rows), "target": target, "n_perturbations": n, "perturb_sigma": sigma,
               "quantile": quantile, "overlay_alpha": OVERLAY_ALPHA}
    csv_path = summary_path = None
    if out_dir is not None:
        csv_path = write_csv(Path(out_dir) / "cam_metrics.csv", rows, METRIC_COLUMNS)
        summary_path = _write_json(Path(out_dir) / "cam_summary.json", summary)
    return ExplainResult(rows, summary, csv_path, summary_path)


def parse_metric_rows(path) -> list[dict]:
    """Read ``cam_metrics.csv`` back with numeric columns as floats (N/A -> None)."""
    rows = read_csv(path)
    for r in rows:
        for c in ("centroid_error", "mask_precision", "normalized_entropy"):
            r[c] = None if r[c] == NA else float(r[c])
        r["mask_count"] = int(r["mask_count"])
        if "figure" in r:
            r["figure"] = None if r["figure"] == NA else r["figure"]
    return rows


# -- ablation -------------------------------------------------------------------------------

EXPECTED_DIRECTION = ("With unrelated prompts the anchors carry no radar semantics, so localization is "
                      "expected to degrade: person-frame mask precision should fall and CAM entropy should "
                      "rise toward a near-uniform map.")
CONDITION_METRICS = ("alignment_accuracy", "mean_centroid_error", "median_centroid_error", "mean_mask_precision",
                     "mean_entropy_person", "mean_entropy_empty")


@dataclass
class AblationReport:
    baseline_prompts: list[str]
    ablation_prompts: list[str]
    frame_ids: list[str]
    conditions: dict          # name -> {metric: value}
    deltas: dict              # metric -> ablation - baseline
    frame_table: list[dict]
    config_diff: list[str]
    frozen_backbone: bool = False
    expected_direction: str = EXPECTED_DIRECTION

    def to_dict(self) -> dict:
        return {"baseline_prompts": self.baseline_prompts, "ablation_prompts": self.ablation_prompts,
                "frame_ids": self.frame_ids, "conditions": self.conditions, "deltas": self.deltas,
                "config_diff": self.config_diff, "frozen_backbone": self.frozen_backbone,
                "expected_direction": self.expected_direction}

    def summary_text(self) -> str:
        lines = ["Prompt ablation", "",
                 f"baseline prompts: {self.baseline_prompts}",
                 f"ablation prompts: {self.ablation_prompts}",
                 f"frames: {len(self.frame_ids)} (identical set for both conditions)",
                 f"backbone: {'frozen baseline VAE, head retrained' if self.frozen_backbone else 'retrained from the same seed'}",
                 "", "expected direction: " + self.expected_direction, "",
                 f"{'metric':<24}{'baseline':>12}{'ablation':>12}{'delta':>12}"]
        for k in CONDITION_METRICS:
            b, a, d = self.conditions["baseline"].get(k), self.conditions["ablation"].get(k), self.deltas.get(k)
            lines.append(f"{k:<24}{_num(b):>12}{_num(a):>12}{_num(d):>12}")
        mp, ent = self.deltas.get("mean_mask_precision"), self.deltas.get("mean_entropy_person")
        observed = []
        if mp is not None:
            observed.append("mask precision " + ("fell" if mp < 0 else "did not fall"))
        if ent is not None:
            observed.append("person CAM entropy " + ("rose" if ent > 0 else "did not rise"))
        lines += ["", "observed: " + ", ".join(observed) + "."]
        return "\n".join(lines) + "\n"


def _num(v) -> str:
    return NA if v is None else f"{v:.4f}"


def condition_metrics(accuracy: float, rows: list[dict]) -> dict:
    s = summarize_rows(rows)
    return {"alignment_accuracy": accuracy,
            "mean_centroid_error": s["person"]["mean_centroid_error"],
            "median_centroid_error": s["person"]["median_centroid_error"],
            "mean_mask_precision": s["person"]["mean_mask_precision"],
            "mean_entropy_person": s["person"]["mean_normalized_entropy"],
            "mean_entropy_empty": s["empty"]["mean_normalized_entropy"]}


def config_diff(a: TrainConfig, b: TrainConfig) -> list[str]:
    da, db = a.to_dict(), b.to_dict()
    return sorted(k for k in da if da[k] != db[k])


def evaluate_condition(checkpoint: Checkpoint, manifest, entries, n, sigma, quantile) -> tuple[dict, list[dict]]:
    x, y, _ = load_entries(manifest, entries, checkpoint.config)
    model, head = checkpoint.build()
    res = evaluate_tensors(model, head, checkpoint.anchors, x, y, checkpoint.config, [e.frame_id for e in entries])
    rows = explain_entries(checkpoint, manifest, entries, "label", n, sigma, quantile)
    return condition_metrics(res.alignment_accuracy, rows), rows


def run_ablation(manifest, config: TrainConfig | None = None, baseline: Checkpoint | None = None,
                 ablation_prompts=UNRELATED_PROMPTS, frozen_backbone: bool = False, splits=("val", "test"),
                 n: int = DEFAULT_N_PERTURB, sigma: float = DEFAULT_SIGMA, quantile: float = DEFAULT_QUANTILE,
                 out_dir=None, on_epoch=None) -> AblationReport:
    """Train (or reuse) the baseline, train the unrelated-prompt model, compare CAM metrics.

    CAMs are computed for each frame's true class so both conditions explain
    the same question on the same frames.
    """
    if baseline is None:
        if config is None:
            raise ValidationError("run_ablation needs a config or a baseline checkpoint")
        baseline = train(config, manifest, on_epoch=on_epoch)
    base_cfg = baseline.config
    abl_cfg = base_cfg.with_overrides(prompts=tuple(ablation_prompts))
    diff = config_diff(base_cfg, abl_cfg)
    if diff != ["prompts"]:
        raise ValidationError(f"ablation configs must differ only in prompts, differ in {diff}")
    if frozen_backbone:
        ablated = train(abl_cfg, manifest, init_from=baseline, freeze_vae=True, on_epoch=on_epoch)
    else:
        ablated = train(abl_cfg, manifest, on_epoch=on_epoch)

    entries = manifest.split(*splits)
    if not entries:
        raise ValidationError(f"no frames in splits {splits}")
    base_metrics, base_rows = evaluate_condition(baseline, manifest, entries, n, sigma, quantile)
    abl_metrics, abl_rows = evaluate_condition(ablated, manifest, entries, n, sigma, quantile)
    base_ids = [r["frame_id"] for r in base_rows]
    if base_ids != [r["frame_id"] for r in abl_rows] or set(base_ids) != {e.frame_id for e in entries}:
        raise ValidationError("ablation conditions were evaluated on different frame sets")

    deltas = {k: (None if base_metrics[k] is None or abl_metrics[k] is None else abl_metrics[k] - base_metrics[k])
              for k in CONDITION_METRICS}
    table = [{**r, "condition": "baseline"} for r in base_rows] + [{**r, "condition": "ablation"} for r in abl_rows]
    report = AblationReport(list(base_cfg.prompts), list(abl_cfg.prompts), base_ids,
                            {"baseline": base_metrics, "ablation": abl_metrics}, deltas, table, diff,
                            frozen_backbone)
    if out_dir is not None:
        write_ablation(report, out_dir)
    return report


ABLATION_COLUMNS = ["condition"] + METRIC_COLUMNS[:-1]


def write_ablation(report: AblationReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    return {"json": _write_json(out / "ablation.json", report.to_dict()),
            "csv": write_csv(out / "ablation_frames.csv", report.frame_table, ABLATION_COLUMNS),
            "summary": _write_text(out / "ablation_summary.txt", report.summary_text())}


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path
