"""Grad-CAM on the encoder's third conv block, driven by a text-anchor logit."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .anchors import TextAnchorSet, cosine_logits, project_and_normalize
from .errors import StructuralError, ValidationError
from .frames import GroundTruth, RAFrame

CLASSES = ("empty", "person")
CAM_BLOCK = 3  # 1-based index of the encoder block explained
DEFAULT_N_PERTURB = 8
DEFAULT_SIGMA = 0.05
DEFAULT_QUANTILE = 0.15


@dataclass(frozen=True)
class CAMMap:
    values: np.ndarray  # [H, W], >= 0
    target_class: str
    n_perturbations: int = 1
    perturb_sigma: float = 0.0


@dataclass(frozen=True)
class CAMMask:
    mask: np.ndarray  # bool [H, W]
    quantile: float = DEFAULT_QUANTILE

    @property
    def count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class CAMMetrics:
    centroid_error: float | None
    mask_precision: float | None
    normalized_entropy: float


def class_index(target_class) -> int:
    if isinstance(target_class, str) and target_class in CLASSES:
        return CLASSES.index(target_class)
    if isinstance(target_class, (int, np.integer)) and not isinstance(target_class, bool) and target_class in (0, 1):
        return int(target_class)
    raise ValidationError(f"target_class must be one of {CLASSES} or 0/1, got {target_class!r}")


def gap_channel_weights(score: torch.Tensor, activations: torch.Tensor) -> torch.Tensor:
    """alpha_c = spatial mean of d score / d activations[..., c, :, :].

    ``activations`` must be the tensor the score was computed from (not a
    view taken afterwards), shaped [C, h, w] or [1, C, h, w].
    """
    grad = None
    if score.requires_grad:
        (grad,) = torch.autograd.grad(score, activations, retain_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(activations)
    return grad.mean(dim=(-2, -1))


def weighted_cam(alpha: torch.Tensor, activations: torch.Tensor) -> torch.Tensor:
    """ReLU(sum_c alpha_c F^c)."""
    return torch.relu(torch.einsum("c,chw->hw", alpha, activations))


def _as_input(frame) -> torch.Tensor:
    px = frame.pixels if isinstance(frame, RAFrame) else frame
    t = torch.as_tensor(np.asarray(px), dtype=torch.float32) if not torch.is_tensor(px) else px.float()
    if t.dim() != 3:
        raise StructuralError(f"frame must be [C, H, W], got {tuple(t.shape)}")
    return t


def latent_gradcam(frame, model, head, anchors: TextAnchorSet, target_class, block: int = CAM_BLOCK) -> np.ndarray:
    """Raw CAM at the resolution of encoder block ``block`` (no upsampling)."""
    k = class_index(target_class)
    x = _as_input(frame).detach()
    with torch.enable_grad():
        code, features = model.encode(x.unsqueeze(0))
        act = features[block - 1]
        mu_bar = project_and_normalize(code.mu[0], head.weight)
        score = cosine_logits(mu_bar, anchors, head.tau)[k]
        alpha = gap_channel_weights(score, act)[0]
        cam = weighted_cam(alpha.detach(), act[0].detach())
    return cam.numpy().astype(np.float64)


def upsample(cam: np.ndarray, hw) -> np.ndarray:
    """Bilinear (half-pixel centers) upsampling of a 2-D map."""
    t = torch.as_tensor(cam, dtype=torch.float64)[None, None]
    return F.interpolate(t, size=tuple(hw), mode="bilinear", align_corners=False)[0, 0].numpy()


def minmax01(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def perturbation_average(frame, model, head, anchors: TextAnchorSet, target_class, n: int = DEFAULT_N_PERTURB,
                         sigma: float = DEFAULT_SIGMA, seed: int = 0, block: int = CAM_BLOCK) -> CAMMap:
    """Average raw CAMs over ``n`` noisy copies of ``frame``, upsample, scale to [0, 1]."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if sigma < 0:
        raise ValidationError("sigma must be >= 0")
    x = _as_input(frame)
    gen = torch.Generator().manual_seed(int(seed))
    acc = None
    for _ in range(n):
        noise = torch.randn(x.shape, generator=gen, dtype=x.dtype)
        xp = (x + sigma * noise).clamp(0.0, 1.0) if sigma > 0 else x
        raw = latent_gradcam(xp, model, head, anchors, target_class, block)
        acc = raw if acc is None else acc + raw
    cam = upsample(acc / n, x.shape[-2:])
    cam = minmax01(np.maximum(cam, 0.0))
    return CAMMap(cam, CLASSES[class_index(target_class)], n, float(sigma))


def threshold_mask(cam, quantile: float = DEFAULT_QUANTILE) -> CAMMask:
    """Top ceil(q * H * W) pixels; ties go to the lower row-major index. Constant maps give an empty mask."""
    if not 0 < quantile < 1:
        raise ValidationError("quantile must lie in (0, 1)")
    values = np.asarray(cam.values if isinstance(cam, CAMMap) else cam, dtype=np.float64)
    mask = np.zeros(values.shape, dtype=bool)
    if values.max() == values.min():
        return CAMMask(mask, quantile)
    k = math.ceil(quantile * values.size)
    order = np.argsort(-values.ravel(), kind="stable")
    mask.ravel()[order[:k]] = True
    return CAMMask(mask, quantile)


def _pixel_to_bin(hw, grid_shape):
    """Affine maps from pixel index to RA-bin coordinate along each axis."""
    scales = [g / s for g, s in zip(grid_shape, hw)]
    return [lambda p, sc=sc: (p + 0.5) * sc - 0.5 for sc in scales], scales


def cam_centroid(cam: np.ndarray, grid_shape=None) -> tuple[float, float] | None:
    """CAM-weighted centroid in RA-bin coordinates, or None for an all-zero map."""
    cam = np.asarray(cam, dtype=np.float64)
    total = cam.sum()
    if total <= 0:
        return None
    (to_r, to_c), _ = _pixel_to_bin(cam.shape, grid_shape or cam.shape)
    rows, cols = np.indices(cam.shape)
    return to_r((cam * rows).sum() / total), to_c((cam * cols).sum() / total)


def _require_person(gt: GroundTruth) -> None:
    if gt.label != "person" or gt.blob_center is None:
        raise ValidationError("person localization metrics need a person ground truth")


def centroid_error(cam, gt: GroundTruth, grid_shape=None) -> float:
    """Euclidean bin distance between the CAM centroid and the blob center."""
    _require_person(gt)
    values = cam.values if isinstance(cam, CAMMap) else cam
    c = cam_centroid(values, grid_shape)
    if c is None:
        return float("nan")
    return float(math.hypot(c[0] - gt.blob_center[0], c[1] - gt.blob_center[1]))


def mask_precision(mask, gt: GroundTruth, grid_shape=None) -> float:
    """Fraction of mask pixels within 2 blob radii of the center (0 for an empty mask)."""
    _require_person(gt)
    m = np.asarray(mask.mask if isinstance(mask, CAMMask) else mask, dtype=bool)
    if not m.any():
        return 0.0
    (to_r, to_c), _ = _pixel_to_bin(m.shape, grid_shape or m.shape)
    rows, cols = np.nonzero(m)
    d = np.hypot(to_r(rows) - gt.blob_center[0], to_c(cols) - gt.blob_center[1])
    return float(np.mean(d <= 2.0 * gt.blob_radius_bins))


def normalized_entropy(cam) -> float:
    """Shannon entropy of cam / sum(cam) divided by log(H * W); all-zero maps count as uniform."""
    v = np.asarray(cam.values if isinstance(cam, CAMMap) else cam, dtype=np.float64).ravel()
    total = v.sum()
    if v.size < 2:
        return 0.0
    if total <= 0:
        return 1.0
    p = v / total
    p = p[p > 0]
    return float(-(p * np.log(p)).sum() / math.log(v.size))


def cam_metrics(cam, mask, gt: GroundTruth, grid_shape=None) -> CAMMetrics:
    """Entropy always; centroid error and mask precision only for person frames."""
    ent = normalized_entropy(cam)
    if gt.label != "person":
        return CAMMetrics(None, None, ent)
    return CAMMetrics(centroid_error(cam, gt, grid_shape), mask_precision(mask, gt, grid_shape), ent)
