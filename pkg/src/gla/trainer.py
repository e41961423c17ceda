"""Joint training of the radar VAE and the text-anchor alignment head.

Checkpoint archive layout (all integers little-endian)::

    8 bytes   magic b"GLACKPT\\0"
    8 bytes   uint64 length of the JSON header
    header    UTF-8 JSON: metadata plus a ``tensors`` list of
              {name, dtype, shape, offset, nbytes, sha256}
    payload   concatenated tensor blobs, offsets relative to payload start
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .anchors import (DEFAULT_EMBED_DIM, DEFAULT_PROMPTS, INITIAL_TEMPERATURE, ProjectionHead, TextAnchorSet,
                      alignment_loss, cosine_logits, embed_prompts, make_provider, project_and_normalize)
from .errors import CheckpointVersionError, ConfigurationError, NumericalError, ValidationError
from .frames import LABELS, DatasetManifest, apply_colormap, resize_frame
from .vae import RadarVAE, VAEArch, kld_loss, recon_loss_bce, reparameterize

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
MAGIC = b"GLACKPT\x00"
_EVAL_STREAM = 0x5EED
_EPOCH_STREAM = 0xE90C


@dataclass
class TrainConfig:
    lambda_r: float = 5.0
    lambda_a: float = 1.0
    lambda_k: float = 0.01
    learning_rate: float = 5e-4
    max_epochs: int = 20
    patience: int = 5
    batch_size: int = 32
    seed: int = 0
    prompts: tuple[str, str] = DEFAULT_PROMPTS
    anchor_provider: str = "stub"
    embeddings_path: str | None = None
    embed_dim: int = DEFAULT_EMBED_DIM
    latent_dim: int = 32
    conv_channels: tuple[int, ...] = (32, 64, 128, 256)
    resolution: tuple[int, int] = (64, 64)
    colormap_mode: str = "replicate"
    freeze_tau: bool = False
    initial_temperature: float = INITIAL_TEMPERATURE
    monitor: str = "val_loss"
    recon_reduction: str = "mean"

    def __post_init__(self):
        self.prompts = tuple(self.prompts)
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.resolution = tuple(int(v) for v in self.resolution)
        self.validate()

    def validate(self) -> None:
        if min(self.lambda_r, self.lambda_a, self.lambda_k) < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.max_epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise ConfigurationError("max_epochs >= 0, patience >= 1 and batch_size >= 1 are required")
        if self.max_epochs and self.patience > self.max_epochs:
            raise ConfigurationError("patience cannot exceed max_epochs")
        if len(self.prompts) != 2:
            raise ConfigurationError("exactly two prompts are required")
        if self.colormap_mode not in ("replicate", "lut"):
            raise ConfigurationError("colormap_mode must be 'replicate' or 'lut'")
        if self.monitor not in ("val_loss", "val_accuracy"):
            raise ConfigurationError("monitor must be 'val_loss' or 'val_accuracy'")
        if self.recon_reduction not in ("mean", "sum"):
            raise ConfigurationError("recon_reduction must be 'mean' or 'sum'")

    @property
    def arch(self) -> VAEArch:
        return VAEArch(input_channels=3, input_hw=self.resolution, conv_channels=self.conv_channels,
                       latent_dim=self.latent_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("prompts", "conv_channels", "resolution"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update({k: v for k, v in changes.items() if v is not None})
        return TrainConfig.from_dict(d)


def make_anchors(config: TrainConfig) -> TextAnchorSet:
    provider = make_provider(config.anchor_provider, config.embed_dim, config.embeddings_path)
    return embed_prompts(config.prompts, provider)


@dataclass
class LossComponents:
    total: float
    recon: float
    align: float
    kld: float


def total_loss(model: RadarVAE, head: ProjectionHead, anchors: torch.Tensor, x: torch.Tensor, y,
               epsilon: torch.Tensor, config: TrainConfig):
    """lambda_r * BCE + lambda_a * CE(s, y) + lambda_k * KLD for one batch.

    The reconstruction branch decodes z = mu + sigma * eps; alignment uses mu.
    With ``recon_reduction="mean"`` the BCE is averaged over pixels and
    channels instead of summed, so it sits on the same scale as the
    alignment term. Returns the differentiable total and the float
    components exactly as they enter the weighted sum.
    """
    if y is None or (torch.is_tensor(y) and torch.any(y < 0)):
        raise ValidationError("every training frame needs a label")
    code, _ = model.encode(x)
    code.z = reparameterize(code, epsilon)
    x_hat = model.decode(code.z)
    l_recon = recon_loss_bce(x, x_hat)
    l_kld = kld_loss(code)
    if config.recon_reduction == "mean":
        l_recon = l_recon / x[0].numel()
    logits = cosine_logits(project_and_normalize(code.mu, head.weight), anchors, head.tau)
    l_align = alignment_loss(logits, y)
    total = config.lambda_r * l_recon + config.lambda_a * l_align + config.lambda_k * l_kld
    comps = LossComponents(float(total.detach()), float(l_recon.detach()), float(l_align.detach()), float(l_kld.detach()))
    return total, comps


# -- data ----------------------------------------------------------------------

def prepare_frame(frame, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Model input [3, H, W] and the resized gray image [H, W] for one stored frame."""
    gray = frame.pixels[:1]
    if gray.shape[1:] != config.resolution:
        gray = resize_frame(gray, config.resolution)
    return apply_colormap(gray, config.colormap_mode), np.asarray(gray[0])


def load_split(manifest: DatasetManifest, splits, config: TrainConfig):
    """Frames of the given split(s) as a float32 tensor [N, 3, H, W], labels and entries."""
    splits = (splits,) if isinstance(splits, str) else tuple(splits)
    entries = manifest.split(*splits)
    return load_entries(manifest, entries, config)


def load_entries(manifest: DatasetManifest, entries, config: TrainConfig):
    xs, ys = [], []
    for e in entries:
        xs.append(prepare_frame(manifest.load(e), config)[0])
        ys.append(LABELS.index(e.label))
    if not xs:
        return torch.zeros((0, 3) + config.resolution), torch.zeros(0, dtype=torch.long), entries
    return torch.from_numpy(np.stack(xs)), torch.tensor(ys, dtype=torch.long), entries


def _seed_int(*words: int) -> int:
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1, dtype=np.uint64)[0] >> 1)


def eval_epsilon(n: int, latent_dim: int, seed: int) -> torch.Tensor:
    """Fixed per-position noise used for every evaluation pass."""
    g = torch.Generator().manual_seed(_seed_int(seed, _EVAL_STREAM))
    return torch.randn(n, latent_dim, generator=g)


# -- checkpoint ----------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    model_state: dict[str, np.ndarray]
    head_state: dict[str, np.ndarray]
    anchors: TextAnchorSet
    optimizer_state: dict = field(default_factory=dict)
    epoch: int = 0
    best_val_loss: float = float("nan")
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def arch(self) -> VAEArch:
        return self.config.arch

    def build(self) -> tuple[RadarVAE, ProjectionHead]:
        model = RadarVAE(self.arch)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.model_state.items()})
        head = ProjectionHead(self.arch.latent_dim, self.anchors.embed_dim, freeze_tau=self.config.freeze_tau)
        head.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.head_state.items()})
        model.eval()
        head.eval()
        return model, head

    def parameter_digest(self, which: str = "all") -> str:
        h = hashlib.sha256()
        groups = {"vae": self.model_state, "head": self.head_state}
        for gname, state in groups.items():
            if which not in ("all", gname):
                continue
            for k in sorted(state):
                h.update(f"{gname}/{k}".encode())
                h.update(np.ascontiguousarray(state[k], dtype="<f4").tobytes())
        return h.hexdigest()


def _state_numpy(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32).copy() for k, v in module.state_dict().items()}


def _named_trainables(model, head, freeze_vae=False):
    named = [] if freeze_vae else [(f"vae/{k}", p) for k, p in model.named_parameters()]
    named.append(("head/weight", head.weight))
    if head.log_tau.requires_grad:
        named.append(("head/log_tau", head.log_tau))
    return named


def _optimizer_numpy(opt: torch.optim.Optimizer, names: list[str]) -> dict:
    sd = opt.state_dict()
    state = {"names": names, "step": {}, "exp_avg": {}, "exp_avg_sq": {},
             "hyper": {k: v for k, v in sd["param_groups"][0].items() if k != "params"}}
    state["hyper"]["betas"] = list(state["hyper"]["betas"])
    for idx, st in sd["state"].items():
        name = names[idx]
        state["step"][name] = float(st["step"])
        state["exp_avg"][name] = st["exp_avg"].numpy().astype(np.float32).copy()
        state["exp_avg_sq"][name] = st["exp_avg_sq"].numpy().astype(np.float32).copy()
    return state


def restore_optimizer(ckpt: Checkpoint, model, head, freeze_vae=False) -> torch.optim.Optimizer:
    named = _named_trainables(model, head, freeze_vae)
    opt = torch.optim.Adam([p for _, p in named], lr=ckpt.config.learning_rate, betas=(0.9, 0.999))
    os_ = ckpt.optimizer_state
    if os_ and os_.get("step"):
        names = [n for n, _ in named]
        sd = opt.state_dict()
        sd["state"] = {
            names.index(n): {"step": torch.tensor(os_["step"][n]),
                             "exp_avg": torch.from_numpy(os_["exp_avg"][n].copy()),
                             "exp_avg_sq": torch.from_numpy(os_["exp_avg_sq"][n].copy())}
            for n in os_["step"] if n in names
        }
        opt.load_state_dict(sd)
    return opt


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    blobs: list[tuple[str, np.ndarray]] = []
    blobs += [(f"vae/{k}", ckpt.model_state[k]) for k in sorted(ckpt.model_state)]
    blobs += [(f"head/{k}", ckpt.head_state[k]) for k in sorted(ckpt.head_state)]
    opt = dict(ckpt.optimizer_state)
    for slot in ("exp_avg", "exp_avg_sq"):
        for n in sorted(opt.get(slot, {})):
            blobs.append((f"optim/{slot}/{n}", opt[slot][n]))
    blobs.append(("anchors/vectors", ckpt.anchors.vectors))

    tensors, payload, offset = [], [], 0
    for name, arr in blobs:
        dtype = "<f8" if name == "anchors/vectors" else "<f4"
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        tensors.append({"name": name, "dtype": dtype, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
        payload.append(data)
        offset += len(data)

    header = {
        "schema_version": CHECKPOINT_SCHEMA,
        "config": ckpt.config.to_dict(),
        "arch": ckpt.arch.to_dict(),
        "epoch": int(ckpt.epoch),
        "best_val_loss": float(ckpt.best_val_loss),
        "history": _jsonable(ckpt.history),
        "extra": _jsonable(ckpt.extra),
        "anchors": {"provider_id": ckpt.anchors.provider_id, "prompts": list(ckpt.anchors.prompts),
                    "prompt_digests": ckpt.anchors.prompt_digests(), "digest": ckpt.anchors.digest()},
        "optimizer": {"names": list(opt.get("names", [])), "step": opt.get("step", {}),
                      "hyper": opt.get("hyper", {})},
        "tensors": tensors,
    }
    head_bytes = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head_bytes)))
        fh.write(head_bytes)
        for data in payload:
            fh.write(data)
    return path


def load_checkpoint(path, anchors: TextAnchorSet | None = None) -> Checkpoint:
    """Read a checkpoint; warns when ``anchors`` differ from the stored ones."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint archive (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode())
    version = header.get("schema_version")
    if version != CHECKPOINT_SCHEMA:
        raise CheckpointVersionError(
            f"{path}: checkpoint schema_version {version} is not supported (expected {CHECKPOINT_SCHEMA})")
    base = 16 + hlen
    arrays = {}
    for t in header["tensors"]:
        data = raw[base + t["offset"]: base + t["offset"] + t["nbytes"]]
        if len(data) != t["nbytes"] or hashlib.sha256(data).hexdigest() != t["sha256"]:
            raise CheckpointVersionError(f"{path}: tensor {t['name']} is truncated or corrupt")
        arrays[t["name"]] = np.frombuffer(data, dtype=t["dtype"]).reshape(t["shape"]).copy()

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    a = header["anchors"]
    stored = TextAnchorSet(tuple(a["prompts"]), arrays["anchors/vectors"], a["provider_id"])
    if anchors is not None and anchors.digest() != stored.digest():
        warnings.warn(f"anchors differ from those stored in {path} "
                      f"(stored prompts {list(stored.prompts)}, current {list(anchors.prompts)})", stacklevel=2)
    opt = header["optimizer"]
    optimizer_state = {"names": opt["names"], "step": opt["step"], "hyper": opt["hyper"],
                       "exp_avg": group("optim/exp_avg/"), "exp_avg_sq": group("optim/exp_avg_sq/")}
    return Checkpoint(
        config=TrainConfig.from_dict(header["config"]),
        model_state=group("vae/"),
        head_state=group("head/"),
        anchors=stored,
        optimizer_state=optimizer_state,
        epoch=header["epoch"],
        best_val_loss=header["best_val_loss"],
        history=header["history"],
        extra=header["extra"],
    )


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalResult:
    alignment_accuracy: float
    mean_recon_bce: float
    mean_kld: float
    mean_align: float
    mean_total: float
    logits: np.ndarray
    labels: np.ndarray
    frame_ids: list[str]

    @property
    def predictions(self) -> np.ndarray:
        return self.logits.argmax(axis=1)

    def summary(self) -> dict:
        return {"alignment_accuracy": self.alignment_accuracy, "mean_recon_bce": self.mean_recon_bce,
                "mean_kld": self.mean_kld, "mean_align": self.mean_align, "mean_total": self.mean_total,
                "n_frames": int(len(self.labels))}


@torch.no_grad()
def evaluate_tensors(model, head, anchors: TextAnchorSet, x, y, config: TrainConfig, frame_ids=None) -> EvalResult:
    """Deterministic pass over (x, y): eval-stream epsilon, batch_size chunks."""
    n = len(x)
    if n == 0:
        raise ValidationError("cannot evaluate an empty split")
    model.eval()
    anchor_t = anchors.tensor()
    eps = eval_epsilon(n, config.latent_dim, config.seed)
    sums = np.zeros(4)
    logits_all = []
    for i in range(0, n, config.batch_size):
        xb, yb, eb = x[i:i + config.batch_size], y[i:i + config.batch_size], eps[i:i + config.batch_size]
        _, comps = total_loss(model, head, anchor_t, xb, yb, eb, config)
        sums += len(xb) * np.array([comps.total, comps.recon, comps.align, comps.kld])
        code, _ = model.encode(xb)
        logits_all.append(cosine_logits(project_and_normalize(code.mu, head.weight), anchor_t, head.tau))
    logits = torch.cat(logits_all).numpy().astype(np.float64)
    labels = y.numpy()
    means = sums / n
    acc = float(np.mean(logits.argmax(axis=1) == labels))
    return EvalResult(acc, float(means[1]), float(means[3]), float(means[2]), float(means[0]), logits, labels,
                      list(frame_ids) if frame_ids is not None else [str(i) for i in range(n)])


def evaluate(checkpoint: Checkpoint, manifest: DatasetManifest, split="test") -> EvalResult:
    x, y, entries = load_split(manifest, split, checkpoint.config)
    model, head = checkpoint.build()
    return evaluate_tensors(model, head, checkpoint.anchors, x, y, checkpoint.config,
                            [e.frame_id for e in entries])


# -- training ------------------------------------------------------------------

def _check_finite(comps: LossComponents, epoch: int, step: int) -> None:
    for name in ("recon", "align", "kld", "total"):
        v = getattr(comps, name)
        if not math.isfinite(v):
            raise NumericalError(f"non-finite {name} loss ({v}) at epoch {epoch}, step {step}")


def _snapshot(config, model, head, anchors, opt, names, epoch, best, history, extra) -> Checkpoint:
    return Checkpoint(config=config, model_state=_state_numpy(model), head_state=_state_numpy(head),
                      anchors=anchors, optimizer_state=_optimizer_numpy(opt, names), epoch=epoch,
                      best_val_loss=best, history=copy.deepcopy(history), extra=copy.deepcopy(extra))


def train(config: TrainConfig, manifest: DatasetManifest, anchors: TextAnchorSet | None = None,
          init_from: Checkpoint | None = None, freeze_vae: bool = False,
          on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Adam on the combined loss with early stopping; returns the best-val checkpoint.

    ``init_from`` starts from another checkpoint's VAE weights (the head is
    re-initialised); with ``freeze_vae`` only W and tau are trained.
    """
    anchors = anchors or make_anchors(config)
    if anchors.embed_dim != config.embed_dim:
        raise ConfigurationError(f"anchor dimension {anchors.embed_dim} != embed_dim {config.embed_dim}")
    x_tr, y_tr, tr_entries = load_split(manifest, "train", config)
    x_va, y_va, va_entries = load_split(manifest, "val", config)
    if len(set(y_tr.tolist())) < 2:
        raise ConfigurationError("training split must contain both classes")
    if len(x_va) == 0:
        raise ConfigurationError("manifest has no validation frames")

    torch.manual_seed(_seed_int(config.seed))
    model = RadarVAE(config.arch)
    head = ProjectionHead(config.latent_dim, anchors.embed_dim, config.initial_temperature, config.freeze_tau)
    if init_from is not None:
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in init_from.model_state.items()})
    if freeze_vae:
        for p in model.parameters():
            p.requires_grad_(False)
    named = _named_trainables(model, head, freeze_vae)
    names = [n for n, _ in named]
    opt = torch.optim.Adam([p for _, p in named], lr=config.learning_rate, betas=(0.9, 0.999))
    anchor_t = anchors.tensor()
    anchor_digest = anchors.digest()

    init_val = evaluate_tensors(model, head, anchors, x_va, y_va, config)
    init_train = evaluate_tensors(model, head, anchors, x_tr, y_tr, config)
    extra = {"initial_train_recon": init_train.mean_recon_bce, "initial_val_loss": init_val.mean_total,
             "n_train": len(x_tr), "n_val": len(x_va), "freeze_vae": bool(freeze_vae),
             "params_digest": manifest.params_digest}
    history: list[dict] = []

    def score(res: "EvalResult") -> float:
        # lower is better for both monitors
        return res.mean_total if config.monitor == "val_loss" else -res.alignment_accuracy

    best = init_val.mean_total
    best_score = score(init_val)
    best_ckpt = _snapshot(config, model, head, anchors, opt, names, 0, best, history, extra)
    best_epoch, wait = 0, 0

    n = len(x_tr)
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        g = torch.Generator().manual_seed(_seed_int(config.seed, _EPOCH_STREAM, epoch))
        order = torch.randperm(n, generator=g)
        eps = torch.randn(n, config.latent_dim, generator=g)
        sums = np.zeros(4)
        for step, i in enumerate(range(0, n, config.batch_size)):
            idx = order[i:i + config.batch_size]
            loss, comps = total_loss(model, head, anchor_t, x_tr[idx], y_tr[idx], eps[idx], config)
            _check_finite(comps, epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums += len(idx) * np.array([comps.total, comps.recon, comps.align, comps.kld])
        if anchors.digest() != anchor_digest or not torch.equal(anchor_t, anchors.tensor()):
            raise RuntimeError("text anchors changed during training")

        val = evaluate_tensors(model, head, anchors, x_va, y_va, config)
        if not math.isfinite(val.mean_total):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        tr = sums / n
        row = {"epoch": epoch, "train_total": tr[0], "train_recon": tr[1], "train_align": tr[2],
               "train_kld": tr[3], "val_total": val.mean_total, "val_accuracy": val.alignment_accuracy,
               "tau": float(head.tau.detach())}
        history.append(row)
        improved = score(val) < best_score
        if improved:
            best, best_score, best_epoch, wait = val.mean_total, score(val), epoch, 0
            best_ckpt = _snapshot(config, model, head, anchors, opt, names, epoch, best, history, extra)
        else:
            wait += 1
        row["best"] = improved
        if on_epoch:
            on_epoch(row)
        log.info("epoch %d train %.4f val %.4f acc %.3f", epoch, tr[0], val.mean_total, val.alignment_accuracy)
        if wait >= config.patience:
            break

    best_ckpt.history = copy.deepcopy(history)
    model_b, head_b = best_ckpt.build()
    final_train = evaluate_tensors(model_b, head_b, anchors, x_tr, y_tr, config)
    best_ckpt.extra.update({"final_train_recon": final_train.mean_recon_bce, "best_epoch": best_epoch,
                            "epochs_run": len(history)})
    return best_ckpt
