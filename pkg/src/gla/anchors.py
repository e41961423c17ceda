"""Frozen text anchors, the latent projection head and the alignment loss.

The default provider is a deterministic stub that hashes each prompt into
a unit vector. A real text encoder can be plugged in through a JSON file
mapping prompt strings to embedding vectors.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateProjectionError, ValidationError

DEFAULT_PROMPTS = (
    "radar heatmap of an empty room without any person",
    "radar heatmap of a person present in the room",
)
UNRELATED_PROMPTS = ("clouds in the sky", "an iceberg floating in the ocean")
DEFAULT_EMBED_DIM = 512
INITIAL_TEMPERATURE = 10.0
STUB_ID = "stub-v1"
EXTERNAL_ID = "external-file"
PROJECTION_EPS = 1e-12


@dataclass(frozen=True)
class TextAnchorSet:
    prompts: tuple[str, str]
    vectors: np.ndarray  # [2, D], unit rows, read-only
    provider_id: str

    def __post_init__(self):
        prompts = tuple(self.prompts)
        vecs = np.array(self.vectors, dtype=np.float64)
        if len(prompts) != 2 or vecs.shape[0] != 2 or vecs.ndim != 2:
            raise ValidationError("exactly two anchors are required")
        norms = np.linalg.norm(vecs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValidationError(f"anchor vectors must have unit norm, got {norms}")
        vecs.flags.writeable = False
        object.__setattr__(self, "prompts", prompts)
        object.__setattr__(self, "vectors", vecs)

    @property
    def embed_dim(self) -> int:
        return int(self.vectors.shape[1])

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.vectors, dtype=dtype)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(list(self.prompts)).encode())
        h.update(self.vectors.astype("<f8").tobytes())
        return h.hexdigest()

    def prompt_digests(self) -> list[str]:
        return [hashlib.sha256(p.encode()).hexdigest()[:16] for p in self.prompts]


class StubTextEncoder:
    """Maps a prompt to a unit vector seeded by the sha256 of the prompt."""

    provider_id = STUB_ID

    def __init__(self, dim: int = DEFAULT_EMBED_DIM):
        self.dim = int(dim)

    def __call__(self, prompt: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(f"{STUB_ID}:{prompt}".encode()).digest()[:8], "little")
        v = np.random.default_rng(seed).standard_normal(self.dim)
        return v / np.linalg.norm(v)


class ExternalEmbeddings:
    """Precomputed embeddings from a JSON object ``{prompt: [floats]}``."""

    provider_id = EXTERNAL_ID

    def __init__(self, path, dim: int | None = None):
        self.path = Path(path)
        self.table = json.loads(self.path.read_text())
        if not isinstance(self.table, dict):
            raise ValidationError(f"{self.path}: expected a JSON object mapping prompts to vectors")
        self.dim = dim

    def __call__(self, prompt: str) -> np.ndarray:
        if prompt not in self.table:
            raise KeyError(f"{self.path}: no embedding for prompt {prompt!r}")
        v = np.asarray(self.table[prompt], dtype=np.float64)
        if v.ndim != 1 or (self.dim is not None and v.shape[0] != self.dim):
            raise ValidationError(f"embedding for {prompt!r} has shape {v.shape}, expected ({self.dim},)")
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0:
            raise ValidationError(f"embedding for {prompt!r} is zero or non-finite")
        return v / n


def make_provider(kind: str = "stub", embed_dim: int = DEFAULT_EMBED_DIM, path=None):
    if kind in ("stub", STUB_ID):
        return StubTextEncoder(embed_dim)
    if kind in ("external", "external-file"):
        if path is None:
            raise ValidationError("the external-file provider needs an embeddings path")
        return ExternalEmbeddings(path, embed_dim)
    raise ValidationError(f"unknown anchor provider {kind!r}")


def embed_prompts(prompts, provider=None) -> TextAnchorSet:
    prompts = tuple(prompts)
    if len(prompts) != 2 or not all(isinstance(p, str) and p for p in prompts):
        raise ValidationError("embed_prompts needs exactly two non-empty prompts")
    provider = provider or StubTextEncoder()
    vecs = np.stack([provider(p) for p in prompts])
    return TextAnchorSet(prompts, vecs, provider.provider_id)


class ProjectionHead(nn.Module):
    """Linear map W: R^d -> R^D and a positive temperature stored as log(tau)."""

    def __init__(self, latent_dim: int, embed_dim: int = DEFAULT_EMBED_DIM,
                 temperature: float = INITIAL_TEMPERATURE, freeze_tau: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(embed_dim, latent_dim) / math.sqrt(latent_dim))
        self.log_tau = nn.Parameter(torch.tensor(math.log(temperature)), requires_grad=not freeze_tau)

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def forward(self, mu: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
        return cosine_logits(project_and_normalize(mu, self.weight), anchors, self.tau)


def project_and_normalize(mu: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """W mu / ||W mu|| for a single latent [d] or a batch [B, d]."""
    proj = mu @ weight.T
    norm = proj.norm(dim=-1, keepdim=True)
    if torch.any(norm < PROJECTION_EPS):
        raise DegenerateProjectionError("projected latent has zero norm")
    return proj / norm


def cosine_logits(mu_bar: torch.Tensor, anchors, tau) -> torch.Tensor:
    """s_k = tau * <mu_bar, t_k> for both anchors; anchors are never differentiated."""
    if isinstance(anchors, TextAnchorSet):
        anchors = anchors.tensor(mu_bar.dtype)
    anchors = anchors.detach().to(mu_bar.dtype)
    return tau * (mu_bar @ anchors.T)


def alignment_loss(logits: torch.Tensor, y) -> torch.Tensor:
    """Softmax cross-entropy -log softmax(s)_y, averaged over the batch."""
    logits = logits.reshape(-1, 2)
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if torch.any((y < 0) | (y > 1)):
        raise ValidationError("labels must be 0 or 1")
    return F.cross_entropy(logits, y)
