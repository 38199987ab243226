"""Torch backends the adapter can drive.

A backend is a torch module predicting per-step noise from (latent,
timestep, conditioning channels), with named self-attention blocks exposing
per-head tap/inject hooks. ``TinyLatentBackend`` is a small deterministic
backend bundled for CI and desk experiments; real checkpoints plug in
through the same interface via a ``module:callable`` factory path.
"""

from __future__ import annotations

import importlib

import numpy as np
import torch
from torch import nn

from vtnk.errors import VtnkError

LATENT_CHANNELS = 4
COND_CHANNELS = 5
TRAIN_TIMESTEPS = 1000


class BackendLoadError(VtnkError):
    """Backend factory could not be resolved or constructed."""


def alpha_profile() -> torch.Tensor:
    betas = torch.linspace(1e-4, 2e-2, TRAIN_TIMESTEPS, dtype=torch.float64)
    return torch.cumprod(1.0 - betas, dim=0)


class HookedSelfAttention(nn.Module):
    """Multi-head self-attention with a per-head hook on the context matrix.

    The hook receives (head_index, q, k, v) as (tokens, head_dim) tensors and
    may return a replacement context of the same shape; returning None keeps
    the default softmax(q k^T / sqrt(d)) v.
    """

    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError("width must divide evenly into heads")
        self.heads = heads
        self.head_dim = width // heads
        self.to_q = nn.Linear(width, width, bias=False)
        self.to_k = nn.Linear(width, width, bias=False)
        self.to_v = nn.Linear(width, width, bias=False)
        self.to_out = nn.Linear(width, width)
        self.head_hook = None  # set by the session/denoiser around forward()

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        n, _ = tokens.shape
        q = self.to_q(tokens).reshape(n, self.heads, self.head_dim)
        k = self.to_k(tokens).reshape(n, self.heads, self.head_dim)
        v = self.to_v(tokens).reshape(n, self.heads, self.head_dim)
        contexts = []
        for h in range(self.heads):
            ctx = None
            if self.head_hook is not None:
                ctx = self.head_hook(h, q[:, h], k[:, h], v[:, h])
            if ctx is None:
                logits = q[:, h] @ k[:, h].T / np.sqrt(self.head_dim)
                ctx = torch.softmax(logits, dim=1) @ v[:, h]
            contexts.append(ctx)
        return self.to_out(torch.cat(contexts, dim=1))


class TinyLatentBackend(nn.Module):
    """Deterministic toy latent-diffusion backend with two attention blocks.

    Same parameterization as the kernel's desk denoiser: a bounded clean
    prediction drives a partial noise estimate, keeping per-step updates
    invertible. Weights are seeded; the module runs in eval mode on CPU.
    """

    name = "tiny-latent-backend"
    version = "1"

    def __init__(self, width: int = 16, heads: int = 2, seed: int = 99,
                 noise_fraction: float = 0.7, latent_weight: float = 0.2):
        super().__init__()
        torch.manual_seed(seed)
        self.noise_fraction = noise_fraction
        self.latent_weight = latent_weight
        self.width = width
        cin = LATENT_CHANNELS + COND_CHANNELS + 1
        self.conv_in = nn.Conv2d(cin, width, 3, padding=1)
        self.attn1 = HookedSelfAttention(width, heads)
        self.conv_mid = nn.Conv2d(width, width, 3, padding=1)
        self.attn2 = HookedSelfAttention(width, heads)
        self.conv_out = nn.Conv2d(width, LATENT_CHANNELS, 3, padding=1)
        with torch.no_grad():
            # unit-norm kernels per output channel keep layer gains near one
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    norms = m.weight.flatten(1).norm(dim=1).clamp_min(1e-6)
                    m.weight /= norms[:, None, None, None]
        self.register_buffer("alphas", alpha_profile())
        self.eval()

    def attention_blocks(self) -> dict[str, HookedSelfAttention]:
        return {"attn1": self.attn1, "attn2": self.attn2}

    def _tokens(self, feat: torch.Tensor) -> torch.Tensor:
        c, h, w = feat.shape
        return feat.reshape(c, h * w).T

    def _grid(self, tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
        return tokens.T.reshape(-1, h, w)

    @torch.no_grad()
    def predict_clean(self, latent: torch.Tensor, timestep: int,
                      cond: torch.Tensor, scalar: float) -> torch.Tensor:
        _, h, w = latent.shape
        plane = torch.full((1, h, w), timestep / TRAIN_TIMESTEPS + scalar,
                           dtype=latent.dtype)
        x = torch.cat([self.latent_weight * latent, cond, plane], dim=0)
        f = torch.tanh(self.conv_in(x[None])[0])
        f = torch.tanh(self._grid(self.attn1(self._tokens(f)), h, w))
        f = torch.tanh(self.conv_mid(f[None])[0])
        f = torch.tanh(self._grid(self.attn2(self._tokens(f)), h, w))
        return 0.5 + 0.5 * torch.tanh(self.conv_out(f[None])[0])

    @torch.no_grad()
    def forward(self, latent: torch.Tensor, timestep: int,
                cond: torch.Tensor, scalar: float = 0.0) -> torch.Tensor:
        clean = self.predict_clean(latent, timestep, cond, scalar)
        abar = self.alphas[int(timestep)].to(latent.dtype)
        return self.noise_fraction * (latent - torch.sqrt(abar) * clean) / torch.sqrt(1.0 - abar)


def load_backend(spec: str | None) -> nn.Module:
    """Resolve a backend: None for the bundled tiny one, else 'module:callable'."""
    if spec is None or spec == "tiny":
        return TinyLatentBackend()
    if ":" not in spec:
        raise BackendLoadError(f"backend spec {spec!r} must look like 'module:callable'")
    mod_name, attr = spec.split(":", 1)
    try:
        factory = getattr(importlib.import_module(mod_name), attr)
        backend = factory()
    except Exception as exc:
        raise BackendLoadError(f"cannot load backend {spec!r}: {exc}") from exc
    if not hasattr(backend, "attention_blocks"):
        raise BackendLoadError(f"backend {spec!r} exposes no attention_blocks()")
    return backend
