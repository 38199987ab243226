"""In-process bridge: a torch backend behind the kernel's denoiser contract.

Where the session exchanges files per step, this class lets the kernel
pipeline drive the backend directly: kernel attention hooks fire per head
with numpy (tokens, dim) tensors, and whatever they return is substituted
into the backend's attention blocks.
"""

from __future__ import annotations

import numpy as np
import torch

from vtnk import attention as attn
from vtnk import pipeline as pl
from vtnk.errors import DimensionMismatch

from .backends import COND_CHANNELS, LATENT_CHANNELS


class TorchDenoiser(pl.DenoiserContract):
    """DenoiserContract implementation wrapping a torch backend module."""

    def __init__(self, backend):
        super().__init__()
        self.backend = backend

    def layer_registry(self, latent_shape):
        _, h, w = latent_shape
        registry = {}
        for name, block in self.backend.attention_blocks().items():
            for head in range(block.heads):
                registry[f"{name}.head{head}"] = pl.LayerInfo(h * w, block.head_dim, (h, w))
        return registry

    def predict(self, latent, timestep_index, conditioning):
        z = np.asarray(latent, dtype=np.float32)
        cond = np.asarray(conditioning.concat_channels, dtype=np.float32)
        if z.ndim != 3 or z.shape[0] != LATENT_CHANNELS:
            raise DimensionMismatch(f"latent must be ({LATENT_CHANNELS}, h, w), got {z.shape}")
        if cond.shape != (COND_CHANNELS,) + z.shape[1:]:
            raise DimensionMismatch(
                f"conditioning channels {cond.shape} do not match latent {z.shape}"
            )
        scalar = 0.0
        if conditioning.prompt_embedding.size:
            scalar = 0.1 * float(np.tanh(conditioning.prompt_embedding.mean()))

        def bridge_for(block_name):
            def bridge(head, q, k, v):
                out = self._offer_hook(
                    f"{block_name}.head{head}",
                    attn.AttentionTensors(
                        q.numpy().astype(float),
                        k.numpy().astype(float),
                        v.numpy().astype(float),
                    ),
                )
                if out is None:
                    return None
                return torch.from_numpy(np.asarray(out, dtype=np.float32))
            return bridge

        blocks = self.backend.attention_blocks()
        try:
            for name, block in blocks.items():
                block.head_hook = bridge_for(name)
            eps = self.backend(torch.from_numpy(z), int(timestep_index),
                               torch.from_numpy(cond), scalar)
        finally:
            for block in blocks.values():
                block.head_hook = None
        return eps.numpy().astype(float)
