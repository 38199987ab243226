"""Adapter sessions: file-level step execution against a loaded backend.

A session pins one backend and one latent geometry; its layer registry (one
entry per attention head) is enumerated at startup and stays frozen. Steps
exchange everything through interchange tensor files, so the kernel side
never has to import torch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from vtnk import io as vio
from vtnk.errors import ShapeMismatch, VtnkError

from .backends import COND_CHANNELS, LATENT_CHANNELS, load_backend


class UnknownLayer(VtnkError):
    """Injection targeted a layer id missing from the session registry."""


@dataclass(frozen=True)
class LayerEntry:
    tokens: int
    dim: int
    grid: tuple[int, int]


class AdapterSession:
    """One backend + one latent geometry + one interchange directory."""

    def __init__(self, workdir, backend: str | None = None,
                 latent_size: tuple[int, int] = (8, 8)):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.backend = load_backend(backend) if (backend is None or isinstance(backend, str)) else backend
        self.latent_size = tuple(latent_size)
        h, w = self.latent_size
        self.registry: dict[str, LayerEntry] = {}
        self._head_index: dict[str, tuple[str, int]] = {}
        for block_name, block in self.backend.attention_blocks().items():
            for head in range(block.heads):
                layer_id = f"{block_name}.head{head}"
                self.registry[layer_id] = LayerEntry(h * w, block.head_dim, (h, w))
                self._head_index[layer_id] = (block_name, head)

    # -- manifest ----------------------------------------------------------

    def write_manifest(self, path=None) -> Path:
        path = Path(path) if path else self.workdir / "session.json"
        doc = {
            "backend": getattr(self.backend, "name", type(self.backend).__name__),
            "version": getattr(self.backend, "version", "0"),
            "latent_size": list(self.latent_size),
            "layers": {
                lid: {"tokens": e.tokens, "dim": e.dim, "grid": list(e.grid)}
                for lid, e in self.registry.items()
            },
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return path

    # -- step plumbing -----------------------------------------------------

    def _load_latent(self, latent_file) -> torch.Tensor:
        latent = vio.read_tensor(latent_file)
        h, w = self.latent_size
        if latent.shape != (LATENT_CHANNELS, h, w):
            raise ShapeMismatch(
                f"{latent_file}: latent {latent.shape} does not match session "
                f"geometry {(LATENT_CHANNELS, h, w)}"
            )
        return torch.from_numpy(latent.astype(np.float32))

    def _load_conditioning(self, conditioning_files) -> tuple[torch.Tensor, float]:
        concat = vio.read_tensor(conditioning_files["concat"])
        h, w = self.latent_size
        if concat.shape != (COND_CHANNELS, h, w):
            raise ShapeMismatch(
                f"conditioning channels {concat.shape} do not match "
                f"{(COND_CHANNELS, h, w)}"
            )
        scalar = 0.0
        prompt_file = conditioning_files.get("prompt")
        if prompt_file is not None:
            prompt = vio.read_tensor(prompt_file)
            if prompt.ndim != 1:
                raise ShapeMismatch(f"{prompt_file}: prompt embedding must be rank 1")
            scalar = 0.1 * float(np.tanh(prompt.astype(float).mean()))
        return torch.from_numpy(concat.astype(np.float32)), scalar

    def _run(self, latent, timestep, cond, scalar, hooks_by_block):
        blocks = self.backend.attention_blocks()
        try:
            for name, hook in hooks_by_block.items():
                blocks[name].head_hook = hook
            return self.backend(latent, int(timestep), cond, scalar)
        finally:
            for name in hooks_by_block:
                blocks[name].head_hook = None

    def export_step_tensors(self, latent_file, timestep, conditioning_files,
                            out_dir=None) -> dict[str, Path]:
        """Run one step, writing per-head q/k/v/o taps plus the prediction.

        Files land in ``out_dir`` (default: session workdir) named
        ``{layer_id}_{q|k|v|o}.vtnk`` and ``eps.vtnk``. All inputs are
        validated and the step fully computed before anything is written, so
        a failure leaves no partial output.
        """
        out_dir = Path(out_dir) if out_dir else self.workdir
        latent = self._load_latent(latent_file)
        cond, scalar = self._load_conditioning(conditioning_files)

        taps: dict[str, dict[str, np.ndarray]] = {}

        def tap_for(block_name):
            def grab(head, q, k, v):
                lid = f"{block_name}.head{head}"
                logits = q @ k.T / np.sqrt(q.shape[1])
                ctx = torch.softmax(logits, dim=1) @ v
                taps[lid] = {
                    "q": q.numpy().copy(), "k": k.numpy().copy(),
                    "v": v.numpy().copy(), "o": ctx.numpy().copy(),
                }
                return ctx
            return grab

        hooks = {name: tap_for(name) for name in self.backend.attention_blocks()}
        eps = self._run(latent, timestep, cond, scalar, hooks)

        out_dir.mkdir(parents=True, exist_ok=True)
        written: dict[str, Path] = {}
        for lid, parts in taps.items():
            for part, arr in parts.items():
                path = out_dir / f"{lid}_{part}.vtnk"
                vio.write_tensor(path, arr)
                written[f"{lid}_{part}"] = path
        eps_path = out_dir / "eps.vtnk"
        vio.write_tensor(eps_path, eps.numpy())
        written["eps"] = eps_path
        return written

    def run_injected_step(self, latent_file, timestep, injection_files,
                          conditioning_files, out_file=None) -> Path:
        """Run one step substituting attention contexts at registered layers.

        ``injection_files`` maps layer_id -> interchange file holding the
        (tokens, dim) replacement context for that head.
        """
        out_file = Path(out_file) if out_file else self.workdir / "eps_injected.vtnk"
        latent = self._load_latent(latent_file)
        cond, scalar = self._load_conditioning(conditioning_files)

        injections: dict[tuple[str, int], torch.Tensor] = {}
        for lid, path in injection_files.items():
            if lid not in self.registry:
                raise UnknownLayer(f"layer {lid!r} not in session registry")
            entry = self.registry[lid]
            arr = vio.read_tensor(path)
            if arr.shape != (entry.tokens, entry.dim):
                raise ShapeMismatch(
                    f"{path}: injection {arr.shape} does not match layer "
                    f"{lid} registry shape {(entry.tokens, entry.dim)}"
                )
            injections[self._head_index[lid]] = torch.from_numpy(arr.astype(np.float32))

        def inject_for(block_name):
            def swap(head, q, k, v):
                return injections.get((block_name, head))
            return swap

        hooks = {name: inject_for(name) for name in self.backend.attention_blocks()}
        eps = self._run(latent, timestep, cond, scalar, hooks)
        vio.write_tensor(out_file, eps.numpy())
        return out_file
