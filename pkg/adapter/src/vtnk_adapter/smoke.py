"""Shop-to-Model smoke run against a sample directory in VITON-HD layout.

Expected layout (one sample per stem, PNG rasters, canonical part ids in
the parse maps):

    {root}/image/{stem}.png            target person
    {root}/cloth/{stem}.png            shop garment
    {root}/cloth-mask/{stem}.png       garment mask
    {root}/agnostic/{stem}.png         cloth-agnostic person
    {root}/agnostic-mask/{stem}.png    agnostic region mask
    {root}/openpose-json/{stem}.json   target keypoints
    {root}/parse/{stem}.png            target part segmentation
    {root}/pseudo-pose/{stem}.json     wearer keypoints for morphing
    {root}/pseudo-parse/{stem}.png     wearer part segmentation

The wearer pose/parse describe the synthesized garment wearer (external
pose/parsing tools produce them in a real deployment).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from vtnk import io as vio
from vtnk import pipeline as pl

from .backends import TinyLatentBackend
from .denoiser import TorchDenoiser


def load_sample(root, stem: str) -> pl.TryOnInputs:
    root = Path(root)
    target_parsing = vio.read_parsing(root / "parse" / f"{stem}.png")
    source_parsing = vio.read_parsing(root / "pseudo-parse" / f"{stem}.png")
    return pl.TryOnInputs(
        garment_image=vio.read_image(root / "cloth" / f"{stem}.png"),
        garment_mask=vio.read_mask(root / "cloth-mask" / f"{stem}.png"),
        person_image=vio.read_image(root / "image" / f"{stem}.png"),
        agnostic_image=vio.read_image(root / "agnostic" / f"{stem}.png"),
        agnostic_mask=vio.read_mask(root / "agnostic-mask" / f"{stem}.png"),
        target_skeleton=vio.read_keypoints(
            root / "openpose-json" / f"{stem}.json", image_size=target_parsing.shape
        )[0],
        target_parsing=target_parsing,
        source_skeleton=vio.read_keypoints(
            root / "pseudo-pose" / f"{stem}.json", image_size=source_parsing.shape
        )[0],
        source_parsing=source_parsing,
        shop_mode=True,
    )


def run_shop_to_model(sample_root, stem: str, out_path, backend=None,
                      num_steps: int = 6, seed: int = 0) -> np.ndarray:
    """Full shop-garment try-on for one sample; writes and returns the image."""
    inputs = load_sample(sample_root, stem)
    denoiser = TorchDenoiser(backend if backend is not None else TinyLatentBackend())
    config = pl.TryOnConfig.for_category("upper", num_steps=num_steps, random_seed=seed)
    result = pl.run_tryon(inputs, denoiser, config)
    vio.write_image(out_path, result)
    return result
