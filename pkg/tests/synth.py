"""Shared synthetic fixtures: stick-figure skeletons, part maps, and images.

Everything lives on a 64x64 canvas by default, with keypoints placed so every
default region's bounding box has positive area (slightly bent limbs).
"""

from __future__ import annotations

import numpy as np

from vtnk import geometry as geo
from vtnk import pipeline as pl

CANVAS = 64

# (x, y) per BODY_25 index
_STICK_POINTS = [
    (32, 6), (32, 14),
    (22, 16), (18, 27), (16, 38),
    (42, 16), (46, 27), (48, 38),
    (32, 40), (26, 41), (25, 50), (24, 60),
    (38, 41), (39, 50), (40, 60),
    (30, 4), (34, 4), (28, 5), (36, 5),
    (41, 62), (43, 62), (39, 62),
    (23, 62), (21, 62), (25, 62),
]


def stick_skeleton(dx: float = 0.0, dy: float = 0.0, size: int = CANVAS,
                   confidence: float = 0.9) -> geo.Skeleton:
    kp = np.array([[x + dx, y + dy, confidence] for x, y in _STICK_POINTS])
    return geo.Skeleton(kp, image_size=(size, size))


def upper_parsing(size: int = CANVAS) -> geo.SegmentationMap:
    lab = np.zeros((size, size), np.int32)
    lab[15:41, 23:42] = 1   # torso
    lab[16:28, 42:47] = 2   # left upper arm
    lab[16:28, 18:23] = 3   # right upper arm
    lab[27:39, 46:49] = 4   # left lower arm
    lab[27:39, 16:19] = 5   # right lower arm
    return geo.SegmentationMap(lab)


def lower_parsing(size: int = CANVAS) -> geo.SegmentationMap:
    lab = np.zeros((size, size), np.int32)
    lab[38:42, 27:38] = 6    # hip
    lab[41:51, 36:41] = 7    # left upper leg
    lab[41:51, 24:29] = 8    # right upper leg
    lab[50:61, 38:42] = 9    # left lower leg
    lab[50:61, 23:27] = 10   # right lower leg
    return geo.SegmentationMap(lab)


def person_image(size: int = CANVAS) -> np.ndarray:
    """Figure with a flat mid-gray garment on a dark background."""
    img = np.full((size, size, 3), 0.35)
    img[15:41, 23:42] = [0.5, 0.5, 0.5]
    return img


def blocky(image: np.ndarray) -> np.ndarray:
    """Quantize an image to the codec's 8x8 block grid (codec-lossless)."""
    return pl.decode_latent(pl.encode_image(image))


def garment_square(size: int = CANVAS, value=(0.5, 0.5, 0.5)):
    """Flat garment patch plus its mask on a dark background."""
    img = np.full((size, size, 3), 0.12)
    mask = np.zeros((size, size))
    img[16:40, 24:40] = value
    mask[16:40, 24:40] = 1
    return img, mask


def agnostic_fixture(size: int = CANVAS):
    """Cloth-agnostic image/mask pair for the stick person."""
    mask = np.zeros((size, size))
    mask[16:40, 24:40] = 1
    img = person_image(size) * (1 - mask[..., None])
    return img, mask


def two_patch_infused(size: int = CANVAS) -> np.ndarray:
    """Person image whose garment area is two mismatched flat patches."""
    img = person_image(size)
    img[16:40, 24:32] = [0.2, 0.2, 0.2]
    img[16:40, 32:40] = [0.8, 0.8, 0.8]
    return img


def random_skeleton(rng: np.random.Generator, size: int = CANVAS) -> geo.Skeleton:
    kp = np.column_stack([
        rng.uniform(0, size - 1, geo.NUM_KEYPOINTS),
        rng.uniform(0, size - 1, geo.NUM_KEYPOINTS),
        rng.uniform(0, 1, geo.NUM_KEYPOINTS),
    ])
    return geo.Skeleton(kp, image_size=(size, size))


def seam_variance(image: np.ndarray, rows=slice(16, 40), cols=slice(24, 40)) -> float:
    """Variance of the column profile across the stitched garment band."""
    profile = image[rows, cols, :].mean(axis=(0, 2))
    return float(profile.var())
