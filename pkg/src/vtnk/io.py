"""Bit-exact file formats exchanged with external tools and backends.

Tensor container layout (all integers little-endian, independent of host):

    offset  size        field
    0       4           magic ``VTNK``
    4       2           version (u16), currently 1
    6       1           dtype code (u8), 0 = float32
    7       1           rank (u8)
    8       4 * rank    dims (u32 each)
    ...     prod(dims)*4  payload, row-major float32

Keypoint documents are JSON with a top-level ``people`` list; each person
carries ``pose_keypoints_2d``: 75 numbers = 25 x (x, y, confidence), the
layout emitted by common 25-point pose estimators.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    BadMagic,
    DecodeError,
    MalformedDocument,
    TruncatedPayload,
    UnsupportedDtype,
    UnsupportedFormat,
    UnsupportedVersion,
    WrongKeypointCount,
)
from .geometry import NUM_KEYPOINTS, PART_LEGEND, SegmentationMap, Skeleton

MAGIC = b"VTNK"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<HBB")  # version, dtype, rank


def write_tensor(path, tensor: np.ndarray) -> None:
    """Serialize an array as version-1 float32 container (row-major, LE)."""
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    if arr.ndim > 255:
        raise ValueError("rank exceeds container limit")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(VERSION, DTYPE_F32, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a tensor container; the write -> read round trip is bitwise exact."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 8:
        raise TruncatedPayload(f"{path}: header cut short")
    version, dtype, rank = _HEADER.unpack_from(data, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: version {version} (reader supports {VERSION})")
    if dtype != DTYPE_F32:
        raise UnsupportedDtype(f"{path}: dtype code {dtype} (reader supports 0=float32)")
    dims_end = 8 + 4 * rank
    if len(data) < dims_end:
        raise TruncatedPayload(f"{path}: dims cut short")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = data[dims_end:]
    if len(payload) != count * 4:
        raise TruncatedPayload(
            f"{path}: payload has {len(payload)} bytes, dims {dims} require {count * 4}"
        )
    arr = np.frombuffer(payload, dtype="<f4", count=count).reshape(dims)
    return arr.copy()


# ---------------------------------------------------------------------------
# keypoints


def read_keypoints(path, image_size: tuple[int, int] | None = None) -> list[Skeleton]:
    """Parse a keypoint JSON document into one Skeleton per person entry.

    When ``image_size`` (height, width) is given, points lying outside the
    canvas are flagged invalid by zeroing their confidence.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedDocument(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("people"), list):
        raise MalformedDocument(f"{path}: missing 'people' list")
    skeletons = []
    for idx, person in enumerate(doc["people"]):
        if not isinstance(person, dict) or "pose_keypoints_2d" not in person:
            raise MalformedDocument(f"{path}: person {idx} missing 'pose_keypoints_2d'")
        vals = person["pose_keypoints_2d"]
        if not isinstance(vals, list) or len(vals) != NUM_KEYPOINTS * 3:
            raise WrongKeypointCount(
                f"{path}: person {idx} has {len(vals) if isinstance(vals, list) else '?'} "
                f"values, expected {NUM_KEYPOINTS * 3}"
            )
        try:
            kp = np.asarray(vals, dtype=float).reshape(NUM_KEYPOINTS, 3)
        except ValueError as exc:
            raise MalformedDocument(f"{path}: person {idx} has non-numeric values") from exc
        kp[:, 2] = np.clip(kp[:, 2], 0.0, 1.0)
        bad = ~np.isfinite(kp[:, 0]) | ~np.isfinite(kp[:, 1])
        if image_size is not None:
            h, w = image_size
            bad |= (kp[:, 0] < 0) | (kp[:, 0] > w - 1) | (kp[:, 1] < 0) | (kp[:, 1] > h - 1)
        kp[bad, 2] = 0.0
        kp[bad, 0:2] = 0.0
        skeletons.append(Skeleton(kp, image_size=image_size))
    return skeletons


def write_keypoints(path, skeletons: list[Skeleton]) -> None:
    doc = {
        "people": [
            {"pose_keypoints_2d": [float(v) for v in sk.keypoints.ravel()]}
            for sk in skeletons
        ]
    }
    Path(path).write_text(json.dumps(doc))


# ---------------------------------------------------------------------------
# rasters

MASK_THRESHOLD = 128  # 8-bit midpoint


def _open_raster(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except UnidentifiedImageError as exc:
        raise DecodeError(f"{path}: not a recognized raster file") from exc
    except OSError as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    return img


def read_mask(path) -> np.ndarray:
    """8-bit grayscale raster -> uint8 {0,1} grid (threshold at 128)."""
    img = _open_raster(path)
    if img.mode != "L":
        raise UnsupportedFormat(f"{path}: mask must be 8-bit grayscale, got mode {img.mode}")
    return (np.asarray(img, dtype=np.uint8) >= MASK_THRESHOLD).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """8-bit RGB raster -> float (H, W, 3) in [0, 1]."""
    img = _open_raster(path)
    if img.mode != "RGB":
        raise UnsupportedFormat(f"{path}: image must be 8-bit RGB, got mode {img.mode}")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_image(path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=float)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG")


def write_mask(path, mask: np.ndarray) -> None:
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_parsing(path, legend: dict[int, str] | None = None) -> SegmentationMap:
    """8-bit grayscale raster of part ids -> SegmentationMap (canonical legend)."""
    img = _open_raster(path)
    if img.mode != "L":
        raise UnsupportedFormat(f"{path}: parsing must be 8-bit grayscale, got mode {img.mode}")
    labels = np.asarray(img, dtype=np.int32)
    return SegmentationMap(labels, legend or dict(PART_LEGEND))


def write_parsing(path, parsing: SegmentationMap) -> None:
    labels = parsing.labels
    if labels.max(initial=0) > 255 or labels.min(initial=0) < 0:
        raise ValueError("part ids must fit 8-bit grayscale")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")
