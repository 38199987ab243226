"""Skeleton-driven region correspondence and piecewise perspective warping.

A garment worn by one body is morphed onto another by (1) building per-region
bounding boxes from 25-point pose skeletons, (2) isolating each region's
pixels with a part segmentation map, (3) fitting one homography per region
from box-corner correspondences, and (4) warping each region independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import (
    AllRegionsAbsent,
    DegenerateCorners,
    DimensionMismatch,
    EmptyMask,
    MissingHomography,
)

# BODY_25 keypoint layout (index -> joint)
BODY_25_NAMES = (
    "nose", "neck",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_shoulder", "left_elbow", "left_wrist",
    "mid_hip", "right_hip", "right_knee", "right_ankle",
    "left_hip", "left_knee", "left_ankle",
    "right_eye", "left_eye", "right_ear", "left_ear",
    "left_big_toe", "left_small_toe", "left_heel",
    "right_big_toe", "right_small_toe", "right_heel",
)
NUM_KEYPOINTS = 25

# Canonical part ids used by segmentation maps produced for this library.
PART_LEGEND = {
    1: "torso",
    2: "left_upper_arm",
    3: "right_upper_arm",
    4: "left_lower_arm",
    5: "right_lower_arm",
    6: "hip",
    7: "left_upper_leg",
    8: "right_upper_leg",
    9: "left_lower_leg",
    10: "right_lower_leg",
}

CATEGORIES = ("upper", "lower", "dress-upper-section", "dress-lower-section")


@dataclass(frozen=True, eq=False)
class Keypoint:
    x: float
    y: float
    confidence: float


@dataclass(frozen=True, eq=False)
class Skeleton:
    """25 pose keypoints as an (25, 3) array of (x, y, confidence) rows.

    ``image_size`` is (height, width) of the canvas the keypoints live on;
    pass None when unknown (boxes are then not clipped).
    """

    keypoints: np.ndarray
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=float)
        if kp.shape != (NUM_KEYPOINTS, 3):
            raise ValueError(f"expected ({NUM_KEYPOINTS}, 3) keypoints, got {kp.shape}")
        conf = kp[:, 2]
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("keypoint confidences must lie in [0, 1]")
        valid = conf > 0
        if not np.all(np.isfinite(kp[valid, :2])):
            raise ValueError("valid keypoints must have finite coordinates")
        if self.image_size is not None:
            h, w = self.image_size
            x, y = kp[:, 0], kp[:, 1]
            oob = valid & ((x < 0) | (x > w - 1) | (y < 0) | (y > h - 1))
            if np.any(oob):
                raise ValueError(
                    "valid keypoints outside image bounds; flag them with confidence 0"
                )
        object.__setattr__(self, "keypoints", kp)

    def valid_mask(self, threshold: float = 0.0) -> np.ndarray:
        return self.keypoints[:, 2] > threshold


@dataclass(frozen=True)
class Region:
    region_id: int
    name: str
    keypoint_indices: tuple[int, ...]
    part_labels: frozenset[str]


@dataclass(frozen=True)
class RegionSpec:
    """Ordered region definitions for one garment category.

    Order matters: later regions overwrite earlier ones where warped regions
    overlap (limbs listed after torso/hip so they occlude it).
    """

    category: str
    regions: tuple[Region, ...]

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        ids = [r.region_id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise ValueError("region ids must be unique")
        if self.category in ("upper", "lower") and len(self.regions) != 5:
            raise ValueError(f"category {self.category!r} must define exactly 5 regions")
        for r in self.regions:
            if any(i < 0 or i >= NUM_KEYPOINTS for i in r.keypoint_indices):
                raise ValueError(f"region {r.name!r} has keypoint index out of range")

    def region_by_id(self, region_id: int) -> Region:
        for r in self.regions:
            if r.region_id == region_id:
                return r
        raise KeyError(region_id)


def _upper_regions() -> tuple[Region, ...]:
    return (
        Region(1, "torso", (1, 2, 5, 8, 9, 12), frozenset({"torso"})),
        Region(2, "left_upper_arm", (5, 6), frozenset({"left_upper_arm"})),
        Region(3, "right_upper_arm", (2, 3), frozenset({"right_upper_arm"})),
        Region(4, "left_lower_arm", (6, 7), frozenset({"left_lower_arm"})),
        Region(5, "right_lower_arm", (3, 4), frozenset({"right_lower_arm"})),
    )


def _lower_regions() -> tuple[Region, ...]:
    return (
        Region(1, "hip_above", (1, 8, 9, 12), frozenset({"hip"})),
        Region(2, "left_upper_leg", (12, 13), frozenset({"left_upper_leg"})),
        Region(3, "right_upper_leg", (9, 10), frozenset({"right_upper_leg"})),
        Region(4, "left_lower_leg", (13, 14), frozenset({"left_lower_leg"})),
        Region(5, "right_lower_leg", (10, 11), frozenset({"right_lower_leg"})),
    )


def default_region_spec(category: str) -> RegionSpec:
    """Built-in five-region layouts for upper/lower garments and dress sections."""
    if category == "upper":
        return RegionSpec("upper", _upper_regions())
    if category == "lower":
        return RegionSpec("lower", _lower_regions())
    if category == "dress-upper-section":
        return RegionSpec("dress-upper-section", _upper_regions())
    if category == "dress-lower-section":
        return RegionSpec("dress-lower-section", _lower_regions())
    raise ValueError(f"unknown category {category!r}")


def dress_region_specs() -> tuple[RegionSpec, RegionSpec]:
    """Dresses are processed as two independent sections and merged."""
    return (default_region_spec("dress-upper-section"),
            default_region_spec("dress-lower-section"))


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError("box min must not exceed max")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def corners(self) -> np.ndarray:
        """Corner points in fixed (TL, TR, BR, BL) order, shape (4, 2)."""
        return np.array(
            [
                [self.x_min, self.y_min],
                [self.x_max, self.y_min],
                [self.x_max, self.y_max],
                [self.x_min, self.y_max],
            ],
            dtype=float,
        )

    def clipped(self, image_size: tuple[int, int]) -> "BoundingBox":
        h, w = image_size
        return BoundingBox(
            min(max(self.x_min, 0.0), w - 1.0),
            min(max(self.y_min, 0.0), h - 1.0),
            min(max(self.x_max, 0.0), w - 1.0),
            min(max(self.y_max, 0.0), h - 1.0),
        )


@dataclass(frozen=True, eq=False)
class SegmentationMap:
    """Integer part-id grid plus the legend mapping part id -> part name."""

    labels: np.ndarray
    label_legend: dict[int, str] = field(default_factory=lambda: dict(PART_LEGEND))

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be a 2-D integer grid")
        present = set(np.unique(labels).tolist()) - {0}
        unknown = present - set(self.label_legend)
        if unknown:
            raise ValueError(f"labels {sorted(unknown)} missing from legend")
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True, eq=False)
class RegionMask:
    mask: np.ndarray
    region_id: int

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise ValueError("mask must be 2-D")
        m = (m > 0).astype(np.uint8)
        object.__setattr__(self, "mask", m)


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map, normalized so matrix[2, 2] == 1."""

    matrix: np.ndarray
    converged: bool = True

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ValueError("homography must be a finite 3x3 matrix")
        if abs(m[2, 2]) < 1e-15:
            raise ValueError("homography cannot be normalized: matrix[2,2] ~ 0")
        object.__setattr__(self, "matrix", m / m[2, 2])

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2], m[1, 2] = tx, ty
        return cls(m)

    @property
    def is_invertible(self) -> bool:
        return abs(np.linalg.det(self.matrix)) > 1e-12

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) pixel points through the homography."""
        pts = np.asarray(points, dtype=float)
        ph = np.column_stack([pts, np.ones(len(pts))]) @ self.matrix.T
        return ph[:, :2] / ph[:, 2:3]


@dataclass(frozen=True, eq=False)
class WarpResult:
    image: np.ndarray           # (H, W, 3) in [0, 1]; zeros where uncovered
    coverage_mask: np.ndarray   # (H, W) bool
    per_region_status: list[tuple[int, str]]


# ---------------------------------------------------------------------------
# region boxes and masks


def build_region_boxes(
    skeleton: Skeleton,
    spec: RegionSpec,
    confidence_threshold: float = 0.3,
) -> list[tuple[int, BoundingBox]]:
    """Axis-aligned hull of each region's confident keypoints.

    Regions with fewer than two keypoints above the threshold are omitted
    from the result; raises AllRegionsAbsent when that leaves nothing.
    """
    if not (0.0 <= confidence_threshold < 1.0):
        raise ValueError("confidence_threshold must lie in [0, 1)")
    boxes: list[tuple[int, BoundingBox]] = []
    for region in spec.regions:
        pts = skeleton.keypoints[list(region.keypoint_indices)]
        sel = pts[:, 2] > confidence_threshold
        if int(sel.sum()) < 2:
            continue
        xs, ys = pts[sel, 0], pts[sel, 1]
        box = BoundingBox(xs.min(), ys.min(), xs.max(), ys.max())
        if skeleton.image_size is not None:
            box = box.clipped(skeleton.image_size)
        boxes.append((region.region_id, box))
    if not boxes:
        raise AllRegionsAbsent(
            f"no region of category {spec.category!r} has >= 2 keypoints above "
            f"confidence {confidence_threshold}"
        )
    return boxes


def region_masks(
    parsing: SegmentationMap,
    boxes: list[tuple[int, BoundingBox]],
    spec: RegionSpec,
) -> list[RegionMask]:
    """Per-region binary masks: pixel in region i iff its part label belongs
    to region i AND it lies inside region i's box (bounds inclusive)."""
    h, w = parsing.shape
    for _, box in boxes:
        if box.x_min < 0 or box.y_min < 0 or box.x_max > w - 1 or box.y_max > h - 1:
            raise DimensionMismatch(
                f"box {box} extends beyond the {h}x{w} parsing grid"
            )
    name_to_ids: dict[str, list[int]] = {}
    for pid, name in parsing.label_legend.items():
        name_to_ids.setdefault(name, []).append(pid)
    cols = np.arange(w)[None, :]
    rows = np.arange(h)[:, None]
    masks = []
    for region_id, box in boxes:
        region = spec.region_by_id(region_id)
        ids = sorted(i for lbl in region.part_labels for i in name_to_ids.get(lbl, []))
        label_hit = np.isin(parsing.labels, ids)
        in_box = (
            (cols >= box.x_min) & (cols <= box.x_max)
            & (rows >= box.y_min) & (rows <= box.y_max)
        )
        masks.append(RegionMask((label_hit & in_box).astype(np.uint8), region_id))
    return masks


# ---------------------------------------------------------------------------
# homography estimation: DLT initialization + Levenberg-Marquardt refinement


def _check_non_collinear(points: np.ndarray, label: str) -> None:
    for a, b, c in combinations(range(4), 3):
        u = points[b] - points[a]
        v = points[c] - points[a]
        lu = float(np.hypot(*u))
        lv = float(np.hypot(*v))
        if lu < 1e-9 or lv < 1e-9:
            raise DegenerateCorners(f"{label} corners {a},{b},{c} coincide")
        area2 = abs(u[0] * v[1] - u[1] * v[0])
        if area2 < 1e-9 * lu * lv:
            raise DegenerateCorners(f"{label} corners {a},{b},{c} are collinear")


def _hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Similarity conditioning: centroid to origin, mean distance sqrt(2).
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    ph = np.column_stack([pts, np.ones(len(pts))]) @ T.T
    return ph[:, :2], T


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    sn, ts = _hartley_normalize(src)
    dn, td = _hartley_normalize(dst)
    rows = []
    for (x, y), (u, v) in zip(sn, dn):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    hn = vt[-1].reshape(3, 3)
    return np.linalg.inv(td) @ hn @ ts


def _reprojection_residual(h8: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    m = np.append(h8, 1.0).reshape(3, 3)
    ph = np.column_stack([src, np.ones(len(src))]) @ m.T
    return (ph[:, :2] / ph[:, 2:3] - dst).ravel()


def _reprojection_jacobian(h8: np.ndarray, src: np.ndarray) -> np.ndarray:
    m = np.append(h8, 1.0).reshape(3, 3)
    jac = np.zeros((2 * len(src), 8))
    for i, (x, y) in enumerate(src):
        w = m[2, 0] * x + m[2, 1] * y + 1.0
        u = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w
        v = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w
        jac[2 * i, 0:3] = (x / w, y / w, 1.0 / w)
        jac[2 * i, 6:8] = (-u * x / w, -u * y / w)
        jac[2 * i + 1, 3:6] = (x / w, y / w, 1.0 / w)
        jac[2 * i + 1, 6:8] = (-v * x / w, -v * y / w)
    return jac


def estimate_homography(
    src_corners: np.ndarray,
    dst_corners: np.ndarray,
    *,
    max_iterations: int = 100,
    initial_damping: float = 1e-3,
    tolerance: float = 1e-10,
) -> Homography:
    """Fit the 3x3 map sending four source corners onto four destination
    corners.

    A direct linear transform (with Hartley conditioning) provides the
    initial estimate; Levenberg-Marquardt on the corner reprojection
    residuals refines it. Damping starts at ``initial_damping`` and is
    multiplied/divided by 10 on rejected/accepted steps; iteration stops
    once the squared-residual improvement falls below ``tolerance``. When
    the iteration cap is hit first, the best iterate is returned with
    ``converged=False``.
    """
    src = np.asarray(src_corners, dtype=float).reshape(4, 2)
    dst = np.asarray(dst_corners, dtype=float).reshape(4, 2)
    _check_non_collinear(src, "source")
    _check_non_collinear(dst, "destination")

    h0 = _dlt(src, dst)
    if abs(h0[2, 2]) < 1e-12:
        raise DegenerateCorners("corner correspondence maps a corner to infinity")
    h0 = h0 / h0[2, 2]

    h8 = h0.ravel()[:8].copy()
    lam = initial_damping
    r = _reprojection_residual(h8, src, dst)
    cost = float(r @ r)
    converged = cost <= tolerance
    for _ in range(max_iterations):
        if converged:
            break
        jac = _reprojection_jacobian(h8, src)
        jtj = jac.T @ jac
        g = jac.T @ r
        try:
            delta = np.linalg.solve(jtj + lam * np.eye(8), -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        cand = h8 + delta
        rc = _reprojection_residual(cand, src, dst)
        cost_c = float(rc @ rc)
        if cost_c < cost:
            improvement = cost - cost_c
            h8, r, cost = cand, rc, cost_c
            lam = max(lam * 0.1, 1e-15)
            if improvement < tolerance:
                converged = True
        else:
            lam *= 10.0
            if lam > 1e12:
                converged = True  # damping saturated: no further progress possible
    return Homography(np.append(h8, 1.0).reshape(3, 3), converged=converged)


# ---------------------------------------------------------------------------
# warping


def _bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[:, None]
    v00 = image[y0, x0]
    v01 = image[y0, x1]
    v10 = image[y1, x0]
    v11 = image[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def piecewise_warp(
    image: np.ndarray,
    masks: list[RegionMask],
    homographies: list[tuple[int, Homography]],
    out_size: tuple[int, int],
) -> WarpResult:
    """Warp each masked region by its own homography into one output canvas.

    Output pixels are inverse-mapped through each region's H^-1 and
    bilinearly sampled from source pixels belonging to that region (nearest
    lookup on the region mask). Regions are processed in list order, later
    regions overwriting earlier ones; pixels reached by no region stay zero
    with coverage 0. A non-invertible homography skips its region and flags
    it ``degenerate`` in per_region_status.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionMismatch("image must be (H, W, 3)")
    h_src, w_src = img.shape[:2]
    for m in masks:
        if m.mask.shape != (h_src, w_src):
            raise DimensionMismatch(
                f"mask for region {m.region_id} is {m.mask.shape}, image is {(h_src, w_src)}"
            )
    h_by_id = dict(homographies)

    h_out, w_out = out_size
    out = np.zeros((h_out, w_out, 3), dtype=float)
    coverage = np.zeros((h_out, w_out), dtype=bool)
    status: list[tuple[int, str]] = []

    ys, xs = np.mgrid[0:h_out, 0:w_out]
    grid = np.stack([xs.ravel(), ys.ravel(), np.ones(h_out * w_out)], axis=0)

    for m in masks:
        if m.region_id not in h_by_id:
            raise MissingHomography(f"no homography for region {m.region_id}")
        hom = h_by_id[m.region_id]
        if not hom.is_invertible:
            status.append((m.region_id, "degenerate"))
            continue
        src = np.linalg.inv(hom.matrix) @ grid
        wcomp = src[2]
        safe = np.abs(wcomp) > 1e-12
        sx = np.where(safe, src[0] / np.where(safe, wcomp, 1.0), -1.0)
        sy = np.where(safe, src[1] / np.where(safe, wcomp, 1.0), -1.0)
        in_bounds = safe & (sx >= 0) & (sx <= w_src - 1) & (sy >= 0) & (sy <= h_src - 1)
        nx = np.clip(np.rint(sx).astype(int), 0, w_src - 1)
        ny = np.clip(np.rint(sy).astype(int), 0, h_src - 1)
        member = in_bounds & (m.mask[ny, nx] > 0)
        if np.any(member):
            vals = _bilinear_sample(img, sx[member], sy[member])
            flat = out.reshape(-1, 3)
            flat[member] = vals
            coverage.ravel()[member] = True
        status.append((m.region_id, "ok"))

    return WarpResult(np.clip(out, 0.0, 1.0), coverage, status)


def _mask_bbox(mask: np.ndarray) -> BoundingBox:
    ys, xs = np.nonzero(np.asarray(mask) > 0)
    if len(xs) == 0:
        raise EmptyMask("mask has no set pixels")
    return BoundingBox(float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))


def relocate_garment(
    garment_image: np.ndarray,
    garment_mask: np.ndarray,
    agnostic_mask: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Scale-and-center the garment into the agnostic region's bounding box.

    The garment mask's box is aspect-preservingly scaled to fit inside the
    agnostic mask's box with coincident centers; returns the relocated image
    on the agnostic canvas and the transformed garment mask.
    """
    gbox = _mask_bbox(garment_mask)
    abox = _mask_bbox(agnostic_mask)
    # pixel extents (count of pixels spanned), so single-row masks stay finite
    gw, gh = gbox.width + 1.0, gbox.height + 1.0
    aw, ah = abox.width + 1.0, abox.height + 1.0
    scale = min(aw / gw, ah / gh)
    gcx, gcy = (gbox.x_min + gbox.x_max) / 2.0, (gbox.y_min + gbox.y_max) / 2.0
    acx, acy = (abox.x_min + abox.x_max) / 2.0, (abox.y_min + abox.y_max) / 2.0
    m = np.array(
        [
            [scale, 0.0, acx - scale * gcx],
            [0.0, scale, acy - scale * gcy],
            [0.0, 0.0, 1.0],
        ]
    )
    result = piecewise_warp(
        garment_image,
        [RegionMask(np.asarray(garment_mask), 0)],
        [(0, Homography(m))],
        out_size=np.asarray(agnostic_mask).shape,
    )
    return result.image, result.coverage_mask.astype(np.uint8)
