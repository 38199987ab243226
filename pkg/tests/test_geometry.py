import numpy as np
import pytest

from vtnk import geometry as geo
from vtnk.errors import (
    AllRegionsAbsent,
    DegenerateCorners,
    DimensionMismatch,
    EmptyMask,
    MissingHomography,
)

from synth import random_skeleton, stick_skeleton, upper_parsing


# ---------------------------------------------------------------------------
# region boxes


def test_box_is_exact_hull_of_confident_points():
    kp = np.zeros((25, 3))
    kp[[1, 2, 5, 8], :2] = [(10, 10), (50, 10), (10, 90), (50, 90)]
    kp[[1, 2, 5, 8], 2] = 0.9
    sk = geo.Skeleton(kp, image_size=(100, 100))
    spec = geo.RegionSpec(
        "dress-upper-section",
        (geo.Region(1, "torso", (1, 2, 5, 8), frozenset({"torso"})),),
    )
    [(rid, box)] = geo.build_region_boxes(sk, spec, 0.3)
    assert rid == 1
    assert (box.x_min, box.y_min, box.x_max, box.y_max) == (10, 10, 50, 90)


def test_all_zero_confidence_raises():
    sk = geo.Skeleton(np.zeros((25, 3)), image_size=(64, 64))
    with pytest.raises(AllRegionsAbsent):
        geo.build_region_boxes(sk, geo.default_region_spec("upper"), 0.3)


def test_threshold_validation():
    sk = stick_skeleton()
    with pytest.raises(ValueError):
        geo.build_region_boxes(sk, geo.default_region_spec("upper"), 1.0)


def test_random_skeleton_boxes_contain_their_keypoints():
    rng = np.random.default_rng(11)
    spec = geo.default_region_spec("upper")
    checked = 0
    for _ in range(200):
        sk = random_skeleton(rng)
        try:
            boxes = dict(geo.build_region_boxes(sk, spec, 0.3))
        except AllRegionsAbsent:
            continue
        for region in spec.regions:
            if region.region_id not in boxes:
                continue
            box = boxes[region.region_id]
            pts = sk.keypoints[list(region.keypoint_indices)]
            for x, y, c in pts:
                if c > 0.3:
                    assert box.x_min <= x <= box.x_max
                    assert box.y_min <= y <= box.y_max
                    checked += 1
    assert checked > 1000


def test_regions_with_single_confident_point_are_absent():
    kp = np.zeros((25, 3))
    kp[2, :] = (10, 10, 0.9)   # right shoulder only: right_upper_arm has 1 point
    kp[5, :] = (30, 10, 0.9)
    kp[6, :] = (40, 20, 0.9)   # left arm has both points
    sk = geo.Skeleton(kp, image_size=(64, 64))
    boxes = dict(geo.build_region_boxes(sk, geo.default_region_spec("upper"), 0.3))
    assert 3 not in boxes      # right_upper_arm absent
    assert 2 in boxes          # left_upper_arm present


# ---------------------------------------------------------------------------
# region masks (indicator oracle)


def masks_by_pixel_loop(parsing, boxes, spec):
    """Literal per-pixel evaluation of the region indicator."""
    h, w = parsing.shape
    out = []
    for rid, box in boxes:
        region = spec.region_by_id(rid)
        ids = {pid for pid, name in parsing.label_legend.items() if name in region.part_labels}
        m = np.zeros((h, w), np.uint8)
        for y in range(h):
            for x in range(w):
                in_parts = parsing.labels[y, x] in ids
                in_box = box.x_min <= x <= box.x_max and box.y_min <= y <= box.y_max
                m[y, x] = 1 if (in_parts and in_box) else 0
        out.append(m)
    return out


def test_mask_pixel_inside_box_with_matching_label():
    labels = np.zeros((8, 8), np.int32)
    labels[2, 3] = 1
    labels[2, 6] = 1
    parsing = geo.SegmentationMap(labels, {1: "torso"})
    spec = geo.RegionSpec(
        "dress-upper-section", (geo.Region(1, "torso", (0, 1), frozenset({"torso"})),)
    )
    boxes = [(1, geo.BoundingBox(1, 1, 4, 4))]
    [mask] = geo.region_masks(parsing, boxes, spec)
    assert mask.mask[2, 3] == 1       # label and box agree
    assert mask.mask[2, 6] == 0       # label but outside box
    assert mask.mask[3, 3] == 0       # box but background label


def test_masks_equal_per_pixel_oracle_on_random_fixtures():
    rng = np.random.default_rng(5)
    for _ in range(50):
        h, w = rng.integers(4, 33, 2)
        labels = rng.integers(0, 3, (h, w)).astype(np.int32)
        parsing = geo.SegmentationMap(labels, {1: "torso", 2: "hip"})
        spec = geo.RegionSpec(
            "dress-upper-section",
            (
                geo.Region(1, "torso", (0, 1), frozenset({"torso"})),
                geo.Region(2, "pelvis", (2, 3), frozenset({"hip"})),
            ),
        )
        boxes = []
        for rid in (1, 2):
            x0, y0 = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
            boxes.append((rid, geo.BoundingBox(
                x0, y0, rng.uniform(x0, w - 1), rng.uniform(y0, h - 1)
            )))
        got = geo.region_masks(parsing, boxes, spec)
        want = masks_by_pixel_loop(parsing, boxes, spec)
        for g, wm in zip(got, want):
            assert np.array_equal(g.mask, wm)


def test_region_masks_dimension_mismatch():
    parsing = upper_parsing()
    spec = geo.default_region_spec("upper")
    boxes = [(1, geo.BoundingBox(0, 0, 200, 200))]
    with pytest.raises(DimensionMismatch):
        geo.region_masks(parsing, boxes, spec)


# ---------------------------------------------------------------------------
# homography estimation


def unit_square():
    return np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])


def test_identity_case_exact():
    h = geo.estimate_homography(unit_square(), unit_square())
    assert h.converged
    assert np.allclose(h.matrix, np.eye(3), atol=1e-10)


def test_pure_translation_exact():
    h = geo.estimate_homography(unit_square(), unit_square() + np.array([10.0, 5.0]))
    want = np.array([[1, 0, 10], [0, 1, 5], [0, 0, 1]], dtype=float)
    assert np.allclose(h.matrix, want, atol=1e-9)


def random_homography(rng):
    while True:
        m = np.eye(3) + rng.uniform(-0.3, 0.3, (3, 3)) * np.array(
            [[1, 1, 50], [1, 1, 50], [2e-3, 2e-3, 0]]
        )
        m[2, 2] = 1.0
        if abs(np.linalg.det(m)) > 1e-3:
            return geo.Homography(m)


def non_collinear_quad(rng, span=200.0):
    while True:
        pts = rng.uniform(0, span, (4, 2))
        try:
            geo._check_non_collinear(pts, "probe")
            return pts
        except DegenerateCorners:
            continue


def test_synthesize_then_recover_200_instances():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(200):
        truth = random_homography(rng)
        src = non_collinear_quad(rng)
        dst = truth.apply(src)
        est = geo.estimate_homography(src, dst)
        err = np.abs(est.apply(src) - dst).max()
        worst = max(worst, err)
        assert np.allclose(est.matrix, truth.matrix, atol=1e-6)
    assert worst <= 1e-6


def test_collinear_corners_rejected():
    src = np.array([[0, 0], [5, 5], [10, 10], [0, 10]], dtype=float)
    with pytest.raises(DegenerateCorners):
        geo.estimate_homography(src, unit_square())
    with pytest.raises(DegenerateCorners):
        geo.estimate_homography(unit_square(), src)


def test_iteration_cap_returns_best_iterate_with_flag():
    rng = np.random.default_rng(3)
    src = non_collinear_quad(rng)
    dst = non_collinear_quad(rng) + rng.normal(0, 2.0, (4, 2))  # inconsistent
    h = geo.estimate_homography(src, dst, max_iterations=2, tolerance=0.0)
    assert not h.converged
    assert np.all(np.isfinite(h.matrix))


def test_homography_round_trip_property():
    rng = np.random.default_rng(7)
    for _ in range(200):
        h = random_homography(rng)
        assert h.is_invertible
        pts = rng.uniform(0, 100, (8, 2))
        back = h.inverse().apply(h.apply(pts))
        assert np.abs(back - pts).max() <= 1e-6


# ---------------------------------------------------------------------------
# piecewise warp


def ramp_image(n):
    ys, xs = np.mgrid[0:n, 0:n]
    return np.stack([(xs + ys) / (4 * n), xs / (2 * n) + 0.1, ys / (2 * n) + 0.2], axis=2)


def forward_map_oracle(image, masks, homographies, out_size):
    """Literal forward projection with nearest rounding."""
    h_out, w_out = out_size
    out = np.zeros((h_out, w_out, 3))
    cov = np.zeros((h_out, w_out), bool)
    h_by_id = dict(homographies)
    for m in masks:
        hom = h_by_id[m.region_id]
        ys, xs = np.nonzero(m.mask)
        for y, x in zip(ys, xs):
            px, py = hom.apply(np.array([[x, y]], dtype=float))[0]
            xo, yo = int(round(px)), int(round(py))
            if 0 <= xo < w_out and 0 <= yo < h_out:
                out[yo, xo] = image[y, x]
                cov[yo, xo] = True
    return out, cov


def two_region_fixture(n=16):
    img = ramp_image(n)
    mask_a = np.zeros((n, n), np.uint8)
    mask_a[2:14, 1:8] = 1
    mask_b = np.zeros((n, n), np.uint8)
    mask_b[2:14, 8:15] = 1
    h_a = geo.Homography(np.array([[1, 0, 1.3], [0, 1, 0.7], [0, 0, 1.0]]))
    h_b = geo.Homography(np.array([[0.95, 0, 0.6], [0, 0.95, 0.9], [0, 0, 1.0]]))
    masks = [geo.RegionMask(mask_a, 1), geo.RegionMask(mask_b, 2)]
    return img, masks, [(1, h_a), (2, h_b)]


def test_identity_warp_is_fixed_point():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (20, 20, 3))
    mask = np.zeros((20, 20), np.uint8)
    mask[3:17, 2:18] = 1
    res = geo.piecewise_warp(img, [geo.RegionMask(mask, 1)], [(1, geo.Homography.identity())], (20, 20))
    assert np.array_equal(res.coverage_mask, mask.astype(bool))
    covered = res.coverage_mask
    assert np.abs(res.image[covered] - img[covered]).max() <= np.finfo(float).eps


def test_translation_warp_shifts_interior():
    img = ramp_image(16)
    mask = np.ones((16, 16), np.uint8)
    res = geo.piecewise_warp(
        img, [geo.RegionMask(mask, 1)], [(1, geo.Homography.translation(3, 2))], (16, 16)
    )
    assert np.allclose(res.image[2:16, 3:16], img[0:14, 0:13], atol=1e-12)
    assert res.coverage_mask[2:, 3:].all()
    assert not res.coverage_mask[:2, :].any()


def test_two_region_warp_matches_forward_oracle():
    img, masks, homs = two_region_fixture()
    res = geo.piecewise_warp(img, masks, homs, (16, 16))
    oracle, ocov = forward_map_oracle(img, masks, homs, (16, 16))
    union = res.coverage_mask | ocov
    both = res.coverage_mask & ocov
    agree = both & (np.abs(res.image - oracle).max(axis=2) <= 0.05)
    assert agree.sum() / union.sum() >= 0.95


def test_overlap_resolved_by_region_order():
    # region 1 copies rows 2..5 in place; region 2 shifts the same source
    # rows down by 2, so output rows 4..5 are claimed by both
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (8, 8, 3))
    mask = np.zeros((8, 8), np.uint8)
    mask[2:6, 2:6] = 1
    regions = [geo.RegionMask(mask, 1), geo.RegionMask(mask, 2)]
    homs = [(1, geo.Homography.identity()), (2, geo.Homography.translation(0, 2))]
    res = geo.piecewise_warp(img, regions, homs, (8, 8))
    assert res.per_region_status == [(1, "ok"), (2, "ok")]
    assert np.allclose(res.image[4:6, 2:6], img[2:4, 2:6])  # later region wins
    # with the list order flipped, region 1 (now later) keeps its in-place copy
    res_flipped = geo.piecewise_warp(img, regions[::-1], homs, (8, 8))
    assert np.allclose(res_flipped.image[4:6, 2:6], img[4:6, 2:6])


def test_missing_homography_raises():
    img = ramp_image(8)
    mask = np.ones((8, 8), np.uint8)
    with pytest.raises(MissingHomography):
        geo.piecewise_warp(img, [geo.RegionMask(mask, 7)], [(1, geo.Homography.identity())], (8, 8))


def test_degenerate_region_skipped_and_flagged():
    img = ramp_image(8)
    mask = np.ones((8, 8), np.uint8)
    singular = geo.Homography(np.array([[0, 0, 0], [0, 0, 0], [0, 0, 1.0]]))
    res = geo.piecewise_warp(img, [geo.RegionMask(mask, 1)], [(1, singular)], (8, 8))
    assert res.per_region_status == [(1, "degenerate")]
    assert not res.coverage_mask.any()


def test_warp_composition_property():
    n = 32
    img = ramp_image(n)
    mask = np.ones((n, n), np.uint8)
    # gentle maps keeping inverse samples in bounds
    h1 = geo.Homography(np.array([[1.05, 0.01, -0.8], [0.0, 1.04, -0.6], [0, 0, 1.0]]))
    h2 = geo.Homography(np.array([[1.03, 0.0, -0.5], [0.01, 1.05, -0.7], [0, 0, 1.0]]))
    step1 = geo.piecewise_warp(img, [geo.RegionMask(mask, 1)], [(1, h1)], (n, n))
    step2 = geo.piecewise_warp(
        step1.image, [geo.RegionMask(step1.coverage_mask.astype(np.uint8), 1)], [(1, h2)], (n, n)
    )
    composed = geo.piecewise_warp(
        img, [geo.RegionMask(mask, 1)], [(1, geo.Homography(h2.matrix @ h1.matrix))], (n, n)
    )
    both = step2.coverage_mask & composed.coverage_mask
    assert both.sum() > 0.5 * n * n
    diff = np.abs(step2.image - composed.image)[both]
    assert diff.mean() <= 2 / 255


# ---------------------------------------------------------------------------
# relocation


def test_relocate_identity_when_boxes_match():
    img = ramp_image(32)
    mask = np.zeros((32, 32))
    mask[8:24, 10:20] = 1
    out, out_mask = geo.relocate_garment(img, mask, mask)
    assert np.array_equal(out_mask, mask.astype(np.uint8))
    assert np.allclose(out[mask > 0], img[mask > 0])


def test_relocate_scales_and_centers():
    img = np.zeros((100, 100, 3))
    garment_mask = np.zeros((100, 100))
    garment_mask[1:20, 1:20] = 1          # ~20x20 box centered (10, 10)
    img[1:20, 1:20] = 0.75
    agnostic_mask = np.zeros((100, 100))
    agnostic_mask[31:70, 31:70] = 1       # ~40x40 box centered (50, 50)
    out, out_mask = geo.relocate_garment(img, garment_mask, agnostic_mask)
    ys, xs = np.nonzero(out_mask)
    cx, cy = (xs.min() + xs.max()) / 2, (ys.min() + ys.max()) / 2
    assert abs(cx - 50.5) <= 1 and abs(cy - 50.5) <= 1
    width = xs.max() - xs.min() + 1
    assert abs(width - 2 * 19) <= 2       # scale ~2 under 1 px quantization
    # interior keeps the garment value; only the border ring blends with
    # background under bilinear sampling
    interior = out[ys.min() + 2 : ys.max() - 1, xs.min() + 2 : xs.max() - 1]
    assert np.allclose(interior, 0.75)


def test_relocated_mask_fits_agnostic_box_with_aspect_preserved():
    rng = np.random.default_rng(9)
    for _ in range(50):
        size = 80
        img = rng.uniform(0, 1, (size, size, 3))
        gm = np.zeros((size, size))
        x0, y0 = rng.integers(0, 40, 2)
        gw, gh = rng.integers(5, 30, 2)
        gm[y0:y0 + gh, x0:x0 + gw] = 1
        am = np.zeros((size, size))
        ax0, ay0 = rng.integers(0, 30, 2)
        aw, ah = rng.integers(10, 45, 2)
        am[ay0:ay0 + ah, ax0:ax0 + aw] = 1
        _, out_mask = geo.relocate_garment(img, gm, am)
        ys, xs = np.nonzero(out_mask)
        assert len(xs) > 0
        assert xs.min() >= ax0 - 1 and xs.max() <= ax0 + aw
        assert ys.min() >= ay0 - 1 and ys.max() <= ay0 + ah
        scale = min(aw / gw, ah / gh)
        assert abs((xs.max() - xs.min() + 1) - scale * gw) <= max(1, 0.1 * scale * gw)
        assert abs((ys.max() - ys.min() + 1) - scale * gh) <= max(1, 0.1 * scale * gh)


def test_relocate_empty_mask_raises():
    img = np.zeros((8, 8, 3))
    with pytest.raises(EmptyMask):
        geo.relocate_garment(img, np.zeros((8, 8)), np.ones((8, 8)))
    with pytest.raises(EmptyMask):
        geo.relocate_garment(img, np.ones((8, 8)), np.zeros((8, 8)))
