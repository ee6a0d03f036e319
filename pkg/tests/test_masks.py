import json
from pathlib import Path

import numpy as np
import pytest

from vqs.masks import (
    BoundingBox,
    CorruptMaskError,
    MaskDimensionError,
    Masklet,
    ResponseSet,
    RleMask,
    annotation_from_dict,
    annotation_to_dict,
    divergence_score,
    group_into_masklets,
    mask_area,
    mask_intersection_area,
    mask_iou,
    mask_to_bbox,
    rle_decode,
    rle_encode,
)


def grid(rows):
    return np.array(rows, dtype=np.uint8)


def block_mask(h, w, r0, c0, bh, bw):
    g = np.zeros((h, w), dtype=np.uint8)
    g[r0 : r0 + bh, c0 : c0 + bw] = 1
    return rle_encode(g)


class TestCodec:
    def test_all_zero(self):
        assert rle_encode(np.zeros((2, 2), dtype=int)).runs == (4,)

    def test_all_one(self):
        assert rle_encode(np.ones((2, 2), dtype=int)).runs == (0, 4)

    def test_hand_flattened(self):
        # rows (0,1,1)/(1,0,0) flatten to 011100 -> runs 1,3,2
        m = rle_encode(grid([[0, 1, 1], [1, 0, 0]]))
        assert m.runs == (1, 3, 2)
        assert m.shape == (2, 3)

    def test_decode_all_zero(self):
        assert (rle_decode(RleMask(2, 2, (4,))) == 0).all()

    def test_decode_all_one(self):
        assert (rle_decode(RleMask(2, 2, (0, 4))) == 1).all()

    def test_decode_hand_case(self):
        out = rle_decode(RleMask(2, 3, (1, 3, 2)))
        assert (out == grid([[0, 1, 1], [1, 0, 0]])).all()

    def test_round_trip_random(self):
        rng = np.random.default_rng(20240521)
        for _ in range(10_000):
            h = int(rng.integers(1, 33))
            w = int(rng.integers(1, 33))
            bitmap = (rng.random((h, w)) < rng.random()).astype(np.uint8)
            mask = rle_encode(bitmap)
            assert (rle_decode(mask) == bitmap).all()
            assert rle_encode(rle_decode(mask)) == mask

    def test_empty_bitmap_rejected(self):
        with pytest.raises(MaskDimensionError):
            rle_encode(np.zeros((0, 4), dtype=int))
        with pytest.raises(MaskDimensionError):
            rle_encode(np.zeros(4, dtype=int))

    def test_bad_run_sum_rejected(self):
        with pytest.raises(CorruptMaskError):
            RleMask(2, 2, (3,))

    def test_inner_zero_run_rejected(self):
        with pytest.raises(CorruptMaskError):
            RleMask(2, 2, (1, 0, 3))

    def test_leading_zero_run_allowed(self):
        assert RleMask(1, 4, (0, 4)).area() == 4

    def test_runs_csv_round_trip(self):
        m = rle_encode(grid([[0, 1, 1], [1, 0, 0]]))
        assert RleMask.from_runs_csv(m.to_runs_csv(), 2, 3) == m


class TestAlgebra:
    def test_iou_identity(self):
        m = block_mask(4, 4, 0, 0, 2, 2)
        assert mask_iou(m, m) == 1.0

    def test_iou_disjoint(self):
        a = block_mask(4, 4, 0, 0, 2, 2)
        b = block_mask(4, 4, 2, 2, 2, 2)
        assert mask_iou(a, b) == 0.0

    def test_iou_shifted_blocks(self):
        a = block_mask(4, 4, 0, 0, 2, 2)
        b = block_mask(4, 4, 0, 1, 2, 2)
        assert mask_iou(a, b) == pytest.approx(2 / 6, abs=1e-12)

    def test_iou_empty_conventions(self):
        e = RleMask.empty(3, 3)
        f = block_mask(3, 3, 0, 0, 1, 1)
        assert mask_iou(e, e) == 1.0
        assert mask_iou(e, f) == 0.0
        assert mask_iou(f, e) == 0.0

    def test_iou_dimension_mismatch(self):
        with pytest.raises(MaskDimensionError):
            mask_iou(RleMask.empty(2, 2), RleMask.empty(2, 3))

    def test_iou_symmetry_random(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            a = rle_encode((rng.random((6, 7)) < 0.4).astype(np.uint8))
            b = rle_encode((rng.random((6, 7)) < 0.4).astype(np.uint8))
            assert mask_iou(a, b) == mask_iou(b, a)

    def test_iou_matches_pixel_counting(self):
        rng = np.random.default_rng(13)
        for _ in range(500):
            ga = (rng.random((9, 11)) < rng.random()).astype(np.uint8)
            gb = (rng.random((9, 11)) < rng.random()).astype(np.uint8)
            a, b = rle_encode(ga), rle_encode(gb)
            inter = int(np.logical_and(ga, gb).sum())
            union = int(np.logical_or(ga, gb).sum())
            expected = inter / union if union else 1.0
            assert mask_iou(a, b) == pytest.approx(expected, abs=1e-12)

    def test_inclusion_exclusion(self):
        rng = np.random.default_rng(99)
        for _ in range(300):
            ga = (rng.random((8, 8)) < 0.5).astype(np.uint8)
            gb = (rng.random((8, 8)) < 0.5).astype(np.uint8)
            a, b = rle_encode(ga), rle_encode(gb)
            inter = mask_intersection_area(a, b)
            union = a.area() + b.area() - inter
            assert inter + union == a.area() + b.area()
            assert union == int(np.logical_or(ga, gb).sum())

    def test_area(self):
        assert mask_area(RleMask.empty(5, 5)) == 0
        assert mask_area(RleMask.full(8, 8)) == 64
        assert mask_area(RleMask(2, 3, (1, 3, 2))) == 3

    def test_divergence(self):
        a = block_mask(4, 4, 0, 0, 2, 2)
        b = block_mask(4, 4, 0, 1, 2, 2)
        assert divergence_score(a, a) == 0.0
        assert divergence_score(a, block_mask(4, 4, 2, 2, 2, 2)) == 1.0
        assert divergence_score(a, b) == pytest.approx(1 - 2 / 6, abs=1e-12)


class TestBoundingBox:
    def test_empty_mask(self):
        assert mask_to_bbox(RleMask.empty(4, 4)) is None

    def test_single_pixel(self):
        g = np.zeros((4, 8), dtype=np.uint8)
        g[2, 5] = 1
        assert mask_to_bbox(rle_encode(g)) == BoundingBox(5, 2, 5, 2)

    def test_two_pixels(self):
        g = np.zeros((5, 6), dtype=np.uint8)
        g[1, 1] = 1
        g[3, 4] = 1
        assert mask_to_bbox(rle_encode(g)) == BoundingBox(1, 1, 4, 3)

    def test_box_matches_nonzero_extents(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            g = (rng.random((7, 9)) < 0.3).astype(np.uint8)
            box = mask_to_bbox(rle_encode(g))
            if g.sum() == 0:
                assert box is None
                continue
            rows, cols = np.nonzero(g)
            assert (box.x_min, box.y_min, box.x_max, box.y_max) == (
                cols.min(),
                rows.min(),
                cols.max(),
                rows.max(),
            )


class TestOccurrences:
    def test_masklet_length_check(self):
        m = RleMask.empty(2, 2)
        with pytest.raises(Exception):
            Masklet(3, 5, (m, m))
        Masklet(3, 5, (m, m, m))

    def test_response_set_rejects_overlap(self):
        m = RleMask.full(2, 2)
        a = Masklet(0, 2, (m, m, m))
        b = Masklet(2, 3, (m, m))
        with pytest.raises(Exception):
            ResponseSet("v", (a, b))

    def test_response_set_rejects_unsorted(self):
        m = RleMask.full(2, 2)
        a = Masklet(4, 5, (m, m))
        b = Masklet(0, 1, (m, m))
        with pytest.raises(Exception):
            ResponseSet("v", (a, b))

    def test_group_into_masklets(self):
        m = RleMask.full(2, 2)
        e = RleMask.empty(2, 2)
        seq = [None, None, m, m, m, None, e, None, None, m, m]
        occs = group_into_masklets(seq)
        assert [(o.start_frame, o.end_frame) for o in occs] == [(2, 4), (9, 10)]

    def test_group_matches_bruteforce(self):
        rng = np.random.default_rng(31)
        m = RleMask.full(2, 2)
        for _ in range(300):
            present = rng.random(12) < 0.5
            seq = [m if p else None for p in present]
            occs = group_into_masklets(seq)
            # brute force: recover segments by scanning the boolean pattern
            segments = []
            start = None
            for i, p in enumerate(present):
                if p and start is None:
                    start = i
                if not p and start is not None:
                    segments.append((start, i - 1))
                    start = None
            if start is not None:
                segments.append((start, len(present) - 1))
            assert [(o.start_frame, o.end_frame) for o in occs] == segments

    def test_annotation_round_trip(self):
        a = block_mask(4, 4, 0, 0, 2, 2)
        b = block_mask(4, 4, 1, 1, 2, 2)
        rs = ResponseSet("vid7", (Masklet(1, 2, (a, b)), Masklet(5, 5, (a,))))
        obj = annotation_to_dict(rs, 4, 4)
        back, h, w = annotation_from_dict(obj)
        assert (h, w) == (4, 4)
        assert back == rs

    def test_annotation_dims_must_match(self):
        a = block_mask(4, 4, 0, 0, 2, 2)
        rs = ResponseSet("v", (Masklet(0, 0, (a,)),))
        with pytest.raises(MaskDimensionError):
            annotation_to_dict(rs, 8, 8)


class TestGoldenAnnotation:
    """The serialized annotation schema is pinned byte-exactly."""

    FIXTURE = Path(__file__).parent / "fixtures" / "golden_annotation.json"

    def golden_response(self):
        return ResponseSet(
            "golden_video",
            (
                Masklet(2, 4, (block_mask(6, 8, 0, 0, 2, 3),
                               block_mask(6, 8, 1, 1, 2, 3),
                               block_mask(6, 8, 2, 2, 2, 3))),
                Masklet(7, 7, (block_mask(6, 8, 4, 5, 2, 3),)),
            ),
        )

    def test_serialization_is_bit_exact(self):
        obj = annotation_to_dict(self.golden_response(), 6, 8)
        text = json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"
        assert text.encode() == self.FIXTURE.read_bytes()

    def test_golden_parses_back(self):
        obj = json.loads(self.FIXTURE.read_text())
        response, h, w = annotation_from_dict(obj)
        assert (h, w) == (6, 8)
        assert response == self.golden_response()
