import json
import math
import warnings

import numpy as np
import pytest

from slimunet.annotations import (
    PolygonAnnotation,
    expand_to_proposed,
    load_mask_png,
    masks_from_file,
    parse_annotations,
    polygon_area,
    rasterize,
    save_mask_png,
    serialize_annotations,
)


def crossing_number_oracle(polygon, size):
    """Brute-force even-odd test of every pixel centre, one vertex pair at a time."""
    width, height = size
    mask = np.zeros((height, width), np.uint8)
    n = len(polygon)
    for i in range(height):
        py = i + 0.5
        for j in range(width):
            px = j + 0.5
            inside = False
            for k in range(n):
                x0, y0 = polygon[k]
                x1, y1 = polygon[(k + 1) % n]
                if (y0 > py) != (y1 > py):
                    x_int = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
                    if px < x_int:
                        inside = not inside
            mask[i, j] = inside
    return mask


def random_polygon(gen, size):
    w, h = size
    if gen.random() < 0.5:
        # star-shaped around a random centre
        n = int(gen.integers(3, 12))
        angles = np.sort(gen.uniform(0, 2 * math.pi, n))
        radii = gen.uniform(1, min(w, h) / 2, n)
        cx, cy = gen.uniform(w * 0.3, w * 0.7), gen.uniform(h * 0.3, h * 0.7)
        pts = [(float(np.clip(cx + r * math.cos(a), 0, w)), float(np.clip(cy + r * math.sin(a), 0, h)))
               for a, r in zip(angles, radii)]
    else:
        # arbitrary, possibly self-intersecting
        n = int(gen.integers(3, 9))
        pts = [(float(gen.uniform(0, w)), float(gen.uniform(0, h))) for _ in range(n)]
    return pts


def distance_oracle(tight, margin):
    out = tight.astype(bool).copy()
    fg = np.argwhere(tight)
    for i, j in np.argwhere(~tight.astype(bool)):
        if fg.size and np.min((fg[:, 0] - i) ** 2 + (fg[:, 1] - j) ** 2) <= margin * margin:
            out[i, j] = True
    return out.astype(np.uint8)


class TestRasterize:
    def test_axis_aligned_square(self):
        mask = rasterize([(2, 2), (6, 2), (6, 6), (2, 6)], (10, 10))
        assert mask.sum() == 16
        assert mask[2:6, 2:6].all()

    def test_full_frame(self):
        assert rasterize([(0, 0), (8, 0), (8, 5), (0, 5)], (8, 5)).all()

    def test_translation(self):
        a = rasterize([(1.2, 1.7), (5.3, 2.1), (3.9, 6.4)], (12, 12))
        b = rasterize([(4.2, 3.7), (8.3, 4.1), (6.9, 8.4)], (12, 12))
        assert np.array_equal(np.roll(np.roll(a, 2, axis=0), 3, axis=1), b)

    def test_orientation_irrelevant(self):
        poly = [(1.5, 1.0), (9.0, 2.5), (7.2, 8.8), (2.0, 6.0)]
        assert np.array_equal(rasterize(poly, (12, 12)), rasterize(poly[::-1], (12, 12)))

    def test_matches_oracle_on_random_polygons(self):
        gen = np.random.default_rng(2024)
        for _ in range(200):
            size = (int(gen.integers(5, 24)), int(gen.integers(5, 24)))
            poly = random_polygon(gen, size)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                got = rasterize(poly, size)
            if polygon_area(poly) == 0:
                continue
            assert np.array_equal(got, crossing_number_oracle(poly, size))

    def test_area_close_to_polygon_area(self):
        theta = np.linspace(0, 2 * math.pi, 200, endpoint=False)
        poly = list(zip(50 + 30 * np.cos(theta), 50 + 20 * np.sin(theta)))
        assert abs(rasterize(poly, (100, 100)).sum() / polygon_area(poly) - 1) < 0.02

    def test_degenerate_warns(self):
        with pytest.warns(UserWarning, match="degenerate"):
            mask = rasterize([(1, 1), (3, 3), (5, 5)], (8, 8))
        assert not mask.any()


class TestExpand:
    def test_matches_distance_oracle(self, rng):
        for margin in (1, 2, 3):
            tight = np.zeros((20, 20), np.uint8)
            tight[5:12, 6:14] = 1
            tight[13, 3] = 1
            assert np.array_equal(expand_to_proposed(tight, margin), distance_oracle(tight, margin))
        for _ in range(20):
            tight = (rng.random((15, 15)) < 0.05).astype(np.uint8)
            assert np.array_equal(expand_to_proposed(tight, 2), distance_oracle(tight, 2))

    def test_containment_and_monotone(self, rng):
        tight = rasterize([(10, 8), (30, 12), (25, 34), (8, 28)], (40, 40))
        prev = tight
        for margin in range(0, 6):
            grown = expand_to_proposed(tight, margin)
            assert np.all(grown >= prev) and np.all(grown >= tight)
            prev = grown
        assert np.array_equal(expand_to_proposed(tight, 0), tight)

    def test_empty_stays_empty(self):
        assert not expand_to_proposed(np.zeros((5, 5)), 3).any()

    def test_bad_margin(self):
        with pytest.raises(ValueError):
            expand_to_proposed(np.zeros((3, 3)), -1)


DOC = {
    "images": [
        {"name": "a.png", "width": 10, "height": 8, "polygon": [[1, 1], [8, 1], [8, 6], [1, 6]]},
        {"name": "b.png", "width": 10, "height": 8, "polygon": [[1, 1], [8, 1]]},
        {"name": "c.png", "width": 10, "height": 8, "polygon": [[1, 1], [12, 1], [5, 5]]},
        {"name": "d.png", "height": 8, "polygon": [[1, 1], [2, 1], [2, 2]]},
    ]
}


class TestParsing:
    def test_errors_reported_per_entry(self):
        good, bad = parse_annotations(json.dumps(DOC))
        assert [a.image_name for a in good] == ["a.png"]
        assert [(e.index, e.name) for e in bad] == [(1, "b.png"), (2, "c.png"), (3, "d.png")]
        assert "3 vertices" in bad[0].message and "outside" in bad[1].message
        assert "width" in bad[2].message

    def test_document_without_images(self):
        with pytest.raises(ValueError):
            parse_annotations(b'{"frames": []}')

    def test_round_trip(self):
        ann = [PolygonAnnotation("x.png", (20, 10), [(1.5, 2.0), (18.0, 3.25), (9.0, 9.0)])]
        again, errors = parse_annotations(serialize_annotations(ann))
        assert not errors and again == ann

    def test_masks_from_file(self, tmp_path):
        path = tmp_path / "ann.json"
        path.write_text(json.dumps(DOC))
        out = tmp_path / "masks"
        out.mkdir()
        masks, errors = masks_from_file(path, out)
        assert list(masks) == ["a.png"] and len(errors) == 3
        assert masks["a.png"].sum() == 35
        assert np.array_equal(load_mask_png(out / "a.png"), masks["a.png"])

    def test_png_round_trip(self, tmp_path, rng):
        mask = (rng.random((9, 7)) < 0.5).astype(np.uint8)
        save_mask_png(tmp_path / "m.png", mask)
        assert np.array_equal(load_mask_png(tmp_path / "m.png"), mask)
