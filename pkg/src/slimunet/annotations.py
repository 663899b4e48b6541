"""Polygon annotations to ground-truth masks.

The annotation file is a JSON object::

    {"images": [{"name": "img001.png", "width": 504, "height": 378,
                 "polygon": [[x0, y0], [x1, y1], ...]}, ...]}

with one polygon per image in pixel coordinates (x to the right, y down).
Pixel ``(i, j)`` (row, column) belongs to the mask iff its centre
``(j + 0.5, i + 0.5)`` lies inside the polygon under the even-odd rule.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


@dataclass
class PolygonAnnotation:
    image_name: str
    image_size: tuple[int, int]  # (width, height)
    polygon: list[tuple[float, float]]


@dataclass
class EntryError:
    index: int
    name: str | None
    message: str


def _validate_entry(entry) -> PolygonAnnotation:
    if not isinstance(entry, dict):
        raise ValueError("entry is not an object")
    for key in ("name", "width", "height", "polygon"):
        if key not in entry:
            raise ValueError(f"missing field {key!r}")
    name, width, height, poly = entry["name"], entry["width"], entry["height"], entry["polygon"]
    if not isinstance(name, str):
        raise ValueError("name must be a string")
    if not (isinstance(width, int) and isinstance(height, int)) or width < 1 or height < 1:
        raise ValueError("width and height must be positive integers")
    if not isinstance(poly, list) or len(poly) < 3:
        raise ValueError("polygon needs at least 3 vertices")
    vertices = []
    for v in poly:
        if not (isinstance(v, (list, tuple)) and len(v) == 2
                and all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in v)):
            raise ValueError(f"bad vertex {v!r}")
        x, y = v
        if not (0 <= x <= width and 0 <= y <= height):
            raise ValueError(f"vertex ({x}, {y}) outside the {width}x{height} image")
        vertices.append((x, y))
    return PolygonAnnotation(name, (width, height), vertices)


def parse_annotations(data) -> tuple[list[PolygonAnnotation], list[EntryError]]:
    """Parse an annotation document (bytes, str or already-decoded dict).

    Invalid entries are reported in the second return value; valid entries
    are returned regardless. A document without an ``images`` list raises
    ``ValueError``.
    """
    if isinstance(data, (bytes, str)):
        data = json.loads(data)
    if not isinstance(data, dict) or not isinstance(data.get("images"), list):
        raise ValueError("annotation document must be an object with an 'images' list")
    good, bad = [], []
    for index, entry in enumerate(data["images"]):
        try:
            good.append(_validate_entry(entry))
        except ValueError as exc:
            name = entry.get("name") if isinstance(entry, dict) else None
            bad.append(EntryError(index, name, str(exc)))
    return good, bad


def annotations_to_dict(annotations: list[PolygonAnnotation]) -> dict:
    return {
        "images": [
            {
                "name": a.image_name,
                "width": a.image_size[0],
                "height": a.image_size[1],
                "polygon": [[x, y] for x, y in a.polygon],
            }
            for a in annotations
        ]
    }


def serialize_annotations(annotations: list[PolygonAnnotation]) -> bytes:
    return json.dumps(annotations_to_dict(annotations), indent=1).encode("utf-8")


def polygon_area(polygon) -> float:
    pts = np.asarray(polygon, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def rasterize(polygon, image_size) -> np.ndarray:
    """Scanline fill sampled at pixel centres, returns a uint8 (h, w) mask.

    For each row the crossings of the line ``y = i + 0.5`` with the polygon
    edges are sorted; pixel centres in ``[x_{2k}, x_{2k+1})`` are filled.
    An edge contributes a crossing iff exactly one endpoint has ``y <= yc``.
    """
    width, height = image_size
    mask = np.zeros((height, width), dtype=np.uint8)
    pts = np.asarray(polygon, dtype=np.float64)
    if len(pts) < 3 or polygon_area(pts) == 0:
        warnings.warn("degenerate polygon (zero area); returning an empty mask", stacklevel=2)
        return mask
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    centres = np.arange(width) + 0.5
    for i in range(height):
        yc = i + 0.5
        active = (y0 <= yc) != (y1 <= yc)
        if not active.any():
            continue
        ax0, ay0, ax1, ay1 = x0[active], y0[active], x1[active], y1[active]
        xs = np.sort(ax0 + (yc - ay0) * (ax1 - ax0) / (ay1 - ay0))
        for left, right in zip(xs[0::2], xs[1::2]):
            lo = int(np.searchsorted(centres, left, side="left"))
            hi = int(np.searchsorted(centres, right, side="left"))
            mask[i, lo:hi] = 1
    return mask


def expand_to_proposed(tight_mask, margin_px: int) -> np.ndarray:
    """Dilate by a Euclidean disk of radius ``margin_px`` (clipped to the frame).

    A background pixel joins the mask iff its Euclidean distance to the
    nearest foreground pixel centre is at most ``margin_px``.
    """
    if int(margin_px) != margin_px or margin_px < 0:
        raise ValueError("margin_px must be a non-negative integer")
    tight = np.asarray(tight_mask).astype(bool)
    if margin_px == 0 or not tight.any():
        return tight.astype(np.uint8)
    dist = ndimage.distance_transform_edt(~tight)
    return (dist <= margin_px).astype(np.uint8)


def save_mask_png(path, mask) -> None:
    from PIL import Image

    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def masks_from_file(path, out_dir=None) -> tuple[dict[str, np.ndarray], list[EntryError]]:
    """Rasterize every valid entry of an annotation file.

    When ``out_dir`` is given, masks are written there under the source image
    name (0 background, 255 RoI).
    """
    annotations, errors = parse_annotations(Path(path).read_bytes())
    masks = {}
    for a in annotations:
        masks[a.image_name] = rasterize(a.polygon, a.image_size)
        if out_dir is not None:
            save_mask_png(Path(out_dir) / a.image_name, masks[a.image_name])
    return masks, errors
