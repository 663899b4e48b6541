# coding: utf-8

# # Phantoms and annotation masks
#
# The clinical scans are private, so everything here runs on synthetic
# bladder-like phantoms: a dark deformed ellipse under multiplicative speckle,
# cut to a fan-shaped field of view.

import numpy as np

from slimunet.annotations import expand_to_proposed, polygon_area, rasterize
from slimunet.data import PhantomSpec, fan_mask, generate_phantoms

spec = PhantomSpec(count=8, image_size=64, subjects=4, margin_px=3, seed=0)
samples, annotations = generate_phantoms(spec)
print(len(samples), "phantoms,", len({s.subject_id for s in samples}), "subjects")

# Each sample keeps two masks. `tight_mask` is the region itself, `mask` is
# the same region grown by `margin_px` pixels of surrounding background.

s = samples[0]
print("tight pixels:", int(s.tight_mask.sum()), " expanded pixels:", int(s.mask.sum()))

# The region really is darker than the tissue around it.

fov = fan_mask(spec.image_size)
inside = s.image[0][s.tight_mask.astype(bool)].mean()
outside = s.image[0][fov & ~s.mask.astype(bool)].mean()
print(f"mean intensity inside {inside:.3f}, outside {outside:.3f}")

# A crude text rendering: '#' tight region, '+' added margin, '.' field of view.

def show(sample, step=2):
    rows = []
    for i in range(0, spec.image_size, step):
        row = ""
        for j in range(0, spec.image_size, step):
            if sample.tight_mask[i, j]:
                row += "#"
            elif sample.mask[i, j]:
                row += "+"
            elif fov[i, j]:
                row += "."
            else:
                row += " "
        rows.append(row)
    print("\n".join(rows))

show(s)

# ## Rasterizing a polygon by hand
#
# Pixels are in when their centre is inside. A 4x4 axis-aligned square
# covers exactly 16 pixels.

square = [(2, 2), (6, 2), (6, 6), (2, 6)]
print(rasterize(square, (9, 9)))
print("area", polygon_area(square))

# Growing it by one pixel adds the 4-neighbours of the border ring.

print(expand_to_proposed(rasterize(square, (9, 9)), 1))

# The polygons themselves are stored in the annotation dictionary.

first = annotations["images"][0]
print(first["name"], first["width"], "x", first["height"], len(first["polygon"]), "vertices")
