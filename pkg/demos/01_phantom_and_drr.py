"""Build the vertebra-stack phantom and render DRRs from the AP and lateral views.

Run: python3 demos/01_phantom_and_drr.py   (writes PGMs to demos/out/)
"""
from pathlib import Path

import numpy as np

from ppcreg.drr import BONE, REALISTIC, render, write_pgm
from ppcreg.geometry import carm_geometry
from ppcreg.simlab import view_transform
from ppcreg.volume import make_phantom, vertebra_stack_spec

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

# 128^3 voxels at 1 mm: five vertebra-like bodies with transverse processes
vol = make_phantom(vertebra_stack_spec())
print("volume", vol.data.shape, "spacing", vol.spacing, "checksum", vol.checksum()[:16])

# default C-arm: source 750 mm from the isocenter, detector 1200 mm, 256^2 px of 1.2 mm
geom = carm_geometry()
for view in ("AP", "LAT"):
    T = view_transform(view, vol)  # volume centre at the isocenter
    for style in (REALISTIC, BONE):
        img = render(vol, geom, T, style)
        write_pgm(out / f"drr_{view}_{style.kind}.pgm", img.data)
        print(f"{view:3s} {style.kind:9s} max line integral {img.data.max():.3f}, "
              f"non-zero pixels {np.count_nonzero(img.data)}")
