"""
Fan-beam projection and filtered back-projection
================================================

Project a Shepp-Logan phantom with the distance-driven fan-beam operator,
then invert the sinogram with FBP at a few view counts.  Images are written
as PNGs next to this script (``demo_output/``).
"""
from pathlib import Path

import numpy as np

from magicct.data import save_png, shepp_logan
from magicct.fbp import fbp_reconstruct
from magicct.geometry import back_project, desk_geometry, forward_project
from magicct.metrics import psnr

out = Path(__file__).with_name("demo_output")
out.mkdir(exist_ok=True)

###############################################################################
# A 128 x 128 phantom, values in [0, 1]
phantom = shepp_logan(128)
save_png(out / "phantom.png", phantom, window=(0.0, 0.5))

###############################################################################
# The sinogram: one row per view, one column per detector cell.
geom = desk_geometry(128, 360)
sino = forward_project(phantom, geom)
print("sinogram", sino.shape, "max line integral %.1f mm" % sino.max())
save_png(out / "sinogram.png", sino, window=(0.0, sino.max()))

###############################################################################
# Backprojection is the exact adjoint: <Ax, y> == <x, A^T y>
rng = np.random.default_rng(0)
x, y = rng.standard_normal(geom.image_shape), rng.standard_normal(geom.sino_shape)
lhs, rhs = np.vdot(forward_project(x, geom), y), np.vdot(x, back_project(y, geom))
print("adjoint mismatch %.2e" % (abs(lhs - rhs) / abs(lhs)))

###############################################################################
# More views, fewer streaks
for views in (90, 180, 360):
    g = desk_geometry(128, views)
    rec = fbp_reconstruct(forward_project(phantom, g), g)
    print("%3d views: PSNR %.2f dB" % (views, psnr(rec, phantom)))
    save_png(out / f"fbp_{views}.png", rec, window=(0.0, 0.5))
