"""
Simulating low-dose scans
=========================

Photon starvation is modelled as Poisson counts plus Gaussian electronic
noise.  Lower incident flux gives noisier sinograms and streakier FBP
images.
"""
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from magicct.data import make_phantom, save_png
from magicct.fbp import fbp_reconstruct
from magicct.geometry import desk_geometry, forward_project
from magicct.metrics import psnr, roi_stats
from magicct.noise import DoseModel, simulate_lowdose

out = Path(__file__).with_name("demo_output")
out.mkdir(exist_ok=True)

# attenuation in 1/mm: a phantom value of 0.5 is roughly water
gt = make_phantom("random-ellipses", 64, seed=7) * 0.04
geom = desk_geometry(64, 180)
clean = forward_project(gt, geom)

# noise is easiest to read off a flat patch of tissue: pick the 8 x 8 window
# with the least ground-truth variation inside the body
windows = sliding_window_view(gt, (8, 8))
score = windows.std(axis=(2, 3)) + (windows.min(axis=(2, 3)) == 0)
r, c = np.unravel_index(np.argmin(score), score.shape)
roi = (int(r), int(c), 8, 8)
print("flat ROI at", roi)

for tier in ("100%", "10%", "5%", "2.5%"):
    y = simulate_lowdose(clean, DoseModel.preset(tier, seed=1))
    rec = fbp_reconstruct(y, geom)
    mean, sd = roi_stats(rec, roi)
    print("%5s dose: PSNR %.2f dB, ROI %.4f +- %.4f /mm" % (tier, psnr(rec, gt), mean, sd))
    save_png(out / f"fbp_dose_{tier.rstrip('%')}.png", rec, window=(0.0, 0.03))
