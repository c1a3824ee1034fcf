"""
Training MAGIC and LEARN on a toy set
=====================================

A short run at 32 x 32 pixels: the unrolled network with and without the
graph branch, trained on a handful of random-ellipse phantoms at 10 %
dose.  Expect under a minute on one core.  The full-size comparison is the
``magicct compare`` command.
"""
import time

import numpy as np

from magicct.data import make_phantom
from magicct.fbp import fbp_reconstruct
from magicct.geometry import desk_geometry, forward_project
from magicct.metrics import psnr
from magicct.noise import DoseModel, simulate_lowdose
from magicct.training import Sample, TrainConfig, train
from magicct.unrolled import MagicNetwork, PatchConfig, reconstruct

geom = desk_geometry(32, 90)
samples = []
for i in range(10):
    gt = make_phantom("random-ellipses", 32, seed=100 + i) * 0.04
    y = simulate_lowdose(forward_project(gt, geom), DoseModel.preset("10%", seed=i))
    samples.append(Sample(y, fbp_reconstruct(y, geom), gt, str(i)))
train_set, test_set = samples[:8], samples[8:]
print("FBP   %.2f dB" % np.mean([psnr(s.x0, s.label) for s in test_set]))

for name, use_graph in (("LEARN", False), ("MAGIC", True)):
    net = MagicNetwork.init(geom, n_blocks=4, n_coarse=2, channels=16, graph_width=32,
                            patch=PatchConfig(6, 2, 8), use_graph=use_graph, seed=0)
    t0 = time.time()
    result = train(net, train_set, TrainConfig(epochs=40, lr=1e-3))
    score = np.mean([psnr(reconstruct(net, s.x0, s.y), s.label) for s in test_set])
    print("%-5s %.2f dB  (loss %.3g -> %.3g, %.0f s)"
          % (name, score, result.curve[0]["total"], result.curve[-1]["total"], time.time() - t0))
