"""
Quantized versus continuous latents
===================================

Train a short QLAE and a plain autoencoder on the synthetic world and compare
their disentanglement. Step counts are small so this finishes in a few
minutes; pass a larger number as the first argument for a closer look.
"""

import sys

import numpy as np

from qlae.autoencoder import TrainConfig, train
from qlae.experiment import evaluate_model
from qlae.world import build_dataset

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
data = build_dataset()

for label, quantized in (("QLAE", True), ("AE", False)):
    cfg = TrainConfig(quantize=quantized, max_updates=steps, hidden=(128, 128), seed=0)
    state = train(cfg.resolved(data.space.n_sources), data)
    ev = evaluate_model(state, data, n_eval=4000, seed=0)
    m = ev.metrics
    print(f"\n{label}: InfoM {m['infom']:.3f}  InfoE {m['infoe']:.3f}  InfoC {m['infoc']:.3f}  "
          f"PSNR {m['psnr_mean']:.1f} dB  active latents {m['n_active']}")
    print("NMI (rows are sources, columns are active latents):")
    print(np.array2string(ev.report.nmi[:, ev.report.active_mask], precision=2, suppress_small=True))
