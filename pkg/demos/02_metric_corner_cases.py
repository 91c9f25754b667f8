"""
InfoMEC on hand-built representations
=====================================

Modularity (InfoM), explicitness (InfoE) and compactness (InfoC) for a few
latent matrices whose answer is known in advance.
"""

import numpy as np

from qlae.infomec import CONTINUOUS, DISCRETE, EvalSample, infomec
from qlae.world import source_grid

sources = source_grid((8, 8, 4, 4)).astype(np.int64)
rng = np.random.default_rng(0)


def show(title, latents, kind=DISCRETE):
    r = infomec(EvalSample(sources, latents, kind))
    print(f"{title:<34} InfoM {r.infom:.3f}  InfoE {r.infoe:.3f}  InfoC {r.infoc:.3f}  active {r.report.n_active}")
    return r


show("one latent per source", sources)
show("two copies of every source", np.repeat(sources, 2, axis=1))
# a single latent makes compactness trivially 1 (with a warning)
show("one latent mixing everything", (sources.sum(1, keepdims=True) % 8))
# x and y packed into one latent; the hue columns are rescaled so the range
# rule does not prune them next to the wide packed column
show("x and y packed into one latent", np.c_[sources[:, 0] * 8 + sources[:, 1], 16 * sources[:, 2:]])

# continuous latents go through the nearest-neighbour estimator
noisy = sources + rng.uniform(0, 0.01, size=sources.shape)
r = show("sources plus tiny noise", noisy, CONTINUOUS)
print("\nNMI matrix for the noisy case (rows are sources):")
print(np.array2string(r.report.nmi, precision=2, suppress_small=True))

# a dead latent is pruned before scoring
dead = np.c_[sources, np.full(len(sources), 0.5)]
show("sources plus a constant latent", dead)
