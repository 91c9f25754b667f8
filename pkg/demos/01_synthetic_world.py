"""
The synthetic world
===================

Four discrete sources (object x, object y, object hue, background hue) are
rendered into 16x16 RGB images. The full factorial grid gives 1024 images.
"""

import numpy as np

from qlae.world import build_dataset

data = build_dataset()
print("sources:", data.space.names, "cardinalities:", data.space.cardinalities)
print("images:", data.images.shape, data.images.dtype)

# every joint assignment appears exactly once
print("distinct source rows:", len(np.unique(data.sources, axis=0)))

# a coarse text view of one image: '#' marks object pixels, '.' background
s, img = data.rows([137])
img = img[0].astype(np.float64)
background = img[0, 0]
for row in img:
    print("".join("#" if np.abs(px - background).sum() > 1e-6 else "." for px in row))
print("source tuple:", dict(zip(data.space.names, s[0].tolist())))

# moving the object one step along x shifts the mask and nothing else
s2 = s.copy()
s2[0, 0] += 1
_, img2 = data.rows([int(np.flatnonzero((data.sources == s2[0]).all(1))[0])])
print("pixels changed by one x step:", int((np.abs(img2[0].astype(np.float64) - img).sum(-1) > 0).sum()))
