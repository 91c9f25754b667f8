"""
Latent quantization and the straight-through estimator
======================================================

Each latent dimension snaps to the nearest entry of its own codebook. The
forward value is the code while the backward pass treats the snap as the
identity.
"""

import numpy as np

from qlae import numerics as nx
from qlae.quantization import init_codebooks, latent_quantization, quantize, straight_through

codebooks = init_codebooks(n_z=3, n_v=5)
print("initial codebook row:", codebooks.values[0])

z_c = np.array([[0.31, -0.9, 0.05], [0.12, 0.49, -0.26]])
z, idx = quantize(z_c, codebooks)
print("continuous:\n", z_c, "\nquantized:\n", z, "\nindices:\n", idx)

# gradients flow through the snap untouched
x = nx.param(z_c)
zq = straight_through(x, nx.constant(z))
weights = np.arange(6.0).reshape(2, 3)
g = nx.forward_backward(nx.total(nx.mul(weights, zq)))[x]
print("downstream gradient equals upstream weights:", np.array_equal(g, weights))

# the quantize loss moves codebook values, the commit loss moves the encoder output
v = nx.param(codebooks.values)
x = nx.param(z_c)
r = latent_quantization(x, v, codebooks)
gq = nx.forward_backward(nx.total(r.loss_quantize))
gc = nx.forward_backward(nx.total(r.loss_commit))
print("quantize loss touches codebook only:", gq[v].any() and not gq[x].any())
print("commit loss touches encoder only:", gc[x].any() and not gc[v].any())
