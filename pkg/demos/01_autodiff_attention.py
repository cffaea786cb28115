"""
Gradients through an attention block
====================================

Build one pre-norm attention block, push a few tokens through it and
compare the backward pass with central differences.
"""

import numpy as np

from phasemem import layers as L
from phasemem import tensor as T

rng = np.random.default_rng(0)
params = {}
L.init_block(params, "blk", rng, d=8, heads=2, dtype=np.float64)
names = list(params)
tokens = rng.normal(size=(5, 8))

out = L.mhsa_block(tokens, params, "blk", heads=2)
print("tokens in", tokens.shape, "-> tokens out", out.shape)


# a scalar loss of the block output, as a function of the input and every weight
def loss(x, *weights):
    p = dict(zip(names, weights))
    y = L.mhsa_block(x, p, "blk", heads=2)
    return T.tensor_sum(T.mul(y, y))


err = T.grad_check(loss, [tokens] + [params[n].data for n in names])
print("largest relative gradient error: %.2e" % err)

# attention weights of every head are available for inspection
weights = []
L.mhsa_block(tokens, params, "blk", heads=2, attn_out=weights)
print("attention rows sum to", weights[0].sum(axis=-1).round(6).ravel())
