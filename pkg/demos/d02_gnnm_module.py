"""
One GNNM module step by step
============================

A module takes a sequence ``x`` of shape ``(d, n)`` and a context vector
``c`` of length ``d``.  It gates frames with a temporal convolution mask,
mixes them with self-attention, attends against the context, and either
returns an updated sequence or pools it into a single vector.
"""

# %%
import numpy as np

from gnnm import autodiff as ad
from gnnm.module import GnnmConfig, f_atten, f_conv, gnnm_forward, init_parameters

d, n = 8, 6
rng = np.random.default_rng(0)
x = ad.tensor(rng.normal(size=(d, n)))
c = ad.tensor(rng.normal(size=d))
cfg = GnnmConfig(d=d, n=n, attention_variant="component", aggregate_output=False)
params = init_parameters(cfg, 0, dtype="double")

# %%
# Stage 1: the convolution mask is a softmax over time, so each row sums to 1.
y1, mask = f_conv(x, params.conv_kernel, return_mask=True)
print("mask row sums:", np.round(mask.data.sum(axis=-1), 6))

# %%
# Stage 2: self-attention.  The component variant builds a d x d map,
# the temporal variant an n x n map.
y2 = f_atten(y1, params, "component")
print("after self-attention:", y2.shape)

# %%
# Full forward.  Columns of the hybrid attention map are distributions.
out = gnnm_forward(x, c, params, cfg)
print("sequence output:", out.sequence.shape)
print("attention column sums:", np.round(out.attention.data.sum(axis=-2), 6))

# %%
# With aggregation the module returns a length-d vector and the mixing
# weights over time positions.
agg = GnnmConfig(d=d, n=n, attention_variant="temporal", aggregate_output=True)
out = gnnm_forward(x, c, init_parameters(agg, 0, dtype="double"), agg)
print("vector output:", out.vector.shape, "weights:", np.round(out.weights.data, 3))
