"""
Channel and temporal gates on a video feature
=============================================

The channel module pools a (N, T, C, H, W) feature over time and space and
produces one gate per channel; the temporal module pools over channels and
space and produces one gate per frame.  Here we feed a feature whose middle
frames are brighter and look at the gates.
"""

import numpy as np

from ctan import attention
from ctan.tensor import Tensor

rng = np.random.default_rng(4)
n, t, c, h, w = 1, 8, 8, 4, 4

feature = rng.uniform(0, 1, (n, t, c, h, w))
feature[:, 3:5] += 2.0  # two "eventful" frames
x = Tensor(feature)

cp = attention.init_channel_params(c, 4, rng, np.float64)
tp = attention.init_temporal_params(t, 4, rng, np.float64)

y_c, gate_c = attention.channel_attention(x, cp)
y_t, gate_t = attention.temporal_attention(x, tp)
print("channel gates :", np.round(gate_c.data.ravel(), 3))
print("temporal gates:", np.round(gate_t.data.ravel(), 3))
# Untrained weights give arbitrary gates around 0.5; training decides which
# frames and channels get amplified.

# Each module keeps a residual path: out = x + gate * x.  Pinning the gate
# shows the two extremes.
zero = attention.cta_forward(x, "CT", cp, tp, force_gate=0.0)
print("gate 0 leaves the input unchanged:", np.array_equal(zero.data, x.data))

# Order matters once the gates are learned.
ct = attention.cta_forward(x, "CT", cp, tp)
tc = attention.cta_forward(x, "TC", cp, tp)
print("max |CT - TC| = %.3g" % np.max(np.abs(ct.data - tc.data)))
