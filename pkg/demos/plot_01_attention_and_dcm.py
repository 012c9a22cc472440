"""
Attention and dilated context
=============================

CBAM rescales a feature map twice, once per channel and once per pixel,
with gates in (0, 1). The dilated convolution module (DCM) stacks 3x3
convolutions with dilations 2, 4, 8, 4, 2 and adds the result back onto
its input.
"""

import numpy as np

from smallobj import cbam, dcm
from smallobj.arch import map_arrays
from smallobj.rng import Rng
from smallobj.selftest import ones_dcm

rng = Rng(0)
x = rng.normal(16 * 12 * 12).reshape(16, 12, 12)
params = cbam.init_cbam(rng.child("cbam"), 16)

###############################################################################
# The two gates, then the full block. Every output is an attenuated copy of
# its input.
ch = cbam.channel_attention(x, params)
sp = cbam.spatial_attention(x * ch[:, None, None], params)
y = cbam.cbam_apply(x, params)
print("channel gate range", ch.min(), ch.max())
print("spatial gate shape", sp.shape)
print("|y| <= |x| everywhere:", bool(np.all(np.abs(y) <= np.abs(x))))

###############################################################################
# Receptive field of the DCM branch: 1 + 2 * (2 + 4 + 8 + 4 + 2) = 41.
print("receptive field", dcm.receptive_field())

img = np.zeros((2, 64, 64))
img[0, 32, 32] = 1.0
resp = dcm.dcm_branch(img, ones_dcm(2))
ys, xs = np.nonzero(np.any(resp != 0, axis=0))
print("impulse response spans rows", ys.min(), "to", ys.max())
# every dilation is even, so only even offsets from the impulse light up
print("odd offsets reached:", bool(np.any((ys - 32) % 2)))

###############################################################################
# With all parameters zeroed the module is the identity map.
zero = map_arrays(dcm.init_dcm(rng.child("dcm"), 4), np.zeros_like)
feat = rng.normal(4 * 8 * 8).reshape(4, 8, 8)
print("zero DCM is identity:", np.array_equal(dcm.dcm_forward(feat, zero), feat))
