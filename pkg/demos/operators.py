"""
Differentiable operators
========================

Warping, deformable convolution and dilated receptive fields on toy inputs.
"""

import numpy as np
import torch

from tsan.numcore import ConvSpec, bilinear_warp, conv2d, deform_conv2d, grad_check

# a ramp image; a constant flow of +1.5 px in x samples 1.5 columns to the right
img = torch.arange(30, dtype=torch.float32).reshape(1, 5, 6)
flow = torch.zeros(2, 5, 6)
flow[0] = 1.5
print(bilinear_warp(img, flow)[0])

# with zero offsets a deformable convolution is an ordinary convolution
rng = np.random.default_rng(0)
x = torch.tensor(rng.standard_normal((2, 8, 8)), dtype=torch.float32)
spec = ConvSpec(torch.tensor(rng.standard_normal((3, 2, 3, 3)), dtype=torch.float32))
same = deform_conv2d(x, spec, torch.zeros(18, 8, 8))
print("max |deform(0) - conv|:", float((same - conv2d(x, spec)).abs().max()))

# shifting every tap one pixel right equals convolving the shifted input
offsets = torch.zeros(18, 8, 8)
offsets[1::2] = 1.0
shifted = deform_conv2d(x, spec, offsets)
x_right = torch.cat([x[:, :, 1:], x[:, :, -1:]], dim=2)
print("matches shift-then-conv:", torch.allclose(shifted, conv2d(x_right, spec), atol=1e-5))

# the footprint of a dilated 3x3 kernel on a delta input
delta = torch.zeros(1, 17, 17)
delta[0, 8, 8] = 1.0
for rate in (1, 2, 4):
    resp = conv2d(delta, ConvSpec(torch.ones(1, 1, 3, 3), dilation=rate))[0]
    rows = np.nonzero(resp.numpy().any(1))[0]
    print(f"rate {rate}: {rows.max() - rows.min() + 1} px wide")

# autograd against central differences
print("warp gradient rel err:",
      grad_check(bilinear_warp, [torch.rand(1, 6, 6), torch.rand(2, 6, 6) * 0.6 + 0.2], epsilon=1e-5))
