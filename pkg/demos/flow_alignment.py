"""
Aligning a window of frames
===========================

The built-in coarse-to-fine estimator recovers a global pan and the window
aligner carries every neighbour onto the centre frame.
"""

import numpy as np
from scipy import ndimage

from tsan.flow import FlowEstimator, estimate_flow, window_flows

rng = np.random.default_rng(1)
texture = ndimage.gaussian_filter(rng.random((80, 80)), 2.0)
texture = (texture - texture.min()) / np.ptp(texture)
yy, xx = np.mgrid[0:64, 0:64].astype(float)


def frame(dx, dy):
    return ndimage.map_coordinates(texture, [yy + 8 + dy, xx + 8 + dx], order=3).astype(np.float32)


# a subpixel shift between two frames
ref, tgt = frame(0, 0), frame(1.5, -0.75)
f = estimate_flow(ref, tgt)
print("mean flow (dx, dy):", f[:, 8:-8, 8:-8].mean(axis=(1, 2)))

# a 5-frame window panning 2 px per frame, aligned to the centre
window = [frame(2.0 * t, 0.0) for t in (-2, -1, 0, 1, 2)]
aligned, flows = window_flows(window, FlowEstimator())
for j, (a, fl) in enumerate(zip(aligned, flows)):
    err = np.abs(a - window[2])[12:-12, 12:-12].mean()
    print(f"frame {j}: accumulated dx {fl[0, 12:-12, 12:-12].mean():+.2f}, aligned MAE {err:.4f}")
