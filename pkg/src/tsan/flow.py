"""Optical flow for the plain-motion stage of temporal alignment.

The default estimator is a dense pyramidal Lucas-Kanade solver: at each
pyramid level the reference is warped by the current flow, a per-pixel
Gaussian-windowed least-squares update is solved from the warped image's
gradients, and the flow is upsampled to the next finer level. Any callable
with the ``estimate_flow(reference, target)`` signature can be plugged in.

Flow convention matches :func:`tsan.numcore.bilinear_warp`: channel 0 is
``dx``, channel 1 is ``dy``, and ``warp(reference, flow) ~= target``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
from scipy import ndimage

from .numcore import ContractError, bilinear_warp


class FlowModel(Protocol):
    def estimate_flow(self, reference: np.ndarray, target: np.ndarray) -> np.ndarray: ...


def _warp_np(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    h, w = img.shape
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([gy + flow[1], gx + flow[0]])
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")


def _reduce(img: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(img, 1.0, mode="nearest")[::2, ::2]


def _expand_flow(flow: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    sy = (flow.shape[1] - 1) / max(h - 1, 1)
    sx = (flow.shape[2] - 1) / max(w - 1, 1)
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([gy * sy, gx * sx])
    up = np.stack([ndimage.map_coordinates(f, coords, order=1, mode="nearest") for f in flow])
    up[0] *= w / flow.shape[2]
    up[1] *= h / flow.shape[1]
    return up


@dataclass(frozen=True)
class FlowEstimator:
    """Coarse-to-fine dense Lucas-Kanade.

    ``window_sigma`` sets the Gaussian integration window and
    ``regularization`` damps the 2x2 normal equations in flat regions.
    """
    pyramid_levels: int = 3
    iterations_per_level: int = 10
    window_sigma: float = 2.0
    regularization: float = 1e-4
    max_step: float = 1.0

    def __post_init__(self):
        if self.pyramid_levels < 1 or self.iterations_per_level < 1:
            raise ContractError("pyramid_levels and iterations_per_level must be positive")

    def estimate_flow(self, reference: np.ndarray, target: np.ndarray) -> np.ndarray:
        reference = np.asarray(reference, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        if reference.shape != target.shape or reference.ndim != 2:
            raise ContractError(
                f"reference {reference.shape} and target {target.shape} must be equal 2-D shapes")

        refs, tgts = [reference], [target]
        for _ in range(self.pyramid_levels - 1):
            if min(refs[-1].shape) < 8:
                break
            refs.append(_reduce(refs[-1]))
            tgts.append(_reduce(tgts[-1]))

        flow = np.zeros((2,) + refs[-1].shape)
        for level in range(len(refs) - 1, -1, -1):
            if flow.shape[1:] != refs[level].shape:
                flow = _expand_flow(flow, refs[level].shape)
            flow = self._refine(refs[level], tgts[level], flow)
        return flow.astype(np.float32)

    def _refine(self, ref: np.ndarray, tgt: np.ndarray, flow: np.ndarray) -> np.ndarray:
        smooth = lambda a: ndimage.gaussian_filter(a, self.window_sigma, mode="nearest")
        for _ in range(self.iterations_per_level):
            warped = _warp_np(ref, flow)
            gy, gx = np.gradient(warped)
            err = tgt - warped
            sxx = smooth(gx * gx) + self.regularization
            syy = smooth(gy * gy) + self.regularization
            sxy = smooth(gx * gy)
            bx = smooth(gx * err)
            by = smooth(gy * err)
            det = sxx * syy - sxy * sxy
            ux = (syy * bx - sxy * by) / det
            uy = (sxx * by - sxy * bx) / det
            flow = flow + np.clip(np.stack([ux, uy]), -self.max_step, self.max_step)
        return flow


def estimate_flow(reference, target, estimator: FlowModel | None = None) -> np.ndarray:
    """Flow (2, H, W) such that warping ``reference`` by it approximates ``target``."""
    return (estimator or FlowEstimator()).estimate_flow(reference, target)


def _as_np(plane) -> np.ndarray:
    if isinstance(plane, torch.Tensor):
        plane = plane.detach().cpu().numpy()
    plane = np.asarray(plane, dtype=np.float32)
    while plane.ndim > 2:
        plane = plane[0]
    return plane


def _warp_plane(src: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Warp a (H, W) plane or (C, H, W) stack with the shared torch sampler."""
    return bilinear_warp(torch.from_numpy(np.ascontiguousarray(src, dtype=np.float32)),
                         torch.from_numpy(np.ascontiguousarray(flow, dtype=np.float32))).numpy()


def window_flows(frames: Sequence, estimator: FlowModel | None = None,
                 direct: bool = False) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Align every frame of a 2T+1 window toward the centre frame.

    Returns ``(aligned, flows)``, both of length 2T+1 in temporal order; the
    centre passes through with zero flow. In chained mode (default) a frame
    at distance d is warped to its neighbour one step closer to the centre,
    and that result is carried onward step by step. ``flows[j]`` is the
    accumulated displacement mapping frame j onto the centre grid.
    """
    estimator = estimator or FlowEstimator()
    planes = [_as_np(f) for f in frames]
    n = len(planes)
    if n % 2 == 0:
        raise ContractError(f"window must hold 2T+1 frames, got {n}")
    c = n // 2
    aligned: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    flows: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    aligned[c] = planes[c].copy()
    flows[c] = np.zeros((2,) + planes[c].shape, dtype=np.float32)

    for side in (-1, 1):
        for dist in range(1, c + 1):
            j = c + side * dist
            if direct:
                flow = estimator.estimate_flow(planes[j], planes[c])
                aligned[j] = _warp_plane(planes[j], flow)
                flows[j] = flow
                continue
            # step j -> j-side (one frame closer to the centre), then follow the
            # already-chained path of that neighbour
            step = estimator.estimate_flow(planes[j], planes[j - side])
            current = _warp_plane(planes[j], step)
            total = step
            k = j - side
            while k != c:
                nxt = estimator.estimate_flow(planes[k], planes[k - side])
                current = _warp_plane(current, nxt)
                # warp(warp(X, a), b)(p) = X(p + b(p) + a(p + b(p)))
                total = nxt + _warp_plane(total, nxt)
                k -= side
            aligned[j] = current
            flows[j] = total.astype(np.float32)
    return aligned, flows


def align_window(window, estimator: FlowModel | None = None, direct: bool = False) -> list[np.ndarray]:
    """Aligned planes X^A for a window (a ClipSample or a sequence of planes)."""
    frames = getattr(window, "frames", window)
    return window_flows(frames, estimator, direct)[0]
