"""Differentiable operators the restoration network is assembled from.

All ops take torch tensors in ``(N, C, H, W)`` layout. Unbatched inputs
(``(H, W)`` planes or ``(C, H, W)`` feature maps) are accepted and returned
in the same rank. Reverse-mode gradients come from torch autograd; the
sampling ops are written out explicitly (gather + bilinear weights) so that
their border behaviour is under our control.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float32

DOWNSAMPLE_METHODS = ("bilinear", "average_pool", "max_pool", "strided_conv")


class ContractError(ValueError):
    """Raised when an operator's shape or configuration precondition fails."""


def _to4d(x: torch.Tensor) -> tuple[torch.Tensor, int]:
    if x.dim() == 2:
        return x[None, None], 2
    if x.dim() == 3:
        return x[None], 3
    if x.dim() == 4:
        return x, 4
    raise ContractError(f"expected a 2-D, 3-D or 4-D tensor, got shape {tuple(x.shape)}")


def _restore(x: torch.Tensor, rank: int) -> torch.Tensor:
    if rank == 2:
        return x[0, 0]
    if rank == 3:
        return x[0]
    return x


@dataclass
class ConvSpec:
    weight: torch.Tensor
    bias: torch.Tensor | None = None
    dilation: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.weight.dim() != 4:
            raise ContractError("conv weight must be (out, in, k, k)")
        o, _, kh, kw = self.weight.shape
        if kh != kw or kh % 2 == 0:
            raise ContractError(f"kernel must be square with odd size, got {kh}x{kw}")
        if self.bias is not None and self.bias.shape != (o,):
            raise ContractError(f"bias shape {tuple(self.bias.shape)} does not match {o} outputs")
        if self.dilation < 1 or self.stride < 1:
            raise ContractError("dilation and stride must be positive")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]

    @property
    def receptive_field(self) -> int:
        return self.dilation * (self.kernel_size - 1) + 1

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel_size - 1) // 2


def kernel_grid(kernel_size: int, dilation: int = 1) -> list[tuple[int, int]]:
    """Row-major tap offsets (dy, dx) of a square kernel."""
    r = kernel_size // 2
    return [(dy * dilation, dx * dilation) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def conv2d(x: torch.Tensor, spec: ConvSpec) -> torch.Tensor:
    """Zero-padded dilated cross-correlation; stride 1 keeps the spatial size."""
    x4, rank = _to4d(x)
    if x4.shape[1] != spec.in_channels:
        raise ContractError(f"input has {x4.shape[1]} channels, conv expects {spec.in_channels}")
    out = F.conv2d(x4, spec.weight, spec.bias, stride=spec.stride,
                   padding=spec.padding, dilation=spec.dilation)
    return _restore(out, rank)


def _sample_clamped(src: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Bilinear sampling with clamp-to-edge borders.

    ``src`` is (N, C, H, W); ``ys``/``xs`` are (N, P) absolute pixel
    coordinates. Returns (N, C, P).
    """
    n, c, h, w = src.shape
    ys = ys.clamp(0, h - 1)
    xs = xs.clamp(0, w - 1)
    y0f = torch.floor(ys)
    x0f = torch.floor(xs)
    wy = ys - y0f
    wx = xs - x0f
    y0 = y0f.long()
    x0 = x0f.long()
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)

    flat = src.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).unsqueeze(1).expand(n, c, yi.shape[1])
        return flat.gather(2, idx)

    wy = wy.unsqueeze(1)
    wx = wx.unsqueeze(1)
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def _pixel_grid(h: int, w: int, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=like.dtype, device=like.device),
        torch.arange(w, dtype=like.dtype, device=like.device),
        indexing="ij",
    )
    return gy, gx


def bilinear_warp(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``src`` by ``flow``: ``out(y, x) = src(y + dy, x + dx)``.

    ``flow`` carries ``(dx, dy)`` along its channel axis, shape (N, 2, H, W)
    or (2, H, W). Samples outside the frame are clamped to the border.
    """
    s4, rank = _to4d(src)
    f4 = flow[None] if flow.dim() == 3 else flow
    if f4.dim() != 4 or f4.shape[1] != 2:
        raise ContractError(f"flow must be (N, 2, H, W), got {tuple(flow.shape)}")
    n, c, h, w = s4.shape
    if f4.shape[0] != n or f4.shape[2:] != s4.shape[2:]:
        raise ContractError(
            f"flow shape {tuple(f4.shape)} does not match source {tuple(s4.shape)}")
    gy, gx = _pixel_grid(h, w, f4)
    xs = (gx + f4[:, 0]).reshape(n, -1)
    ys = (gy + f4[:, 1]).reshape(n, -1)
    out = _sample_clamped(s4, ys, xs).reshape(n, c, h, w)
    return _restore(out, rank)


def deform_conv2d(x: torch.Tensor, spec: ConvSpec, offsets: torch.Tensor) -> torch.Tensor:
    """Deformable convolution, stride 1, size-preserving.

    ``offsets`` has 2K channels ordered (dy_1, dx_1, ..., dy_K, dx_K) over the
    row-major kernel grid. Tap k at output p0 reads the input bilinearly at
    ``p0 + p_k + offset_k`` with clamped borders. A tap whose undeformed
    location ``p0 + p_k`` lies outside the frame contributes zero, matching
    the zero padding of :func:`conv2d`, so zero offsets reproduce it exactly.
    """
    x4, rank = _to4d(x)
    o4 = offsets[None] if offsets.dim() == 3 else offsets
    n, c, h, w = x4.shape
    k = spec.kernel_size
    taps = kernel_grid(k, spec.dilation)
    if spec.stride != 1:
        raise ContractError("deform_conv2d supports stride 1 only")
    if c != spec.in_channels:
        raise ContractError(f"input has {c} channels, conv expects {spec.in_channels}")
    if o4.dim() != 4 or o4.shape[1] != 2 * len(taps):
        raise ContractError(
            f"offsets need {2 * len(taps)} channels for a {k}x{k} kernel, got shape {tuple(offsets.shape)}")
    if o4.shape[0] != n or o4.shape[2:] != x4.shape[2:]:
        raise ContractError(
            f"offset field {tuple(o4.shape)} does not match input {tuple(x4.shape)}")

    gy, gx = _pixel_grid(h, w, o4)
    tap_y = torch.tensor([t[0] for t in taps], dtype=o4.dtype).view(1, -1, 1, 1)
    tap_x = torch.tensor([t[1] for t in taps], dtype=o4.dtype).view(1, -1, 1, 1)
    base_y = gy + tap_y  # (1, K, H, W)
    base_x = gx + tap_x
    inside = ((base_y >= 0) & (base_y <= h - 1) & (base_x >= 0) & (base_x <= w - 1)).to(x4.dtype)
    ys = (base_y + o4[:, 0::2]).reshape(n, -1)
    xs = (base_x + o4[:, 1::2]).reshape(n, -1)
    cols = _sample_clamped(x4, ys, xs).reshape(n, c, len(taps), h, w) * inside.unsqueeze(1)
    out = torch.einsum("nckhw,ock->nohw", cols, spec.weight.reshape(spec.out_channels, c, -1))
    if spec.bias is not None:
        out = out + spec.bias.view(1, -1, 1, 1)
    return _restore(out, rank)


def residual_block(x: torch.Tensor, first: ConvSpec, second: ConvSpec,
                   act: Callable[[torch.Tensor], torch.Tensor] = F.relu) -> torch.Tensor:
    """``x + second(act(first(x)))``; both convs keep the channel count."""
    if first.in_channels != second.out_channels:
        raise ContractError("residual branch must preserve the channel count")
    return x + conv2d(act(conv2d(x, first)), second)


def _pad_even(x4: torch.Tensor) -> torch.Tensor:
    h, w = x4.shape[-2:]
    if h % 2 == 0 and w % 2 == 0:
        return x4
    return F.pad(x4, (0, w % 2, 0, h % 2), mode="replicate")


# separable [1, 3, 3, 1] / 8: the triangle (bilinear) filter stretched for a 2x reduction
_TRIANGLE = (0.125, 0.375, 0.375, 0.125)


def _bilinear_down(x4: torch.Tensor) -> torch.Tensor:
    n, c, h, w = x4.shape
    taps = torch.tensor(_TRIANGLE, dtype=x4.dtype, device=x4.device)
    padded = F.pad(x4, (1, 1, 1, 1), mode="replicate").reshape(n * c, 1, h + 2, w + 2)
    rows = F.conv2d(padded, taps.view(1, 1, 4, 1), stride=(2, 1))
    out = F.conv2d(rows, taps.view(1, 1, 1, 4), stride=(1, 2))
    return out.reshape(n, c, h // 2, w // 2)


def downsample(x: torch.Tensor, method: str, factor: int = 2,
               conv: ConvSpec | None = None) -> torch.Tensor:
    """Halve the spatial size with one of four filters.

    Odd sizes are first replicate-padded to even. ``bilinear`` is an
    antialiased (triangle-filter) reduction; ``strided_conv`` needs a 3x3
    stride-2 :class:`ConvSpec`.
    """
    if factor != 2:
        raise ContractError("only factor 2 is supported")
    if method not in DOWNSAMPLE_METHODS:
        raise ContractError(f"unknown downsample method {method!r}; choose from {DOWNSAMPLE_METHODS}")
    x4, rank = _to4d(x)
    x4 = _pad_even(x4)
    if method == "bilinear":
        out = _bilinear_down(x4)
    elif method == "average_pool":
        out = F.avg_pool2d(x4, 2)
    elif method == "max_pool":
        out = F.max_pool2d(x4, 2)
    else:
        if conv is None:
            raise ContractError("strided_conv downsampling needs a ConvSpec")
        if conv.stride != 2 or conv.kernel_size != 3:
            raise ContractError("strided_conv needs a 3x3 kernel with stride 2")
        out = F.conv2d(x4, conv.weight, conv.bias, stride=2, padding=conv.padding, dilation=conv.dilation)
    return _restore(out, rank)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    x4, rank = _to4d(x)
    return _restore(F.interpolate(x4, scale_factor=2, mode="bilinear", align_corners=False), rank)


def grad_check(op: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               epsilon: float = 1e-6, max_checks: int | None = 200,
               wrt: Sequence[int] | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences.

    The op is evaluated in float64 and reduced to a scalar through a fixed
    random projection of its output. When an input has more than
    ``max_checks`` entries, a seeded random subset is probed. The error for
    each probed entry is ``|g_auto - g_fd| / max(|g_auto|, |g_fd|, floor)``
    with ``floor = 1e-3 * max|g_fd|`` to keep exact zeros from dominating.
    """
    rng = np.random.default_rng(seed)
    xs = [t.detach().to(torch.float64).clone() for t in inputs]
    wrt = range(len(xs)) if wrt is None else wrt
    for i in wrt:
        xs[i].requires_grad_(True)

    with torch.no_grad():
        probe = op(*xs)
    proj = torch.from_numpy(rng.standard_normal(tuple(probe.shape)))

    def scalar(args):
        return (op(*args) * proj).sum()

    loss = scalar(xs)
    auto = torch.autograd.grad(loss, [xs[i] for i in wrt], allow_unused=True)

    worst = 0.0
    for g, i in zip(auto, wrt):
        base = xs[i].detach()
        g = torch.zeros_like(base) if g is None else g.detach()
        numel = base.numel()
        picks = np.arange(numel)
        if max_checks is not None and numel > max_checks:
            picks = rng.choice(numel, size=max_checks, replace=False)
        fd = np.empty(len(picks))
        ga = g.reshape(-1)[picks].numpy()
        for j, flat_idx in enumerate(picks):
            vals = []
            for sign in (1.0, -1.0):
                bumped = base.clone().reshape(-1)
                bumped[flat_idx] += sign * epsilon
                args = [x.detach() if k != i else bumped.reshape(base.shape) for k, x in enumerate(xs)]
                with torch.no_grad():
                    vals.append(scalar(args).item())
            fd[j] = (vals[0] - vals[1]) / (2 * epsilon)
        floor = max(1e-3 * np.abs(fd).max(), 1e-12)
        rel = np.abs(ga - fd) / np.maximum(np.maximum(np.abs(ga), np.abs(fd)), floor)
        worst = max(worst, float(rel.max()))
    return worst
