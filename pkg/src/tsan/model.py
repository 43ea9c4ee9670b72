"""Temporal-spatial auxiliary restoration network.

The network is written functionally: parameters live in a flat, ordered
``{path: tensor}`` map (:class:`ModelParams`) and each stage is a plain
function of its inputs and that map. Stages:

* TDAM - temporal deformable alignment over the 2T+1 frame window
* PSFM - pyramidal spatial fusion (U-shaped, four parallel downsamplers)
* ASAM - auxiliary supervised attention, emits the intermediate frame H_re
* GSRM - global supervised reconstruction, emits the restored frame Y_re

Variants V1 (TDAM + GSRM) and V2 (TDAM + PSFM + GSRM) drop stages while
keeping parameter paths shared with the full model.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .numcore import (
    DTYPE, DOWNSAMPLE_METHODS, ContractError, ConvSpec, conv2d, deform_conv2d,
    downsample, residual_block, upsample2x,
)

VARIANTS = ("v1", "v2", "full")
PUBLISHED_PARAMS = 5.75e6


@dataclass(frozen=True)
class ModelConfig:
    temporal_radius: int = 1
    base_channels: int = 64
    psfm_depth: int = 3
    gsrm_blocks: int = 10
    psfm_res_blocks: int = 5
    hdro_rates: tuple[int, ...] = (1, 2, 4)
    # channel multiplier per PSFM pyramid level, capped at the last entry
    psfm_widths: tuple[int, ...] = (1, 2, 2, 4)
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.temporal_radius < 0 or self.base_channels < 1 or self.psfm_depth < 0:
            raise ContractError("invalid model dimensions")
        object.__setattr__(self, "hdro_rates", tuple(int(r) for r in self.hdro_rates))
        object.__setattr__(self, "psfm_widths", tuple(int(r) for r in self.psfm_widths))

    @property
    def window(self) -> int:
        return 2 * self.temporal_radius + 1

    @property
    def min_size(self) -> int:
        return 2 ** self.psfm_depth if self.variant != "v1" else 1

    def level_width(self, level: int) -> int:
        mult = self.psfm_widths[min(level, len(self.psfm_widths) - 1)]
        return self.base_channels * mult

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("hdro_rates", "psfm_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def conv(self, prefix: str, dilation: int = 1, stride: int = 1) -> ConvSpec:
        return ConvSpec(self.tensors[prefix + ".weight"], self.tensors.get(prefix + ".bias"),
                        dilation=dilation, stride=stride)

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()))

    def groups(self) -> "OrderedDict[str, list[str]]":
        """Parameter names grouped by the layer or block that owns them."""
        out: OrderedDict[str, list[str]] = OrderedDict()
        for name in self.tensors:
            out.setdefault(param_group(name), []).append(name)
        return out


def param_group(name: str) -> str:
    parts = name.split(".")[:-1]  # drop weight/bias
    if parts and parts[-1] in ("conv1", "conv2"):
        parts = parts[:-1]
    if len(parts) >= 2 and parts[-2] == "hdro":
        parts = parts[:-1]
    return ".".join(parts)


# --- parameter layout -------------------------------------------------------

# init kinds: "relu" (Kaiming for ReLU-followed convs), "linear" (fan-in 1/sqrt),
# "zero" (residual-branch output convs), "small" (offset / reconstruction heads)
_Shape = tuple[tuple[int, ...], str]


def _conv_entry(layout, name, cout, cin, k=3, init="relu", bias=True):
    layout[name + ".weight"] = ((cout, cin, k, k), init)
    if bias:
        layout[name + ".bias"] = ((cout,), "bias")


def _res_entry(layout, name, ch):
    _conv_entry(layout, name + ".conv1", ch, ch)
    _conv_entry(layout, name + ".conv2", ch, ch, init="zero")


def _hdro_entry(layout, name, ch, rates):
    for r in rates:
        _conv_entry(layout, f"{name}.d{r}", ch, ch)
    _conv_entry(layout, f"{name}.rec", 1, ch * len(rates), init="small")


def param_layout(cfg: ModelConfig) -> "OrderedDict[str, _Shape]":
    """Ordered parameter paths, shapes and init kinds for a configuration."""
    c = cfg.base_channels
    n = cfg.window
    taps = 9
    lay: OrderedDict[str, _Shape] = OrderedDict()

    _conv_entry(lay, "tdam.extract", c, n)
    _conv_entry(lay, "tdam.fe.0", c, n + 1)
    _conv_entry(lay, "tdam.fe.1", c, c)
    _conv_entry(lay, "tdam.fe.2", 2 * taps, c, init="small")
    if cfg.temporal_radius > 0:
        _conv_entry(lay, "tdam.motion", 2 * taps, 4 * cfg.temporal_radius, init="small")
    _conv_entry(lay, "tdam.deform", c, c)

    if cfg.variant in ("v2", "full"):
        w0 = cfg.level_width(0)
        if w0 != c:
            _conv_entry(lay, "psfm.head", w0, c)
        _res_entry(lay, "psfm.enc.0", w0)
        for lvl in range(1, cfg.psfm_depth + 1):
            wp, wl = cfg.level_width(lvl - 1), cfg.level_width(lvl)
            _conv_entry(lay, f"psfm.down.{lvl}.strided", wp, wp, init="linear")
            _conv_entry(lay, f"psfm.down.{lvl}.fuse", wl, 4 * wp, k=1)
            _res_entry(lay, f"psfm.enc.{lvl}", wl)
        for lvl in range(cfg.psfm_depth, 0, -1):
            wp, wl = cfg.level_width(lvl - 1), cfg.level_width(lvl)
            _conv_entry(lay, f"psfm.up.{lvl}", wp, wl)
            _res_entry(lay, f"psfm.dec.{lvl - 1}", wp)
        if w0 != c:
            _conv_entry(lay, "psfm.tail", c, w0)
        for i in range(cfg.psfm_res_blocks):
            _res_entry(lay, f"psfm.post.{i}", c)

    if cfg.variant == "full":
        _hdro_entry(lay, "asam.hdro", c, cfg.hdro_rates)
        _conv_entry(lay, "asam.excite", c, 1, init="linear")
        _conv_entry(lay, "asam.transition", c, c)

    for i in range(cfg.gsrm_blocks):
        _res_entry(lay, f"gsrm.res.{i}", c)
    _hdro_entry(lay, "gsrm.hdro", c, cfg.hdro_rates)
    return lay


def init_params(cfg: ModelConfig, seed: int = 0, identity: bool = True) -> ModelParams:
    """Fan-in scaled initialization.

    With ``identity=True`` the second conv of every residual branch starts at
    zero and reconstruction heads start tiny, so the initial network is close
    to the identity on the centre frame. ``identity=False`` draws every array
    at its fan-in scale (used for gradient-flow checks).
    """
    gen = torch.Generator().manual_seed(seed)
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, (shape, kind) in param_layout(cfg).items():
        if kind == "bias":
            t = torch.zeros(shape, dtype=DTYPE)
            if not identity:
                t = torch.randn(shape, generator=gen, dtype=DTYPE) * 0.01
            out[name] = t
            continue
        fan_in = shape[1] * shape[2] * shape[3]
        std = math.sqrt(2.0 / fan_in) if kind == "relu" else math.sqrt(1.0 / fan_in)
        if identity and kind == "zero":
            std = 0.0
        elif identity and kind == "small":
            std *= 0.01
        out[name] = torch.randn(shape, generator=gen, dtype=DTYPE) * std
    params = ModelParams(cfg, out)
    return params


def zero_params(cfg: ModelConfig) -> ModelParams:
    return ModelParams(cfg, OrderedDict(
        (name, torch.zeros(shape, dtype=DTYPE)) for name, (shape, _) in param_layout(cfg).items()))


def parameter_report(params: ModelParams) -> dict:
    total = params.count()
    dev = (total - PUBLISHED_PARAMS) / PUBLISHED_PARAMS
    return {
        "total_parameters": total,
        "published_parameters": int(PUBLISHED_PARAMS),
        "relative_deviation": dev,
        "within_30_percent": abs(dev) <= 0.30,
        "note": ("channel widths are not published; base width and PSFM level widths are "
                 "chosen conventions, so only approximate agreement is possible"),
    }


# --- stages ------------------------------------------------------------------

@dataclass
class ClipSample:
    """A window of 2T+1 transcoded planes and the centre frame's labels.

    ``frames`` is (2T+1, H, W) or batched (N, 2T+1, H, W); labels are
    (H, W) or (N, 1, H, W).
    """
    frames: torch.Tensor
    label_init: torch.Tensor | None = None
    label_raw: torch.Tensor | None = None
    key: tuple | None = None

    @property
    def temporal_radius(self) -> int:
        return self.frames.shape[-3] // 2

    @property
    def center_index(self) -> int:
        return self.temporal_radius

    @property
    def center(self) -> torch.Tensor:
        return self.frames[..., self.center_index, :, :]


@dataclass
class RestorationOutput:
    restored: torch.Tensor
    intermediate: torch.Tensor | None


def _clamp_offsets(off: torch.Tensor) -> torch.Tensor:
    h, w = off.shape[-2:]
    dy = off[:, 0::2].clamp(-h / 4, h / 4)
    dx = off[:, 1::2].clamp(-w / 4, w / 4)
    return torch.stack([dy, dx], dim=2).flatten(1, 2)


def tdam_forward(aligned: torch.Tensor, raw_window: torch.Tensor, params: ModelParams,
                 flows: torch.Tensor | None = None,
                 offsets_override: torch.Tensor | None = None) -> torch.Tensor:
    """Temporal deformable alignment -> F_tdam (N, C, H, W).

    ``aligned`` and ``raw_window`` are (N, 2T+1, H, W); ``flows`` is
    (N, 2T+1, 2, H, W) with the centre entry ignored. Offsets are the sum of
    the feature-excitation refinement and a conv of the plain motion, then
    clipped to a quarter of the frame size.
    """
    cfg = params.config
    n = cfg.window
    if aligned.dim() != 4 or aligned.shape[1] != n or raw_window.shape != aligned.shape:
        raise ContractError(
            f"expected aligned and raw windows of shape (N, {n}, H, W), got "
            f"{tuple(aligned.shape)} and {tuple(raw_window.shape)}")
    center = raw_window[:, cfg.temporal_radius:cfg.temporal_radius + 1]
    feats = F.relu(conv2d(raw_window, params.conv("tdam.extract")))

    if offsets_override is None:
        x = torch.cat([aligned, center], dim=1)
        x = F.relu(conv2d(x, params.conv("tdam.fe.0")))
        x = F.relu(conv2d(x, params.conv("tdam.fe.1")))
        offsets = conv2d(x, params.conv("tdam.fe.2"))
        if cfg.temporal_radius > 0:
            if flows is None:
                flows = torch.zeros(aligned.shape[0], n, 2, *aligned.shape[-2:], dtype=aligned.dtype)
            keep = [j for j in range(n) if j != cfg.temporal_radius]
            motion = flows[:, keep].flatten(1, 2)
            offsets = offsets + conv2d(motion, params.conv("tdam.motion"))
        offsets = _clamp_offsets(offsets)
    else:
        offsets = offsets_override
    return F.relu(deform_conv2d(feats, params.conv("tdam.deform"), offsets))


def _res(params: ModelParams, name: str, x: torch.Tensor) -> torch.Tensor:
    return residual_block(x, params.conv(name + ".conv1"), params.conv(name + ".conv2"))


def psfm_forward(f: torch.Tensor, params: ModelParams, trace: list | None = None) -> torch.Tensor:
    """Pyramidal spatial fusion: U-shaped encoder/decoder with skip additions.

    If ``trace`` is a list, the spatial shape of every encoder level is
    appended to it.
    """
    cfg = params.config
    h, w = f.shape[-2:]
    if min(h, w) < 2 ** cfg.psfm_depth:
        raise ContractError(
            f"PSFM with depth {cfg.psfm_depth} needs frames of at least "
            f"{2 ** cfg.psfm_depth}x{2 ** cfg.psfm_depth}, got {h}x{w}")
    x = f
    if "psfm.head.weight" in params:
        x = F.relu(conv2d(x, params.conv("psfm.head")))
    x = _res(params, "psfm.enc.0", x)
    skips = [x]
    for lvl in range(1, cfg.psfm_depth + 1):
        strided = params.conv(f"psfm.down.{lvl}.strided", stride=2)
        branches = [downsample(x, m, conv=strided if m == "strided_conv" else None)
                    for m in DOWNSAMPLE_METHODS]
        x = F.relu(conv2d(torch.cat(branches, dim=1), params.conv(f"psfm.down.{lvl}.fuse")))
        x = _res(params, f"psfm.enc.{lvl}", x)
        skips.append(x)
        if trace is not None:
            trace.append(tuple(x.shape[-2:]))
    for lvl in range(cfg.psfm_depth, 0, -1):
        skip = skips[lvl - 1]
        up = upsample2x(x)[..., :skip.shape[-2], :skip.shape[-1]]
        x = F.relu(conv2d(up, params.conv(f"psfm.up.{lvl}"))) + skip
        x = _res(params, f"psfm.dec.{lvl - 1}", x)
    if "psfm.tail.weight" in params:
        x = F.relu(conv2d(x, params.conv("psfm.tail")))
    for i in range(cfg.psfm_res_blocks):
        x = _res(params, f"psfm.post.{i}", x)
    return x


def hdro_forward(f: torch.Tensor, params: ModelParams, prefix: str) -> torch.Tensor:
    """Parallel dilated convs, concatenated and fused to a 1-channel map."""
    rates = params.config.hdro_rates
    branches = [F.relu(conv2d(f, params.conv(f"{prefix}.d{r}", dilation=r))) for r in rates]
    return conv2d(torch.cat(branches, dim=1), params.conv(f"{prefix}.rec"))


def asam_forward(f: torch.Tensor, x_center: torch.Tensor,
                 params: ModelParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(H_re, refined)``; H_re is the intermediate restored frame."""
    h_re = x_center + hdro_forward(f, params, "asam.hdro")
    excited = conv2d(h_re, params.conv("asam.excite"))
    attention = torch.sigmoid(excited)
    refined = F.relu(conv2d(f, params.conv("asam.transition"))) * attention
    return h_re, refined + excited


def gsrm_forward(refined: torch.Tensor, x_center: torch.Tensor, params: ModelParams) -> torch.Tensor:
    x = refined
    for i in range(params.config.gsrm_blocks):
        x = _res(params, f"gsrm.res.{i}", x)
    return x_center + hdro_forward(x, params, "gsrm.hdro")


def network_forward(frames: torch.Tensor, aligned: torch.Tensor, flows: torch.Tensor | None,
                    params: ModelParams) -> RestorationOutput:
    """Forward pass on pre-aligned tensors (N, 2T+1, H, W)."""
    cfg = params.config
    if frames.dim() == 3:
        frames, aligned = frames[None], aligned[None]
        flows = None if flows is None else flows[None]
    h, w = frames.shape[-2:]
    if min(h, w) < cfg.min_size:
        raise ContractError(f"frames must be at least {cfg.min_size}x{cfg.min_size}, got {h}x{w}")
    x_center = frames[:, cfg.temporal_radius:cfg.temporal_radius + 1]
    f = tdam_forward(aligned, frames, params, flows)
    if cfg.variant in ("v2", "full"):
        f = psfm_forward(f, params)
    h_re = None
    if cfg.variant == "full":
        h_re, f = asam_forward(f, x_center, params)
    return RestorationOutput(gsrm_forward(f, x_center, params), h_re)


def prepare_window(frames: torch.Tensor, estimator=None, direct: bool = False):
    """Run flow alignment for a (2T+1, H, W) or (N, 2T+1, H, W) stack.

    Returns ``(aligned, flows)`` tensors shaped like the input, with flows
    carrying an extra axis of size 2.
    """
    from .flow import window_flows

    batched = frames.dim() == 4
    stack = frames if batched else frames[None]
    al, fl = [], []
    for sample in stack.detach().cpu().numpy():
        a, f = window_flows(list(sample), estimator, direct)
        al.append(np.stack(a))
        fl.append(np.stack(f))
    aligned = torch.from_numpy(np.stack(al)).to(DTYPE)
    flows = torch.from_numpy(np.stack(fl)).to(DTYPE)
    return (aligned, flows) if batched else (aligned[0], flows[0])


def forward(clip: ClipSample, params: ModelParams, estimator=None, direct: bool = False) -> RestorationOutput:
    """Align the clip's window, then run the network. Outputs are (N, 1, H, W)."""
    cfg = params.config
    frames = clip.frames if clip.frames.dim() == 4 else clip.frames[None]
    if frames.shape[1] != cfg.window:
        raise ContractError(f"clip holds {frames.shape[1]} frames, model expects {cfg.window}")
    aligned, flows = prepare_window(frames, estimator, direct)
    return network_forward(frames, aligned, flows, params)


def variant_config(cfg: ModelConfig, variant: str) -> ModelConfig:
    return replace(cfg, variant=variant)
