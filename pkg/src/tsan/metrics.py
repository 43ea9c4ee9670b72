"""Luma PSNR / SSIM and per-sequence improvement reports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .numcore import ContractError

PEAK = 255.0
PSNR_CAP = 100.0


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for planes on the 0..255 scale; ``inf`` when identical."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(PEAK ** 2 / mse)


def capped(value: float) -> float:
    return min(value, PSNR_CAP)


def _gaussian_1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a, b) -> float:
    """Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01,
    K2=0.03, range 255, averaged over windows lying fully inside the frame."""
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < 11:
        raise ContractError(f"SSIM needs 2-D planes of at least 11x11, got {a.shape}")
    g = _gaussian_1d()
    c1 = (0.01 * PEAK) ** 2
    c2 = (0.03 * PEAK) ** 2

    def blur(x):
        x = ndimage.correlate1d(x, g, axis=0, mode="constant")
        x = ndimage.correlate1d(x, g, axis=1, mode="constant")
        return x[5:-5, 5:-5]

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def to_255(plane) -> np.ndarray:
    """[0, 1] luma to the 8-bit value grid (rounded, clipped)."""
    return np.clip(np.round(np.asarray(plane, dtype=np.float64) * 255.0), 0, 255)


@dataclass
class FrameRow:
    index: int
    psnr_before: float
    psnr_after: float
    ssim_before: float
    ssim_after: float


@dataclass
class SequenceDelta:
    name: str
    rows: list[FrameRow] = field(default_factory=list)

    @property
    def psnr_before(self) -> float:
        return float(np.mean([capped(r.psnr_before) for r in self.rows]))

    @property
    def psnr_after(self) -> float:
        return float(np.mean([capped(r.psnr_after) for r in self.rows]))

    @property
    def ssim_before(self) -> float:
        return float(np.mean([r.ssim_before for r in self.rows]))

    @property
    def ssim_after(self) -> float:
        return float(np.mean([r.ssim_after for r in self.rows]))

    @property
    def delta_psnr(self) -> float:
        return self.psnr_after - self.psnr_before

    @property
    def delta_ssim(self) -> float:
        return self.ssim_after - self.ssim_before


def delta_metrics(before: Sequence[tuple], after: Sequence[tuple], name: str = "") -> SequenceDelta:
    """Per-frame PSNR/SSIM before and after restoration.

    ``before`` and ``after`` are sequences of ``(distorted, reference)``
    plane pairs on the 0..255 scale. Infinite PSNR is capped at 100 dB when
    averaged.
    """
    if len(before) != len(after):
        raise ContractError(f"frame counts differ: {len(before)} vs {len(after)}")
    seq = SequenceDelta(name)
    for i, ((d0, r0), (d1, r1)) in enumerate(zip(before, after)):
        seq.rows.append(FrameRow(i, psnr(d0, r0), psnr(d1, r1), ssim(d0, r0), ssim(d1, r1)))
    return seq


def write_frame_report(seq: SequenceDelta, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.txt`` (aligned text) and ``<stem>.csv`` (one row per frame)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path = stem.with_suffix(".csv")
    txt_path = stem.with_suffix(".txt")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "psnr_before", "psnr_after", "ssim_before", "ssim_after"])
        for r in seq.rows:
            w.writerow([r.index, f"{r.psnr_before:.4f}", f"{r.psnr_after:.4f}",
                        f"{r.ssim_before:.6f}", f"{r.ssim_after:.6f}"])
    lines = [f"{'frame':>6} {'psnr_before':>12} {'psnr_after':>12} {'ssim_before':>12} {'ssim_after':>12}"]
    for r in seq.rows:
        lines.append(f"{r.index:>6} {r.psnr_before:>12.4f} {r.psnr_after:>12.4f} "
                     f"{r.ssim_before:>12.6f} {r.ssim_after:>12.6f}")
    lines.append(f"{'mean':>6} {seq.psnr_before:>12.4f} {seq.psnr_after:>12.4f} "
                 f"{seq.ssim_before:>12.6f} {seq.ssim_after:>12.6f}")
    lines.append(f"delta_psnr={seq.delta_psnr:.4f} dB delta_ssim={seq.delta_ssim:.6f}")
    txt_path.write_text("\n".join(lines) + "\n")
    return txt_path, csv_path


def format_delta_table(sequences: Sequence[SequenceDelta], title: str = "") -> str:
    """Per-sequence rows of ``dPSNR/dSSIM`` plus an Average row."""
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'Sequence':<24} {'dPSNR/dSSIM':>16}")
    for s in sequences:
        lines.append(f"{s.name:<24} {s.delta_psnr:>8.3f}/{s.delta_ssim:.3f}")
    avg_p = float(np.mean([s.delta_psnr for s in sequences])) if sequences else 0.0
    avg_s = float(np.mean([s.delta_ssim for s in sequences])) if sequences else 0.0
    lines.append(f"{'Average':<24} {avg_p:>8.3f}/{avg_s:.3f}")
    return "\n".join(lines) + "\n"


def format_ablation_table(results: dict[str, Sequence[SequenceDelta]]) -> str:
    """Sequences as rows, one ``dPSNR/dSSIM`` column per variant, Average row last."""
    variants = list(results)
    names = [s.name for s in next(iter(results.values()))] if results else []
    header = f"{'Sequence':<24}" + "".join(f" {v:>16}" for v in variants)
    lines = [header]
    for i, name in enumerate(names):
        cells = "".join(f" {results[v][i].delta_psnr:>8.3f}/{results[v][i].delta_ssim:.3f}" for v in variants)
        lines.append(f"{name:<24}{cells}")
    avg = ""
    for v in variants:
        p = float(np.mean([s.delta_psnr for s in results[v]]))
        s_ = float(np.mean([s.delta_ssim for s in results[v]]))
        avg += f" {p:>8.3f}/{s_:.3f}"
    lines.append(f"{'Average':<24}{avg}")
    return "\n".join(lines) + "\n"
