"""Transcoded-restoration dataset construction and clip sampling.

Each raw sequence is encoded once at a high bitrate (the "initial" store),
that decode is re-encoded at a low bitrate (the "transcoded" store), and all
three decoded sequences are kept as planar 8-bit 4:2:0 files so frame i of
every store lines up byte-for-byte with frame i of the others.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import shutil
import subprocess
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .metrics import capped, psnr, to_255
from .model import ClipSample
from .numcore import ContractError, DTYPE

MANIFEST_VERSION = 1
HR_MIN_HEIGHT = 721  # "higher than 720p"


class PipelineError(RuntimeError):
    """External encoder missing or failed."""


class IntegrityError(RuntimeError):
    """Frame stores are truncated or misaligned."""


@dataclass(frozen=True)
class EncodeProfile:
    stage: str
    bitrate: int  # kbps
    preset: str = "medium"
    rate_control: str = "abr"
    gop_size: int = 250
    max_references: int = 3
    deblock: bool = True
    sao: bool = True

    def x265_params(self) -> str:
        opts = [f"keyint={self.gop_size}", f"ref={self.max_references}",
                f"deblock={int(self.deblock)}", f"sao={int(self.sao)}", "log-level=error"]
        return ":".join(opts)


def resolution_class(height: int) -> str:
    return "HR" if height >= HR_MIN_HEIGHT else "LR"


def default_profiles(height: int, hr_kbps: int = 1000, lr_kbps: int = 500,
                     initial_kbps: int = 10000) -> tuple[EncodeProfile, EncodeProfile]:
    """Initial-encode and transcode profiles for a frame height."""
    low = hr_kbps if resolution_class(height) == "HR" else lr_kbps
    return EncodeProfile("initial", initial_kbps), EncodeProfile("transcode", low)


# --- raw planar I/O --------------------------------------------------------

def frame_bytes(width: int, height: int) -> int:
    return width * height + 2 * ((width + 1) // 2) * ((height + 1) // 2)


def count_frames(path, width: int, height: int) -> int:
    size = os.path.getsize(path)
    per = frame_bytes(width, height)
    if size % per:
        raise IntegrityError(f"{path}: {size} bytes is not a whole number of {width}x{height} frames")
    return size // per


def read_yuv420(path, width: int, height: int, frame_index: int):
    """Return ``(luma, (u, v))``: luma as float32 in [0, 1], chroma as uint8."""
    per = frame_bytes(width, height)
    need = (frame_index + 1) * per
    size = os.path.getsize(path)
    if frame_index < 0 or size < need:
        raise IntegrityError(
            f"{path}: frame {frame_index} needs {need} bytes, file has {size}")
    cw, ch = (width + 1) // 2, (height + 1) // 2
    with open(path, "rb") as fh:
        fh.seek(frame_index * per)
        buf = np.frombuffer(fh.read(per), dtype=np.uint8)
    y = buf[:width * height].reshape(height, width)
    u = buf[width * height:width * height + cw * ch].reshape(ch, cw)
    v = buf[width * height + cw * ch:].reshape(ch, cw)
    return y.astype(np.float32) / 255.0, (u.copy(), v.copy())


def write_yuv420(path, frames: Sequence[tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]],
                 append: bool = False) -> None:
    """Write ``(luma, (u, v))`` frames; float luma in [0, 1] is quantised to 8 bit."""
    with open(path, "ab" if append else "wb") as fh:
        for y, (u, v) in frames:
            y = np.asarray(y)
            if y.dtype != np.uint8:
                y = to_255(y).astype(np.uint8)
            fh.write(np.ascontiguousarray(y, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(u, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(v, dtype=np.uint8).tobytes())


@lru_cache(maxsize=64)
def _luma_map(path: str, width: int, height: int, mtime: float) -> np.ndarray:
    n = count_frames(path, width, height)
    mm = np.memmap(path, dtype=np.uint8, mode="r", shape=(n, frame_bytes(width, height)))
    return mm[:, :width * height].reshape(n, height, width)


def luma_frames(path, width: int, height: int) -> np.ndarray:
    """Read-only uint8 view (frames, H, W) of a planar file's luma."""
    path = str(path)
    return _luma_map(path, width, height, os.path.getmtime(path))


# --- geometry discovery --------------------------------------------------

_NAME_RE = re.compile(r"(?P<w>\d+)x(?P<h>\d+)(?:[_@](?P<fps>\d+(?:\.\d+)?))?")


def parse_geometry(text: str) -> tuple[int, int, float]:
    """``"WxH@fps"`` or ``"WxH"`` (fps defaults to 30)."""
    m = re.fullmatch(r"(\d+)x(\d+)(?:@(\d+(?:\.\d+)?))?", text.strip())
    if not m:
        raise ContractError(f"geometry must look like 416x240@30, got {text!r}")
    return int(m.group(1)), int(m.group(2)), float(m.group(3) or 30)


def discover_geometry(path) -> tuple[int, int, float]:
    """Geometry from a ``<file>.json`` sidecar or the ``name_WxH_fps.yuv`` convention."""
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        return int(meta["width"]), int(meta["height"]), float(meta.get("fps", 30))
    matches = list(_NAME_RE.finditer(path.stem))
    if not matches:
        raise ContractError(f"cannot infer geometry for {path.name}: add {sidecar.name} "
                            "or name the file like clip_416x240_30.yuv")
    m = matches[-1]
    return int(m.group("w")), int(m.group("h")), float(m.group("fps") or 30)


# --- encoder --------------------------------------------------------------

def find_ffmpeg() -> str:
    """An ffmpeg executable with libx265: $TSAN_FFMPEG, PATH, then imageio-ffmpeg."""
    candidates = [os.environ.get("TSAN_FFMPEG"), shutil.which("ffmpeg")]
    try:
        import imageio_ffmpeg

        candidates.append(imageio_ffmpeg.get_ffmpeg_exe())
    except Exception:
        pass
    for exe in candidates:
        if exe and _has_x265(exe):
            return exe
    raise PipelineError("no ffmpeg with libx265 found; install ffmpeg or `pip install imageio-ffmpeg`, "
                        "or point TSAN_FFMPEG at a build with libx265")


@lru_cache(maxsize=8)
def _has_x265(exe: str) -> bool:
    try:
        out = subprocess.run([exe, "-hide_banner", "-encoders"], capture_output=True, text=True, timeout=30)
    except (OSError, subprocess.TimeoutExpired):
        return False
    return "libx265" in out.stdout


def encoder_available() -> bool:
    try:
        find_ffmpeg()
        return True
    except PipelineError:
        return False


def encode_command(exe: str, profile: EncodeProfile, src, dst, width: int, height: int, fps: float) -> list[str]:
    return [exe, "-hide_banner", "-loglevel", "error", "-y",
            "-f", "rawvideo", "-pix_fmt", "yuv420p", "-s", f"{width}x{height}", "-r", f"{fps:g}",
            "-i", str(src),
            "-c:v", "libx265", "-preset", profile.preset, "-b:v", f"{profile.bitrate}k",
            "-pix_fmt", "yuv420p", "-x265-params", profile.x265_params(),
            "-f", "hevc", str(dst)]


def decode_command(exe: str, src, dst) -> list[str]:
    return [exe, "-hide_banner", "-loglevel", "error", "-y", "-i", str(src),
            "-f", "rawvideo", "-pix_fmt", "yuv420p", str(dst)]


def _run(cmd: list[str], log_path: Path) -> None:
    proc = subprocess.run(cmd, capture_output=True, text=True)
    with open(log_path, "a") as fh:
        fh.write(" ".join(cmd) + "\n" + proc.stdout + proc.stderr + f"exit={proc.returncode}\n")
    if proc.returncode != 0:
        tail = (proc.stderr or proc.stdout).strip().splitlines()[-10:]
        raise PipelineError(f"{cmd[0]} exited with {proc.returncode}:\n" + "\n".join(tail))


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class SequenceRecord:
    id: str
    width: int
    height: int
    frame_count: int
    frame_rate: float
    raw: str
    initial: str
    transcoded: str
    resolution_class: str
    profiles: list[dict] = field(default_factory=list)
    commands: list[list[str]] = field(default_factory=list)
    checksums: dict = field(default_factory=dict)
    manifest: str | None = None

    def store(self, name: str) -> np.ndarray:
        """uint8 luma view (frames, H, W) of ``raw``/``initial``/``transcoded``."""
        return luma_frames(getattr(self, name), self.width, self.height)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("manifest")
        d["version"] = MANIFEST_VERSION
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        self.manifest = str(path)
        return path

    @classmethod
    def load(cls, path) -> "SequenceRecord":
        path = Path(path)
        d = json.loads(path.read_text())
        d.pop("version", None)
        rec = cls(**d)
        base = path.parent
        for key in ("raw", "initial", "transcoded"):
            p = Path(getattr(rec, key))
            if not p.is_absolute():
                setattr(rec, key, str(base / p))
        rec.manifest = str(path)
        return rec

    def verify(self) -> None:
        for key in ("raw", "initial", "transcoded"):
            n = count_frames(getattr(self, key), self.width, self.height)
            if n != self.frame_count:
                raise IntegrityError(f"{self.id}: {key} store has {n} frames, expected {self.frame_count}")


def build_triplets(raw_video, work_dir, width: int, height: int, fps: float = 30.0,
                   profiles: tuple[EncodeProfile, EncodeProfile] | None = None,
                   seq_id: str | None = None, ffmpeg: str | None = None) -> SequenceRecord:
    """Encode raw -> initial -> transcoded and store all three decodes.

    Output lives in ``work_dir/<seq_id>/`` with a ``manifest.json`` recording
    geometry, profiles, exact encoder command lines and SHA-256 checksums.
    """
    raw_video = Path(raw_video)
    seq_id = seq_id or raw_video.stem
    profiles = profiles or default_profiles(height)
    exe = ffmpeg or find_ffmpeg()
    out = Path(work_dir) / seq_id
    out.mkdir(parents=True, exist_ok=True)
    log = out / "encoder.log"
    log.write_text("")

    n_raw = count_frames(raw_video, width, height)
    raw_copy = out / "raw.yuv"
    if raw_video.resolve() != raw_copy.resolve():
        shutil.copyfile(raw_video, raw_copy)

    commands = []
    src = raw_copy
    stores = {}
    for profile in profiles:
        bitstream = out / f"{profile.stage}.hevc"
        decoded = out / f"{profile.stage}.yuv"
        enc = encode_command(exe, profile, src, bitstream, width, height, fps)
        dec = decode_command(exe, bitstream, decoded)
        for cmd in (enc, dec):
            _run(cmd, log)
            commands.append(cmd)
        n = count_frames(decoded, width, height)
        if n != n_raw:
            raise IntegrityError(f"{seq_id}: {profile.stage} decode has {n} frames, raw has {n_raw}")
        stores[profile.stage] = decoded
        src = decoded

    rec = SequenceRecord(
        id=seq_id, width=width, height=height, frame_count=n_raw, frame_rate=fps,
        raw="raw.yuv", initial=stores["initial"].name, transcoded=stores["transcode"].name,
        resolution_class=resolution_class(height),
        profiles=[asdict(p) for p in profiles],
        commands=commands,
        checksums={p.name: sha256(p) for p in (raw_copy, stores["initial"], stores["transcode"])},
    )
    rec.save(out / "manifest.json")
    return SequenceRecord.load(out / "manifest.json")


def write_dataset_index(work_dir, records: Sequence[SequenceRecord]) -> Path:
    work_dir = Path(work_dir)
    entries = [os.path.relpath(r.manifest, work_dir) for r in records]
    path = work_dir / "dataset.json"
    path.write_text(json.dumps({"version": MANIFEST_VERSION, "sequences": entries}, indent=2) + "\n")
    return path


def load_dataset(path) -> list[SequenceRecord]:
    """Records from a dataset index, a single sequence manifest, or a work dir."""
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    d = json.loads(path.read_text())
    if "sequences" not in d:
        return [SequenceRecord.load(path)]
    return [SequenceRecord.load(path.parent / p) for p in d["sequences"]]


def dataset_hash(records: Sequence[SequenceRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps(r.checksums, sort_keys=True).encode())
    return h.hexdigest()


# --- sampling --------------------------------------------------------------

@dataclass(frozen=True)
class PatchSpec:
    size: int = 64
    temporal_radius: int = 1
    seed: int = 0
    policy: str = "random"  # or "center"


def window_indices(center: int, radius: int, frame_count: int) -> list[int]:
    """Frame indices of a 2T+1 window, replicating the nearest valid frame at borders."""
    return [min(max(center + d, 0), frame_count - 1) for d in range(-radius, radius + 1)]


def sample_clip(record: SequenceRecord, center_index: int, spec: PatchSpec = PatchSpec(),
                rng: np.random.Generator | None = None,
                origin: tuple[int, int] | None = None) -> ClipSample:
    """Crop one window of transcoded frames plus the centre's two labels.

    The crop origin comes from ``origin`` if given, otherwise from ``rng``,
    otherwise from a generator seeded by ``(spec.seed, center_index)``.
    """
    h, w, size = record.height, record.width, spec.size
    if size > h or size > w:
        raise ContractError(f"patch {size}x{size} larger than frame {w}x{h}")
    if not 0 <= center_index < record.frame_count:
        raise ContractError(f"centre index {center_index} outside 0..{record.frame_count - 1}")
    if origin is None:
        if spec.policy == "center":
            origin = ((h - size) // 2, (w - size) // 2)
        else:
            rng = rng or np.random.default_rng((spec.seed, center_index))
            origin = (int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)))
    top, left = origin
    rows = slice(top, top + size)
    cols = slice(left, left + size)
    idx = window_indices(center_index, spec.temporal_radius, record.frame_count)
    trans = record.store("transcoded")
    frames = np.stack([trans[i, rows, cols] for i in idx]).astype(np.float32) / 255.0
    y_init = record.store("initial")[center_index, rows, cols].astype(np.float32) / 255.0
    y_raw = record.store("raw")[center_index, rows, cols].astype(np.float32) / 255.0
    return ClipSample(torch.from_numpy(frames).to(DTYPE),
                      torch.from_numpy(y_init).to(DTYPE),
                      torch.from_numpy(y_raw).to(DTYPE),
                      key=(record.id, center_index, top, left, size))


def dataset_stats(record: SequenceRecord) -> dict:
    """Mean luma PSNR (capped at 100 dB) of the initial and transcoded stores vs raw."""
    raw, init, trans = (record.store(k) for k in ("raw", "initial", "transcoded"))
    p_init = [capped(psnr(init[i], raw[i])) for i in range(record.frame_count)]
    p_trans = [capped(psnr(trans[i], raw[i])) for i in range(record.frame_count)]
    return {"id": record.id, "psnr_initial": float(np.mean(p_init)),
            "psnr_transcoded": float(np.mean(p_trans)), "frames": record.frame_count}


def synthetic_raw_video(path, width: int = 96, height: int = 64, frames: int = 8,
                        motion: tuple[float, float] = (1.5, 0.5), seed: int = 0) -> Path:
    """Write a smooth textured clip panning by ``motion`` px/frame (dx, dy).

    Handy for desk-scale pipeline runs when no real footage is at hand.
    """
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    pad = int(abs(motion[0]) * frames + abs(motion[1]) * frames) + 8
    canvas = ndimage.gaussian_filter(rng.random((height + 2 * pad, width + 2 * pad)), 1.5)
    canvas = ndimage.gaussian_filter(rng.random(canvas.shape), 4.0) * 0.5 + canvas * 0.5
    canvas = (canvas - canvas.min()) / (canvas.max() - canvas.min())
    gy, gx = np.mgrid[0:height, 0:width].astype(np.float64)
    out = []
    cw, ch = (width + 1) // 2, (height + 1) // 2
    for t in range(frames):
        coords = np.stack([gy + pad + motion[1] * t, gx + pad + motion[0] * t])
        y = ndimage.map_coordinates(canvas, coords, order=1)
        u = np.full((ch, cw), 128, np.uint8)
        v = np.full((ch, cw), 128, np.uint8)
        out.append((y.astype(np.float32), (u, v)))
    write_yuv420(path, out)
    return Path(path)
