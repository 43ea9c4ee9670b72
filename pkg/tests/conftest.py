import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tsan.datapipe import (  # noqa: E402
    EncodeProfile, SequenceRecord, build_triplets, encoder_available, synthetic_raw_video, write_yuv420,
)

# Bitrates low enough that a 128x96 synthetic clip shows visible artifacts.
DESK_PROFILES = (EncodeProfile("initial", 300), EncodeProfile("transcode", 60))

needs_encoder = pytest.mark.skipif(not encoder_available(), reason="ffmpeg with libx265 not available")


def fake_record(root: Path, width=32, height=24, frames=5, seed=0, noise=(2.0, 8.0)) -> SequenceRecord:
    """A triplet without an encoder: initial/transcoded are raw plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    raw = rng.integers(30, 220, (frames, height, width)).astype(np.float64)
    chroma = (np.full((height // 2, width // 2), 128, np.uint8),) * 2
    stores = {"raw": raw}
    for name, sigma in zip(("initial", "transcoded"), noise):
        stores[name] = np.clip(np.round(raw + sigma * rng.standard_normal(raw.shape)), 0, 255)
    for name, data in stores.items():
        write_yuv420(root / f"{name}.yuv", [(f.astype(np.uint8), chroma) for f in data])
    rec = SequenceRecord(id=root.name, width=width, height=height, frame_count=frames, frame_rate=30.0,
                         raw="raw.yuv", initial="initial.yuv", transcoded="transcoded.yuv",
                         resolution_class="LR")
    rec.save(root / "manifest.json")
    return SequenceRecord.load(root / "manifest.json")


@pytest.fixture(scope="session")
def encoded_record(tmp_path_factory):
    if not encoder_available():
        pytest.skip("ffmpeg with libx265 not available")
    root = tmp_path_factory.mktemp("encoded")
    raw = synthetic_raw_video(root / "pan_128x96_30.yuv", width=128, height=96, frames=6)
    return build_triplets(raw, root / "work", 128, 96, profiles=DESK_PROFILES)


OVERFIT_ITERATIONS = 200


@pytest.fixture(scope="session")
def overfit_run(encoded_record, tmp_path_factory):
    """FULL model trained on one fixed 64x64 clip. Shared by the harness and acceptance suites."""
    from tsan.datapipe import PatchSpec, sample_clip
    from tsan.harness import TrainConfig, train
    from tsan.model import ModelConfig, init_params

    clip = sample_clip(encoded_record, encoded_record.frame_count // 2, PatchSpec(size=64, policy="center"))
    cfg = TrainConfig(batch_size=1, learning_rate=1e-4, log_interval=1, seed=0, patch_size=64)
    out = tmp_path_factory.mktemp("overfit")
    params, manifest = train(init_params(ModelConfig(), seed=0), [clip], cfg, out_dir=out,
                             iterations=OVERFIT_ITERATIONS)
    return {"clip": clip, "params": params, "manifest": manifest, "dir": out}


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
