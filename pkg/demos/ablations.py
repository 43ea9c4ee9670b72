"""
Ablation tables
===============

Variant structure and loss-weight comparison on a tiny noisy dataset. The
numbers are meaningless at this scale; the point is the table layout.
"""

import tempfile
from pathlib import Path

import numpy as np

from tsan.datapipe import SequenceRecord, write_yuv420
from tsan.harness import TrainConfig, ablate_loss_weights, ablate_variants, parse_pairs
from tsan.model import ModelConfig, init_params, parameter_report, variant_config

root = Path(tempfile.mkdtemp(prefix="tsan_ablate_"))
rng = np.random.default_rng(0)
raw = rng.integers(40, 200, (4, 32, 48)).astype(float)
chroma = (np.full((16, 24), 128, np.uint8),) * 2
for name, sigma in (("raw", 0), ("initial", 2), ("transcoded", 8)):
    noisy = np.clip(raw + sigma * rng.standard_normal(raw.shape), 0, 255).astype(np.uint8)
    write_yuv420(root / f"{name}.yuv", [(f, chroma) for f in noisy])
rec = SequenceRecord("noise", 48, 32, 4, 30.0, str(root / "raw.yuv"), str(root / "initial.yuv"),
                     str(root / "transcoded.yuv"), "LR")

for v in ("v1", "v2", "full"):
    print(v, parameter_report(init_params(variant_config(ModelConfig(), v)))["total_parameters"])

small = ModelConfig(base_channels=16, psfm_widths=(1, 2, 2), psfm_depth=2, gsrm_blocks=2, psfm_res_blocks=1)
table, _ = ablate_variants([rec], base=small, cfg=TrainConfig(batch_size=2, patch_size=32), iterations=5)
print(table)

table, manifests = ablate_loss_weights([rec], parse_pairs("0:1,0.2:0.8,0.5:0.5"), iterations=5, base=small,
                                       cfg=TrainConfig(batch_size=2, patch_size=32))
print(table)
