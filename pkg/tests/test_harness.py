import dataclasses

import numpy as np
import pytest
import torch

from conftest import OVERFIT_ITERATIONS, fake_record
from tsan.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from tsan.datapipe import PatchSpec, count_frames, luma_frames, sample_clip, write_yuv420
from tsan.harness import (
    AlignmentCache, TrainConfig, TrainingDiverged, ablate_loss_weights, ablate_variants, collate,
    compute_loss, dump_config, enhance, evaluate, load_config, parse_pairs, restore_clip, train,
)
from tsan.losses import LossConfig, loss_global
from tsan.metrics import psnr, to_255
from tsan.model import ClipSample, ModelConfig, init_params, variant_config, zero_params
from tsan.numcore import ContractError

TINY = ModelConfig(base_channels=4, psfm_widths=(1, 2), psfm_depth=2, gsrm_blocks=1, psfm_res_blocks=1)
FAST = TrainConfig(batch_size=2, patch_size=16, log_interval=1)


@pytest.fixture
def record(tmp_path):
    return fake_record(tmp_path / "seq", width=32, height=24, frames=4)


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.learning_rate, cfg.max_iterations) == (16, 1e-4, 300_000)
    assert (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)
    assert cfg.loss == LossConfig(0.2, 0.8)
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)


def test_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nbatch_size = 4\nmodel.base_channels=8\ntrain.learning_rate=2e-4\n"
                    "psfm_widths=1,2\nvariant=v2\n")
    model_cfg, train_cfg = load_config(path, {"seed": 7, "alpha": None})
    assert (train_cfg.batch_size, train_cfg.learning_rate, train_cfg.seed) == (4, 2e-4, 7)
    assert (model_cfg.base_channels, model_cfg.psfm_widths, model_cfg.variant) == (8, (1, 2), "v2")
    again = tmp_path / "dump.cfg"
    again.write_text(dump_config(model_cfg, train_cfg))
    assert load_config(again) == (model_cfg, train_cfg)
    path.write_text("nonsense_key=1\n")
    with pytest.raises(ContractError):
        load_config(path)


@pytest.mark.slow
def test_training_reduces_loss_on_one_clip(overfit_run):
    losses = overfit_run["manifest"].losses()
    assert len(losses) == OVERFIT_ITERATIONS
    assert losses[-1] < losses[0]


@pytest.mark.slow
def test_overfit_checkpoint_restores_training_clip(overfit_run, encoded_record, tmp_path):
    clip = overfit_run["clip"]
    _, center, top, left, size = clip.key
    rows, cols = slice(top, top + size), slice(left, left + size)
    chroma = (np.full((size // 2, size // 2), 128, np.uint8),) * 2
    paths = {}
    for name in ("transcoded", "raw"):
        store = encoded_record.store(name)[:, rows, cols]
        paths[name] = tmp_path / f"{name}.yuv"
        write_yuv420(paths[name], [(f, chroma) for f in store])
    ckpt = overfit_run["dir"] / "final.ckpt"
    seq = enhance(ckpt, paths["transcoded"], tmp_path / "out.yuv", size, size, reference=paths["raw"])
    row = seq.rows[center]
    assert row.psnr_after > row.psnr_before


def test_zero_learning_rate_is_null_update(record):
    p0 = init_params(TINY, seed=1)
    p1, _ = train(p0, [record], dataclasses.replace(FAST, learning_rate=0.0), iterations=3)
    for name in p0.names():
        assert torch.equal(p0[name], p1[name])


def test_alpha_zero_matches_global_only_gradient(record):
    params = init_params(TINY, seed=2, identity=False).requires_grad_(True)
    clip = sample_clip(record, 1, PatchSpec(size=16))
    batch = collate([clip], AlignmentCache())
    total, _, _, _ = compute_loss(params, batch, LossConfig(0.0, 0.8))
    g_total = torch.autograd.grad(total, list(params.tensors.values()), allow_unused=True)
    out = compute_loss(params, batch, LossConfig(0.0, 1.0))[3]
    lg = 0.8 * loss_global(out.restored, batch[4])
    g_lg = torch.autograd.grad(lg, list(params.tensors.values()), allow_unused=True)
    for name, a, b in zip(params.names(), g_total, g_lg):
        if name.startswith("gsrm"):
            assert torch.equal(a, b), name


def test_variant_forces_alpha_zero(record):
    _, manifest = train(init_params(variant_config(TINY, "v1")), [record], FAST, iterations=1)
    assert manifest.history[0]["alpha"] == 0.0
    assert any("alpha forced to 0" in n for n in manifest.notes)


def test_reproducible_loss_history(record):
    runs = [train(init_params(TINY, seed=3), [record], FAST, iterations=6)[1].losses() for _ in range(2)]
    assert runs[0] == runs[1]
    other = train(init_params(TINY, seed=3), [record], dataclasses.replace(FAST, seed=9), iterations=6)[1]
    assert other.losses() != runs[0]


def test_sampler_reshuffles_past_epoch(record):
    # 4 frames per epoch, 5 iterations of batch 2 -> 2.5 epochs
    _, manifest = train(init_params(TINY), [record], FAST, iterations=5)
    assert len(manifest.history) == 5


def test_divergence_aborts_with_checkpoint(record, tmp_path):
    params = init_params(TINY, identity=False)
    params.tensors["gsrm.hdro.rec.bias"] = torch.full_like(params["gsrm.hdro.rec.bias"], float("nan"))
    with pytest.raises(TrainingDiverged):
        train(params, [record], FAST, out_dir=tmp_path, iterations=2)
    assert (tmp_path / "diverged.ckpt").exists()
    assert (tmp_path / "run_manifest.json").exists()


def test_checkpoints_reference_iterations(record, tmp_path):
    cfg = dataclasses.replace(FAST, checkpoint_interval=2)
    _, manifest = train(init_params(TINY), [record], cfg, out_dir=tmp_path, iterations=4)
    assert [c["iteration"] for c in manifest.checkpoints] == [2, 4, 4]
    assert read_header(tmp_path / "iter_0000002.ckpt")["iteration"] == 2


def test_every_group_changes_after_one_step():
    clip = ClipSample(torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(0)),
                      torch.rand(32, 32), torch.rand(32, 32), key=("rand", 0, 0, 0, 32))
    p0 = init_params(ModelConfig(), seed=0)
    p1, _ = train(p0, [clip], TrainConfig(batch_size=1, patch_size=32), iterations=1)
    for group, names in p0.groups().items():
        delta = max((p1[n] - p0[n]).abs().max().item() for n in names)
        assert delta > 0, group


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    params = init_params(TINY, seed=5, identity=False)
    clip = ClipSample(torch.rand(3, 16, 16))
    before = restore_clip(params, clip)
    save_checkpoint(tmp_path / "m.ckpt", params, iteration=12, extra={"note": "x"})
    loaded, header = load_checkpoint(tmp_path / "m.ckpt")
    assert header["iteration"] == 12 and header["extra"] == {"note": "x"}
    assert loaded.config == params.config
    assert np.array_equal(restore_clip(loaded, clip), before)


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"notackpt" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_enhance_zero_checkpoint_is_identity(record, tmp_path):
    save_checkpoint(tmp_path / "zero.ckpt", zero_params(TINY))
    out = tmp_path / "out.yuv"
    seq = enhance(tmp_path / "zero.ckpt", record.transcoded, out, 32, 24, reference=record.raw)
    assert count_frames(out, 32, 24) == record.frame_count
    assert np.array_equal(luma_frames(out, 32, 24), record.store("transcoded"))
    # chroma is copied through byte for byte
    assert out.read_bytes() == open(record.transcoded, "rb").read()
    assert seq.delta_psnr == 0.0 and len(seq.rows) == record.frame_count


def test_enhance_errors(record, tmp_path):
    with pytest.raises(ContractError):
        enhance(zero_params(TINY), record.transcoded, tmp_path / "o.yuv", 32, 24, report_stem=tmp_path / "r")
    with pytest.raises(ContractError):
        enhance(zero_params(ModelConfig(psfm_depth=3)), record.transcoded, tmp_path / "o.yuv", 32, 2)


def test_evaluate_zero_checkpoint(tmp_path):
    recs = [fake_record(tmp_path / f"s{i}", seed=i) for i in range(3)]
    table, seqs = evaluate(zero_params(TINY), recs, out_path=tmp_path / "table.txt")
    lines = table.strip().splitlines()
    assert len(seqs) == 3 and all(s.delta_psnr == 0 and s.delta_ssim == 0 for s in seqs)
    assert lines[-1].startswith("Average")
    assert (tmp_path / "table.txt").read_text() == table


def test_restore_matches_psnr_direction(record):
    clip = sample_clip(record, 1, PatchSpec(size=16, policy="center"))
    restored = restore_clip(zero_params(TINY), clip)
    assert psnr(to_255(restored), to_255(clip.frames[1].numpy())) == float("inf")


def test_ablate_variants_structure(record, tmp_path):
    combined, tables = ablate_variants([record], base=TINY, out_dir=tmp_path)
    assert set(tables) == {"v1", "v2", "full"}
    header = combined.splitlines()[0]
    assert header.index("V1") < header.index("V2") < header.index("Proposed")
    assert combined.strip().splitlines()[-1].startswith("Average")
    assert (tmp_path / "ablation_variants.txt").exists()


def test_ablate_loss_weights(record, tmp_path):
    pairs = parse_pairs("0:1,0.2:0.8,0.5:0.5")
    assert pairs == [(0.0, 1.0), (0.2, 0.8), (0.5, 0.5)]
    table, manifests = ablate_loss_weights([record], pairs, iterations=1, base=TINY, cfg=FAST,
                                           out_dir=tmp_path)
    assert table.splitlines()[0].split()[2:] == ["(0,", "1)", "(0.2,", "0.8)", "(0.5,", "0.5)"]
    assert [(m.train_config["alpha"], m.train_config["beta"]) for m in manifests] == pairs
    assert (tmp_path / "alpha0.2_beta0.8" / "run_manifest.json").exists()
