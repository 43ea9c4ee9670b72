"""Training loop, sequence enhancement, evaluation tables and ablation drivers."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .datapipe import (
    PatchSpec, SequenceRecord, dataset_hash, load_dataset, luma_frames, read_yuv420,
    sample_clip, window_indices, write_yuv420,
)
from .flow import FlowEstimator
from .losses import LossConfig, LossReport, loss_auxiliary, loss_global, loss_total, report
from .metrics import (
    SequenceDelta, delta_metrics, format_ablation_table, format_delta_table, to_255,
    write_frame_report,
)
from .model import (
    ClipSample, ModelConfig, ModelParams, init_params, network_forward, parameter_report,
    prepare_window, variant_config,
)
from .numcore import ContractError, DTYPE

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    max_iterations: int = 300_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 0.2
    beta: float = 0.8
    seed: int = 0
    patch_size: int = 64
    log_interval: int = 100
    checkpoint_interval: int = 10_000
    validation_interval: int = 10_000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be >= 0")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.alpha, self.beta)


def _coerce(value: str, target_type):
    value = value.strip()
    if target_type is tuple:
        return tuple(int(v) for v in value.strip("()").split(",") if v.strip())
    if target_type is int:
        return int(float(value))
    if target_type is float:
        return float(value)
    return value


def load_config(path=None, overrides: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Read a ``key=value`` file addressing ModelConfig and TrainConfig fields.

    Blank lines and ``#`` comments are ignored. Keys may be bare field names
    or prefixed with ``model.`` / ``train.``.
    """
    pairs: dict[str, str] = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            pairs[k.strip()] = v.strip()
    for k, v in (overrides or {}).items():
        if v is not None:
            pairs[k] = str(v)

    model_fields = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    model_kw, train_kw = {}, {}
    for key, raw in pairs.items():
        scope, _, name = key.rpartition(".")
        if scope in ("", "model") and name in model_fields:
            model_kw[name] = _coerce(raw, _field_type(ModelConfig, name))
        elif scope in ("", "train") and name in train_fields:
            train_kw[name] = _coerce(raw, _field_type(TrainConfig, name))
        else:
            raise ContractError(f"unknown config key {key!r}")
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def _field_type(cls, name):
    default = next(f.default for f in dataclasses.fields(cls) if f.name == name)
    return type(default)


def dump_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    lines = []
    for prefix, obj in (("model", model_cfg), ("train", train_cfg)):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{prefix}.{f.name}={v}")
    return "\n".join(lines) + "\n"


@dataclass
class RunManifest:
    model_config: dict
    train_config: dict
    dataset_hash: str
    parameters: dict
    history: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    checkpoints: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    started: float = field(default_factory=time.time)

    def log(self, iteration: int, rep: LossReport) -> None:
        self.history.append({"iteration": iteration, **rep.as_dict(), "time": time.time()})

    def losses(self) -> list[float]:
        return [h["total"] for h in self.history]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")
        return path


# --- batching -------------------------------------------------------------

class ClipSampler:
    """Endless stream of training clips.

    Sources are either fixed :class:`ClipSample` objects or
    :class:`SequenceRecord` stores; for records every (sequence, frame) pair
    is visited once per shuffled epoch with a fresh random crop.
    """

    def __init__(self, sources: Sequence, patch: PatchSpec, rng: np.random.Generator):
        self.sources = list(sources)
        if not self.sources:
            raise ContractError("training dataset is empty")
        self.patch = patch
        self.rng = rng
        self._order: list = []
        if isinstance(self.sources[0], ClipSample):
            self._items = list(range(len(self.sources)))
        else:
            self._items = [(i, c) for i, r in enumerate(self.sources) for c in range(r.frame_count)]

    def next(self) -> ClipSample:
        if not self._order:
            self._order = [self._items[i] for i in self.rng.permutation(len(self._items))]
        item = self._order.pop()
        if isinstance(item, int):
            return self.sources[item]
        rec_idx, center = item
        return sample_clip(self.sources[rec_idx], center, self.patch, rng=self.rng)


class AlignmentCache:
    """Memoises flow alignment per clip key; the flow estimator is frozen."""

    def __init__(self, estimator=None, limit: int = 4096):
        self.estimator = estimator or FlowEstimator()
        self.limit = limit
        self._store: dict = {}

    def get(self, clip: ClipSample) -> tuple[torch.Tensor, torch.Tensor]:
        key = clip.key
        if key is not None and key in self._store:
            return self._store[key]
        frames = clip.frames if clip.frames.dim() == 3 else clip.frames[0]
        out = prepare_window(frames, self.estimator)
        if key is not None and len(self._store) < self.limit:
            self._store[key] = out
        return out


def _label(t: torch.Tensor | None) -> torch.Tensor | None:
    if t is None:
        return None
    while t.dim() < 3:
        t = t[None]
    return t


def collate(clips: Sequence[ClipSample], cache: AlignmentCache):
    frames, aligned, flows, y_init, y_raw = [], [], [], [], []
    for c in clips:
        a, f = cache.get(c)
        frames.append(c.frames if c.frames.dim() == 3 else c.frames[0])
        aligned.append(a)
        flows.append(f)
        y_init.append(_label(c.label_init))
        y_raw.append(_label(c.label_raw))
    has_init = all(t is not None for t in y_init)
    return (torch.stack(frames), torch.stack(aligned), torch.stack(flows),
            torch.stack(y_init) if has_init else None, torch.stack(y_raw))


def compute_loss(params: ModelParams, batch, loss_cfg: LossConfig):
    """Returns ``(total, loss_a or None, loss_g, output)`` for one batch."""
    frames, aligned, flows, y_init, y_raw = batch
    out = network_forward(frames, aligned, flows, params)
    lg = loss_global(out.restored, y_raw)
    la = None
    if out.intermediate is not None and loss_cfg.alpha > 0:
        if y_init is None:
            raise ContractError("auxiliary loss needs the initial-encode label")
        la = loss_auxiliary(out.intermediate, y_init)
    total = loss_total(la if la is not None else torch.zeros((), dtype=DTYPE), lg, loss_cfg)
    return total, la, lg, out


def effective_loss_config(model_cfg: ModelConfig, cfg: TrainConfig) -> LossConfig:
    if model_cfg.variant != "full" and cfg.alpha != 0:
        return LossConfig(0.0, cfg.beta)
    return cfg.loss


def train(params: ModelParams, dataset: Sequence, cfg: TrainConfig, out_dir=None,
          estimator=None, validation: Sequence[ClipSample] = (), iterations: int | None = None,
          start_iteration: int = 0) -> tuple[ModelParams, RunManifest]:
    """Adam on ``alpha * Loss_a + beta * Loss_g``.

    ``dataset`` holds :class:`SequenceRecord` stores or fixed
    :class:`ClipSample` objects. The returned params are a trained copy; the
    input params are left untouched. A non-finite loss writes
    ``diverged.ckpt`` (when ``out_dir`` is set) and raises
    :class:`TrainingDiverged`.
    """
    iterations = cfg.max_iterations if iterations is None else iterations
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model_cfg = params.config
    loss_cfg = effective_loss_config(model_cfg, cfg)
    params = params.clone().requires_grad_(True)
    out_dir = Path(out_dir) if out_dir else None

    records = [d for d in dataset if isinstance(d, SequenceRecord)]
    manifest = RunManifest(
        model_config=model_cfg.to_dict(), train_config=dataclasses.asdict(cfg),
        dataset_hash=dataset_hash(records) if records else _clip_hash(dataset),
        parameters=parameter_report(params),
    )
    if loss_cfg.alpha != cfg.alpha:
        manifest.notes.append(f"variant {model_cfg.variant} has no auxiliary branch: alpha forced to 0")
    if not manifest.parameters["within_30_percent"]:
        manifest.notes.append(
            "parameter count deviates from the published 5.75M by more than 30%: "
            + manifest.parameters["note"])

    sampler = ClipSampler(dataset, PatchSpec(cfg.patch_size, model_cfg.temporal_radius, cfg.seed), rng)
    cache = AlignmentCache(estimator)
    opt = torch.optim.Adam(list(params.tensors.values()), lr=cfg.learning_rate,
                           betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)

    for it in range(start_iteration + 1, start_iteration + iterations + 1):
        batch = collate([sampler.next() for _ in range(cfg.batch_size)], cache)
        total, la, lg, _ = compute_loss(params, batch, loss_cfg)
        if not torch.isfinite(total):
            manifest.notes.append(f"non-finite loss at iteration {it}")
            if out_dir:
                ckpt.save_checkpoint(out_dir / "diverged.ckpt", params, it, {"reason": "non-finite loss"})
                manifest.save(out_dir / "run_manifest.json")
            raise TrainingDiverged(f"loss became {total.item()} at iteration {it}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()

        if it == start_iteration + 1 or it % cfg.log_interval == 0 or it == start_iteration + iterations:
            rep = report(la, lg, loss_cfg)
            manifest.log(it, rep)
            log.info("iter %d loss %.6f (a %.6f g %.6f)", it, rep.total, rep.loss_a, rep.loss_g)
        if validation and it % cfg.validation_interval == 0:
            manifest.validation.append({"iteration": it, **validate(params, validation, cache)})
        if out_dir and it % cfg.checkpoint_interval == 0:
            path = ckpt.save_checkpoint(out_dir / f"iter_{it:07d}.ckpt", params, it)
            manifest.checkpoints.append({"iteration": it, "path": str(path)})

    trained = params.clone()
    if out_dir:
        last = start_iteration + iterations
        path = ckpt.save_checkpoint(out_dir / "final.ckpt", trained, last,
                                    {"alpha": loss_cfg.alpha, "beta": loss_cfg.beta})
        manifest.checkpoints.append({"iteration": last, "path": str(path)})
        manifest.save(out_dir / "run_manifest.json")
    return trained, manifest


def _clip_hash(clips) -> str:
    import hashlib

    h = hashlib.sha256()
    for c in clips:
        h.update(c.frames.numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def validate(params: ModelParams, clips: Sequence[ClipSample], cache: AlignmentCache) -> dict:
    from .metrics import psnr

    before, after = [], []
    for c in clips:
        frames, aligned, flows, _, y_raw = collate([c], cache)
        out = network_forward(frames, aligned, flows, params)
        raw = to_255(y_raw[0, 0].numpy())
        center = frames[0, params.config.temporal_radius].numpy()
        before.append(min(psnr(to_255(center), raw), 100.0))
        after.append(min(psnr(to_255(out.restored[0, 0].numpy()), raw), 100.0))
    return {"psnr_before": float(np.mean(before)), "psnr_after": float(np.mean(after))}


@torch.no_grad()
def restore_clip(params: ModelParams, clip: ClipSample, estimator=None) -> np.ndarray:
    """Restored centre plane (H, W) in [0, 1] for one clip."""
    cache = AlignmentCache(estimator)
    frames, aligned, flows, _, _ = collate([ClipSample(clip.frames, None, clip.frames[0])], cache)
    return network_forward(frames, aligned, flows, params).restored[0, 0].numpy()


# --- inference over whole sequences ----------------------------------------

def _resolve_params(model) -> ModelParams:
    if isinstance(model, ModelParams):
        return model
    return ckpt.load_checkpoint(model)[0]


@torch.no_grad()
def enhance(model, input_video, output_path, width: int, height: int,
            reference=None, estimator=None, report_stem=None) -> SequenceDelta | None:
    """Restore every frame of a planar 4:2:0 file.

    The 2T+1 window slides over all frames with replicated borders, luma is
    restored and quantised to 8 bits, chroma is copied through. With a
    ``reference`` file, per-frame PSNR/SSIM before/after are returned and
    written next to the output (``<output>.report.txt`` / ``.csv``).
    """
    if report_stem is not None and reference is None:
        raise ContractError("a per-frame report needs a reference video")
    params = _resolve_params(model)
    cfg = params.config
    if min(width, height) < cfg.min_size:
        raise ContractError(f"model needs frames of at least {cfg.min_size}x{cfg.min_size}, got {width}x{height}")
    luma = luma_frames(input_video, width, height)
    n = luma.shape[0]
    ref_luma = None
    if reference is not None:
        ref_luma = luma_frames(reference, width, height)
        if ref_luma.shape[0] != n:
            raise ContractError(f"reference has {ref_luma.shape[0]} frames, input has {n}")
    estimator = estimator or FlowEstimator()
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    output_path.write_bytes(b"")
    before, after = [], []
    for i in range(n):
        idx = window_indices(i, cfg.temporal_radius, n)
        frames = torch.from_numpy(luma[idx].astype(np.float32) / 255.0)
        aligned, flows = prepare_window(frames, estimator)
        out = network_forward(frames[None], aligned[None], flows[None], params).restored[0, 0]
        restored = to_255(out.numpy()).astype(np.uint8)
        _, chroma = read_yuv420(input_video, width, height, i)
        write_yuv420(output_path, [(restored, chroma)], append=True)
        if ref_luma is not None:
            ref = ref_luma[i].astype(np.float64)
            before.append((luma[i].astype(np.float64), ref))
            after.append((restored.astype(np.float64), ref))
    if ref_luma is None:
        return None
    seq = delta_metrics(before, after, name=Path(input_video).stem)
    write_frame_report(seq, report_stem or output_path.with_suffix(".report"))
    return seq


def evaluate(model, records: Sequence[SequenceRecord] | str | Path, out_path=None,
             estimator=None, work_dir=None, title: str = "") -> tuple[str, list[SequenceDelta]]:
    """Per-sequence dPSNR/dSSIM of restored vs transcoded, both against raw.

    Returns the formatted table (sequence rows + Average row) and the
    per-sequence results; the table is written to ``out_path`` if given.
    """
    params = _resolve_params(model)
    if isinstance(records, (str, Path)):
        records = load_dataset(records)
    work = Path(work_dir) if work_dir else (Path(out_path).parent if out_path else None)
    results = []
    for rec in records:
        out_video = (work / f"{rec.id}.restored.yuv") if work else Path(rec.transcoded).with_suffix(".restored.yuv")
        seq = enhance(params, rec.transcoded, out_video, rec.width, rec.height,
                      reference=rec.raw, estimator=estimator,
                      report_stem=out_video.with_suffix(".report"))
        seq.name = rec.id
        results.append(seq)
    table = format_delta_table(results, title)
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(table)
    return table, results


def ablate_variants(records: Sequence[SequenceRecord], base: ModelConfig = ModelConfig(),
                    cfg: TrainConfig = TrainConfig(), iterations: int = 0, out_dir=None,
                    estimator=None, seed: int = 0) -> tuple[str, dict]:
    """Build (and optionally train) V1, V2 and the full model, then tabulate
    dPSNR/dSSIM per sequence with one column per variant."""
    results: dict[str, list[SequenceDelta]] = {}
    tables = {}
    for variant in ("v1", "v2", "full"):
        params = init_params(variant_config(base, variant), seed=seed)
        if iterations > 0:
            params, _ = train(params, records, cfg, out_dir=Path(out_dir) / variant if out_dir else None,
                              estimator=estimator, iterations=iterations)
        work = Path(out_dir) / variant if out_dir else None
        tables[variant], results[variant] = evaluate(params, records, work_dir=work, estimator=estimator,
                                                     title=f"variant {variant.upper()}")
    combined = format_ablation_table({"V1": results["v1"], "V2": results["v2"], "Proposed": results["full"]})
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation_variants.txt").write_text(combined)
    return combined, tables


def parse_pairs(text: str) -> list[tuple[float, float]]:
    """``"0:1,0.2:0.8"`` -> ``[(0.0, 1.0), (0.2, 0.8)]``."""
    pairs = []
    for chunk in text.split(","):
        a, b = chunk.split(":")
        pairs.append((float(a), float(b)))
    return pairs


def ablate_loss_weights(records: Sequence[SequenceRecord], weight_pairs: Iterable[tuple[float, float]],
                        iterations: int, base: ModelConfig = ModelConfig(), cfg: TrainConfig = TrainConfig(),
                        out_dir=None, estimator=None, eval_records=None) -> tuple[str, list[RunManifest]]:
    """Train the full model once per (alpha, beta) pair from a shared seed and
    report the average dPSNR of each on ``eval_records`` (default: ``records``)."""
    weight_pairs = list(weight_pairs)
    eval_records = eval_records or records
    manifests, cells = [], []
    for alpha, beta in weight_pairs:
        run_cfg = dataclasses.replace(cfg, alpha=alpha, beta=beta)
        run_dir = Path(out_dir) / f"alpha{alpha:g}_beta{beta:g}" if out_dir else None
        params, manifest = train(init_params(base, seed=cfg.seed), records, run_cfg,
                                 out_dir=run_dir, estimator=estimator, iterations=iterations)
        manifests.append(manifest)
        _, seqs = evaluate(params, eval_records, work_dir=run_dir, estimator=estimator)
        cells.append(float(np.mean([s.delta_psnr for s in seqs])))
    header = "(alpha, beta)   " + "".join(f"{f'({a:g}, {b:g})':>14}" for a, b in weight_pairs)
    row = "dPSNR (dB)      " + "".join(f"{c:>14.3f}" for c in cells)
    table = header + "\n" + row + "\n"
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation_loss.txt").write_text(table)
    return table, manifests
