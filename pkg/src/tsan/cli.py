"""Command-line entry point: ``tsan <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import datapipe
from .checkpoint import save_checkpoint
from .harness import ablate_loss_weights, ablate_variants, enhance, evaluate, load_config, parse_pairs, train
from .model import init_params, parameter_report, zero_params

RAW_SUFFIXES = (".yuv", ".raw")


def cmd_prepare(args) -> int:
    inputs = sorted(p for p in Path(args.input_dir).iterdir() if p.suffix.lower() in RAW_SUFFIXES)
    if not inputs:
        print(f"no .yuv files in {args.input_dir}", file=sys.stderr)
        return 2
    records = []
    for raw in inputs:
        w, h, fps = datapipe.discover_geometry(raw)
        profiles = datapipe.default_profiles(h, args.hr_kbps, args.lr_kbps, args.initial_kbps)
        rec = datapipe.build_triplets(raw, args.work_dir, w, h, fps, profiles)
        stats = datapipe.dataset_stats(rec)
        print(f"{rec.id}: {rec.frame_count} frames {w}x{h} [{rec.resolution_class}] "
              f"initial {stats['psnr_initial']:.2f} dB, transcoded {stats['psnr_transcoded']:.2f} dB")
        records.append(rec)
    print(f"wrote {datapipe.write_dataset_index(args.work_dir, records)}")
    return 0


def _configs(args):
    overrides = {"variant": args.variant, "alpha": args.alpha, "beta": args.beta, "seed": args.seed}
    for item in args.set or []:
        key, _, value = item.partition("=")
        overrides[key] = value
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    model_cfg, train_cfg = _configs(args)
    records = datapipe.load_dataset(args.data)
    params = init_params(model_cfg, seed=train_cfg.seed)
    out = Path(args.out)
    _, manifest = train(params, records, train_cfg, out_dir=out, iterations=args.iters)
    last = manifest.history[-1] if manifest.history else {}
    print(f"trained {manifest.parameters['total_parameters']} parameters; "
          f"final loss {last.get('total', float('nan')):.6f}; checkpoint {out / 'final.ckpt'}")
    for note in manifest.notes:
        print(f"note: {note}")
    return 0


def cmd_init(args) -> int:
    model_cfg, _ = load_config(args.config, {"variant": args.variant})
    params = zero_params(model_cfg) if args.zero else init_params(model_cfg, seed=args.seed)
    save_checkpoint(args.out, params)
    rep = parameter_report(params)
    print(f"{args.out}: {rep['total_parameters']} parameters ({rep['note']})")
    return 0


def cmd_enhance(args) -> int:
    w, h, _ = datapipe.parse_geometry(args.geometry)
    seq = enhance(args.checkpoint, args.input, args.output, w, h, reference=args.reference)
    print(f"wrote {args.output}")
    if seq is not None:
        print(f"dPSNR {seq.delta_psnr:+.3f} dB  dSSIM {seq.delta_ssim:+.4f}")
    return 0


def cmd_evaluate(args) -> int:
    table, _ = evaluate(args.checkpoint, args.manifest, out_path=args.out)
    print(table, end="")
    return 0


def cmd_ablate_loss(args) -> int:
    model_cfg, train_cfg = _configs(args)
    records = datapipe.load_dataset(args.data)
    table, _ = ablate_loss_weights(records, parse_pairs(args.pairs), args.iters, model_cfg, train_cfg,
                                   out_dir=args.out)
    print(table, end="")
    return 0


def cmd_ablate_variants(args) -> int:
    model_cfg, train_cfg = _configs(args)
    records = datapipe.load_dataset(args.data)
    combined, _ = ablate_variants(records, model_cfg, train_cfg, iterations=args.iters, out_dir=args.out)
    print(combined, end="")
    return 0


def _training_flags(p, iters_default=None):
    p.add_argument("--data", required=True, help="work dir, dataset.json or a sequence manifest")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--variant", choices=("full", "v1", "v2"))
    p.add_argument("--iters", type=int, default=iters_default)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="extra config override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsan", description="Transcoded video restoration toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="encode raw clips into raw/initial/transcoded triplets")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--work-dir", required=True)
    p.add_argument("--hr-kbps", type=int, default=1000)
    p.add_argument("--lr-kbps", type=int, default=500)
    p.add_argument("--initial-kbps", type=int, default=10000)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on prepared triplets")
    _training_flags(p)
    p.add_argument("--out", default="runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("init", help="write a freshly initialised (or all-zero) checkpoint")
    p.add_argument("--config")
    p.add_argument("--variant", choices=("full", "v1", "v2"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero", action="store_true", help="all-zero parameters: the identity network")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("enhance", help="restore a planar 4:2:0 video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--geometry", required=True, help="WxH@fps, e.g. 416x240@30")
    p.add_argument("--output", required=True)
    p.add_argument("--reference", help="raw video for per-frame PSNR/SSIM")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="dPSNR/dSSIM table over prepared sequences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-loss", help="compare (alpha, beta) weightings")
    _training_flags(p, iters_default=100)
    p.add_argument("--pairs", default="0:1,0.2:0.8,0.5:0.5")
    p.add_argument("--out", default="runs/ablate_loss")
    p.set_defaults(func=cmd_ablate_loss)

    p = sub.add_parser("ablate-variants", help="compare V1, V2 and the full model")
    _training_flags(p, iters_default=0)
    p.add_argument("--out", default="runs/ablate_variants")
    p.set_defaults(func=cmd_ablate_variants)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (datapipe.PipelineError, datapipe.IntegrityError, ValueError, FileNotFoundError) as exc:
        print(f"tsan {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
