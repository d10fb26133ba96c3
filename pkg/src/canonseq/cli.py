"""Command line entry point.

    canonseq --config configs/toy.yaml --out runs/toy synth-data
    canonseq --config configs/toy.yaml --out runs/toy train-cae
    ...
    canonseq --out runs/toy generate --n 16 --seed 7
    canonseq --out runs/toy eval
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .config import load_config, save_config
from .errors import ConfigError, DependencyError, DomainError, FormatError, TrainingError, WriteError
from .metrics import evaluate, tmd
from .pcio import ShapeDataset, load_depth, load_pointcloud, save_pointcloud
from .vq import codebook_usage

logger = logging.getLogger("canonseq")

TRAIN_COMMANDS = {"train-cae": "A", "train-group": "B", "train-vqvae": "C", "train-transformer": "D"}


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="YAML file of dotted keys")
    parser.add_argument("--seed", type=int, default=default, help="override every seed")
    parser.add_argument("--out", default=default if suppress else "runs/default",
                        help="output directory")
    parser.add_argument("--set", action="append", default=default if suppress else [],
                        metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=default if suppress else False)


def build_parser():
    parser = argparse.ArgumentParser(prog="canonseq", description=__doc__.split("\n")[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth-data", parents=[common], help="write the synthetic train/test splits")
    for name in TRAIN_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"train stage {TRAIN_COMMANDS[name]}")

    p = sub.add_parser("reconstruct", parents=[common], help="decode(encode(x)) for input clouds")
    p.add_argument("inputs", nargs="*", help="cloud files (default: the test split)")
    p.add_argument("--split", default="test")

    p = sub.add_parser("generate", parents=[common], help="sample shapes unconditionally")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--top-p", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--resolution", type=int)

    p = sub.add_parser("complete", parents=[common], help="sample shapes for a depth image")
    p.add_argument("--depth", required=True, help="PCSQ2 binary or P2 PGM depth image")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--top-p", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--resolution", type=int)

    p = sub.add_parser("eval", parents=[common], help="MMD / COV / 1-NNA report")
    p.add_argument("--gen", help="directory of generated clouds (default OUT/generated)")
    p.add_argument("--ref", help="directory of reference clouds (default the test split)")
    p.add_argument("--raw", action="store_true", help="skip unit-sphere normalization")
    p.add_argument("--emd-mode", default="auto", choices=["auto", "exact", "approximate"])
    p.add_argument("--tmd", action="store_true", help="also report TMD over the generated set")
    p.add_argument("--report", help="output path (default OUT/report.txt)")

    p = sub.add_parser("usage-report", parents=[common], help="codebook usage over a split")
    p.add_argument("--split", default="test")
    return parser


def _config(args):
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg.seed = args.seed
        for section in (cfg.data, cfg.cae, cfg.group, cfg.vq, cfg.transformer):
            section.seed = args.seed
    return cfg


def _write_clouds(clouds, directory, prefix):
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, pc in enumerate(clouds):
        path = directory / f"{prefix}_{i:03d}.pcsq"
        save_pointcloud(np.asarray(pc, dtype=np.float32), path)
        paths.append(path)
    return paths


def _write_tokens(tokens, path):
    path.write_text("".join(",".join(str(int(t)) for t in seq) + "\n" for seq in tokens))


def _sampling(args, cfg):
    top_p = args.top_p if args.top_p is not None else cfg.sample.top_p
    temp = args.temperature if args.temperature is not None else cfg.sample.temperature
    res = args.resolution if args.resolution is not None else (cfg.sample.resolution or None)
    if not 0 < top_p <= 1:
        raise ConfigError("--top-p must lie in (0, 1]")
    if temp <= 0:
        raise ConfigError("--temperature must be positive")
    return top_p, temp, res


def cmd_synth_data(args, cfg, out):
    train, test = pl.make_data(cfg, out)
    print(f"wrote {len(train)} train and {len(test)} test shapes to {out / 'data'}")


def cmd_train(args, cfg, out):
    path = pl.run_stage(TRAIN_COMMANDS[args.command], cfg, out)
    print(f"wrote {path}")


def cmd_reconstruct(args, cfg, out):
    models = pl.load_models(out, "ABC")
    if args.inputs:
        clouds = [load_pointcloud(p) for p in args.inputs]
    else:
        clouds = pl.load_split(out, args.split).samples
    recon = [pl.reconstruct_shape(models, pc) for pc in clouds]
    paths = _write_clouds(recon, out / "reconstructions", "recon")
    print(f"wrote {len(paths)} reconstructions to {out / 'reconstructions'}")


def cmd_generate(args, cfg, out):
    models = pl.load_models(out)
    top_p, temp, res = _sampling(args, cfg)
    base = cfg.seed if args.seed is None else args.seed
    shapes, tokens = [], []
    for i in range(args.n):
        pc, seq = pl.generate_shape(models, top_p, temp, base + i, resolution=res,
                                    top_k=cfg.sample.top_k)
        shapes.append(pc)
        tokens.append(seq)
    target = out / "generated"
    _write_clouds(shapes, target, "sample")
    _write_tokens(tokens, target / "tokens.csv")
    save_config(cfg, target / "config.yaml")
    distinct = len({tuple(t) for t in tokens})
    print(f"wrote {args.n} shapes to {target} ({distinct} distinct token sequences)")


def cmd_complete(args, cfg, out):
    models = pl.load_models(out)
    if models.transformer.cond_encoder is None:
        raise DomainError("stage D was trained unconditionally; set transformer.conditional")
    depth = load_depth(args.depth)
    top_p, temp, res = _sampling(args, cfg)
    base = cfg.seed if args.seed is None else args.seed
    results = [pl.generate_shape(models, top_p, temp, base + i, condition=depth, resolution=res)
               for i in range(args.k)]
    target = out / "completions"
    _write_clouds([r[0] for r in results], target, "completion")
    _write_tokens([r[1] for r in results], target / "tokens.csv")
    save_config(cfg, target / "config.yaml")
    if args.k >= 2:
        print(f"TMD over {args.k} completions: {tmd([r[0] for r in results]):.6f}")
    print(f"wrote {args.k} completions to {target}")


def cmd_eval(args, cfg, out):
    gen_dir = Path(args.gen) if args.gen else out / "generated"
    gen = ShapeDataset.load(gen_dir).samples
    ref = ShapeDataset.load(args.ref).samples if args.ref else pl.load_split(out, "test").samples
    report = evaluate(gen, ref, normalize=not args.raw, emd_mode=args.emd_mode)
    if args.tmd:
        report.tmd = tmd(gen, normalize=not args.raw)
    report.extra["gen_dir"] = str(gen_dir)
    path = Path(args.report) if args.report else out / "report.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    report.save(path)
    print(report.table())
    print(f"wrote {path}")


def cmd_usage_report(args, cfg, out):
    models = pl.load_models(out, "ABC")
    clouds = pl.load_split(out, args.split).samples
    tokens = np.stack([pl.encode_to_tokens(models, pc) for pc in clouds])
    cb = models.codec.codebook
    usage = codebook_usage(tokens, models.grouper.num_groups, models.codec.cfg.codebook_size,
                           models.grouper.order.numpy(), shared=cb.shared)
    (out / "usage.txt").write_text(f"usage_percent={usage}\nshapes={len(clouds)}\nshared={cb.shared}\n")
    print(f"codebook usage over {len(clouds)} {args.split} shapes: {usage:.2f}%")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "reconstruct": cmd_reconstruct,
    "generate": cmd_generate,
    "complete": cmd_complete,
    "eval": cmd_eval,
    "usage-report": cmd_usage_report,
    **{name: cmd_train for name in TRAIN_COMMANDS},
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        parser.error(str(exc))  # exits with status 2
    except (DependencyError, DomainError, FormatError, TrainingError, WriteError,
            FileNotFoundError) as exc:
        print(f"canonseq {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
