"""Command-line interface: ``superfit {train,attack,eval,logits-stats,gradcheck}``.

Datasets are given as ``kind:options``::

    blobs:n=3000,k=2,dim=2048,std=1,box=0.3,seed=0,part=train
    desk:part=test                       (the blobs preset used by the acceptance suite)
    idx:train-images.gz,train-labels.gz
    cifar10:data_batch_1.bin,data_batch_2.bin

``part`` selects ``train``/``test`` from a seeded split (``test=`` sets the
fraction, default 1/3) or ``all``. ``--subsample N`` draws a seeded subset.
Relative file paths are resolved against ``$SUPERFIT_DATA_DIR``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .attacks import AttackConfig, run_attack
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSplit, load_cifar10, load_idx, make_blobs
from .evaluation import default_protocol, evaluate, logits_stats, matrix_to_csv
from .exceptions import SuperfitError, UsageError
from .gradcheck import run_suite
from .models import Model, build_middlecnn, build_tinymlp
from .training import TrainConfig, train, train_distill

DESK_BLOBS = {"n": 3000, "k": 2, "dim": 2048, "std": 1.0, "box": 0.3, "seed": 0}
DESK_TEST_FRACTION = 1 / 3


def _options(text: str) -> dict[str, str]:
    out = {}
    for item in filter(None, text.split(",")):
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _select(data: DatasetSplit, part: str, fraction: float, seed: int) -> DatasetSplit:
    if part == "all":
        return data
    train_part, test_part = data.split(fraction, seed)
    if part == "train":
        return train_part
    if part == "test":
        return test_part
    raise UsageError(f"part must be train, test or all, got {part!r}")


def load_dataset(spec: str, subsample: int | None = None, seed: int = 0) -> DatasetSplit:
    """Resolve a ``kind:options`` dataset string (see module docstring)."""
    kind, _, rest = spec.partition(":")
    if kind in ("blobs", "desk"):
        opts = {k: str(v) for k, v in DESK_BLOBS.items()} if kind == "desk" else {}
        opts.update(_options(rest))
        part = opts.pop("part", "all" if kind == "blobs" else "train")
        fraction = float(opts.pop("test", DESK_TEST_FRACTION))
        box = float(opts.pop("box", 10.0))
        try:
            data = make_blobs(int(opts.pop("n", 100)), int(opts.pop("k", 2)), int(opts.pop("dim", 2)),
                              seed=int(opts.pop("seed", 0)), cluster_std=float(opts.pop("std", 1.0)),
                              center_box=(-box, box))
        except ValueError as exc:
            raise UsageError(f"bad blobs option: {exc}") from None
        if opts:
            raise UsageError(f"unknown blobs options {sorted(opts)}")
        data = _select(data, part, fraction, seed=0)
    elif kind == "idx":
        files = rest.split(",")
        if len(files) != 2:
            raise UsageError("idx needs <images>,<labels>")
        data = load_idx(*files)
    elif kind == "cifar10":
        files = [f for f in rest.split(",") if f]
        if not files:
            raise UsageError("cifar10 needs at least one batch file")
        data = load_cifar10(files)
    else:
        raise UsageError(f"unknown dataset kind {kind!r}")
    if subsample is not None:
        data = data.subsample(subsample, seed)
    return data


def build_for(data: DatasetSplit, arch: str, hidden: int | None, seed: int) -> Model:
    shape = data.input_shape
    if arch == "tinymlp":
        if len(shape) != 1:
            raise UsageError("tinymlp needs flat (n, d) inputs")
        return build_tinymlp(shape[0], hidden or 256, data.num_classes, seed=seed)
    if arch == "middlecnn":
        if len(shape) != 3:
            raise UsageError("middlecnn needs (n, C, H, W) inputs")
        pad_to = 32 if shape[1] == 28 else None
        return build_middlecnn(shape[0], shape[1], data.num_classes, pad_to=pad_to,
                               hidden=hidden or 1024, seed=seed)
    raise UsageError(f"unknown arch {arch!r}")


def _train_config(args) -> TrainConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    overrides = {
        "objective": args.objective, "learning_rate": args.lr, "max_iterations": args.iters,
        "batch_size": args.batch_size, "seed": args.seed, "eval_every": args.eval_every,
        "temperature": args.temperature, "mucs_weight": args.mucs_weight,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.target_vanished is not None:
        base["target_vanished"] = None if args.target_vanished.lower() == "none" else float(args.target_vanished)
    if args.attack:
        base["attack"] = args.attack
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    data = load_dataset(args.data, args.subsample, args.seed or 0)
    eval_split = load_dataset(args.eval_data, None) if args.eval_data else None
    model = build_for(data, args.arch, args.hidden, cfg.seed)
    if cfg.objective == "distill":
        teacher = build_for(data, args.arch, args.hidden, cfg.seed + 1)
        model = train_distill(teacher, model, data, cfg.temperature, cfg)
        log = None
    else:
        model, log = train(model, data, cfg, eval_split=eval_split, log_path=args.log)
    save_checkpoint(model, args.out)
    last = log[-1] if log else None
    summary = {"checkpoint": str(args.out), "iterations": model.iteration, "config": cfg.to_dict()}
    if last is not None:
        summary.update(clean_accuracy=last.clean_accuracy, vanished_fraction=last.vanished_fraction)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_attack(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data, args.subsample, args.seed or 0)
    cfg = AttackConfig.parse(args.attack)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    adv = run_attack(model, data.images.astype(model.dtype), data.labels, cfg, batch_size=args.batch_size)
    out = adv.summary()
    out["config"] = cfg.to_dict()
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data, args.subsample, args.seed or 0)
    attacks = [AttackConfig.parse(a) for a in args.attack]
    if args.protocol:
        attacks = default_protocol(args.epsilon, args.iterations, args.seed or 0) + attacks
    report = evaluate(model, data, attacks, batch_size=args.batch_size, seed=args.seed)
    if args.out:
        report.save(args.out)
    print(report.table() if args.table else report.to_json())
    return 0


def cmd_logits_stats(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data, args.subsample, args.seed)
    text = matrix_to_csv(logits_stats(model, data))
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(range(args.op_seeds), range(args.network_seeds), full_middlecnn=args.full)
    failed = [r for r in results if not r.passed]
    for r in results:
        if args.verbose or not r.passed:
            print(r.line())
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="superfit", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p, data_required=True):
        p.add_argument("--data", required=data_required, help="dataset spec, e.g. desk:part=test")
        p.add_argument("--subsample", type=int, help="seeded random subset size")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    data_args(p)
    p.add_argument("--eval-data", help="dataset spec used for the progress log")
    p.add_argument("--arch", default="tinymlp", choices=["tinymlp", "middlecnn"])
    p.add_argument("--hidden", type=int)
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    p.add_argument("--objective", choices=["ce", "mucs", "ce+mucs", "distill", "adv"])
    p.add_argument("--lr", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--mucs-weight", type=float)
    p.add_argument("--target-vanished", help="early-stop threshold, or 'none'")
    p.add_argument("--attack", help="inner attack for --objective adv, e.g. pgd-10:step_size=2/255")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="JSON-lines training log path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack a checkpoint and print outcome statistics")
    p.add_argument("--checkpoint", required=True)
    data_args(p)
    p.add_argument("--attack", default="pgd-100", help="e.g. fgsm, bim-20, apgd-100, a3-100:epsilon=0.031")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="clean and robust accuracy report (JSON)")
    p.add_argument("--checkpoint", required=True)
    data_args(p)
    p.add_argument("--attack", action="append", default=[], help="attack spec; repeatable")
    p.add_argument("--protocol", action="store_true", help="add PGD-100, APGD-100 and A3")
    p.add_argument("--epsilon", type=float, default=8 / 255)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--table", action="store_true", help="print an aligned text table instead of JSON")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("logits-stats", help="per-class mean logits as CSV")
    p.add_argument("--checkpoint", required=True)
    data_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_logits_stats)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--op-seeds", type=int, default=6)
    p.add_argument("--network-seeds", type=int, default=3)
    p.add_argument("--full", action="store_true", help="also sample the full-width MiddleCNN")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SuperfitError, OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        print(f"superfit {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
