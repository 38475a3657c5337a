"""Command-line entry point: dataset synthesis, training, inference,
evaluation, CCP analysis, and ablation sweeps.

Exit codes: 0 success, 1 usage error (synopsis printed to stderr),
2 runtime error (bad inputs, unreadable checkpoints, divergence). Every
run echoes its resolved configuration before doing work, so a run is
reproducible from its log alone. Flag values override config-file keys,
which override built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from csud.errors import CsudError
from csud.rainsynth import RainParams, SplitSpec, make_desk_dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exceptions instead of exiting."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _usage_fail(args, message: str):
    parser = getattr(args, "_parser")
    parser.print_usage(sys.stderr)
    print(f"{parser.prog}: error: {message}", file=sys.stderr)
    raise UsageError(message)


def _echo(command: str, resolved: dict) -> None:
    print(f"resolved config ({command}):")
    print(json.dumps(resolved, indent=2, default=str))


def _load_json(path: Path, what: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CsudError(f"{what} file {path} is not valid JSON: {exc}") from exc


def build_parser() -> _Parser:
    parser = _Parser(prog="csud", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", metavar="subcommand",
                                parser_class=_Parser)
    sub.required = True

    p_train = sub.add_parser("train",
                             help="train generator, discriminator and derainer")
    p_train.add_argument("--config", type=Path, help="JSON training config")
    p_train.add_argument("--data", type=Path, required=True,
                         help="dataset root containing train/clean and train/rainy")
    p_train.add_argument("--out", type=Path, default=Path("runs/train"),
                         help="directory for logs and checkpoints")
    p_train.add_argument("--desk-scale", action="store_true",
                         help="apply the CPU-sized profile to unset config fields")
    p_train.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p_train.add_argument("--max-steps", type=int, help="cap the total step count")
    p_train.add_argument("--seed", type=int, help="override the config seed")
    p_train.set_defaults(handler=cmd_train, _parser=p_train)

    p_derain = sub.add_parser("derain",
                              help="run a trained derainer over images")
    p_derain.add_argument("--ckpt", type=Path, required=True)
    p_derain.add_argument("--input", type=Path, required=True,
                          help="an image file or a directory of images")
    p_derain.add_argument("--output", type=Path, required=True)
    p_derain.set_defaults(handler=cmd_derain, _parser=p_derain)

    p_eval = sub.add_parser("eval",
                            help="PSNR/SSIM report over a paired test set")
    p_eval.add_argument("--ckpt", required=True,
                        help="checkpoint path, or 'identity' for the no-op baseline")
    p_eval.add_argument("--testset", type=Path, required=True,
                        help="root containing rainy/ and gt/")
    p_eval.add_argument("--out", type=Path, required=True, help="report JSON path")
    p_eval.set_defaults(handler=cmd_eval, _parser=p_eval)

    p_ccp = sub.add_parser("ccp",
                           help="channel-cycle residual similarity report")
    p_ccp.add_argument("--clean", type=Path, required=True)
    p_ccp.add_argument("--rainy", type=Path, required=True)
    p_ccp.add_argument("--mode", choices=("paired", "corpus"), default="paired")
    p_ccp.add_argument("--out", type=Path, required=True, help="report JSON path")
    p_ccp.add_argument("--plot", type=Path, help="optional PNG bar chart path")
    p_ccp.set_defaults(handler=cmd_ccp, _parser=p_ccp)

    p_synth = sub.add_parser("synth",
                             help="build an unpaired train + paired test dataset")
    p_synth.add_argument("--clean", type=Path,
                         help="source photos; omit for procedural clean images")
    p_synth.add_argument("--out", type=Path, required=True)
    p_synth.add_argument("--params", type=Path, help="JSON rain parameters")
    p_synth.add_argument("--train-count", type=int, default=SplitSpec().train)
    p_synth.add_argument("--test-count", type=int, default=SplitSpec().test)
    p_synth.add_argument("--size", type=int, nargs=2, default=(96, 96),
                         metavar=("H", "W"), help="procedural clean image size")
    p_synth.add_argument("--seed", type=int, help="override the rain parameter seed")
    p_synth.set_defaults(handler=cmd_synth, _parser=p_synth)

    p_ablate = sub.add_parser("ablate",
                              help="train and rank toggle variants")
    p_ablate.add_argument("--config", type=Path, help="JSON training config")
    p_ablate.add_argument("--toggles", nargs="+", required=True, metavar="VARIANT",
                          help="variants like: base cc=off sr=off cc=off,sr=off")
    p_ablate.add_argument("--data", type=Path, required=True,
                          help="dataset root with train/clean, train/rainy, test/")
    p_ablate.add_argument("--out", type=Path, default=Path("runs/ablation"))
    p_ablate.add_argument("--desk-scale", action="store_true")
    p_ablate.add_argument("--max-steps", type=int)
    p_ablate.add_argument("--seed", type=int)
    p_ablate.set_defaults(handler=cmd_ablate, _parser=p_ablate)

    return parser


def _resolve_train_config(args):
    """Layer TrainConfig from defaults, then config file, then flags."""
    from csud.trainer import TrainConfig

    raw = {}
    if args.config is not None:
        if not args.config.is_file():
            _usage_fail(args, f"config file not found: {args.config}")
        raw = _load_json(args.config, "config")
    if getattr(args, "desk_scale", False):
        raw["desk_scale"] = True
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "max_steps", None) is not None:
        raw["max_steps"] = args.max_steps
    return TrainConfig.from_dict(raw)


def _require_dir(args, path: Path, what: str) -> Path:
    if not path.is_dir():
        _usage_fail(args, f"{what} not found: {path}")
    return path


def cmd_train(args) -> int:
    from csud.data import UnpairedCorpus
    from csud.trainer import train

    config = _resolve_train_config(args)
    data = _require_dir(args, args.data, "dataset root")
    clean_dir = _require_dir(args, data / "train" / "clean", "train/clean directory")
    rainy_dir = _require_dir(args, data / "train" / "rainy", "train/rainy directory")
    _echo("train", {
        "config": config.to_dict(),
        "data": str(data),
        "out": str(args.out),
        "resume": str(args.resume) if args.resume else None,
    })
    corpus = UnpairedCorpus.from_dirs(clean_dir, rainy_dir, crop=config.crop,
                                      seed=config.seed)
    result = train(config, corpus, args.out, resume=args.resume)
    print(f"finished {result.steps} steps in {result.elapsed_seconds:.1f}s; "
          f"final checkpoint: {result.final_checkpoint}")
    return 0


def cmd_derain(args) -> int:
    from csud.evalkit import derain_image, derainer_from_checkpoint
    from csud.imagecore import load_image, save_image

    if args.input.is_dir():
        inputs = sorted(
            p for p in args.input.iterdir()
            if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
        )
        if not inputs:
            _usage_fail(args, f"no images found in {args.input}")
    elif args.input.is_file():
        inputs = [args.input]
    else:
        _usage_fail(args, f"input not found: {args.input}")
    _echo("derain", {
        "ckpt": str(args.ckpt),
        "input": str(args.input),
        "output": str(args.output),
        "count": len(inputs),
    })
    derainer = derainer_from_checkpoint(args.ckpt)
    args.output.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        out = derain_image(derainer, load_image(path))
        save_image(out, args.output / path.name)
    print(f"derained {len(inputs)} image(s) into {args.output}")
    return 0


def cmd_eval(args) -> int:
    from csud.data import load_paired_testset
    from csud.evalkit import derainer_from_checkpoint, evaluate

    _echo("eval", {
        "ckpt": str(args.ckpt),
        "testset": str(args.testset),
        "out": str(args.out),
    })
    derainer = None if args.ckpt == "identity" else derainer_from_checkpoint(args.ckpt)
    testset = load_paired_testset(args.testset)
    report = evaluate(derainer, testset, dataset_name=args.testset.name,
                      checkpoint_id=str(args.ckpt))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    report.save(args.out)
    print(f"mean PSNR {report.psnr_mean_db:.2f} dB, mean SSIM {report.ssim_mean:.4f} "
          f"over {len(report.per_image)} image(s); report: {args.out}")
    return 0


def _load_image_dir(args, root: Path, what: str):
    from csud.imagecore import load_image

    _require_dir(args, root, what)
    paths = sorted(
        p for p in root.iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
    )
    if not paths:
        _usage_fail(args, f"no images found in {root}")
    return [p.name for p in paths], [load_image(p) for p in paths]


def cmd_ccp(args) -> int:
    from csud.evalkit import ccp_plot, ccp_report

    _echo("ccp", {
        "clean": str(args.clean),
        "rainy": str(args.rainy),
        "mode": args.mode,
        "out": str(args.out),
        "plot": str(args.plot) if args.plot else None,
    })
    clean_names, clean_imgs = _load_image_dir(args, args.clean, "clean directory")
    _, rainy_imgs = _load_image_dir(args, args.rainy, "rainy directory")
    report = ccp_report(clean_imgs, rainy_imgs, mode=args.mode, names=clean_names)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    report.save(args.out)
    if args.plot is not None:
        args.plot.parent.mkdir(parents=True, exist_ok=True)
        ccp_plot(report, args.plot)
    means = ", ".join(f"{k}={v:.5f}" for k, v in report.pair_means.items())
    print(f"CCP similarity ({args.mode}, n={report.count}): {means}; report: {args.out}")
    return 0


def cmd_synth(args) -> int:
    raw = {}
    if args.params is not None:
        if not args.params.is_file():
            _usage_fail(args, f"params file not found: {args.params}")
        raw = _load_json(args.params, "params")
    if args.seed is not None:
        raw["seed"] = args.seed
    params = RainParams.from_dict(raw) if raw else RainParams()
    split = SplitSpec(train=args.train_count, test=args.test_count)
    if args.clean is not None:
        _require_dir(args, args.clean, "clean directory")
    _echo("synth", {
        "clean": str(args.clean) if args.clean else None,
        "out": str(args.out),
        "params": params.to_dict(),
        "split": {"train": split.train, "test": split.test},
        "size": list(args.size),
    })
    manifest = make_desk_dataset(args.clean, args.out, params, split, tuple(args.size))
    print(f"wrote {len(manifest['files'])} files under {args.out}; "
          f"baseline rainy PSNR {manifest['mean_rainy_psnr_db']:.2f} dB")
    return 0


def _parse_toggles(args, spec: str) -> dict:
    if spec == "base":
        return {}
    toggles = {}
    for part in spec.split(","):
        if "=" not in part:
            _usage_fail(args, f"bad toggle {part!r}; expected key=value or 'base'")
        key, value = part.split("=", 1)
        if key == "num_gan_constraints":
            try:
                toggles[key] = int(value)
            except ValueError:
                _usage_fail(args, f"num_gan_constraints needs an integer, got {value!r}")
        else:
            toggles[key] = value
    return toggles


def cmd_ablate(args) -> int:
    from csud.data import load_paired_testset
    from csud.evalkit import ablation_run

    config = _resolve_train_config(args)
    variants = [_parse_toggles(args, spec) for spec in args.toggles]
    data = _require_dir(args, args.data, "dataset root")
    clean_dir = _require_dir(args, data / "train" / "clean", "train/clean directory")
    rainy_dir = _require_dir(args, data / "train" / "rainy", "train/rainy directory")
    _echo("ablate", {
        "config": config.to_dict(),
        "variants": variants,
        "data": str(data),
        "out": str(args.out),
    })
    testset = load_paired_testset(data / "test")
    rows = ablation_run(config, variants, clean_dir, rainy_dir, testset, args.out)
    width = max(len(r["name"]) for r in rows)
    for rank, row in enumerate(rows, start=1):
        print(f"{rank}. {row['name']:<{width}}  "
              f"{row['psnr_db']:.2f} dB  SSIM {row['ssim']:.4f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    try:
        return args.handler(args)
    except UsageError:
        return 1
    except CsudError as exc:
        print(f"csud {args.subcommand}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"csud {args.subcommand}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
