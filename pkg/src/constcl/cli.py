"""Command-line entry point: ``constcl {train,gen-data,gen-regions,grad-check,eval}``.

Exit status is 0 on success, 1 on a validation error (bad config, bad
arguments, unreadable inputs) and 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="constcl", description="Train, check and evaluate contextualized region contrastive learning on synthetic video.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    def config_args(p, required=False):
        p.add_argument("--config", required=required, help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field by dot path (repeatable)")

    p = sub.add_parser("train", help="train a model and write logs and checkpoints")
    config_args(p)
    p.add_argument("--out", help="output directory (default: data.output_dir)")
    p.add_argument("--steps", type=int, help="stop after this many steps")
    p.add_argument("--resume", help="checkpoint directory to resume from")

    p = sub.add_parser("gen-data", help="write a synthetic sprite dataset")
    config_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-regions", help="write region boxes for every frame of a video directory")
    config_args(p)
    p.add_argument("--method", choices=["random", "slic", "fh"], required=True)
    p.add_argument("--in", dest="inp", required=True, help="directory of CSTT video tensors")
    p.add_argument("--out", required=True, help="output JSON Lines file")

    p = sub.add_parser("grad-check", help="finite-difference checks of every component")
    config_args(p)
    p.add_argument("--seeds", type=int, default=1, help="seeds for the full-objective check")

    p = sub.add_parser("eval", help="run the three probes on a checkpoint")
    config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the probe results as JSON here")
    return parser


def _limit_threads() -> None:
    value = os.environ.get("CONSTCL_THREADS")
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise ValueError(f"CONSTCL_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ValueError("CONSTCL_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)


def _dataset(config):
    from .synth import generate_dataset, load_dataset

    if config.data.path:
        return load_dataset(config.data.path)
    return generate_dataset(config.data.world, config.data.num_videos, config.data.seed)


def cmd_train(args, config) -> int:
    from .config import write_resolved
    from .train import OptimizerState, checkpoint_load, checkpoint_save, model_init, train_loop

    out = args.out or config.data.output_dir
    write_resolved(config, out)
    dataset = _dataset(config)
    if args.resume:
        model, state, _ = checkpoint_load(args.resume)
    else:
        model, state = model_init(config.backbone, config.heads), OptimizerState()
    ckpt = os.path.join(out, "checkpoint")
    with open(os.path.join(out, "train_log.jsonl"), "a" if args.resume else "w") as log:
        reports = train_loop(model, dataset, state, config.train, config.loss, config.sampling, config.regions,
                             steps=args.steps, log=log, checkpoint_dir=ckpt, extra_config=config.to_dict())
    checkpoint_save(model, state, ckpt, config.to_dict())
    if reports:
        print(f"trained to step {state.step}: L_total {reports[-1].L_total:.4f}")
    else:
        print(f"nothing to do at step {state.step}")
    return EXIT_OK


def cmd_gen_data(args, config) -> int:
    from .config import write_resolved
    from .synth import generate_dataset, save_dataset

    videos = generate_dataset(config.data.world, config.data.num_videos, config.data.seed)
    save_dataset(args.out, videos, config.data.world)
    write_resolved(config, args.out)
    print(f"wrote {len(videos)} videos to {args.out}")
    return EXIT_OK


def _video_files(directory: str) -> list[tuple[str, str]]:
    manifest = os.path.join(directory, "manifest.json")
    if os.path.exists(manifest):
        with open(manifest) as fh:
            entries = json.load(fh)["videos"]
        return [(e["name"], os.path.join(directory, e["video"])) for e in entries]
    files = sorted(glob.glob(os.path.join(directory, "*.cstt")))
    return [(os.path.splitext(os.path.basename(f))[0], f) for f in files]


def cmd_gen_regions(args, config) -> int:
    from . import cstt
    from .regions import generate_regions, region_to_json

    if not os.path.isdir(args.inp):
        raise FileNotFoundError(f"input directory not found: {args.inp}")
    files = _video_files(args.inp)
    if not files:
        raise FileNotFoundError(f"no CSTT videos in {args.inp}")
    regions_cfg = config.regions
    regions_cfg.method = args.method
    regions_cfg.validate()
    rng = np.random.default_rng(regions_cfg.seed)
    count = 0
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w") as fh:
        for name, path in files:
            video = cstt.load(path)
            if video.ndim != 4 or video.shape[-1] != 3:
                raise ValueError(f"{path}: expected a [T,H,W,3] video, got shape {list(video.shape)}")
            for t in range(video.shape[0]):
                for r in generate_regions(video[t], regions_cfg, rng, t):
                    fh.write(json.dumps(region_to_json(r, video=name)) + "\n")
                    count += 1
    print(f"wrote {count} boxes for {len(files)} videos to {args.out}")
    return EXIT_OK


GRADCHECK_TOLERANCE = 1e-4


def cmd_grad_check(args, config) -> int:
    from .gradcheck_suite import component_errors, full_objective_error

    errors = component_errors(config.train.seed)
    for s in range(1, args.seeds):
        errors[f"objective.full[seed={config.train.seed + s}]"] = full_objective_error(config.train.seed + s)
    width = max(len(k) for k in errors)
    for name, err in errors.items():
        flag = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {flag}")
    worst = max(errors.values())
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if worst < GRADCHECK_TOLERANCE else EXIT_RUNTIME


def run_probes(model, dataset, config) -> dict:
    from .synth import backbone_track_features, correspondence_accuracy, linear_probe_eval, model_features
    from .synth import toy_track_eval

    features = model_features(model)
    checksum = {k: v.data.copy() for k, v in model.parameters().items()}
    corr = correspondence_accuracy(features, dataset, config.sampling, config.eval)
    probe = linear_probe_eval(features, dataset, config.sampling, config.eval)
    track_fn = backbone_track_features(model)
    ious = []
    for video in dataset[: max(1, min(len(dataset), 8))]:
        ident, init = video.boxes[0][0]
        ious.append(toy_track_eval(track_fn, video, init, config.sampling, config.eval.track_grid))
    for k, v in model.parameters().items():
        if not np.array_equal(v.data, checksum[k]):
            raise RuntimeError(f"probe modified parameter {k}")
    return {"correspondence_accuracy": corr, "linear_probe_accuracy": probe, "toy_track_iou": float(np.mean(ious))}


def cmd_eval(args, config) -> int:
    from .config import from_dict
    from .synth import load_dataset
    from .train import checkpoint_load

    model, _, extra = checkpoint_load(args.checkpoint)
    if extra and not args.config and not args.set:
        config = from_dict(extra)
    dataset = load_dataset(args.data)
    results = run_probes(model, dataset, config)
    text = json.dumps(results, indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "gen-data": cmd_gen_data,
    "gen-regions": cmd_gen_regions,
    "grad-check": cmd_grad_check,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    from .config import ConfigError, parse_config

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        _limit_threads()
        config = parse_config(args.config, args.set)
    except (ConfigError, ValueError) as e:
        print(f"constcl {args.command}: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args, config)
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as e:
        print(f"constcl {args.command}: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - every component failure maps to one exit code
        print(f"constcl {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
