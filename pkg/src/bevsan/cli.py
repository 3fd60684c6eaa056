"""Command-line entry point: ``bevsan <command> [options]``.

Exit codes: 0 success, 1 failed check or training, 2 usage error, 3 I/O or
file-format error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np

from . import __version__
from ._io import atomic_write_text as atomic_write

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
FAULT_ENV = "BEVSAN_INJECT_FAULT"


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def write_manifest(out_path, command: str, config: dict, outputs: list[str]) -> None:
    """JSON manifest next to ``out_path``: command, resolved config, seed, version, outputs."""
    manifest = {
        "command": command,
        "config": {k: v for k, v in sorted(config.items()) if k not in ("func", "config", "command")},
        "seed": config.get("seed"),
        "version": __version__,
        "outputs": outputs,
    }
    atomic_write(f"{out_path}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment.  Dashes in keys become underscores."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _load_scenes(path):
    from .scenes import read_dataset
    return read_dataset(path)


def _pooled_histogram(path, bin_width):
    from .lidar import height_histogram
    if bin_width <= 0:
        raise UsageError("--bin-width must be positive")
    hist = height_histogram(np.zeros((0, 3)), bin_width)
    for s in _load_scenes(path):
        hist = hist + height_histogram(s.lidar.points, bin_width)
    return hist


def _scene_config(profile: str):
    from .scenes import PROFILE_PRESETS, SceneConfig
    if profile not in PROFILE_PRESETS:
        raise UsageError(f"unknown profile {profile!r}; choose from {', '.join(PROFILE_PRESETS)}")
    return SceneConfig(profiles=tuple(PROFILE_PRESETS[profile]))


def _split(scenes, val_path):
    if val_path:
        return scenes, _load_scenes(val_path)
    cut = len(scenes) - len(scenes) // 3
    return scenes[:cut], scenes[cut:]


# ----------------------------------------------------------------- commands


def cmd_gen_scenes(args) -> int:
    from .scenes import dataset_text, generate_scenes
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    config = _scene_config(args.profile)
    atomic_write(args.out, dataset_text(generate_scenes(args.count, args.seed, config)))
    write_manifest(args.out, "gen-scenes", vars(args), [str(args.out)])
    print(f"wrote {args.count} scenes to {args.out}")
    return EXIT_OK


def cmd_lidar_hist(args) -> int:
    from .lidar import histogram_csv
    from .svg import histogram_chart
    hist = _pooled_histogram(args.input, args.bin_width)
    outputs = [str(args.out_csv)]
    atomic_write(args.out_csv, histogram_csv(hist))
    if args.out_svg:
        atomic_write(args.out_svg, histogram_chart(hist.bin_edges, hist.counts, "LiDAR point heights"))
        outputs.append(str(args.out_svg))
    write_manifest(args.out_csv, "lidar-hist", vars(args), outputs)
    print(f"{hist.total} points binned, {hist.discarded} outside the height range")
    return EXIT_OK


def cmd_derive_slices(args) -> int:
    from .lidar import NUSCENES_LOCALS, EmptyHistogramError, derive_local_slices, slices_to_text
    if args.preset == "paper-nuscenes":
        slices = list(NUSCENES_LOCALS)
    else:
        if not args.input:
            raise UsageError("--preset derived needs --in DATASET")
        hist = _pooled_histogram(args.input, args.bin_width)
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                slices = derive_local_slices(hist, args.J)
        except EmptyHistogramError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_FAIL
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    text = slices_to_text(slices)
    atomic_write(args.out, text)
    write_manifest(args.out, "derive-slices", vars(args), [str(args.out)])
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite
    fault = os.environ.get(FAULT_ENV, "")
    checks = run_suite(args.suite, fault=fault in (args.suite, "all"))
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_bench_pool(args) -> int:
    from .pooling import SIZE_PRESETS, BenchConfig, pool_benchmark, BACKEND
    if args.size not in SIZE_PRESETS:
        raise UsageError(f"unknown size {args.size!r}; choose from {', '.join(SIZE_PRESETS)}")
    slices = sorted(set([1] + args.slices))
    report = pool_benchmark(BenchConfig(tuple(slices), args.size, args.runs, args.warmup, args.seed))
    outputs = []
    if args.out_csv:
        report.write_csv(args.out_csv)
        outputs.append(str(args.out_csv))
        write_manifest(args.out_csv, "bench-pool", vars(args), outputs)
    print(f"backend: {BACKEND}")
    for line in report.summary():
        print(line)
    return EXIT_OK


def _train_config(args, variant):
    from .detector import TrainConfig
    return TrainConfig(variant=variant, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                       seed=args.seed)


def cmd_train(args) -> int:
    from .detector import TrainingDivergedError, prepare, train, variant_slices, write_checkpoint
    config = _scene_config(args.profile)
    scenes = _load_scenes(args.input)
    if not scenes:
        raise UsageError(f"{args.input} holds no scenes")
    data = prepare(scenes, variant_slices(args.variant, grid=config.grid), config)
    try:
        result = train(_train_config(args, args.variant), data)
    except TrainingDivergedError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_FAIL
    write_checkpoint(result.model, args.out, {"profile": args.profile})
    write_manifest(args.out, "train", vars(args), [str(args.out)])
    print(f"loss {result.history[0]:.4f} -> {result.history[-1]:.4f} over {args.epochs} epochs")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .detector import evaluate, prepare, read_checkpoint, variant_slices
    from .svg import bar_chart
    model, meta = read_checkpoint(args.ckpt)
    config = _scene_config(meta.get("profile", args.profile))
    scenes = _load_scenes(args.input)
    data = prepare(scenes, variant_slices(model.variant, grid=config.grid), config)
    report = evaluate(model, data, config.grid, config.class_names)
    lines = ["class,score,tp,fp,fn"]
    for name, score, (tp, fp, fn) in zip(report.class_names, report.scores, report.counts):
        lines.append(f"{name},{score!r},{tp},{fp},{fn}")
        print(f"{name}: F1 {score:.4f} (tp {tp}, fp {fp}, fn {fn})")
    print(f"mean F1 {report.mean:.4f}")
    outputs = []
    if args.out_csv:
        atomic_write(args.out_csv, "\n".join(lines) + "\n")
        outputs.append(str(args.out_csv))
    if args.out_svg:
        atomic_write(args.out_svg, bar_chart(report.class_names, {model.variant: report.scores},
                                             title="Per-class F1", y_label="F1"))
        outputs.append(str(args.out_svg))
    if outputs:
        write_manifest(outputs[0], "eval", vars(args), outputs)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .detector import TrainConfig, TrainingDivergedError, VARIANTS, ablation_csv, run_ablation, summarize
    from .svg import bar_chart
    unknown = [v for v in args.variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {', '.join(VARIANTS)}")
    config = _scene_config(args.profile)
    train_scenes, val_scenes = _split(_load_scenes(args.input), args.val_input)
    if not train_scenes or not val_scenes:
        raise UsageError("need at least one training and one validation scene")
    base = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)

    def progress(variant, seed, report):
        print(f"{variant} seed {seed}: " + " ".join(f"{n}={s:.4f}" for n, s in zip(report.class_names, report.scores)),
              flush=True)

    try:
        rows = run_ablation(args.variants, args.seeds, train_scenes, val_scenes, base, config, progress=progress)
    except TrainingDivergedError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_FAIL
    atomic_write(args.out_csv, ablation_csv(rows))
    outputs = [str(args.out_csv)]
    summary = summarize(rows)
    for v, (m, s) in summary.items():
        print(f"{v}: mean F1 {m:.4f} +- {s:.4f}")
    if args.out_svg:
        names = config.class_names
        per_class = {n: [float(np.mean([r.score for r in rows if r.variant == v and r.class_name == n]))
                         for v in args.variants] for n in names}
        atomic_write(args.out_svg, bar_chart(list(args.variants), per_class, title="Ablation: per-class F1",
                                             y_label="F1"))
        outputs.append(str(args.out_svg))
    write_manifest(args.out_csv, "ablate", vars(args), outputs)
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevsan", description="Height-sliced BEV pooling toolkit.")
    p.add_argument("--version", action="version", version=f"bevsan {__version__}")
    p.add_argument("--config", help="key = value file overriding defaults")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-scenes", cmd_gen_scenes, "generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=200)
    sp.add_argument("--profile", default="default")

    sp = add("lidar-hist", cmd_lidar_hist, "height histogram of the dataset's LiDAR points")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--bin-width", type=float, default=0.1)
    sp.add_argument("--out-csv", required=True)
    sp.add_argument("--out-svg")

    sp = add("derive-slices", cmd_derive_slices, "local slice bounds from a preset or the data")
    sp.add_argument("--in", dest="input")
    sp.add_argument("--J", type=int, default=6)
    sp.add_argument("--bin-width", type=float, default=0.1)
    sp.add_argument("--preset", choices=("paper-nuscenes", "derived"), default="derived")
    sp.add_argument("--out", required=True)

    sp = add("verify", cmd_verify, "run self-check suites")
    sp.add_argument("--suite", choices=("gradients", "pooling", "geometry", "all"), default="all")

    sp = add("bench-pool", cmd_bench_pool, "time fused against repeated single-slice pooling")
    sp.add_argument("--slices", type=_int_list, default=[9], help="comma-separated slice counts")
    sp.add_argument("--size", default="full")
    sp.add_argument("--runs", type=int, default=20)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--out-csv")

    for name, func, help_ in (("train", cmd_train, "train one variant"),):
        sp = add(name, func, help_)
        sp.add_argument("--in", dest="input", required=True)
        sp.add_argument("--variant", default="full-SAN")
        sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out-csv")
    sp.add_argument("--out-svg")

    sp = add("ablate", cmd_ablate, "train and evaluate variants across seeds")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--val-in", dest="val_input", help="validation dataset (default: last third of --in)")
    sp.add_argument("--variants", type=_str_list, default=["baseline-flat", "local-only", "global-only", "full-SAN"])
    sp.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    sp.add_argument("--out-csv", required=True)
    sp.add_argument("--out-svg")

    for name in ("train", "eval", "ablate"):
        sp = sub.choices[name]
        sp.add_argument("--profile", default="default")
        if name != "eval":
            sp.add_argument("--epochs", type=int, default=30)
            sp.add_argument("--lr", type=float, default=5.0)
            sp.add_argument("--batch-size", type=int, default=20)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config(known.config)
    command = next((a for a in rest if not a.startswith("-")), None)
    sub = parser._subparsers._group_actions[0].choices.get(command) if command else None
    if sub is None:
        return
    dests = {a.dest for a in sub._actions}
    unknown = sorted(set(values) - dests)
    if unknown:
        raise UsageError(f"config keys not understood by {command}: {', '.join(unknown)}")
    # string defaults are run through each option's type converter by argparse
    sub.set_defaults(**values)
    for a in sub._actions:
        if a.dest in values:
            a.required = False


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # argparse
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    except (OSError, ValueError) as e:
        from .detector import CheckpointFormatError
        from .scenes import DatasetFormatError
        if isinstance(e, (OSError, DatasetFormatError, CheckpointFormatError)):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_IO
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
