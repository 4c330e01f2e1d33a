"""Command-line entry point: ``funnet <command> ...``.

Exit codes: 0 success, 2 usage, 3 I/O or dataset, 4 dimension,
5 divergence, 6 specification or configuration.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from funnet.arch import LefunFront, LefunModel, from_text, instantiate, preset
from funnet.arch.accounting import count_flops, count_params, output_grid, stage_costs
from funnet.compression import PAPER_SPECS, compression_sweep, sweep_csv
from funnet.data import (
    IMAGE_SUFFIXES,
    Dataset,
    FeatureCache,
    dct_features,
    load_folder_dataset,
    synth_freq_dataset,
)
from funnet.dct_codec import (
    FULL_SPEC,
    PLANES,
    CompressionSpec,
    plane_energy,
    preprocess,
    write_fdt,
)
from funnet.errors import (
    ConfigError,
    DatasetError,
    DimensionError,
    DivergenceError,
    SpecError,
)
from funnet.imageio import read_image
from funnet.train_eval import (
    TrainConfig,
    evaluate,
    export_filters,
    run_lefun,
    train,
)
from funnet import weights as wio

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIMENSION = 4
EXIT_DIVERGENCE = 5
EXIT_CONFIG = 6


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _keep(text: str | None, default: CompressionSpec | None) -> CompressionSpec | None:
    # parsed inside commands so a bad spec exits as a spec error, not a usage error
    return default if text is None else CompressionSpec.parse(text)


def _load_arch(name: str, num_classes: int | None = None):
    path = Path(name)
    if path.is_file():
        spec = from_text(path.read_text())
        return spec.with_classes(num_classes) if num_classes else spec
    try:
        return preset(name, num_classes)
    except SpecError as exc:
        raise UsageError(str(exc)) from None


def _synth(args, grid: int, split: str, n: int) -> Dataset:
    size = args.image_size or 8 * grid
    return synth_freq_dataset(n, args.classes, seed=args.data_seed, size=size, split=split)


def _datasets(args, grid: int, need_train: bool = True) -> tuple[Dataset | None, Dataset | None]:
    """(train, test) from ``--data synth`` or a folder with train/ and test/."""
    if args.data == "synth":
        tr = _synth(args, grid, "train", args.train_size) if need_train else None
        return tr, _synth(args, grid, "test", args.test_size)
    root = Path(args.data)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    test_dir = root / "test" if (root / "test").is_dir() else None
    if need_train:
        if not (root / "train").is_dir():
            raise DatasetError(f"{root}: expected a train/ subdirectory")
        tr = load_folder_dataset(root / "train", "train")
        te = load_folder_dataset(test_dir, "test") if test_dir else None
        return tr, te
    return None, load_folder_dataset(test_dir or root, "test")


def _fit_grid(spec, ds: Dataset):
    h, w = ds.image_size
    if (h // 8, w // 8) != spec.input[:2]:
        spec = spec.with_grid(h // 8, w // 8)
    return spec


def _cache(args) -> FeatureCache:
    return FeatureCache(args.cache) if getattr(args, "cache", None) else FeatureCache()


def _body(model):
    return model.body if isinstance(model, LefunModel) else model


def _check_classes(model, ds: Dataset) -> None:
    n = _body(model).spec.num_classes
    if n != ds.num_classes:
        raise ConfigError(f"model predicts {n} classes, dataset has {ds.num_classes}")


def _out(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    spec = _keep(args.keep, FULL_SPEC)
    src = Path(args.input)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"{src}: no images")
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        targets = [(f, out_dir / (f.stem + ".fdt")) for f in files]
    else:
        if not src.is_file():
            raise FileNotFoundError(f"{src}: no such file")
        targets = [(src, Path(args.out))]
    for image_path, out_path in targets:
        try:
            img = read_image(image_path)
        except ValueError as exc:
            raise OSError(f"{image_path}: {exc}") from exc
        x = preprocess(img, spec)
        write_fdt(out_path, x)
        energy = plane_energy(x)
        c, h, w = x.data.shape
        _out(f"{out_path}: shape={h}x{w}x{c} keep={spec} "
             + " ".join(f"energy_{p}={energy[p]:.6g}" for p in PLANES))
    return 0


def cmd_inspect(args) -> int:
    spec = _load_arch(args.arch)
    params, macs = count_params(spec), count_flops(spec)
    grids = stage_costs(spec)
    rows = []
    for stage, (cost, h, w) in zip(spec.stages, grids):
        b = stage.block
        rows.append({
            "operator": b.operator, "kernel": b.kernel, "stride": b.stride,
            "width": b.out_channels, "repeats": stage.repeats, "expansion": b.expansion,
            "se_ratio": b.se_ratio, "inner": b.inner, "output": [h, w],
            "params": cost.params, "macs": cost.macs,
        })
    if args.json:
        _out(json.dumps({
            "name": spec.name, "input": list(spec.input), "stages": rows,
            "head_width": spec.head_width, "num_classes": spec.num_classes,
            "depth": spec.depth, "output_grid": list(output_grid(spec)),
            "params": params, "macs": macs,
        }, indent=2))
        return 0
    gh, gw, c = spec.input
    lines = [f"{spec.name}: input {gh}x{gw}x{c}, {spec.depth} blocks, activation {spec.activation}",
             f"{'operator':<11}{'k':>3}{'s':>3}{'width':>7}{'n':>4}{'out':>8}{'params':>11}{'MACs':>14}"]
    for r in rows:
        out = f"{r['output'][0]}x{r['output'][1]}"
        lines.append(f"{r['operator']:<11}{r['kernel']:>3}{r['stride']:>3}{r['width']:>7}"
                     f"{r['repeats']:>4}{out:>8}{r['params']:>11,}{r['macs']:>14,}")
    lines.append(f"head {spec.head_width or 'none'}, classes {spec.num_classes}")
    lines.append(f"params {params:,} ({params / 1e6:.2f}M)")
    lines.append(f"MACs {macs:,} ({macs / 1e6:.1f}M, reported as FLOPs)")
    _out("\n".join(lines))
    return 0


def _config(args) -> TrainConfig:
    overrides = {
        "epochs": args.epochs, "seed": args.seed, "hflip": args.hflip,
        "target_accuracy": args.target,
    }
    if args.lr0 is not None:
        overrides["lr0"] = args.lr0
    if args.bn_momentum is not None:
        overrides["bn_momentum"] = args.bn_momentum
    if args.drop is not None:
        overrides["stochastic_depth_max"] = args.drop
    if args.recipe == "desk":
        return TrainConfig.desk(args.batch, **overrides)
    return TrainConfig.for_arch(args.arch, batch_size=args.batch, **overrides)


def _logger(path: Path | None):
    handle = path.open("w") if path else None

    def log(line: str) -> None:
        _out(line)
        if handle:
            handle.write(line + "\n")
            handle.flush()

    return log, handle


def cmd_train(args) -> int:
    cfg = _config(args)
    base = _load_arch(args.arch)
    tr, te = _datasets(args, base.input[0])
    spec = _fit_grid(base.with_classes(tr.num_classes), tr)
    model = instantiate(spec, args.seed)
    log, handle = _logger(Path(args.log) if args.log else None)
    try:
        result = train(model, tr, cfg, te, _cache(args), log=log)
    finally:
        if handle:
            handle.close()
    if args.save:
        wio.save(args.save, result.model, FULL_SPEC, args.seed)
    if te is not None:
        _out(f"final test_top1={evaluate(result.model, te, cache=_cache(args)):.4f}")
    return 0


def cmd_lefun(args) -> int:
    cfg = _config(args)
    loaded = wio.load(args.base).model
    if isinstance(loaded, LefunModel):
        raise ConfigError("the base model already has a learnable front")
    tr, te = _datasets(args, loaded.spec.input[0])
    if te is None:
        raise DatasetError("LeFUN runs need a test split")
    _check_classes(loaded, tr)
    log, handle = _logger(Path(args.log) if args.log else None)
    try:
        result, acc = run_lefun(args.mode, loaded, tr, cfg, te, init=args.init,
                                per_plane=args.per_plane,
                                warm_start=True if args.warm_start else None, log=log)
    finally:
        if handle:
            handle.close()
    _out(f"static_top1={evaluate(loaded, te):.4f}")
    _out(f"lefun_{args.mode}_top1={acc:.4f}")
    if args.save:
        wio.save(args.save, result.model, FULL_SPEC, args.seed)
    return 0


def _eval_setup(args):
    wf = wio.load(args.weights)
    _, te = _datasets(args, _body(wf.model).spec.input[0], need_train=False)
    _check_classes(wf.model, te)
    return wf, te


def cmd_eval(args) -> int:
    wf, te = _eval_setup(args)
    spec = _keep(args.keep, wf.compression)
    if not isinstance(wf.model, LefunModel) and wf.model.in_channels != 192:
        raise ConfigError("eval needs a model taking all 192 channels")
    acc = evaluate(wf.model, te, spec, _cache(args))
    _out(f"keep={spec} channels={spec.channels} top1={acc:.4f}")
    return 0


def cmd_sweep(args) -> int:
    wf, te = _eval_setup(args)
    if isinstance(wf.model, LefunModel):
        raise ConfigError("sweeps apply to DCT-input models")
    specs = PAPER_SPECS if not args.specs else tuple(
        CompressionSpec.parse(s) for s in args.specs.split(";") if s.strip())
    feats = dct_features(te, FULL_SPEC, _cache(args))
    text = sweep_csv(compression_sweep(wf.model, feats, te.labels, specs))
    _out(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_export_filters(args) -> int:
    if args.static_dct:
        front = LefunFront(np.random.default_rng(0), init="dct")
    else:
        model = wio.load(args.weights).model
        if not isinstance(model, LefunModel):
            raise ConfigError(f"{args.weights}: model has no learnable front")
        front = model.front
    paths = export_filters(front, args.out)
    _out(f"wrote {len(paths)} filters to {args.out}")
    return 0


def cmd_bench(args) -> int:
    spec = _load_arch(args.arch)
    model = instantiate(spec, 0).eval()
    gh, gw, c = spec.input
    x = np.random.default_rng(0).normal(size=(args.batch, c, gh, gw)).astype(np.float32)
    from funnet.nn.tensor import no_grad

    times = []
    with no_grad():
        model(x)  # warm-up
        for _ in range(args.iters):
            t = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t)
    med = statistics.median(times)
    _out(f"arch={spec.name} depth={spec.depth} batch={args.batch} iters={args.iters} "
         f"median_s={med:.4f} images_per_s={args.batch / med:.2f} (local, relative only)")
    return 0


# ---------------------------------------------------------------------------
# parser


def _data_args(p, train_sizes: bool = True) -> None:
    p.add_argument("--data", default="synth",
                   help="'synth' or a folder with class subfolders (train/ and test/)")
    p.add_argument("--classes", type=int, default=4, help="synthetic classes")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=None,
                   help="synthetic image side (default: 8 x the arch grid)")
    if train_sizes:
        p.add_argument("--train-size", type=int, default=800)
    p.add_argument("--test-size", type=int, default=200)
    p.add_argument("--cache", default=None, help="directory for cached DCT features")


def _train_args(p) -> None:
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--recipe", choices=("desk", "paper"), default="desk",
                   help="desk scales lr0 to the batch and uses faster BN statistics")
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--bn-momentum", type=float, default=None)
    p.add_argument("--drop", type=float, default=None, help="final stochastic-depth rate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hflip", action="store_true")
    p.add_argument("--target", type=float, default=None,
                   help="stop after the first epoch reaching this test top-1")
    p.add_argument("--log", default=None)
    p.add_argument("--save", default=None, help="weights file to write")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="funnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="images to FDT1 frequency tensors")
    p.add_argument("input")
    p.add_argument("--keep", default=None, help="Y,CB,CR keep-counts (default 64,64,64)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("inspect", help="stage table, parameters and MACs")
    p.add_argument("--arch", required=True, help="preset name or spec file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="train a DCT-input model")
    p.add_argument("--arch", required=True)
    _data_args(p)
    _train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("lefun", help="learnable-front run on a trained model")
    p.add_argument("--base", required=True, help="weights trained on static DCT inputs")
    p.add_argument("--mode", choices=("frozen", "end_to_end"), required=True)
    p.add_argument("--init", choices=("random", "dct"), default="random")
    p.add_argument("--per-plane", action="store_true")
    p.add_argument("--warm-start", action="store_true",
                   help="end_to_end: start the body from the base weights, not from scratch")
    p.set_defaults(arch="efun")
    _data_args(p)
    _train_args(p)
    p.set_defaults(func=cmd_lefun)

    p = sub.add_parser("eval", help="top-1 with optional channel masking")
    p.add_argument("--weights", required=True)
    p.add_argument("--keep", default=None, help="Y,CB,CR keep-counts")
    _data_args(p, train_sizes=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="masked accuracy over compression specs (CSV)")
    p.add_argument("--weights", required=True)
    p.add_argument("--specs", default=None, help="e.g. '64,64,64;14,5,5' (default: five specs)")
    p.add_argument("--out", default=None)
    _data_args(p, train_sizes=False)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-filters", help="8x8 front filters as PGM images")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights")
    src.add_argument("--static-dct", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_filters)

    p = sub.add_parser("bench", help="local forward throughput")
    p.add_argument("--arch", required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--iters", type=int, default=5)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        code, msg = EXIT_USAGE, str(exc)
    except DivergenceError as exc:
        code, msg = EXIT_DIVERGENCE, f"diverged: {exc}"
    except DimensionError as exc:
        code, msg = EXIT_DIMENSION, str(exc)
    except (SpecError, ConfigError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except (DatasetError, OSError, ValueError) as exc:
        code, msg = EXIT_IO, str(exc)
    sys.stderr.write(f"funnet {args.command}: {msg}\n")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
