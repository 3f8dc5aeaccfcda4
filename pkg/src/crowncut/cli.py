"""``crowncut`` command line: one binary, one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .container import FORMAT_VERSION
from .exceptions import CrowncutError, MissingFile
from .harness import REPORT_SCHEMA_VERSION

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; usage errors here are 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(n):
    def parse(text):
        try:
            vals = tuple(float(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        return vals
    return parse


def _ints(text):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed (default 0)")
    common.add_argument("--threads", type=_positive, default=argparse.SUPPRESS,
                        help="worker threads for batch work (default 1)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output file or directory")

    p = _Parser(prog="crowncut", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"crowncut {__version__} (report schema v{REPORT_SCHEMA_VERSION}, "
                           f"model format v{FORMAT_VERSION})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive, default=1)
    p.add_argument("--out", default=None)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, parents=[common])

    s = add("synth", "generate a synthetic scene dataset")
    s.add_argument("--count", type=_positive, default=85)
    s.add_argument("--size", type=_positive, default=256, help="scene width and height in pixels")
    s.add_argument("--trees", type=int, default=5)
    s.add_argument("--format", choices=("pgm", "tif"), default="pgm")
    s.add_argument("--prefix", default="scene")
    s.set_defaults(func=cmd_synth)

    s = add("align", "register the four bands of every scene and write aligned bands")
    s.add_argument("--in", dest="input", required=True, help="directory of <scene>_<BAND> files")
    s.set_defaults(func=cmd_align)

    s = add("groundtruth", "label every scene with the classical mask generator")
    s.add_argument("--in", dest="input", required=True, help="directory of <scene>_<BAND> files")
    s.add_argument("--rp", type=_floats(4), default=(1.29, 1.00, 3.13, 2.76), help="GRE,RED,REG,NIR")
    s.add_argument("--k", type=_positive, default=5, help="median filter radius")
    s.add_argument("--rmin", type=_positive, default=5, help="min filter radius")
    s.add_argument("--theta-m", type=float, default=0.15)
    s.add_argument("--theta-bg", type=float, default=0.5)
    s.add_argument("--red-floor", type=float, default=0.01)
    s.set_defaults(func=cmd_groundtruth)

    s = add("train", "train a U-Net on groundtruth output")
    s.add_argument("--in", dest="input", required=True, help="groundtruth output directory")
    s.add_argument("--band", choices=("GRE",), default=None, help="train the one-band GRE model")
    s.add_argument("--size", type=_positive, default=256, help="network input size")
    s.add_argument("--depth", type=_positive, default=4)
    s.add_argument("--base", type=_positive, default=64, help="base channel count")
    s.add_argument("--epochs", type=_positive, default=70)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch", type=_positive, default=4)
    s.add_argument("--split", type=float, default=0.8)
    s.set_defaults(func=cmd_train)

    s = add("quantize", "calibrate and quantize a float model to int8")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True, help="groundtruth output directory (calibration images)")
    s.add_argument("--calib", type=_positive, default=10, help="number of calibration images")
    s.set_defaults(func=cmd_quantize)

    s = add("infer", "predict a mask with a float (.unet) or quantized (.qunet) model")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True,
                   help="band file (one-band), <scene>_rgb.pgm, or a directory of band files")
    s.add_argument("--band", choices=("GRE",), default=None)
    s.set_defaults(func=cmd_infer)

    s = add("eval", "score a model against groundtruth masks")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True, help="groundtruth output directory")
    s.set_defaults(func=cmd_eval)

    s = add("bench", "per-stage latency of one or more models on one scene")
    s.add_argument("--model", action="append", required=True, help="repeatable")
    s.add_argument("--in", dest="input", required=True, help="directory holding one scene's band files")
    s.add_argument("--reps", type=int, default=5)
    s.set_defaults(func=cmd_bench)

    s = add("sweep", "accuracy versus training-set size")
    s.add_argument("--in", dest="input", required=True, help="groundtruth output directory")
    s.add_argument("--band", choices=("GRE",), default=None)
    s.add_argument("--sizes", type=_ints, default=[8, 16, 32, 64])
    s.add_argument("--repeats", type=_positive, default=5)
    s.add_argument("--size", type=_positive, default=64, help="network input size")
    s.add_argument("--depth", type=_positive, default=4)
    s.add_argument("--base", type=_positive, default=16)
    s.add_argument("--epochs", type=_positive, default=70)
    s.add_argument("--split", type=float, default=0.8)
    s.set_defaults(func=cmd_sweep)
    return p


# -- helpers ------------------------------------------------------------------


def _out_dir(args, default: str) -> Path:
    d = Path(args.out or default)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _out_file(args, default: str) -> Path:
    f = Path(args.out or default)
    f.parent.mkdir(parents=True, exist_ok=True)
    return f


def _scenes(directory):
    from .raster_io import find_scenes
    if not Path(directory).is_dir():
        raise MissingFile(f"{directory} is not a directory")
    scenes = find_scenes(directory)
    if not scenes:
        raise CrowncutError(f"no <scene>_<BAND>.pgm|tif files under {directory}")
    return scenes


def _map_scenes(fn, items, threads):
    # results come back in input order whatever the thread count
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _setup(args) -> str:
    return "oneband" if getattr(args, "band", None) == "GRE" else "multispectral"


def _load_any(path):
    """``(model, quantized)`` chosen by file extension."""
    path = Path(path)
    if path.suffix == ".qunet":
        from .quant import load_qmodel
        return load_qmodel(path), True
    if path.suffix == ".unet":
        from .unet import load_model
        return load_model(path), False
    raise UsageError(f"{path}: model files end in .unet (float) or .qunet (quantized)")


def _predict(model, quantized, x, threads):
    if quantized:
        from .quant import int_predict
        return int_predict(model, x, threads)
    from .unet import forward
    lg = forward(model, x)
    return (lg[:, 1] > lg[:, 0]).astype(np.uint8)


# -- subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth import SceneSpec, generate_dataset
    out = _out_dir(args, "synth")
    spec = SceneSpec(width=args.size, height=args.size, tree_count=args.trees)
    generate_dataset(spec, args.count, args.seed, out_dir=out, prefix=args.prefix, fmt=args.format)
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_align(args) -> int:
    from .raster_io import load_scene, save_raster
    from .registration import align_frame
    scenes = _scenes(args.input)
    out = _out_dir(args, "aligned")

    def one(item):
        name, paths = item
        frame, chain = align_frame(load_scene(paths))
        for band, grid in frame.bands.items():
            save_raster(grid, out / f"{name}_{band.name}.pgm")
        (out / f"{name}_chain.json").write_text(chain.to_json())
        return name

    names = _map_scenes(one, sorted(scenes.items()), args.threads)
    print(f"aligned {len(names)} scenes into {out}")
    return EXIT_OK


def cmd_groundtruth(args) -> int:
    from .groundtruth import GroundTruthParams, ReferencePoint, generate_groundtruth
    from .raster_io import load_scene, save_mask, save_rgb
    try:
        params = GroundTruthParams(ReferencePoint(tuple(args.rp)), args.rmin, args.k, args.theta_m, args.theta_bg,
                                   args.red_floor)
    except ValueError as e:
        raise UsageError(str(e))
    scenes = _scenes(args.input)
    out = _out_dir(args, "groundtruth")

    def one(item):
        name, paths = item
        gt = generate_groundtruth(load_scene(paths), params)
        save_mask(gt.mask, out / f"{name}_mask.pgm")
        save_rgb(gt.pseudo_rgb.data, out / f"{name}_rgb.pgm")
        doc = {
            "scene": name,
            "parameters": {"rp": list(params.rp.rp), "k": params.k, "rmin": params.r_min,
                           "theta_m": params.theta_m, "theta_bg": params.theta_bg,
                           "red_floor": params.red_floor, "elevation": params.elevation},
            "alignment": json.loads(gt.chain.to_json()),
            "tree_fraction": float(gt.mask.labels.mean()),
        }
        (out / f"{name}_gt.json").write_text(json.dumps(doc, indent=2))
        return name

    names = _map_scenes(one, sorted(scenes.items()), args.threads)
    print(f"labelled {len(names)} scenes into {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from threadpoolctl import threadpool_limits
    from .dataset import load_groundtruth_dir
    from .harness import write_json
    from .unet import TrainingConfig, UNetConfig, save_model, train
    data = load_groundtruth_dir(args.input, args.size, _setup(args))
    try:
        ucfg = UNetConfig(in_channels=data.images.shape[1], depth=args.depth, base_channels=args.base,
                          input_size=args.size)
        tcfg = TrainingConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch,
                              split_ratio=args.split, rng_seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e))
    out = _out_file(args, f"{_setup(args)}.unet")
    if out.suffix != ".unet":
        raise UsageError("train --out must end in .unet")

    def report(rec):
        print(f"epoch {rec.epoch:3d}  loss {rec.train_loss:.5f}  test acc {rec.test_accuracy:.4f}", flush=True)

    # single-threaded BLAS keeps the float reductions in a fixed order
    with threadpool_limits(limits=1):
        result = train(data, tcfg, ucfg, callback=report)
    save_model(result.model, out, extra={"setup": _setup(args), "train_scenes":
                                         [data.names[i] for i in result.train_idx]})
    write_json(out.with_suffix(".trace.json"), {
        "setup": _setup(args),
        "trace": [r._asdict() for r in result.trace],
        "train_scenes": [data.names[i] for i in result.train_idx],
        "test_scenes": [data.names[i] for i in result.test_idx],
    })
    print(f"saved {out}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    from .dataset import load_groundtruth_dir
    from .quant import calibrate, quantize_model, save_qmodel
    model, quantized = _load_any(args.model)
    if quantized:
        raise UsageError("quantize expects a float .unet model")
    setup = "oneband" if model.config.in_channels == 1 else "multispectral"
    data = load_groundtruth_dir(args.input, model.config.input_size, setup)
    qmodel = quantize_model(model, calibrate(model, data.images, n=min(args.calib, len(data))))
    out = _out_file(args, str(Path(args.model).with_suffix(".qunet")))
    if out.suffix != ".qunet":
        raise UsageError("quantize --out must end in .qunet")
    save_qmodel(qmodel, out)
    print(f"saved {out} ({qmodel.payload_bytes()} payload bytes)")
    return EXIT_OK


def _infer_inputs(args, model):
    """``[(name, network input, original (H, W))]`` for the infer command."""
    from .dataset import multispectral_input, oneband_input, resample
    from .imaging import BandId, PseudoRgbImage
    from .raster_io import load_band, load_rgb, load_scene
    from .registration import align_frame, make_pseudo_rgb

    path = Path(args.input)
    size, ch = model.config.input_size, model.config.in_channels
    if args.band == "GRE" and ch != 1:
        raise UsageError("--band GRE needs a one-band model")
    if ch == 1:
        if path.is_dir():
            files = [(n, p[BandId.GRE]) for n, p in sorted(_scenes(path).items()) if BandId.GRE in p]
        else:
            files = [(path.name.rsplit(".", 1)[0], path)]
        out = []
        for name, f in files:
            band = load_band(f, BandId.GRE)
            out.append((name, oneband_input(band, size), band.shape))
        return out
    if path.is_dir():
        out = []
        for name, paths in sorted(_scenes(path).items()):
            frame, _ = align_frame(load_scene(paths))
            rgb = make_pseudo_rgb(frame)
            out.append((name, multispectral_input(rgb, size), frame.shape))
        return out
    rgb = load_rgb(path)
    name = path.name[:-len("_rgb.pgm")] if path.name.endswith("_rgb.pgm") else path.stem
    return [(name, resample(rgb, size, 1).transpose(2, 0, 1).astype(np.float32), rgb.shape[:2])]


def cmd_infer(args) -> int:
    from .imaging import SegmentationMask
    from .raster_io import save_mask
    model, quantized = _load_any(args.model)
    items = _infer_inputs(args, model)
    out = _out_dir(args, "predictions")
    for name, x, shape in items:
        pred = _predict(model, quantized, x[None], args.threads)[0]
        full = _resize_nearest(pred, *shape)
        save_mask(SegmentationMask(full.astype(np.uint8)), out / f"{name}_pred.pgm")
        print(f"{name}: {out / (name + '_pred.pgm')}")
    return EXIT_OK


def _resize_nearest(mask, h, w):
    s = mask.shape[0]
    yi = np.clip(np.floor((np.arange(h) + 0.5) * s / h).astype(np.intp), 0, s - 1)
    xi = np.clip(np.floor((np.arange(w) + 0.5) * s / w).astype(np.intp), 0, s - 1)
    return mask[np.ix_(yi, xi)]


def cmd_eval(args) -> int:
    from .dataset import load_groundtruth_dir
    from .harness import ConfusionMatrix, eval_rows, evaluate, scores, write_csv, write_json
    model, quantized = _load_any(args.model)
    setup = "oneband" if model.config.in_channels == 1 else "multispectral"
    data = load_groundtruth_dir(args.input, model.config.input_size, setup)
    evals = []
    for i in range(len(data)):
        pred = _predict(model, quantized, data.images[i:i + 1], args.threads)[0]
        evals.append(evaluate(pred, data.masks[i]))
    total = scores(sum((e.confusion for e in evals), ConfusionMatrix(0, 0, 0, 0)))
    out = _out_dir(args, "reports")
    write_csv(out / "eval.csv", "eval", eval_rows(data.names, evals))
    write_json(out / "eval.json", {"model": str(args.model), "path": "quantized" if quantized else "float",
                                   "scenes": len(evals), "confusion": total.confusion._asdict(),
                                   "accuracy": total.accuracy, "iou": total.iou})
    print(f"accuracy {total.accuracy:.4f}  iou {total.iou:.4f}  ({len(evals)} scenes)")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .harness import bench_rows, bench_scene, write_csv, write_json
    if args.reps < 3:
        raise UsageError("--reps must be >= 3")
    scenes = _scenes(args.input)
    name, files = sorted(scenes.items())[0]
    models = {}
    for m in args.model:
        models[Path(m).name] = _load_any(m)[0]
    sizes = {m.config.input_size for m in models.values()}
    if len(sizes) != 1:
        raise UsageError("bench models must share one input size")
    records = bench_scene(files, models, sizes.pop(), args.reps)
    out = _out_dir(args, "reports")
    write_csv(out / "bench.csv", "bench", bench_rows(records))
    write_json(out / "bench.json", {"scene": name, "records": records})
    for r in records:
        stages = "  ".join(f"{k} {v:.2f} ms" for k, v in r.stages.items())
        print(f"{r.model} [{r.path}]  {stages}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from threadpoolctl import threadpool_limits
    from .dataset import load_groundtruth_dir
    from .harness import dataset_size_sweep, sweep_means, write_csv, write_json
    from .unet import TrainingConfig, UNetConfig, split_indices
    data = load_groundtruth_dir(args.input, args.size, _setup(args))
    train_idx, test_idx = split_indices(len(data), args.split, args.seed)
    pool, held = data.subset(train_idx), data.subset(test_idx)
    try:
        ucfg = UNetConfig(in_channels=data.images.shape[1], depth=args.depth, base_channels=args.base,
                          input_size=args.size)
        tcfg = TrainingConfig(epochs=args.epochs)
        with threadpool_limits(limits=1):
            rows = dataset_size_sweep(pool, held, args.sizes, args.repeats, ucfg, tcfg, args.seed,
                                      callback=lambda r: print(f"size {r.train_size:3d} rep {r.repeat}  "
                                                               f"acc {r.accuracy:.4f}", flush=True))
    except ValueError as e:
        if isinstance(e, CrowncutError):
            raise
        raise UsageError(str(e))
    out = _out_dir(args, "reports")
    write_csv(out / "sweep.csv", "sweep", [r._asdict() for r in rows])
    write_json(out / "sweep.json", {"setup": _setup(args), "epochs": args.epochs, "rows": rows,
                                    "means": {str(k): v for k, v in sweep_means(rows).items()}})
    return EXIT_OK


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"crowncut {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CrowncutError, OSError, ValueError) as e:
        print(f"crowncut {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
