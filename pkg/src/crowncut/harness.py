"""Metrics, timing, dataset-size sweeps and report files."""
from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .exceptions import ShapeMismatch
from .imaging import BandId, SegmentationMask

REPORT_SCHEMA_VERSION = 1
CSV_SCHEMAS = {
    "bench": ("model", "path", "stage", "ms_median", "reps"),
    "sweep": ("train_size", "repeat", "accuracy"),
    "eval": ("scene", "tn", "fp", "fn", "tp", "accuracy", "iou"),
}


# -- metrics ----------------------------------------------------------------


class ConfusionMatrix(NamedTuple):
    """Rows are the true class, columns the predicted class."""

    tn: int
    fp: int
    fn: int
    tp: int

    def as_array(self) -> np.ndarray:
        return np.array([[self.tn, self.fp], [self.fn, self.tp]], dtype=np.int64)

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def __add__(self, other):
        return ConfusionMatrix(*(a + b for a, b in zip(self, other)))


class Evaluation(NamedTuple):
    confusion: ConfusionMatrix
    accuracy: float
    iou: float


def _labels(m) -> np.ndarray:
    return np.asarray(m.labels if isinstance(m, SegmentationMask) else m).astype(bool)


def confusion_matrix(pred, truth) -> ConfusionMatrix:
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} and truth {t.shape} differ in shape")
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    return ConfusionMatrix(int(p.size) - tp - fp - fn, fp, fn, tp)


def scores(cm: ConfusionMatrix) -> Evaluation:
    acc = (cm.tp + cm.tn) / cm.total if cm.total else 1.0
    den = cm.tp + cm.fp + cm.fn
    return Evaluation(cm, acc, cm.tp / den if den else 1.0)


def evaluate(pred, truth) -> Evaluation:
    """Confusion matrix, pixel accuracy and IoU (1 when nothing is positive)."""
    return scores(confusion_matrix(pred, truth))


# -- timing -----------------------------------------------------------------


@dataclass
class BenchRecord:
    model: str
    path: str                       # "float" or "quantized"
    stages: dict = field(default_factory=dict)    # stage -> median ms
    samples: dict = field(default_factory=dict)   # stage -> raw ms samples
    reps: int = 0
    accuracy: float | None = None

    def __post_init__(self):
        if any(v < 0 for v in self.stages.values()):
            raise ValueError("stage times must be >= 0")


def measure(fn: Callable[[], object], reps: int = 5, warmup: int = 1) -> list[float]:
    """Wall-clock milliseconds of ``reps`` calls after ``warmup`` discarded calls."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1e3)
    return out


def time_inference(model, inputs, reps: int = 5, label: str | None = None) -> BenchRecord:
    """Median forward time over ``reps`` runs, single-threaded, first run discarded.

    ``model`` is a :class:`~crowncut.unet.UNetModel` or a
    :class:`~crowncut.quant.QuantizedUNet`; ``inputs`` are already decoded and
    resampled network inputs.
    """
    from .quant import QuantizedUNet, int_forward
    from .unet import forward

    if reps < 3:
        raise ValueError("reps must be >= 3")
    quantized = isinstance(model, QuantizedUNet)
    x = np.asarray(inputs, dtype=np.float32)
    run = (lambda: int_forward(model, x, 1)) if quantized else (lambda: forward(model, x))
    with threadpool_limits(limits=1):
        samples = measure(run, reps)
    path = "quantized" if quantized else "float"
    return BenchRecord(label or path, path, {"inference": statistics.median(samples)}, {"inference": samples}, reps)


# -- bench: per-stage pipeline timing ----------------------------------------


def bench_scene(scene_files: Mapping[BandId, Path], models: Mapping[str, object], size: int,
                reps: int = 5) -> list[BenchRecord]:
    """Per-stage timing of both setups on one scene.

    ``models`` maps a label to a float or quantized model; a model's input
    channel count selects the setup (1 = one-band GRE, 3 = multispectral).
    Stages: ``io`` (decode band files), ``preprocess`` (alignment and
    composite for multispectral; scaling only for one-band; both resample to
    the network size) and ``inference``.
    """
    from .dataset import multispectral_input, oneband_input
    from .raster_io import load_band
    from .registration import align_frame, make_pseudo_rgb

    def io_all():
        return {b: load_band(scene_files[b], b) for b in scene_files}

    def io_one():
        return {BandId.GRE: load_band(scene_files[BandId.GRE], BandId.GRE)}

    raw = io_all()

    def pre_ms():
        frame, _ = align_frame(raw)
        return multispectral_input(make_pseudo_rgb(frame), size)

    def pre_one():
        return oneband_input(raw[BandId.GRE], size)

    records = []
    with threadpool_limits(limits=1):
        stage_fns = {1: (io_one, pre_one), 3: (io_all, pre_ms)}
        cache: dict = {}
        for label, model in models.items():
            ch = model.config.in_channels
            if ch not in stage_fns:
                raise ValueError(f"no bench setup for {ch}-channel models")
            if ch not in cache:
                io_fn, pre_fn = stage_fns[ch]
                cache[ch] = (measure(io_fn, reps), measure(pre_fn, reps), pre_fn())
            io_s, pre_s, x = cache[ch]
            inf = time_inference(model, x[None], reps, label)
            samples = {"io": io_s, "preprocess": pre_s, "inference": inf.samples["inference"]}
            records.append(BenchRecord(label, inf.path, {k: statistics.median(v) for k, v in samples.items()},
                                       samples, reps))
    return records


def bench_rows(records: Sequence[BenchRecord]) -> list[dict]:
    return [{"model": r.model, "path": r.path, "stage": stage, "ms_median": ms, "reps": r.reps}
            for r in records for stage, ms in r.stages.items()]


# -- dataset-size sweep -------------------------------------------------------


class SweepRow(NamedTuple):
    train_size: int
    repeat: int
    accuracy: float


def dataset_size_sweep(pool, eval_set, sizes: Sequence[int], repeats: int = 5, unet_config=None,
                       training_config=None, seed: int = 0, callback=None) -> list[SweepRow]:
    """Train a fresh model per (size, repeat) on a seeded subset of ``pool``.

    Each run draws ``size`` pairs without replacement from the training pool
    and reports pixel accuracy on the fixed ``eval_set``.
    """
    from .unet import TrainingConfig, UNetConfig, build_model, fit_model, pixel_accuracy

    sizes = list(sizes)
    if not sizes:
        raise ValueError("sizes must be non-empty")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for s in sizes:
        if s < 1 or s > len(pool):
            raise ValueError(f"train size {s} outside 1..{len(pool)}")
    unet_config = unet_config or UNetConfig(in_channels=pool.images.shape[1], input_size=pool.images.shape[2])
    training_config = training_config or TrainingConfig()
    rows = []
    for size in sizes:
        for rep in range(repeats):
            run_seed = int(np.random.SeedSequence([seed, size, rep]).generate_state(1)[0])
            idx = np.sort(np.random.default_rng(run_seed).choice(len(pool), size, replace=False))
            model = build_model(unet_config, seed=run_seed)
            fit_model(model, pool.subset(idx), replace(training_config, rng_seed=run_seed))
            row = SweepRow(size, rep, pixel_accuracy(model, eval_set))
            rows.append(row)
            if callback is not None:
                callback(row)
    return rows


def sweep_means(rows: Sequence[SweepRow]) -> dict:
    out: dict = {}
    for r in rows:
        out.setdefault(r.train_size, []).append(r.accuracy)
    return {k: float(np.mean(v)) for k, v in sorted(out.items())}


# -- report files -------------------------------------------------------------


def write_csv(path, kind: str, rows: Sequence[Mapping]) -> Path:
    """CSV with a versioned schema comment; floats are written with ``repr``
    so they re-parse to the identical value."""
    cols = CSV_SCHEMAS[kind]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# crowncut {kind} schema v{REPORT_SCHEMA_VERSION}: {','.join(cols)}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (r[c] for c in cols)])
    return path


def _parse(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def read_csv(path) -> tuple[str, list[dict]]:
    """Return ``(kind, rows)`` with numeric fields parsed back."""
    with open(path, newline="") as fh:
        head = fh.readline()
        if not head.startswith("# crowncut "):
            raise ValueError(f"{path}: missing schema header")
        kind = head.split()[2]
        rows = [{k: _parse(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    return kind, rows


def write_json(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": REPORT_SCHEMA_VERSION, **_records(payload)}
    path.write_text(json.dumps(doc, indent=2, default=_jsonable))
    return path


def _records(o):
    # json would emit named tuples as plain arrays; keep their field names
    if hasattr(o, "_asdict"):
        return {k: _records(v) for k, v in o._asdict().items()}
    if isinstance(o, dict):
        return {k: _records(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_records(v) for v in o]
    return o


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return _records(asdict(o))
    raise TypeError(f"not JSON serialisable: {type(o)}")


def eval_rows(names: Sequence[str], evaluations: Sequence[Evaluation]) -> list[dict]:
    return [{"scene": n, **e.confusion._asdict(), "accuracy": e.accuracy, "iou": e.iou}
            for n, e in zip(names, evaluations)]
