"""Mini-batch Adam training with a seeded train/test split."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from ..exceptions import EmptyDataset, InvalidConfig, ShapeMismatch
from .model import UNetConfig, UNetModel, build_model, forward_nhwc, loss_and_gradients

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 70
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    split_ratio: float = 0.8
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if not 0 < self.split_ratio < 1:
            raise InvalidConfig("split_ratio must lie in (0, 1)")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be > 0")


@dataclass
class Dataset:
    """Image/mask pairs: ``images`` ``(N, C, S, S)`` in [0, 1], ``masks`` ``(N, S, S)`` of 0/1."""

    images: np.ndarray
    masks: np.ndarray
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        if self.images.ndim != 4 or self.masks.ndim != 3:
            raise ShapeMismatch(f"images must be (N, C, S, S) and masks (N, S, S); got {self.images.shape}, {self.masks.shape}")
        if self.images.shape[0] != self.masks.shape[0] or self.images.shape[2:] != self.masks.shape[1:]:
            raise ShapeMismatch(f"images {self.images.shape} and masks {self.masks.shape} do not pair up")
        if not self.names:
            self.names = [f"pair_{i:03d}" for i in range(len(self))]

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.masks[idx], [self.names[i] for i in idx])

    def check_config(self, cfg: UNetConfig) -> None:
        if self.images.shape[1] != cfg.in_channels or self.images.shape[2] != cfg.input_size:
            raise ShapeMismatch(f"dataset {self.images.shape[1:]} does not fit model input "
                                f"({cfg.in_channels}, {cfg.input_size}, {cfg.input_size})")


def split_indices(n: int, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded permutation split; both sides get at least one item."""
    if n < 2:
        raise EmptyDataset(f"need at least 2 pairs to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(n - 1, max(1, int(round(ratio * n))))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


class Adam:
    """Adam with bias correction over a model's ``params`` mapping."""

    def __init__(self, model: UNetModel, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: (np.zeros_like(w), np.zeros_like(b)) for k, (w, b) in model.params.items()}
        self.v = {k: (np.zeros_like(w), np.zeros_like(b)) for k, (w, b) in model.params.items()}

    def step(self, model: UNetModel, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, pair in model.params.items():
            for i, p in enumerate(pair):
                g = grads[name][i].astype(p.dtype, copy=False)
                m, v = self.m[name][i], self.v[name][i]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class EpochRecord(NamedTuple):
    epoch: int
    train_loss: float
    test_accuracy: float
    seconds: float


def pixel_accuracy(model: UNetModel, data: Dataset, batch_size: int = 4) -> float:
    """Fraction of pixels whose argmax class equals the mask label."""
    if len(data) == 0:
        return float("nan")
    hits = 0
    for s in range(0, len(data), batch_size):
        x = np.ascontiguousarray(data.images[s:s + batch_size].transpose(0, 2, 3, 1), dtype=model.dtype)
        logits, _ = forward_nhwc(model, x, keep_cache=False)
        pred = (logits[..., 1] > logits[..., 0]).astype(np.uint8)
        hits += int(np.sum(pred == data.masks[s:s + batch_size]))
    return hits / data.masks.size


def fit_model(model: UNetModel, train_set: Dataset, cfg: TrainingConfig, test_set: Dataset | None = None,
              callback: Callable[[EpochRecord], None] | None = None) -> list[EpochRecord]:
    """Train ``model`` in place; one record per epoch."""
    if len(train_set) == 0:
        raise EmptyDataset("training set is empty")
    train_set.check_config(model.config)
    rng = np.random.default_rng(cfg.rng_seed)
    opt = Adam(model, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = loss_and_gradients(model, train_set.images[idx], train_set.masks[idx])
            opt.step(model, grads)
            total += loss * len(idx)
            count += len(idx)
        acc = pixel_accuracy(model, test_set) if test_set is not None and len(test_set) else float("nan")
        rec = EpochRecord(epoch, total / count, acc, time.perf_counter() - t0)
        trace.append(rec)
        log.info("epoch %d loss %.4f test-acc %.4f (%.1fs)", *rec)
        if callback is not None:
            callback(rec)
    return trace


class TrainResult(NamedTuple):
    model: UNetModel
    trace: list
    train_idx: np.ndarray
    test_idx: np.ndarray


def train(dataset: Dataset, config: TrainingConfig = TrainingConfig(), unet_config: UNetConfig | None = None,
          callback=None) -> TrainResult:
    """Split ``dataset``, build a fresh model from ``rng_seed`` and train it."""
    if len(dataset) < 2:
        raise EmptyDataset(f"need at least 2 pairs, got {len(dataset)}")
    if unet_config is None:
        unet_config = UNetConfig(in_channels=dataset.images.shape[1], input_size=dataset.images.shape[2])
    dataset.check_config(unet_config)
    tr, te = split_indices(len(dataset), config.split_ratio, config.rng_seed)
    model = build_model(unet_config, seed=config.rng_seed)
    trace = fit_model(model, dataset.subset(tr), config, dataset.subset(te), callback)
    return TrainResult(model, trace, tr, te)
