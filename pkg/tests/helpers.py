"""Shared test helpers: synthetic disc pairs and a finite-difference gradient check."""
import numpy as np

from crowncut.unet.layers import sparse_cross_entropy
from crowncut.unet.model import (UNetConfig, build_model, forward_nhwc, loss_and_gradients)

TINY = UNetConfig(in_channels=3, depth=2, base_channels=4, input_size=16)
REL_TOL = 1e-4
# below this both gradients count as zero; FD round-off on an O(1) loss is ~1e-12
ABS_FLOOR = 1e-8


def tiny_problem(seed=0):
    rng = np.random.default_rng(seed)
    model = build_model(TINY, seed=seed, dtype=np.float64)
    # non-zero biases keep ReLUs away from exact zeros
    for name, (w, b) in model.params.items():
        b[:] = rng.normal(0, 0.05, b.shape)
    x = rng.random((2, 3, 16, 16))
    y = (rng.random((2, 16, 16)) < 0.4).astype(np.uint8)
    return model, x, y


def _loss_and_pattern(model, x_nhwc, y):
    pattern = []

    def observe(name, t):
        if name.endswith("conv1") or name.endswith("conv2"):
            pattern.append(t > 0)
        if name.endswith("conv2") and name.startswith("enc"):
            n, h, w, c = t.shape
            win = t.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
            pattern.append(np.argmax(win, axis=-1))

    logits, _ = forward_nhwc(model, x_nhwc, keep_cache=False, observe=observe)
    loss, _ = sparse_cross_entropy(logits, y)
    return loss, pattern


def _same(p, q):
    return all(np.array_equal(a, b) for a, b in zip(p, q))


def check_entries(model, x, y, entries, steps=(1e-4, 1e-5, 1e-6)):
    """Return ``(worst_rel_err, n_checked, n_kinked)``.

    ``entries`` lists ``(layer, 0|1, flat_index)``. An entry whose +-h
    perturbation flips a ReLU or a pool winner is retried with the next
    smaller step; if every step kinks it is skipped and counted.
    """
    _, grads = loss_and_gradients(model, x, y)
    xh = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    _, base = _loss_and_pattern(model, xh, y)
    worst, checked, kinked = 0.0, 0, 0
    for name, part, idx in entries:
        arr = model.params[name][part].reshape(-1)
        analytic = grads[name][part].reshape(-1)[idx]
        orig = arr[idx]
        num = None
        for h in steps:
            arr[idx] = orig + h
            lp, pp = _loss_and_pattern(model, xh, y)
            arr[idx] = orig - h
            lm, pm = _loss_and_pattern(model, xh, y)
            arr[idx] = orig
            if _same(pp, base) and _same(pm, base):
                num = (lp - lm) / (2 * h)
                break
        if num is None:
            kinked += 1
            continue
        scale = max(abs(analytic), abs(num))
        rel = 0.0 if scale < ABS_FLOOR else abs(analytic - num) / scale
        worst = max(worst, rel)
        checked += 1
    return worst, checked, kinked


def all_entries(model, per_tensor=None, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for name, (w, b) in model.params.items():
        for part, t in ((0, w), (1, b)):
            idx = np.arange(t.size)
            if per_tensor is not None and t.size > per_tensor:
                idx = np.sort(rng.choice(t.size, per_tensor, replace=False))
            out += [(name, part, int(i)) for i in idx]
    return out


def disc_pairs(n, size=32, channels=3, seed=0):
    """Bright discs on a darker textured background, with their masks."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    imgs = rng.random((n, channels, size, size)) * 0.3
    masks = np.zeros((n, size, size), np.uint8)
    for i in range(n):
        for _ in range(2):
            cx, cy, r = rng.uniform(6, size - 6), rng.uniform(6, size - 6), rng.uniform(3, 6)
            masks[i] |= ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r).astype(np.uint8)
        imgs[i] += masks[i] * 0.6
    return imgs.astype(np.float32), masks
