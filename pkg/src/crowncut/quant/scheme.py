"""Affine int8 quantization primitives and fixed-point requantization.

Rounding is half away from zero everywhere so integer results do not depend
on the platform's default rounding mode.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

INT8 = (-128, 127)
UINT8 = (0, 255)
WEIGHT_RANGE = (-127, 127)
INT32 = (-(2 ** 31), 2 ** 31 - 1)


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    """``real = scale * (q - zero_point)``; ``dtype`` is ``int8`` or ``uint8``."""

    scale: float
    zero_point: int = 0
    dtype: str = "int8"

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        lo, hi = self.qrange
        if not lo <= self.zero_point <= hi:
            raise ValueError(f"zero_point {self.zero_point} outside {self.dtype} range")
        object.__setattr__(self, "zero_point", int(self.zero_point))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def qrange(self) -> tuple[int, int]:
        if self.dtype == "int8":
            return INT8
        if self.dtype == "uint8":
            return UINT8
        raise ValueError(f"unsupported quantized dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.int8 if self.dtype == "int8" else np.uint8

    @classmethod
    def from_range(cls, lo: float, hi: float, dtype: str = "int8") -> "QuantParams":
        """Asymmetric parameters covering ``[lo, hi]`` widened to include 0."""
        lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
        qlo, qhi = INT8 if dtype == "int8" else UINT8
        scale = (hi - lo) / (qhi - qlo)
        if scale <= 0:
            return cls(1.0, 0 if dtype == "int8" else 0, dtype)
        zp = int(round_half_away(qlo - lo / scale))
        return cls(scale, int(np.clip(zp, qlo, qhi)), dtype)

    def to_dict(self) -> dict:
        return {"scale": self.scale, "zero_point": self.zero_point, "dtype": self.dtype}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(float(d["scale"]), int(d["zero_point"]), d.get("dtype", "int8"))


def quantize(x, params: QuantParams) -> np.ndarray:
    lo, hi = params.qrange
    q = round_half_away(np.asarray(x, dtype=np.float64) / params.scale) + params.zero_point
    return np.clip(q, lo, hi).astype(params.np_dtype)


def dequantize(q, params: QuantParams) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) - params.zero_point) * params.scale


def weight_params(w: np.ndarray) -> QuantParams:
    """Per-tensor symmetric: ``scale = max|w| / 127``, zero point 0."""
    top = float(np.max(np.abs(w))) if np.size(w) else 0.0
    return QuantParams(top / 127.0 if top > 0 else 1.0, 0)


def quantize_weights(w: np.ndarray) -> tuple[np.ndarray, QuantParams]:
    p = weight_params(w)
    q = np.clip(round_half_away(np.asarray(w, dtype=np.float64) / p.scale), *WEIGHT_RANGE)
    return q.astype(np.int8), p


def quantize_bias(b: np.ndarray, scale: float) -> np.ndarray:
    return np.clip(round_half_away(np.asarray(b, dtype=np.float64) / scale), *INT32).astype(np.int32)


@dataclass(frozen=True)
class Multiplier:
    """Real factor ``m ~= q31 * 2**-shift`` with ``q31`` in ``[2**30, 2**31)``."""

    q31: int
    shift: int

    @classmethod
    def from_real(cls, m: float) -> "Multiplier":
        if not (m > 0 and math.isfinite(m)):
            raise ValueError(f"multiplier must be positive and finite, got {m}")
        mant, exp = math.frexp(m)            # m = mant * 2**exp, mant in [0.5, 1)
        q31 = int(round_half_away(mant * 2 ** 31))
        if q31 == 2 ** 31:
            q31 //= 2
            exp += 1
        shift = 31 - exp
        if shift < 1:
            raise ValueError(f"multiplier {m} too large for fixed-point rescaling")
        return cls(q31, shift)

    @property
    def real(self) -> float:
        return self.q31 * 2.0 ** -self.shift

    def apply(self, acc: np.ndarray) -> np.ndarray:
        """``round_half_away(acc * q31 / 2**shift)`` in exact int64 arithmetic."""
        acc = np.asarray(acc, dtype=np.int64)
        if self.shift > 62:
            # |acc * q31| < 2**62, so the rounded result is 0
            return np.zeros(acc.shape, dtype=np.int64)
        prod = acc * np.int64(self.q31)
        mag = (np.abs(prod) + (np.int64(1) << np.int64(self.shift - 1))) >> np.int64(self.shift)
        return np.where(prod < 0, -mag, mag)


def requantize(acc: np.ndarray, mult: Multiplier, zero_point: int, lo: int, hi: int) -> np.ndarray:
    return np.clip(mult.apply(acc) + zero_point, lo, hi)
