"""Unbiased 8-bit stochastic quantisation of cached gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from aflsim.kernels import dequantize_codes, stochastic_round_codes

LEVELS = 255


@dataclass(frozen=True)
class QuantizedVector:
    codes: np.ndarray  # uint8
    scale: float
    zero_point: float

    def nbytes(self) -> int:
        """Storage cost: one byte per coordinate plus two float64 scalars."""
        return int(self.codes.nbytes) + 16


def quantize8(v: np.ndarray, rng: np.random.Generator) -> QuantizedVector:
    """Map ``[min(v), max(v)]`` affinely onto codes 0..255 with stochastic rounding.

    Each coordinate rounds up with probability equal to its fractional part,
    so ``E[dequantize(quantize8(v))] == v``. A constant vector gets
    ``scale == 0`` and is reproduced exactly.
    """
    v = np.ascontiguousarray(v, dtype=np.float64)
    lo = float(v.min())
    hi = float(v.max())
    scale = (hi - lo) / LEVELS
    u = rng.random(v.shape[0])
    return QuantizedVector(stochastic_round_codes(v, lo, scale, u), scale, lo)


def dequantize(q: QuantizedVector) -> np.ndarray:
    return dequantize_codes(q.codes, q.zero_point, q.scale)
