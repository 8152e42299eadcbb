"""Reduced-precision arithmetic with explicit accumulation order.

Every operation rounds to the target IEEE-754 binary format immediately
(round-to-nearest, ties-to-even), so the only source of run-to-run variation
in a sum or dot product is the order in which terms are accumulated.  A
64-bit host float is a sufficient carrier for binary16/binary32 emulation:
the sum or product of two values already representable in the narrow format
is exact in binary64, and the final cast is correctly rounded.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class PrecisionMode(enum.Enum):
    """IEEE-754 binary format applied after every arithmetic step."""

    BINARY16 = "fp16"
    BINARY32 = "fp32"
    BINARY64 = "fp64"

    @property
    def dtype(self):
        return _DTYPES[self]

    @property
    def significand_bits(self):
        # includes the implicit leading bit
        return {PrecisionMode.BINARY16: 11,
                PrecisionMode.BINARY32: 24,
                PrecisionMode.BINARY64: 53}[self]

    @classmethod
    def from_name(cls, name):
        for mode in cls:
            if mode.value == name or mode.name.lower() == name.lower():
                return mode
        raise ValueError(f"unknown precision mode: {name!r}")


_DTYPES = {
    PrecisionMode.BINARY16: np.float16,
    PrecisionMode.BINARY32: np.float32,
    PrecisionMode.BINARY64: np.float64,
}


class ModeOverflowError(FloatingPointError):
    """A result saturated to infinity in the emulated format."""


def round_to(x, mode):
    """Round a finite value to the nearest representable value in ``mode``.

    Ties go to even.  Overflow saturates to a signed infinity (callers that
    forbid infinities raise :class:`ModeOverflowError`); NaN input is
    rejected.
    """
    x = float(x)
    if math.isnan(x):
        raise ValueError("NaN input")
    with np.errstate(over="ignore"):
        return float(mode.dtype(x))


def _check_stream(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("value stream must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ValueError("value stream must contain finite values only")
    return arr


def _check_finite_result(value, what):
    if math.isinf(value):
        raise ModeOverflowError(f"{what} overflowed the emulated format")
    return value


def ordered_sum(stream, order, mode):
    """Left fold of ``stream`` under the accumulation order ``order``.

    acc_0 = 0; acc_i = round(acc_{i-1} + stream[order[i]]).  Bit-identical
    for identical arguments.
    """
    arr = _check_stream(stream)
    order = np.asarray(order, dtype=np.intp)
    if order.shape != arr.shape:
        raise ValueError("order length must match stream length")
    dtype = mode.dtype
    acc = dtype(0.0)
    with np.errstate(over="ignore"):
        for idx in order:
            acc = dtype(acc + dtype(arr[idx]))
    return _check_finite_result(float(acc), "ordered sum")


def ordered_sum_streams(streams, mode):
    """Fold each row of a 2-D array left to right in ``mode``.

    Vectorized fast path for families of orderings: the caller materializes
    each reordered stream as a row.  np.add.accumulate on a narrow dtype
    rounds after every addition, matching :func:`ordered_sum` bitwise.
    """
    arr = np.asarray(streams, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D array of streams")
    with np.errstate(over="ignore"):
        folded = np.add.accumulate(arr.astype(mode.dtype), axis=1)[:, -1]
    result = folded.astype(np.float64)
    if np.any(np.isinf(result)):
        raise ModeOverflowError("ordered sum overflowed the emulated format")
    return result


def tree_sum(stream, mode):
    """Balanced pairwise reduction with rounding after every add."""
    arr = _check_stream(stream)
    if arr.size == 0:
        raise ValueError("tree_sum requires a non-empty stream")
    dtype = mode.dtype
    with np.errstate(over="ignore"):
        level = [dtype(v) for v in arr]
        while len(level) > 1:
            nxt = []
            for i in range(0, len(level) - 1, 2):
                nxt.append(dtype(level[i] + level[i + 1]))
            if len(level) % 2:
                nxt.append(level[-1])
            level = nxt
    return _check_finite_result(float(level[0]), "tree sum")


def dot_permuted(a, b, order, mode):
    """Dot product with elementwise products rounded in index order, then
    accumulated under ``order``."""
    av = _check_stream(a)
    bv = _check_stream(b)
    if av.shape != bv.shape:
        raise ValueError("vectors must have equal length")
    dtype = mode.dtype
    with np.errstate(over="ignore"):
        products = (av.astype(dtype) * bv.astype(dtype)).astype(np.float64)
    if np.any(np.isinf(products)):
        raise ModeOverflowError("elementwise product overflowed the emulated format")
    return ordered_sum(products, order, mode)


def product_stream(a, b, mode):
    """The rounded elementwise-product stream feeding a dot product."""
    av = _check_stream(a)
    bv = _check_stream(b)
    if av.shape != bv.shape:
        raise ValueError("vectors must have equal length")
    dtype = mode.dtype
    with np.errstate(over="ignore"):
        products = (av.astype(dtype) * bv.astype(dtype)).astype(np.float64)
    if np.any(np.isinf(products)):
        raise ModeOverflowError("elementwise product overflowed the emulated format")
    return products


def cyclic_outcomes(stream, mode):
    """Ordered sums over all ``d`` cyclic shifts of the accumulation order.

    Row ``s`` of the implied family starts accumulation at index ``s``.
    """
    arr = _check_stream(stream)
    d = arr.size
    idx = (np.arange(d)[None, :] + np.arange(d)[:, None]) % d
    return ordered_sum_streams(arr[idx], mode)


@dataclass(frozen=True)
class OrderOutcomes:
    values: frozenset
    exhaustive: bool
    orders_evaluated: int


def enumerate_order_outcomes(stream, mode, cap=40320, sample=False, rng=None):
    """Distinct ordered-sum outcomes over accumulation orders.

    Exhaustive when d! <= cap; otherwise samples ``cap`` random orders when
    ``sample`` is set and fails loudly when it is not.
    """
    arr = _check_stream(stream)
    d = arr.size
    n_orders = math.factorial(d)
    if n_orders <= cap:
        outcomes = set()
        for perm in itertools.permutations(range(d)):
            outcomes.add(ordered_sum(arr, np.asarray(perm, dtype=np.intp), mode))
        return OrderOutcomes(frozenset(outcomes), True, n_orders)
    if not sample:
        raise ValueError(
            f"{d}! orders exceed cap={cap}; pass sample=True for a sampled subset")
    if rng is None:
        rng = np.random.default_rng(0)
    outcomes = set()
    for _ in range(cap):
        outcomes.add(ordered_sum(arr, rng.permutation(d), mode))
    return OrderOutcomes(frozenset(outcomes), False, cap)


def exact_sum(stream):
    """Order-independent reference sum in exact rational arithmetic."""
    total = Fraction(0)
    for v in _check_stream(stream):
        total += Fraction(float(v))
    return total


def exact_dot(a, b):
    """Order-independent reference dot product in exact rational arithmetic."""
    av = _check_stream(a)
    bv = _check_stream(b)
    if av.shape != bv.shape:
        raise ValueError("vectors must have equal length")
    total = Fraction(0)
    for x, y in zip(av, bv):
        total += Fraction(float(x)) * Fraction(float(y))
    return total
