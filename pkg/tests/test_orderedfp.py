import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpnalab.orderedfp import (
    ModeOverflowError,
    PrecisionMode,
    cyclic_outcomes,
    dot_permuted,
    enumerate_order_outcomes,
    exact_dot,
    exact_sum,
    ordered_sum,
    ordered_sum_streams,
    round_to,
    tree_sum,
)

FP16 = PrecisionMode.BINARY16
FP32 = PrecisionMode.BINARY32
FP64 = PrecisionMode.BINARY64


class TestRoundTo:
    def test_exactly_representable(self):
        assert round_to(1.0, FP16) == 1.0

    def test_half_tie_to_even(self):
        # ulp at 2^11 is 2 in binary16; 2049 is a midpoint, even neighbour wins
        assert round_to(2049.0, FP16) == 2048.0
        # host half-precision conversion oracle
        assert round_to(2049.0, FP16) == float(np.float16(2049.0))

    def test_single_first_gap(self):
        # 2^24 + 1 is the first non-representable integer in binary32
        assert round_to(16777217.0, FP32) == 16777216.0
        assert round_to(16777217.0, FP32) == float(np.float32(16777217.0))

    def test_overflow_saturates(self):
        assert round_to(1e10, FP16) == math.inf
        assert round_to(-1e10, FP16) == -math.inf

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            round_to(float("nan"), FP32)

    @given(st.floats(allow_nan=False, allow_infinity=False, width=64))
    def test_matches_host_casts(self, x):
        assert round_to(x, FP16) == float(np.float16(x)) or (
            math.isnan(round_to(x, FP16)) and math.isnan(float(np.float16(x))))
        assert round_to(x, FP32) == float(np.float32(x))
        assert round_to(x, FP64) == x

    def test_subnormals_preserved(self):
        # smallest binary16 subnormal is 2^-24; no flush-to-zero
        assert round_to(2.0 ** -24, FP16) == 2.0 ** -24
        assert round_to(2.0 ** -26, FP16) == 0.0


class TestOrderedSum:
    def test_absorption_identity_order(self):
        # 1e8 + 1 rounds back to 1e8 at a 24-bit significand
        s = [1e8, 1.0, -1e8]
        assert ordered_sum(s, [0, 1, 2], FP32) == 0.0

    def test_absorption_avoided_by_reorder(self):
        s = [1e8, 1.0, -1e8]
        assert ordered_sum(s, [0, 2, 1], FP32) == 1.0

    def test_binary64_all_orders_exact(self):
        s = [1e8, 1.0, -1e8]
        for order in itertools.permutations(range(3)):
            assert ordered_sum(s, list(order), FP64) == 1.0

    def test_determinism(self):
        rng = np.random.default_rng(3)
        s = rng.normal(size=50)
        order = rng.permutation(50)
        a = ordered_sum(s, order, FP16)
        b = ordered_sum(s, order, FP16)
        assert a == b and np.float64(a).tobytes() == np.float64(b).tobytes()

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ordered_sum([1.0, 2.0], [0], FP64)

    def test_overflow_flagged(self):
        with pytest.raises(ModeOverflowError):
            ordered_sum([60000.0, 60000.0], [0, 1], FP16)

    def test_nonfinite_input_rejected(self):
        with pytest.raises(ValueError):
            ordered_sum([1.0, math.inf], [0, 1], FP64)


class TestOrderedSumStreams:
    @pytest.mark.parametrize("mode", [FP16, FP32, FP64])
    def test_matches_scalar_fold(self, mode):
        rng = np.random.default_rng(11)
        streams = rng.normal(scale=8.0, size=(20, 17))
        fast = ordered_sum_streams(streams, mode)
        for row, got in zip(streams, fast):
            assert got == ordered_sum(row, np.arange(17), mode)

    def test_cyclic_outcomes_match_scalar(self):
        rng = np.random.default_rng(5)
        s = rng.normal(scale=1e4, size=9)
        fam = cyclic_outcomes(s, FP32)
        d = len(s)
        for shift in range(d):
            order = (np.arange(d) + shift) % d
            assert fam[shift] == ordered_sum(s, order, FP32)


class TestTreeSum:
    def test_exact_integers(self):
        assert tree_sum([1, 2, 3, 4], FP64) == 10.0

    def test_pairing(self):
        assert tree_sum([1e8, -1e8, 1.0, 0.0], FP32) == 1.0

    def test_single_element(self):
        assert tree_sum([3.5], FP16) == 3.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            tree_sum([], FP64)


class TestDotPermuted:
    def test_unit_self_dot(self):
        d = 100
        n = np.full(d, -1.0)
        n[0] = d - 1
        n /= np.sqrt(d * (d - 1))
        got = dot_permuted(n, n, np.arange(d), FP64)
        assert abs(got - 1.0) < 2.0 ** -40

    def test_boundary_cyclic_spread(self):
        # paper-scale construction: d=1000, spread of a boundary dot product
        # across cyclic shifts is of order 1e-9 at sigma ~ 2e7
        d = 1000
        nhat = np.full(d, -1.0)
        nhat[0] = d - 1
        nhat /= np.sqrt(d * (d - 1))
        rng = np.random.default_rng(42)
        x = rng.normal(0.0, 2e7, d)
        x[0] = np.sum(x[1:]) / (d - 1)
        products = nhat * x
        fam = cyclic_outcomes(products, FP64)
        assert 1e-11 < np.abs(fam).max() < 1e-8

    def test_exact_reference_order_invariant(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=8)
        b = rng.normal(size=8)
        ref = exact_dot(a, b)
        for _ in range(20):
            order = rng.permutation(8)
            total = Fraction(0)
            prods = [Fraction(float(x)) * Fraction(float(y)) for x, y in zip(a, b)]
            for i in order:
                total += prods[i]
            assert total == ref


class TestEnumerateOrderOutcomes:
    def test_exact_single_outcome(self):
        res = enumerate_order_outcomes([1.0, 2.0, 3.0], FP64)
        assert res.values == frozenset({6.0})
        assert res.exhaustive

    def test_absorption_two_outcomes(self):
        res = enumerate_order_outcomes([1e8, 1.0, -1e8], FP32)
        assert res.values == frozenset({0.0, 1.0})
        assert res.orders_evaluated == 6

    def test_singleton(self):
        res = enumerate_order_outcomes([2.25], FP16)
        assert res.values == frozenset({2.25})

    def test_cap_without_sampling(self):
        with pytest.raises(ValueError):
            enumerate_order_outcomes(np.ones(9), FP32, cap=10)

    def test_sampling_fallback(self):
        res = enumerate_order_outcomes(np.ones(9), FP32, cap=10, sample=True,
                                       rng=np.random.default_rng(0))
        assert not res.exhaustive
        assert res.values == frozenset({9.0})

    def test_matches_brute_force_small_d(self):
        rng = np.random.default_rng(17)
        for d in range(2, 6):
            s = rng.normal(scale=1e4, size=d)
            res = enumerate_order_outcomes(s, FP16)
            brute = {ordered_sum(s, list(p), FP16)
                     for p in itertools.permutations(range(d))}
            assert res.values == frozenset(brute)


class TestProperties:
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=10))
    @settings(max_examples=50, deadline=None)
    def test_exact_sum_order_invariant(self, values):
        rng = np.random.default_rng(abs(hash(tuple(values))) % 2 ** 32)
        order = rng.permutation(len(values))
        assert exact_sum([values[i] for i in order]) == exact_sum(values)

    def test_precision_monotone_spread(self):
        rng = np.random.default_rng(23)
        wins = 0
        for _ in range(20):
            s = rng.normal(scale=30.0, size=12)
            spreads = []
            for mode in (FP16, FP32, FP64):
                fam = cyclic_outcomes(s, mode)
                spreads.append(fam.max() - fam.min())
            if spreads[0] >= spreads[1] >= spreads[2]:
                wins += 1
        assert wins >= 18
