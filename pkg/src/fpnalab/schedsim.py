"""Seeded simulator of asynchronous parallel reduction scheduling.

Wave-dispatch model: blocks are dispatched in index order onto the effective
parallel units left over after an external workload steals capacity; each
block's completion time accumulates an exponential service jitter plus
workload-injected stalls.  The rank at which each block lands its atomic
accumulation is the BIEO trace.

This is a model, not a hardware claim: real scheduler behavior on
accelerators is undocumented, and the model is the minimal one that
reproduces the qualitative workload/partition/power findings it is used to
study.  A uniform multiplier on all delays (power scaling) provably
preserves completion order, so ranking is computed on unscaled times and
the invariance is exact by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .permkit import as_permutation, kendall_tau

# stall events are long compared to service jitter
STALL_MEAN_FACTOR = 10.0


def default_occupancy(k):
    """Fraction of parallel units stolen by a size-k external workload."""
    return min(0.9, 0.9 * (k / 10000.0) ** 2)


@dataclass(frozen=True)
class DeviceConfig:
    sm_count: int = 32
    base_jitter: float = 1.0
    power_scale: float = 1.0

    def __post_init__(self):
        if self.sm_count < 1:
            raise ValueError("sm_count must be >= 1")
        if self.base_jitter <= 0:
            raise ValueError("base_jitter must be positive")
        if self.power_scale <= 0:
            raise ValueError("power_scale must be positive")


@dataclass(frozen=True)
class WorkloadSpec:
    matrix_size: int = 0
    occupancy_fn: Callable[[int], float] = default_occupancy
    burst_rate: float = 0.0

    def __post_init__(self):
        if self.matrix_size < 0:
            raise ValueError("matrix_size must be non-negative")
        if self.burst_rate < 0:
            raise ValueError("burst_rate must be non-negative")

    @property
    def occupancy(self):
        occ = float(self.occupancy_fn(self.matrix_size))
        if not 0.0 <= occ < 1.0:
            raise ValueError("occupancy must lie in [0, 1)")
        return occ


NO_LOAD = WorkloadSpec()


@dataclass(frozen=True)
class BieoTrace:
    """Per-block execution ranks: entry i is the rank at which block i
    performed its atomic accumulation."""

    execution_rank: np.ndarray
    n_blocks: int

    def __post_init__(self):
        object.__setattr__(self, "execution_rank",
                           as_permutation(self.execution_rank))
        if self.execution_rank.size != self.n_blocks:
            raise ValueError("execution_rank length must equal n_blocks")


def effective_units(device, load):
    return max(1, math.floor(device.sm_count * (1.0 - load.occupancy)))


def simulate_reduction(device, load, n_blocks, seed):
    """One simulated asynchronous reduction; deterministic per arguments."""
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    rng = np.random.default_rng(seed)
    units = effective_units(device, load)

    total = rng.exponential(device.base_jitter, n_blocks)
    if load.burst_rate > 0:
        n_stalls = rng.poisson(load.burst_rate, n_blocks)
        stall_mean = STALL_MEAN_FACTOR * device.base_jitter
        total = total + rng.standard_gamma(n_stalls) * stall_mean

    if units == 1:
        # fully serialized: strictly increasing completion times
        ranks = np.arange(n_blocks, dtype=np.intp)
        return BieoTrace(ranks, n_blocks)

    # round-robin wave dispatch: block i runs on unit i mod units, FIFO per
    # unit, so completion time is the per-unit running total
    pad = (-n_blocks) % units
    padded = np.concatenate([total, np.zeros(pad)])
    times = np.cumsum(padded.reshape(-1, units), axis=0).reshape(-1)[:n_blocks]

    order = np.lexsort((np.arange(n_blocks), times))
    ranks = np.empty(n_blocks, dtype=np.intp)
    ranks[order] = np.arange(n_blocks, dtype=np.intp)
    return BieoTrace(ranks, n_blocks)


def trace_to_perm(trace):
    """Accumulation-order permutation: position r holds the block index
    executed at rank r."""
    inv = np.empty(trace.n_blocks, dtype=np.intp)
    inv[trace.execution_rank] = np.arange(trace.n_blocks, dtype=np.intp)
    return inv


def perm_to_trace(perm):
    perm = as_permutation(perm)
    ranks = np.empty(perm.size, dtype=np.intp)
    ranks[perm] = np.arange(perm.size, dtype=np.intp)
    return BieoTrace(ranks, perm.size)


def feed_model_order(trace, stream_len):
    """Map a block-level execution order onto an accumulation order for a
    stream: blocks own contiguous chunks, chunk-internal order sequential."""
    if stream_len < 1:
        raise ValueError("stream_len must be >= 1")
    chunk = -(-stream_len // trace.n_blocks)
    pieces = []
    for block in trace_to_perm(trace):
        lo = int(block) * chunk
        hi = min(lo + chunk, stream_len)
        if lo < hi:
            pieces.append(np.arange(lo, hi, dtype=np.intp))
    return np.concatenate(pieces)


@dataclass(frozen=True)
class TauDistribution:
    taus: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray
    minimum: float
    maximum: float
    mean: float
    variance: float
    n_modes: int


def _modality(counts, window=5):
    if counts.sum() == 0:
        return 0
    kernel = np.ones(window) / window
    smooth = np.convolve(counts.astype(float), kernel, mode="same")
    peaks = 0
    for i in range(len(smooth)):
        left = smooth[i - 1] if i > 0 else -1.0
        right = smooth[i + 1] if i < len(smooth) - 1 else -1.0
        if smooth[i] > 0 and smooth[i] > left and smooth[i] >= right:
            peaks += 1
    return peaks


def tau_distribution(device, load_a, load_b, n_blocks, trials, seed,
                     decorrelate=False, bin_width=0.01):
    """Kendall-tau statistics between traces drawn under two workloads.

    Trial t draws both traces from seed + t (common random numbers isolate
    the structural effect of the workload); with ``decorrelate`` the second
    trace uses an independent seed stream, for same-configuration baselines.
    """
    if trials < 2:
        raise ValueError("trials must be >= 2")
    taus = np.empty(trials)
    for t in range(trials):
        seed_a = seed + t
        seed_b = seed + trials + t if decorrelate else seed + t
        tr_a = simulate_reduction(device, load_a, n_blocks, seed_a)
        tr_b = simulate_reduction(device, load_b, n_blocks, seed_b)
        taus[t] = kendall_tau(trace_to_perm(tr_a), trace_to_perm(tr_b))
    edges = np.arange(-1.0, 1.0 + bin_width, bin_width)
    counts, edges = np.histogram(taus, bins=edges)
    return TauDistribution(
        taus=taus,
        bin_edges=edges,
        counts=counts,
        minimum=float(taus.min()),
        maximum=float(taus.max()),
        mean=float(taus.mean()),
        variance=float(taus.var()),
        n_modes=_modality(counts),
    )


def mean_same_config_tau(device, load, n_blocks, trials, seed):
    """Mean pairwise tau between independent runs of one configuration."""
    dist = tau_distribution(device, load, load, n_blocks, trials, seed,
                            decorrelate=True)
    return dist.mean


def save_traces(path, traces, seed=None, k=None):
    """One accumulation-order permutation per line, comma-separated."""
    if not traces:
        raise ValueError("no traces to save")
    n = traces[0].n_blocks
    header = f"# n_blocks={n} seed={seed if seed is not None else ''} k={k if k is not None else ''}"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for trace in traces:
            fh.write(",".join(str(int(i)) for i in trace_to_perm(trace)) + "\n")


def load_traces(path):
    traces = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            perm = as_permutation([int(tok) for tok in line.split(",")])
            traces.append(perm_to_trace(perm))
    return traces
