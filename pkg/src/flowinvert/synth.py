"""Packet streams built from flow sizes, and the two packet samplers.

Flows are identified by their index ``0..K-1``.  Deterministic 1-out-of-k
sampling keeps the packets whose 0-based stream position is congruent to the
phase modulo k.  Bernoulli thinning keeps every packet independently with
probability p and serves as the probabilistic reference for the former.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INTERLEAVE_MODES = ("shuffle", "round_robin")


@dataclass(frozen=True)
class SamplingConfig:
    k: int
    phase: int = 0
    seed: int = 0

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"sampling period k must be a positive integer, got {self.k}")
        if not 0 <= self.phase < self.k:
            raise ValueError(f"phase must lie in [0, k), got {self.phase}")

    @property
    def p(self) -> float:
        return 1.0 / self.k


@dataclass(frozen=True)
class PacketStream:
    flows: np.ndarray  # flow id of each packet, in stream order

    @property
    def total_packets(self) -> int:
        return len(self.flows)

    def flow_sizes(self, n_flows: int | None = None) -> np.ndarray:
        return np.bincount(self.flows, minlength=n_flows or 0)


def _sizes_array(flow_sizes) -> np.ndarray:
    sizes = np.asarray(flow_sizes, dtype=np.int64)
    if sizes.ndim != 1 or sizes.size == 0:
        raise ValueError("need a non-empty sequence of flow sizes")
    if np.any(sizes < 1):
        raise ValueError("flow sizes must be >= 1")
    return sizes


def interleave(flow_sizes, mode: str = "shuffle", seed: int = 0) -> PacketStream:
    sizes = _sizes_array(flow_sizes)
    ids = np.repeat(np.arange(len(sizes), dtype=np.int64), sizes)
    if mode == "shuffle":
        rng = np.random.default_rng(seed)
        return PacketStream(rng.permutation(ids))
    if mode == "round_robin":
        # packet n of a flow goes out in round n; within a round, flows keep their order
        starts = np.cumsum(sizes) - sizes
        rounds = np.arange(len(ids)) - np.repeat(starts, sizes)
        order = np.lexsort((ids, rounds))
        return PacketStream(ids[order])
    raise ValueError(f"unknown interleaving mode {mode!r}; expected one of {INTERLEAVE_MODES}")


def deterministic_sample(stream: PacketStream, config: SamplingConfig) -> np.ndarray:
    return stream.flows[config.phase :: config.k]


def sampled_counts(selected: np.ndarray, n_flows: int) -> np.ndarray:
    """Per-flow sampled packet counts, zeros included."""
    return np.bincount(selected, minlength=n_flows)


def bernoulli_thin(flow_sizes, p: float, seed: int = 0) -> np.ndarray:
    """Per-flow retained counts when each packet survives independently with prob. p."""
    if not (0.0 < p <= 1.0):
        raise ValueError(f"retention probability must lie in (0, 1], got {p}")
    sizes = _sizes_array(flow_sizes)
    rng = np.random.default_rng(seed)
    return rng.binomial(sizes, p)


def shuffled_sample_counts(flow_sizes, k: int, phase: int, n_rep: int, seed: int = 0) -> np.ndarray:
    """Per-flow counts from ``n_rep`` independent shuffle + 1-out-of-k runs.

    Returns an array of shape (n_rep, K).  Vectorised replication of
    ``interleave(..., "shuffle")`` followed by ``deterministic_sample``.
    """
    sizes = _sizes_array(flow_sizes)
    cfg = SamplingConfig(k, phase)
    K = len(sizes)
    ids = np.repeat(np.arange(K, dtype=np.int64), sizes)
    rng = np.random.default_rng(seed)
    out = np.empty((n_rep, K), dtype=np.int64)
    chunk = max(1, 2_000_000 // len(ids))
    for start in range(0, n_rep, chunk):
        n = min(chunk, n_rep - start)
        streams = rng.permuted(np.broadcast_to(ids, (n, len(ids))), axis=1)
        picked = streams[:, cfg.phase :: cfg.k]
        offsets = (np.arange(n) * K)[:, None]
        out[start : start + n] = np.bincount((picked + offsets).ravel(), minlength=n * K).reshape(n, K)
    return out
