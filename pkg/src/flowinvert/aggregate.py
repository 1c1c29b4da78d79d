"""Packet records to flows to flow-size histograms, plus the file formats involved.

Packet CSV: one record per line.  Either a single ``flow_id`` column (optional
header ``flow_id``) or a 5-tuple with header ``src,dst,sport,dport,proto``.
Histogram TSV: ``size<TAB>count`` lines, ascending, no header.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

log = logging.getLogger(__name__)

FIVE_TUPLE = ("src", "dst", "sport", "dport", "proto")


def canonical_key(src, dst, sport, dport, proto) -> str:
    """Unidirectional 5-tuple key: fields lowercased and joined with '|'."""
    return "|".join(str(x).strip().lower() for x in (src, dst, sport, dport, proto))


@dataclass(frozen=True)
class FlowHistogram:
    counts: Mapping[int, int]
    malformed: int = field(default=0, compare=False)

    def __post_init__(self):
        clean = {}
        for size, n in sorted(self.counts.items()):
            size, n = int(size), int(n)
            if size < 1:
                raise ValueError(f"flow sizes must be >= 1, got {size}")
            if n < 0:
                raise ValueError(f"negative count for size {size}")
            if n:
                clean[size] = n
        object.__setattr__(self, "counts", clean)

    @property
    def total_flows(self) -> int:
        return sum(self.counts.values())

    @property
    def total_packets(self) -> int:
        return sum(j * n for j, n in self.counts.items())

    @property
    def max_size(self) -> int:
        return max(self.counts, default=0)

    def __getitem__(self, j: int) -> int:
        return self.counts.get(j, 0)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        sizes = np.fromiter(self.counts.keys(), dtype=np.int64, count=len(self.counts))
        n = np.fromiter(self.counts.values(), dtype=np.int64, count=len(self.counts))
        return sizes, n

    def merge(self, other: "FlowHistogram") -> "FlowHistogram":
        c = Counter(self.counts)
        c.update(other.counts)
        return FlowHistogram(c, self.malformed + other.malformed)

    def to_tsv(self) -> str:
        return "".join(f"{j}\t{n}\n" for j, n in self.counts.items())

    @classmethod
    def from_tsv(cls, text: str) -> "FlowHistogram":
        counts: dict[int, int] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                size, n = line.split("\t")
                counts[int(size)] = counts.get(int(size), 0) + int(n)
            except ValueError as exc:
                raise ValueError(f"histogram line {lineno}: expected 'size<TAB>count', got {line!r}") from exc
        return cls(counts)

    @classmethod
    def from_sizes(cls, sizes) -> "FlowHistogram":
        """Histogram of per-flow packet counts; flows with zero packets are dropped."""
        sizes = np.asarray(sizes, dtype=np.int64)
        vals, n = np.unique(sizes[sizes > 0], return_counts=True)
        return cls(dict(zip(vals.tolist(), n.tolist())))

    def expand(self) -> Iterator[str]:
        """One packet record per packet, flows numbered in size order."""
        fid = 0
        for j, n in self.counts.items():
            for _ in range(n):
                key = f"f{fid}"
                fid += 1
                for _ in range(j):
                    yield key


def read_histogram(path) -> FlowHistogram:
    return FlowHistogram.from_tsv(Path(path).read_text())


def write_histogram(hist: FlowHistogram, path) -> None:
    Path(path).write_text(hist.to_tsv())


def aggregate(records: Iterable) -> FlowHistogram:
    """Count packets per flow key and histogram the per-flow counts.

    Records are flow-key strings or 5-tuples.  Empty or malformed records are
    skipped and counted in ``malformed``.
    """
    per_flow: Counter = Counter()
    bad = 0
    for rec in records:
        key = _record_key(rec)
        if key is None:
            bad += 1
            continue
        per_flow[key] += 1
    if bad:
        log.warning("skipped %d malformed packet records", bad)
    return FlowHistogram(Counter(per_flow.values()), malformed=bad)


def _record_key(rec) -> str | None:
    if isinstance(rec, str):
        rec = rec.strip()
        return rec or None
    if isinstance(rec, (tuple, list)) and len(rec) == 5 and all(str(x).strip() for x in rec):
        return canonical_key(*rec)
    return None


def key_shard(key: str, n_shards: int) -> int:
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % n_shards


def aggregate_sharded(records: Iterable, n_shards: int) -> FlowHistogram:
    """Partition records by key hash, aggregate each shard, merge in shard order."""
    shards: list[list] = [[] for _ in range(n_shards)]
    bad = 0
    for rec in records:
        key = _record_key(rec)
        if key is None:
            bad += 1
            continue
        shards[key_shard(key, n_shards)].append(key)
    hist = FlowHistogram({}, malformed=bad)
    for shard in shards:
        hist = hist.merge(aggregate(shard))
    return hist


def histogram_ccdf(hist: FlowHistogram) -> dict[int, float]:
    """P(size >= j) for j = 1..max size."""
    total = hist.total_flows
    if total < 1:
        raise ValueError("cannot take the ccdf of an empty histogram")
    pmf = np.zeros(hist.max_size + 2)
    sizes, n = hist.arrays()
    pmf[sizes] = n
    tail = np.cumsum(pmf[::-1])[::-1]
    return {j: float(tail[j] / total) for j in range(1, hist.max_size + 1)}


def read_packet_csv(path) -> Iterator:
    """Stream packet records from CSV, yielding keys or 5-tuples.

    Malformed lines are logged with their line number and yielded as ``None``
    so that aggregation can count them.
    """
    with open(path, newline="") as fh:
        columns = None
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            fields = [f.strip() for f in line.split(",")]
            if lineno == 1:
                lowered = [f.lower() for f in fields]
                if lowered == ["flow_id"]:
                    columns = 1
                    continue
                if tuple(lowered) == FIVE_TUPLE:
                    columns = 5
                    continue
                columns = 5 if len(fields) == 5 else 1
            if len(fields) != columns or not all(fields):
                log.warning("%s:%d: malformed packet record %r", path, lineno, line)
                yield None
                continue
            yield fields[0] if columns == 1 else tuple(fields)
