"""Parametric flow-size law: truncated geometric head plus piecewise Pareto tail.

Sizes are packet counts (integers >= 1).  Below ``b0`` the pmf is geometric
with ratio ``r``, truncated to ``1..b0-1`` and rescaled so the head carries
``head_mass``.  From ``b0`` upward the ccdf is a chain of power laws whose
scale masses are tied together so the ccdf is continuous at every breakpoint.
Pareto pieces are discretised by evaluating the continuous ccdf at integers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_SUPPORT_CAP = 10**6


@dataclass(frozen=True)
class ParetoSegment:
    lo: int
    hi: float  # exclusive; math.inf for the last segment
    shape: float
    scale_mass: float

    def __post_init__(self):
        if self.lo < 1:
            raise ValueError(f"segment start must be >= 1, got {self.lo}")
        if not self.hi > self.lo:
            raise ValueError(f"segment end {self.hi} must exceed start {self.lo}")
        if not (self.shape > 0 and math.isfinite(self.shape)):
            raise ValueError(f"Pareto shape must be positive, got {self.shape}")
        if not 0.0 <= self.scale_mass <= 1.0:
            raise ValueError(f"scale_mass must lie in [0, 1], got {self.scale_mass}")

    def ccdf(self, j):
        return self.scale_mass * (self.lo / np.asarray(j, dtype=float)) ** self.shape


@dataclass(frozen=True)
class DiscretePmf:
    """Probabilities on ``support_start, support_start+1, ...`` plus residual tail mass."""

    support_start: int
    probs: np.ndarray = field(repr=False)
    tail_mass: float = 0.0

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 1:
            raise ValueError("probs must be one-dimensional")
        if self.support_start < 0:
            raise ValueError("support_start must be >= 0")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0) or self.tail_mass < 0:
            raise ValueError("probabilities must be finite and non-negative")
        total = math.fsum(probs) + self.tail_mass
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"pmf mass is {total!r}, expected 1")

    @classmethod
    def unnormalized(cls, support_start: int, probs, tail_mass: float = 0.0) -> "DiscretePmf":
        """Build without the normalisation check (for rescaled forward predictions)."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "support_start", int(support_start))
        object.__setattr__(obj, "probs", np.asarray(probs, dtype=float))
        object.__setattr__(obj, "tail_mass", float(tail_mass))
        return obj

    @classmethod
    def point_mass(cls, at: int) -> "DiscretePmf":
        return cls(at, np.array([1.0]))

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.support_start, self.support_start + len(self.probs))

    @property
    def support_end(self) -> int:
        """Last explicitly represented value."""
        return self.support_start + len(self.probs) - 1

    def __call__(self, j: int) -> float:
        i = j - self.support_start
        if 0 <= i < len(self.probs):
            return float(self.probs[i])
        return 0.0


@dataclass(frozen=True)
class FlowSizeModel:
    r: float
    b0: int
    head_mass: float
    segments: tuple[ParetoSegment, ...]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not 0.0 < self.r < 1.0:
            raise ValueError(f"head ratio r must lie in (0, 1), got {self.r}")
        if int(self.b0) != self.b0 or self.b0 < 1:
            raise ValueError(f"b0 must be a positive integer, got {self.b0}")
        if not 0.0 <= self.head_mass <= 1.0:
            raise ValueError(f"head_mass must lie in [0, 1], got {self.head_mass}")
        if self.b0 == 1 and self.head_mass > 0:
            raise ValueError("b0 = 1 leaves no room for a head; head_mass must be 0")
        segs = self.segments
        if not segs:
            raise ValueError("at least one tail segment is required")
        if segs[0].lo != self.b0:
            raise ValueError("first segment must start at b0")
        if not math.isinf(segs[-1].hi):
            raise ValueError("last segment must extend to infinity")
        for left, right in zip(segs, segs[1:]):
            if left.hi != right.lo:
                raise ValueError("segments must be contiguous and strictly increasing")
            if not math.isclose(left.ccdf(right.lo), right.scale_mass, rel_tol=1e-12, abs_tol=1e-300):
                raise ValueError(f"ccdf discontinuous at {right.lo}")
        if not math.isclose(segs[0].scale_mass, 1.0 - self.head_mass, rel_tol=1e-12, abs_tol=1e-15):
            raise ValueError("first segment scale_mass must equal 1 - head_mass")

    @classmethod
    def from_shapes(
        cls,
        r: float,
        b0: int,
        head_mass: float,
        shapes: Sequence[float],
        breaks: Sequence[int] = (),
    ) -> "FlowSizeModel":
        """Chain Pareto pieces starting at ``b0`` and at each value of ``breaks``."""
        if len(shapes) != len(breaks) + 1:
            raise ValueError("need exactly one more shape than breaks")
        los = [int(b0)] + [int(b) for b in breaks]
        his = los[1:] + [math.inf]
        segments = []
        mass = 1.0 - head_mass
        for lo, hi, a in zip(los, his, shapes):
            segments.append(ParetoSegment(lo, hi, float(a), mass))
            if math.isfinite(hi):
                mass = mass * (lo / hi) ** a
        return cls(float(r), int(b0), float(head_mass), tuple(segments))

    @classmethod
    def pareto(cls, shape: float, lo: int = 1) -> "FlowSizeModel":
        """Pure single-segment Pareto with ccdf ``(lo/j)**shape`` for ``j >= lo``."""
        if lo != 1:
            raise ValueError("a pure Pareto starting above 1 needs a head; use from_shapes")
        return cls.from_shapes(r=0.5, b0=1, head_mass=0.0, shapes=[shape])

    # -- evaluation -----------------------------------------------------

    def _head_ccdf(self, j: np.ndarray) -> np.ndarray:
        R = self.r ** (self.b0 - 1)
        return (1.0 - self.head_mass) + self.head_mass * (self.r ** (j - 1.0) - R) / (1.0 - R)

    def _tail_ccdf(self, j: np.ndarray) -> np.ndarray:
        los = np.array([s.lo for s in self.segments], dtype=float)
        idx = np.searchsorted(los, j, side="right") - 1
        idx = np.clip(idx, 0, len(los) - 1)
        scale = np.array([s.scale_mass for s in self.segments])[idx]
        shape = np.array([s.shape for s in self.segments])[idx]
        return scale * (los[idx] / j) ** shape

    def ccdf(self, j):
        """P(v >= j) for integer ``j >= 1`` (scalar or array)."""
        arr = _check_sizes(j)
        out = np.zeros_like(arr)
        head = arr < self.b0
        if np.any(head):
            out[head] = self._head_ccdf(arr[head])
        if np.any(~head):
            out[~head] = self._tail_ccdf(arr[~head])
        return float(out[0]) if np.ndim(j) == 0 else out

    def pmf(self, j):
        """P(v = j), the head analytically and the tail by ccdf differencing."""
        arr = _check_sizes(j)
        out = np.zeros_like(arr)
        head = arr < self.b0
        if np.any(head):
            jh = arr[head]
            R = self.r ** (self.b0 - 1)
            out[head] = self.head_mass * (1.0 - self.r) * self.r ** (jh - 1.0) / (1.0 - R)
        if np.any(~head):
            jt = arr[~head]
            out[~head] = self._tail_ccdf(jt) - self._tail_ccdf(jt + 1.0)
        return float(out[0]) if np.ndim(j) == 0 else out

    def to_pmf(self, cap: int = DEFAULT_SUPPORT_CAP) -> DiscretePmf:
        """Explicit pmf on ``1..cap`` with the analytic remainder as tail mass."""
        j = np.arange(1, cap + 1, dtype=float)
        probs = self.pmf(j)
        return DiscretePmf(1, probs, self.ccdf(cap + 1))

    # -- serialisation --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "b0": self.b0,
            "head_mass": self.head_mass,
            "segments": [
                {"lo": s.lo, "hi": None if math.isinf(s.hi) else int(s.hi), "shape": s.shape}
                for s in self.segments
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlowSizeModel":
        try:
            segs = d["segments"]
            shapes = [float(s["shape"]) for s in segs]
            breaks = [int(s["lo"]) for s in segs[1:]]
            if int(segs[0]["lo"]) != int(d["b0"]):
                raise ValueError("first segment must start at b0")
            for s, nxt in zip(segs, segs[1:] + [None]):
                expected = None if nxt is None else int(nxt["lo"])
                if s.get("hi") != expected:
                    raise ValueError(f"segment hi {s.get('hi')} does not match next lo {expected}")
            return cls.from_shapes(float(d["r"]), int(d["b0"]), float(d["head_mass"]), shapes, breaks)
        except (KeyError, TypeError, IndexError) as exc:
            raise ValueError(f"malformed model document: {exc!r}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FlowSizeModel":
        return cls.from_dict(json.loads(text))


def load_model(path) -> FlowSizeModel:
    return FlowSizeModel.from_json(Path(path).read_text())


def _check_sizes(j) -> np.ndarray:
    arr = np.asarray(j)
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.floor(arr)):
            raise ValueError("packet counts must be integers")
    elif arr.dtype.kind not in "iu":
        raise ValueError("packet counts must be integers")
    if np.any(arr < 1):
        raise ValueError("packet counts must be >= 1")
    return np.atleast_1d(arr).astype(float)


def model_pmf(model: FlowSizeModel, j) -> float:
    return model.pmf(j)


def model_ccdf(model: FlowSizeModel, j) -> float:
    return model.ccdf(j)


def draw_flow_sizes(model, count: int, seed: int) -> np.ndarray:
    """Draw ``count`` i.i.d. flow sizes by inverting the ccdf.

    ``model`` may also be a :class:`DiscretePmf` with no tail mass.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    u = 1.0 - rng.random(count)  # (0, 1]
    if isinstance(model, DiscretePmf):
        if model.tail_mass > 0:
            raise ValueError("cannot draw from a pmf with unresolved tail mass")
        cdf = np.cumsum(model.probs)
        cdf /= cdf[-1]
        idx = np.searchsorted(cdf, 1.0 - u, side="right")
        return model.support_start + np.minimum(idx, len(cdf) - 1)

    out = np.empty(count, dtype=np.int64)
    tail_mass = 1.0 - model.head_mass
    head = u > tail_mass
    if np.any(head):
        R = model.r ** (model.b0 - 1)
        t = (u[head] - tail_mass) * (1.0 - R) / model.head_mass + R
        j = 1 + np.floor(np.log(t) / math.log(model.r))
        out[head] = np.clip(j, 1, model.b0 - 1)
    if np.any(~head):
        ut = u[~head]
        scales = np.array([s.scale_mass for s in model.segments])
        # scale masses decrease; the owning segment is the last one with scale >= u
        idx = np.searchsorted(-scales, -ut, side="right") - 1
        idx = np.clip(idx, 0, len(scales) - 1)
        res = np.empty(len(ut), dtype=np.int64)
        for i, seg in enumerate(model.segments):
            sel = idx == i
            if not np.any(sel):
                continue
            j = np.floor(seg.lo * (seg.scale_mass / ut[sel]) ** (1.0 / seg.shape))
            hi = seg.hi - 1 if math.isfinite(seg.hi) else np.iinfo(np.int64).max // 2
            res[sel] = np.clip(j, seg.lo, hi).astype(np.int64)
        out[~head] = res
    return out
