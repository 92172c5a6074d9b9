"""Block-structured attention reachability.

Attention layouts here are unions of key *ranges* per query *block*: every
mask we need (plain causal decoding, the denoising-adaptation training
layout, the parallel-denoise inference layout) is piecewise constant over
contiguous runs of queries, so a mask is stored as a few ranges per block
instead of an ``n x n`` table.  A range is either fully reachable or
"causal", meaning key ``k`` is reachable from query ``q`` iff ``k <= q``
(used for diagonal ranges).  Memory is O(blocks * ranges); point queries
are binary searches.

The adaptation-training layout interleaves *clean* spans (the original
stream: text, structural markers, committed image cells) with *noisy*
spans (corrupted copies of an image's cells, inserted immediately before
their clean partner).  Reachability rules:

* a clean query attends causally to the clean stream only, skipping every
  noisy span — so clean rows reproduce plain causal attention exactly;
* a noisy query attends to all clean spans that precede its own block,
  except its partner's cells, plus its whole own block bidirectionally;
* noisy blocks never attend to other noisy blocks.

``layout_positions`` assigns rotary positions: clean tokens are numbered
consecutively along the clean stream (matching the un-noised document),
and each noisy token copies its partner cell's position.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

CLEAN = "clean"
NOISY = "noisy"


@dataclass(frozen=True)
class LayoutSpan:
    """One contiguous run of the adaptation layout.

    ``partner`` is the index (into the span list) of the clean span holding
    the uncorrupted cells a noisy span was copied from; -1 for clean spans.
    """

    kind: str
    start: int
    stop: int
    partner: int = -1

    def __len__(self) -> int:
        return self.stop - self.start


def _validate_spans(spans: tuple[LayoutSpan, ...]) -> int:
    pos = 0
    for i, s in enumerate(spans):
        if s.kind not in (CLEAN, NOISY):
            raise ValueError(f"span {i}: unknown kind {s.kind!r}")
        if s.start != pos or s.stop <= s.start:
            raise ValueError(f"span {i}: spans must tile [0, n) in order; "
                             f"got [{s.start}, {s.stop}) at position {pos}")
        if s.kind == NOISY:
            if not (0 <= s.partner < len(spans)):
                raise ValueError(f"span {i}: partner index {s.partner} out of range")
            p = spans[s.partner]
            if p.kind != CLEAN:
                raise ValueError(f"span {i}: partner {s.partner} is not clean")
            if len(p) != len(s):
                raise ValueError(f"span {i}: noisy length {len(s)} != partner length {len(p)}")
        elif s.partner != -1:
            raise ValueError(f"span {i}: clean spans take partner=-1")
        pos = s.stop
    return pos


@dataclass(frozen=True)
class KeyRange:
    """Keys ``[start, stop)``; if ``causal``, reachable iff ``k <= q``."""

    start: int
    stop: int
    causal: bool = False


@dataclass(frozen=True)
class BlockMask:
    """Reachability over an ``n x n`` attention square.

    ``q_starts[i]`` is the first query of block ``i`` (ascending, starting
    at 0); block ``i`` ends where block ``i+1`` starts, the last at ``n``.
    ``ranges[i]`` are that block's key ranges, ascending and disjoint.
    """

    n: int
    q_starts: tuple[int, ...]
    ranges: tuple[tuple[KeyRange, ...], ...]

    def __post_init__(self):
        if len(self.q_starts) != len(self.ranges) or not self.q_starts or self.q_starts[0] != 0:
            raise ValueError("q_starts/ranges mismatch or missing leading 0")
        for rs in self.ranges:
            if not rs:
                raise ValueError("every query block needs at least one reachable key range")

    # -- constructors -------------------------------------------------------

    @classmethod
    def causal(cls, n: int) -> "BlockMask":
        """Plain decoding: query q reaches keys 0..q."""
        if n <= 0:
            raise ValueError("n must be positive")
        return cls(n, (0,), ((KeyRange(0, n, causal=True),),))

    @classmethod
    def dida_train(cls, spans: tuple[LayoutSpan, ...]) -> "BlockMask":
        """Adaptation-training layout; one query block per span."""
        n = _validate_spans(spans)
        ranges: list[tuple[KeyRange, ...]] = []
        for i, s in enumerate(spans):
            rs: list[KeyRange] = []
            if s.kind == CLEAN:
                # Causal over the clean stream: earlier clean spans fully,
                # own span up to the diagonal.
                for t in spans[:i]:
                    if t.kind == CLEAN:
                        rs.append(KeyRange(t.start, t.stop))
                rs.append(KeyRange(s.start, s.stop, causal=True))
            else:
                # Clean context before this block, minus the partner cells;
                # own block bidirectional.  Other noisy blocks never appear.
                for j, t in enumerate(spans):
                    if t.kind == CLEAN and t.stop <= s.start and j != s.partner:
                        rs.append(KeyRange(t.start, t.stop))
                rs.append(KeyRange(s.start, s.stop))
            ranges.append(tuple(_merge(rs)))
        return cls(n, tuple(s.start for s in spans), tuple(ranges))

    @classmethod
    def dida_infer(cls, prefix_len: int, block_len: int) -> "BlockMask":
        """Parallel-denoise layout: a causal prefix of committed tokens,
        then one block that sees the whole prefix and itself bidirectionally."""
        if prefix_len <= 0 or block_len <= 0:
            raise ValueError("prefix_len and block_len must be positive")
        n = prefix_len + block_len
        return cls(
            n,
            (0, prefix_len),
            ((KeyRange(0, prefix_len, causal=True),),
             (KeyRange(0, n),)),
        )

    # -- queries ------------------------------------------------------------

    def _block_of(self, q: int) -> int:
        if not (0 <= q < self.n):
            raise IndexError(f"query {q} outside [0, {self.n})")
        return bisect_right(self.q_starts, q) - 1

    def reachable(self, q: int, k: int) -> bool:
        """Exact point query via binary search over the block's ranges."""
        if not (0 <= k < self.n):
            raise IndexError(f"key {k} outside [0, {self.n})")
        rs = self.ranges[self._block_of(q)]
        i = bisect_right(rs, k, key=lambda r: r.start) - 1
        if i < 0:
            return False
        r = rs[i]
        if not (r.start <= k < r.stop):
            return False
        return k <= q if r.causal else True

    def keys_for(self, q: int) -> np.ndarray:
        """All keys reachable from ``q``, ascending (the gather order the
        reference attention path uses)."""
        out = []
        for r in self.ranges[self._block_of(q)]:
            stop = min(r.stop, q + 1) if r.causal else r.stop
            if stop > r.start:
                out.append(np.arange(r.start, stop))
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)

    def dense(self) -> np.ndarray:
        """Materialized boolean table (tests and small layouts only)."""
        m = np.zeros((self.n, self.n), dtype=bool)
        starts = list(self.q_starts) + [self.n]
        for i, rs in enumerate(self.ranges):
            q0, q1 = starts[i], starts[i + 1]
            for r in rs:
                m[q0:q1, r.start:r.stop] = True
                if r.causal:
                    for q in range(q0, q1):
                        m[q, max(r.start, q + 1):r.stop] = False
        return m

    def additive(self, dtype=np.float32) -> np.ndarray:
        """0 where reachable, -inf elsewhere, for masked dense attention."""
        out = np.where(self.dense(), dtype(0), dtype(-np.inf))
        return out.astype(dtype)

    def count_reachable(self) -> int:
        starts = list(self.q_starts) + [self.n]
        total = 0
        for i, rs in enumerate(self.ranges):
            q0, q1 = starts[i], starts[i + 1]
            for r in rs:
                if r.causal:
                    for q in range(q0, q1):
                        total += max(0, min(r.stop, q + 1) - r.start)
                else:
                    total += (q1 - q0) * (r.stop - r.start)
        return total


def _merge(rs: list[KeyRange]) -> list[KeyRange]:
    """Coalesce adjacent compatible ranges; assumes ascending disjoint input."""
    out: list[KeyRange] = []
    for r in sorted(rs, key=lambda r: r.start):
        if out and not out[-1].causal and not r.causal and out[-1].stop == r.start:
            out[-1] = KeyRange(out[-1].start, r.stop)
        else:
            out.append(r)
    return out


def layout_positions(spans: tuple[LayoutSpan, ...]) -> np.ndarray:
    """Rotary position ids for an adaptation layout.

    Clean tokens are numbered 0,1,2,... in clean-stream order, so they carry
    exactly the positions they have in the un-noised document; each noisy
    token copies the position of its partner's corresponding cell.
    """
    n = _validate_spans(spans)
    pos = np.full(n, -1, dtype=np.int64)
    next_pos = 0
    for s in spans:
        if s.kind == CLEAN:
            pos[s.start:s.stop] = np.arange(next_pos, next_pos + len(s))
            next_pos += len(s)
    for s in spans:
        if s.kind == NOISY:
            p = spans[s.partner]
            pos[s.start:s.stop] = pos[p.start:p.stop]
    return pos
