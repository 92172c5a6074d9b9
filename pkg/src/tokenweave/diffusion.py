"""Parallel denoising of image cell blocks.

Sequential decoding pays one forward pass per cell.  The denoising path
instead treats the ``N = rows * cols`` cells of one image as a block:
corrupt (training) or initialize (inference) the block with the dedicated
absorbing MASK token, then repeatedly run one bidirectional forward over
the whole block — attending to the committed prefix through the KV cache —
and commit the most confident predictions, until every cell is fixed.
``S`` sweeps plus one causal committing pass replace ``N`` sequential
steps.

Corruption is absorbing-state: a draw of ``ceil(rate * N)`` distinct cell
positions is replaced by MASK; nothing else is perturbed.  Commitment is
monotone — a committed cell is never re-masked — and follows a cosine
quota: after sweep ``s`` of ``S``, ``ceil(N * (1 - cos(pi*s/(2S))))``
cells (monotonized to be strictly increasing, ending at ``N``) are
committed, so early sweeps fix few cells and late sweeps fix many.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mask import CLEAN, NOISY, LayoutSpan, layout_positions
from .model import KVCache, ModelConfig, forward_block
from .vocab import FlatSequence, UnifiedVocab


# ---------------------------------------------------------------------------
# Corruption
# ---------------------------------------------------------------------------

def corrupt_cells(cells: np.ndarray, vocab: UnifiedVocab, rng: np.random.Generator,
                  rate: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """Mask ``ceil(rate * N)`` distinct positions of one image's cells.

    ``rate`` defaults to a uniform draw from (0, 1].  Returns the corrupted
    copy and the boolean mask of corrupted positions.
    """
    cells = np.asarray(cells)
    n = len(cells)
    if rate is None:
        rate = 1.0 - float(rng.random())  # (0, 1]
    if not (0.0 < rate <= 1.0):
        raise ValueError(f"corruption rate {rate} outside (0, 1]")
    n_mask = int(np.ceil(rate * n))
    pick = rng.choice(n, size=n_mask, replace=False)
    masked = np.zeros(n, dtype=bool)
    masked[pick] = True
    noisy = cells.copy()
    noisy[masked] = vocab.mask
    return noisy, masked


# ---------------------------------------------------------------------------
# Commitment schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiseSchedule:
    """Cumulative commitment quota per sweep.

    ``keep_counts()[s-1]`` is how many cells are committed after sweep
    ``s``; strictly increasing, final entry ``n_cells``.  Requires
    ``n_steps <= n_cells`` so strict growth can reach the end.
    """

    n_cells: int
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("need at least one sweep")
        if self.n_steps > self.n_cells:
            raise ValueError(f"{self.n_steps} sweeps cannot each commit a new cell "
                             f"out of {self.n_cells}")

    def keep_counts(self) -> np.ndarray:
        return _keep_counts(self.n_cells, self.n_steps).copy()


@functools.lru_cache(maxsize=64)
def _keep_counts(n: int, S: int) -> np.ndarray:
    s = np.arange(1, S + 1, dtype=np.float64)
    raw = np.ceil(n * (1.0 - np.cos(np.pi * s / (2 * S)))).astype(np.int64)
    k = np.empty(S, dtype=np.int64)
    prev = 0
    for i in range(S):
        k[i] = max(raw[i], prev + 1)
        prev = k[i]
    # strict increase may have overshot near the end; pull back under the
    # ceiling that still allows +1 per remaining sweep
    for i in range(S):
        k[i] = min(k[i], n - (S - 1 - i))
    assert k[-1] == n and (np.diff(k) >= 1).all() and k[0] >= 1
    return k


# ---------------------------------------------------------------------------
# Decode rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecodeRule:
    """How logits become token choices.

    ``greedy`` picks the argmax; ``sample`` draws from the temperature-scaled
    distribution; ``top_k`` draws from that distribution truncated to the
    ``k`` highest-scoring candidates (renormalized).  ``choose`` operates on
    already-restricted logits (the caller slices out the legal id range) and
    returns local indices plus the probability the rule's own distribution
    assigned to each choice — the confidence used to rank commitments.
    """

    kind: str = "greedy"
    temperature: float = 1.0
    top_k: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("greedy", "sample", "top_k"):
            raise ValueError(f"unknown decode rule {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.kind == "top_k" and (self.top_k is None or self.top_k < 1):
            raise ValueError("top_k decoding needs top_k >= 1")

    def choose(self, logits: np.ndarray, rng: Optional[np.random.Generator]
               ) -> tuple[np.ndarray, np.ndarray]:
        """logits [rows, K] -> (indices [rows], confidences [rows])."""
        z = np.asarray(logits, dtype=np.float64) / self.temperature
        if self.kind == "top_k":
            if rng is None:
                raise ValueError("sampling needs an rng")
            k = min(self.top_k, z.shape[-1])
            top = np.argpartition(z, -k, axis=-1)[:, -k:]  # [rows, k]
            zt = np.take_along_axis(z, top, axis=-1)
            zt -= zt.max(axis=-1, keepdims=True)
            p = np.exp(zt)
            p /= p.sum(axis=-1, keepdims=True)
            u = rng.random(z.shape[0])
            sub = (u[:, None] > np.cumsum(p, axis=-1)).sum(axis=-1)
            idx = np.take_along_axis(top, sub[:, None], axis=-1)[:, 0]
            conf = np.take_along_axis(p, sub[:, None], axis=-1)[:, 0]
            return idx, conf
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        if self.kind == "greedy":
            idx = np.argmax(z, axis=-1)
        else:
            if rng is None:
                raise ValueError("sampling needs an rng")
            u = rng.random(z.shape[0])
            cdf = np.cumsum(p, axis=-1)
            idx = (u[:, None] > cdf).sum(axis=-1)
        conf = np.take_along_axis(p, idx[:, None], axis=-1)[:, 0]
        return idx, conf


# ---------------------------------------------------------------------------
# Iterative denoising
# ---------------------------------------------------------------------------

@dataclass
class DenoiseState:
    """Mutable block state across sweeps."""

    tokens: np.ndarray          # [N] current block content (MASK where open)
    committed: np.ndarray       # [N] bool
    sweep: int = 0

    @classmethod
    def fresh(cls, n_cells: int, vocab: UnifiedVocab) -> "DenoiseState":
        return cls(np.full(n_cells, vocab.mask, dtype=np.int64),
                   np.zeros(n_cells, dtype=bool))


def denoise_sweep(params, cfg: ModelConfig, vocab: UnifiedVocab, state: DenoiseState,
                  cache: KVCache, positions: np.ndarray, schedule: DenoiseSchedule,
                  rule: DecodeRule, rng: Optional[np.random.Generator]) -> DenoiseState:
    """One parallel refinement sweep; commits this sweep's quota of cells.

    Runs a single bidirectional forward over the block (cache untouched),
    predicts every open cell within the vision range, and commits the most
    confident ``quota - already_committed`` of them.  Committed cells are
    final: their tokens are never replaced or re-masked.
    """
    if state.sweep >= schedule.n_steps:
        raise ValueError("schedule exhausted")
    open_idx = np.flatnonzero(~state.committed)
    logits = forward_block(params, cfg, state.tokens, positions, cache,
                           self_mode="full", commit=False, logit_rows=open_idx)
    vis = logits[:, vocab.vision_start:vocab.vision_stop]
    idx, conf = rule.choose(vis, rng)      # one row per still-open cell
    proposal = vocab.vision_start + idx

    quota = int(_keep_counts(schedule.n_cells, schedule.n_steps)[state.sweep])
    n_new = quota - int(state.committed.sum())
    if n_new > 0:
        order = np.argsort(-conf, kind="stable")[:n_new]
        state.tokens[open_idx[order]] = proposal[order]
        state.committed[open_idx[order]] = True
    state.sweep += 1
    return state


def generate_image_cells(params, cfg: ModelConfig, vocab: UnifiedVocab,
                         cache: KVCache, positions: np.ndarray,
                         schedule: DenoiseSchedule, rule: DecodeRule,
                         rng: Optional[np.random.Generator]) -> tuple[np.ndarray, int]:
    """Denoise one image block from all-MASK to fully committed.

    ``positions`` are the rotary positions the cells will occupy in the
    stream.  Returns (cells, n_forwards) where n_forwards counts the
    denoise sweeps only; the caller still owes the one causal pass that
    commits the finished block into the cache.
    """
    n = len(positions)
    if schedule.n_cells != n:
        raise ValueError(f"schedule is for {schedule.n_cells} cells, block has {n}")
    state = DenoiseState.fresh(n, vocab)
    for _ in range(schedule.n_steps):
        denoise_sweep(params, cfg, vocab, state, cache, positions, schedule, rule, rng)
    assert state.committed.all()
    return state.tokens.copy(), schedule.n_steps


# ---------------------------------------------------------------------------
# Adaptation layouts (training-side view of the same process)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdaptedLayout:
    """One document rewritten for denoising adaptation.

    The serialized stream gains, immediately before each image's cells, a
    corrupted copy of those cells.  Clean tokens keep their original
    next-token chain (successor *in the clean stream*, skipping noisy
    blocks); corrupted noisy positions are supervised toward their clean
    partner cell.

    Attributes
    ----------
    tokens, spans, positions : the layout stream, its span structure, and
        rotary positions (noisy blocks repeat their partner's positions).
    targets : [L] supervision target per position (0 where inactive).
    is_diff : [L] True at corrupted noisy positions (denoising loss).
    is_ntp : [L] True at clean positions with an in-document successor.
    """

    tokens: np.ndarray
    spans: tuple[LayoutSpan, ...]
    positions: np.ndarray
    targets: np.ndarray
    is_diff: np.ndarray
    is_ntp: np.ndarray


def adapt_layout(flat: FlatSequence, vocab: UnifiedVocab, rng: np.random.Generator,
                 rate: Optional[float] = None) -> AdaptedLayout:
    """Build the adaptation layout for one document."""
    toks = flat.tokens
    pieces: list[np.ndarray] = []
    spans: list[LayoutSpan] = []
    diff_targets: list[tuple[int, np.ndarray, np.ndarray]] = []  # (start, clean, masked)
    pos = 0
    prev = 0

    def push_clean(stop_src: int):
        nonlocal pos, prev
        if stop_src > prev:
            seg = toks[prev:stop_src]
            pieces.append(seg)
            spans.append(LayoutSpan(CLEAN, pos, pos + len(seg)))
            pos += len(seg)
            prev = stop_src

    for sp in flat.image_spans():
        push_clean(sp.cells_start)
        clean_cells = toks[sp.cells_start:sp.cells_stop]
        noisy, masked = corrupt_cells(clean_cells, vocab, rng, rate)
        n = len(noisy)
        pieces.append(noisy)
        spans.append(LayoutSpan(NOISY, pos, pos + n, partner=len(spans) + 1))
        diff_targets.append((pos, clean_cells, masked))
        pos += n
        pieces.append(clean_cells)
        spans.append(LayoutSpan(CLEAN, pos, pos + n))
        pos += n
        prev = sp.cells_stop
    push_clean(len(toks))

    tokens = np.concatenate(pieces).astype(np.int64)
    span_t = tuple(spans)
    positions = layout_positions(span_t)
    L = len(tokens)
    targets = np.zeros(L, dtype=np.int64)
    is_diff = np.zeros(L, dtype=bool)
    is_ntp = np.zeros(L, dtype=bool)

    for start, clean_cells, masked in diff_targets:
        idx = np.flatnonzero(masked) + start
        targets[idx] = clean_cells[masked]
        is_diff[idx] = True

    # clean-stream successor chain: each clean position predicts the next
    # clean token; the final clean position (EOS) has no successor
    clean_idx = np.concatenate([np.arange(s.start, s.stop) for s in span_t
                                if s.kind == CLEAN])
    targets[clean_idx[:-1]] = tokens[clean_idx[1:]]
    is_ntp[clean_idx[:-1]] = True
    return AdaptedLayout(tokens, span_t, positions, targets, is_diff, is_ntp)
