"""Grammar-constrained decoding: sequential, and hybrid with parallel images.

A ``StreamValidator`` is the single source of truth for what may come next
at any point of a token stream.  It is a small automaton over the
serialization grammar (BOS, text and image segments, EOS; images bracketed
as BOI, row marker, column marker, cells, EOI) plus a budget policy:

* at the last affordable slot, EOS is the only legal token;
* BOI is legal only when the smallest image plus its brackets plus a final
  EOS still fit;
* a row/column marker is legal only when the raster it commits to still
  fits.

Decoding restricts the model's logits to the validator's legal set before
choosing, so *every* emitted stream parses, by construction — the model
never gets the chance to break a bracket.

The decoder is one driver with two image modes.  ``ar`` walks cells one
committing forward at a time, exactly like text.  ``dida`` runs the
parallel denoiser: S bidirectional sweeps over the whole cell block
against the frozen prefix cache, then a single causal pass that commits
the finished block and hands back the next-token logits.  Outside image
cells the two modes execute the same instructions in the same order, so
a generation that never enters an image is identical between them down to
the last bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .diffusion import DecodeRule, DenoiseSchedule, generate_image_cells
from .model import KVCache, ModelConfig, forward_block, forward_step
from .vocab import Document, UnifiedVocab, parse_sequence

__all__ = [
    "DecodeRule", "GenStats", "GenResult", "StreamError", "StreamValidator",
    "validate_stream", "generate_ar", "generate_hybrid", "run_requests",
    "stop_after_n_images", "self_distill",
]


class StreamError(ValueError):
    """A token violated the stream grammar.

    Attributes
    ----------
    position : int
        Stream index of the offending token.
    """

    def __init__(self, position: int, message: str):
        super().__init__(f"position {position}: {message}")
        self.position = position


# validator states
_EXPECT_BOS = "expect_bos"
_TOP = "top"
_IMG_ROW = "img_row"
_IMG_COL = "img_col"
_CELLS = "cells"
_IMG_END = "img_end"
_DONE = "done"


class StreamValidator:
    """Incremental grammar automaton with optional budget accounting.

    ``feed`` advances by one token (raising StreamError on an illegal one);
    ``legal_mask`` reports every token that could come next.  When
    ``max_len`` is set, the mask additionally guarantees that any legal
    continuation can still be closed off with EOS within the budget.
    """

    def __init__(self, vocab: UnifiedVocab, max_len: Optional[int] = None):
        if max_len is not None and max_len < 2:
            raise ValueError("budget below BOS+EOS")
        self.vocab = vocab
        self.max_len = max_len
        self.state = _EXPECT_BOS
        self.length = 0
        self.rows = 0
        self.cols = 0
        self.cells_left = 0
        self.images_closed = 0
        self._min_size = min(vocab.sizes)

    @property
    def remaining(self) -> Optional[int]:
        return None if self.max_len is None else self.max_len - self.length

    @property
    def done(self) -> bool:
        return self.state == _DONE

    @property
    def in_cells(self) -> bool:
        return self.state == _CELLS

    def clone(self) -> "StreamValidator":
        c = StreamValidator(self.vocab, self.max_len)
        c.state, c.length = self.state, self.length
        c.rows, c.cols, c.cells_left = self.rows, self.cols, self.cells_left
        c.images_closed = self.images_closed
        return c

    # -- legality ----------------------------------------------------------

    def legal_mask(self) -> np.ndarray:
        """Boolean [vocab_size] mask of legal next tokens."""
        v = self.vocab
        m = np.zeros(v.vocab_size, dtype=bool)
        rem = self.remaining
        if self.state == _EXPECT_BOS:
            m[v.bos] = True
        elif self.state == _TOP:
            m[v.eos] = True
            if rem is None or rem >= 2:
                m[v.text_start:v.text_stop] = True
            # an image needs BOI + 2 size markers + cells + EOI, then EOS
            if rem is None or rem >= 4 + self._min_size * self._min_size + 1:
                m[v.boi] = True
        elif self.state == _IMG_ROW:
            for s in v.sizes:
                # marker + column marker + smallest raster + EOI + final EOS
                if rem is None or rem >= 2 + s * self._min_size + 2:
                    m[v.size_row(s)] = True
        elif self.state == _IMG_COL:
            for s in v.sizes:
                if rem is None or rem >= 1 + self.rows * s + 2:
                    m[v.size_col(s)] = True
        elif self.state == _CELLS:
            m[v.vision_start:v.vision_stop] = True
        elif self.state == _IMG_END:
            m[v.eoi] = True
        return m

    def legal_ids(self) -> np.ndarray:
        return np.flatnonzero(self.legal_mask())

    # -- advancing ---------------------------------------------------------

    def feed(self, tok: int) -> None:
        tok = int(tok)
        v = self.vocab
        if not (0 <= tok < v.vocab_size):
            raise StreamError(self.length, f"token id {tok} outside vocabulary")
        if not self.legal_mask()[tok]:
            raise StreamError(
                self.length,
                f"{v.token_name(tok)} illegal in state {self.state}"
                + (f" with {self.remaining} tokens left" if self.max_len else ""))
        if self.state == _EXPECT_BOS:
            self.state = _TOP
        elif self.state == _TOP:
            if tok == v.eos:
                self.state = _DONE
            elif tok == v.boi:
                self.state = _IMG_ROW
        elif self.state == _IMG_ROW:
            self.rows = v.row_size_of(tok)
            self.state = _IMG_COL
        elif self.state == _IMG_COL:
            self.cols = v.col_size_of(tok)
            self.cells_left = self.rows * self.cols
            self.state = _CELLS
        elif self.state == _CELLS:
            self.cells_left -= 1
            if self.cells_left == 0:
                self.state = _IMG_END
        elif self.state == _IMG_END:
            self.state = _TOP
            self.images_closed += 1
        self.length += 1


def validate_stream(tokens, vocab: UnifiedVocab,
                    max_len: Optional[int] = None) -> bool:
    """Feed a whole stream through the automaton; True iff it is a complete
    document (ends in EOS).  Raises StreamError at the first violation."""
    val = StreamValidator(vocab, max_len)
    for t in np.asarray(tokens).ravel():
        if val.done:
            raise StreamError(val.length, "trailing tokens after EOS")
        val.feed(int(t))
    return val.done


# ---------------------------------------------------------------------------
# Generation driver
# ---------------------------------------------------------------------------

@dataclass
class GenStats:
    """Forward-pass accounting for one generation."""

    prefill_forwards: int = 0
    step_forwards: int = 0      # committing single-token forwards
    sweep_forwards: int = 0     # bidirectional denoise sweeps (block-sized)
    commit_forwards: int = 0    # causal block commits
    wall_s: float = 0.0
    prefill_wall_s: float = 0.0  # portion of wall_s spent feeding the prompt
    images: list = field(default_factory=list)  # per image: dict(cells=, forwards=)

    @property
    def total_forwards(self) -> int:
        return (self.prefill_forwards + self.step_forwards
                + self.sweep_forwards + self.commit_forwards)


@dataclass
class GenResult:
    tokens: np.ndarray
    stats: GenStats
    trace: Optional[list] = None

    def document(self, vocab: UnifiedVocab) -> Document:
        return parse_sequence(self.tokens, vocab)


def _drive(params, cfg: ModelConfig, vocab: UnifiedVocab, prompt, max_len: int,
           rule: DecodeRule, rng: Optional[np.random.Generator],
           image_mode: str, denoise_steps: int,
           denoise_rule: Optional[DecodeRule],
           stop_after: Optional[Callable[[StreamValidator], bool]],
           keep_trace: bool) -> GenResult:
    prompt = [int(t) for t in np.asarray(prompt).ravel()]
    if not prompt:
        raise ValueError("prompt must contain at least BOS")
    if max_len < len(prompt) + 1:
        raise ValueError("budget smaller than the prompt")
    if image_mode not in ("ar", "dida"):
        raise ValueError(f"image_mode {image_mode!r}")
    denoise_rule = denoise_rule or rule

    val = StreamValidator(vocab, max_len)
    cache = KVCache(cfg, max_len, dtype=params["embed"].dtype)
    stats = GenStats()
    trace: Optional[list] = [] if keep_trace else None
    t0 = time.monotonic()

    logits = None
    for t in prompt:
        val.feed(t)  # raises on an invalid prompt
        logits = forward_step(params, cfg, t, cache.length, cache)
        stats.prefill_forwards += 1
    stats.prefill_wall_s = time.monotonic() - t0
    img_t0 = 0.0  # per-image wall clock, armed when an image entry opens
    if val.state == _CELLS:  # prompt ends mid-image: the rest is generated
        stats.images.append(
            {"cells": val.cells_left, "forwards": 0, "mode": image_mode,
             "wall_s": 0.0})
        img_t0 = time.monotonic()

    out = list(prompt)
    while not val.done and not (stop_after and stop_after(val)):
        if image_mode == "dida" and val.state == _CELLS and val.cells_left > 0:
            n = val.cells_left
            positions = np.arange(cache.length, cache.length + n)
            sched = DenoiseSchedule(n, min(denoise_steps, n))
            cells, sweeps = generate_image_cells(
                params, cfg, vocab, cache, positions, sched, denoise_rule, rng)
            stats.sweep_forwards += sweeps
            block_logits = forward_block(params, cfg, cells, positions, cache,
                                         self_mode="causal", commit=True,
                                         logit_rows=np.array([n - 1]))
            stats.commit_forwards += 1
            stats.images[-1]["forwards"] = sweeps + 1  # entry opened at size choice
            for c in cells:
                val.feed(int(c))
            out.extend(int(c) for c in cells)
            stats.images[-1]["wall_s"] = time.monotonic() - img_t0
            if keep_trace:
                trace.append({"state": _CELLS, "event": "denoise-block",
                              "cells": n, "forwards": sweeps + 1})
            logits = block_logits[0]
            continue

        legal = val.legal_ids()
        if len(legal) == 0:
            raise StreamError(val.length, f"no legal continuation in {val.state}")
        idx, _ = rule.choose(logits[None, legal], rng)
        tok = int(legal[idx[0]])
        if keep_trace:
            trace.append({"state": val.state, "token": vocab.token_name(tok),
                          "n_legal": int(len(legal))})
        if val.state == _IMG_COL:  # this token fixes the raster size
            n = val.rows * vocab.col_size_of(tok)
            stats.images.append({"cells": n, "forwards": 0, "mode": image_mode,
                                 "wall_s": 0.0})
            img_t0 = time.monotonic()
        was_cell = val.state == _CELLS
        val.feed(tok)
        out.append(tok)
        if was_cell and val.state != _CELLS:  # that was the image's last cell
            stats.images[-1]["wall_s"] = time.monotonic() - img_t0
        if val.done:
            break  # nothing left to predict
        logits = forward_step(params, cfg, tok, cache.length, cache)
        stats.step_forwards += 1
        if was_cell:
            stats.images[-1]["forwards"] += 1

    stats.wall_s = time.monotonic() - t0
    return GenResult(np.asarray(out, dtype=np.int64), stats, trace)


def generate_ar(params, cfg, vocab, prompt, max_len, rule=DecodeRule("greedy"),
                rng=None, stop_after=None, keep_trace=False) -> GenResult:
    """Sequential decoding: every token, cells included, is one forward."""
    return _drive(params, cfg, vocab, prompt, max_len, rule, rng,
                  image_mode="ar", denoise_steps=0, denoise_rule=None,
                  stop_after=stop_after, keep_trace=keep_trace)


def generate_hybrid(params, cfg, vocab, prompt, max_len,
                    rule=DecodeRule("greedy"), rng=None, denoise_steps=16,
                    denoise_rule=None, stop_after=None,
                    keep_trace=False) -> GenResult:
    """Hybrid decoding: text and structure sequentially, image cell blocks
    by parallel denoising (S sweeps + 1 committing pass per image)."""
    if denoise_steps < 1:
        raise ValueError("denoise_steps must be >= 1")
    return _drive(params, cfg, vocab, prompt, max_len, rule, rng,
                  image_mode="dida", denoise_steps=denoise_steps,
                  denoise_rule=denoise_rule, stop_after=stop_after,
                  keep_trace=keep_trace)


def run_requests(params, cfg, vocab, prompts: Sequence, max_len: int,
                 mode: str = "hybrid", **kwargs) -> list[GenResult]:
    """Sequential multi-request driver (one cache per request)."""
    gen = generate_hybrid if mode == "hybrid" else generate_ar
    return [gen(params, cfg, vocab, p, max_len, **kwargs) for p in prompts]


def stop_after_n_images(n: int) -> Callable[[StreamValidator], bool]:
    """Stop hook: halt once ``n`` image brackets have been closed."""
    return lambda val: val.images_closed >= n


# ---------------------------------------------------------------------------
# Self-distillation
# ---------------------------------------------------------------------------

def self_distill(params, cfg, vocab, prompts: Sequence[np.ndarray], max_len: int,
                 rule: DecodeRule, seed: int) -> list[Document]:
    """Generate full documents from caption prompts with the model itself.

    Every output parses by construction; the parsed documents are returned
    for use as extra adaptation data.
    """
    docs = []
    root = np.random.SeedSequence(seed)
    for prompt, ss in zip(prompts, root.spawn(len(prompts))):
        rng = np.random.default_rng(ss)
        res = generate_ar(params, cfg, vocab, prompt, max_len, rule, rng)
        docs.append(res.document(vocab))
    return docs
