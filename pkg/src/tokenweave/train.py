"""Losses, optimizer, packing, and the two training loops.

Loss plumbing is a single primitive: ``weighted_ce`` takes per-position
absolute coefficients and returns ``sum(c_i * CE_i)`` with its logits
gradient, exactly linear in the coefficients (doubling every coefficient
doubles every gradient bit for bit).  Everything else — per-role weighting
of next-token targets, the denoising adaptation objective — is expressed
by building one coefficient vector and calling it once, so a training step
is always exactly one forward and one backward.

Packing comes in two forms:

``online_pack``
    Greedy fill of [n, seq_len] rows with whole documents back to back —
    no padding between documents, a PAD tail where the next document no
    longer fits, and over-long documents skipped with a warning.
    Positions run 0..seq_len-1 per row and attention is plain causal
    across the row.  Next-token coefficients are zeroed at EOS (a document
    never predicts the next document's BOS) and at PAD.

``offline_pad``
    One document per row from position 0, PAD-filled to a common length,
    PAD everywhere inert (zero loss, never a target of real tokens).
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .diffusion import AdaptedLayout, adapt_layout
from .mask import CLEAN, BlockMask, LayoutSpan
from .model import ModelConfig, backward_batched, forward_batched
from .vocab import ROLE_SPECIAL, ROLE_TEXT, ROLE_VISION, FlatSequence, UnifiedVocab


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    """Per-role weight applied to a position by its *target* token's role."""

    text: float = 1.0
    vision: float = 0.5
    special: float = 1.0

    def lookup(self) -> np.ndarray:
        w = np.empty(3)
        w[ROLE_TEXT] = self.text
        w[ROLE_VISION] = self.vision
        w[ROLE_SPECIAL] = self.special
        return w


def weighted_ce(logits: np.ndarray, targets: np.ndarray, coeffs: np.ndarray,
                return_ce: bool = False):
    """``sum(coeffs * CE(logits, targets))`` and its logits gradient.

    Rows with coefficient 0 contribute nothing and get zero gradient.
    The gradient is ``(softmax(logits) - onehot(target)) * coeff``, so it is
    exactly linear in ``coeffs``.  With ``return_ce`` the per-position CE
    array is appended to the return tuple (for per-role diagnostics).
    """
    if logits.shape[:-1] != targets.shape or targets.shape != coeffs.shape:
        raise ValueError(f"shapes: logits {logits.shape}, targets {targets.shape}, "
                         f"coeffs {coeffs.shape}")
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=-1, keepdims=True)
    logz = (m + np.log(z))[..., 0]
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    ce = logz - picked
    loss = float(np.sum(coeffs.astype(np.float64) * ce.astype(np.float64)))
    dlogits = e / z
    np.subtract.at(dlogits.reshape(-1, logits.shape[-1]),
                   (np.arange(targets.size), targets.reshape(-1)), 1.0)
    dlogits *= coeffs[..., None]
    if return_ce:
        return loss, dlogits, ce
    return loss, dlogits


def role_mean_ce(ce: np.ndarray, targets: np.ndarray, coeffs: np.ndarray,
                 vocab: UnifiedVocab) -> tuple[float, float]:
    """Plain (unweighted) mean CE over supervised positions, split by the
    target token's role: ``(text_mean, vision_mean)``, 0.0 for an absent role."""
    active = coeffs > 0
    roles = vocab.roles(targets)
    out = []
    for role in (ROLE_TEXT, ROLE_VISION):
        pick = active & (roles == role)
        out.append(float(ce[pick].mean()) if pick.any() else 0.0)
    return out[0], out[1]


def ntp_targets_and_coeffs(rows: np.ndarray, vocab: UnifiedVocab,
                           weights: LossWeights) -> tuple[np.ndarray, np.ndarray]:
    """Shift-by-one supervision for token rows.

    Position t predicts rows[:, t+1], weighted by the target's role; the
    last column, EOS positions (next-document boundary), PAD positions,
    and PAD targets all get coefficient 0.
    """
    B, T = rows.shape
    targets = np.zeros((B, T), dtype=np.int64)
    targets[:, :-1] = rows[:, 1:]
    active = np.zeros((B, T), dtype=bool)
    active[:, :-1] = True
    active &= rows != vocab.eos
    active &= rows != vocab.pad
    active &= targets != vocab.pad
    coeffs = np.where(active, weights.lookup()[vocab.roles(targets)], 0.0)
    return targets, coeffs


def ntp_loss(logits, rows, vocab, weights=LossWeights()) -> float:
    """Normalized report-style loss: sum(w*CE)/sum(w) over active positions."""
    targets, coeffs = ntp_targets_and_coeffs(rows, vocab, weights)
    total = coeffs.sum()
    if total == 0:
        return 0.0
    loss, _ = weighted_ce(logits, targets, coeffs)
    return loss / float(total)


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------

def online_pack(doc_tokens: Sequence[np.ndarray], vocab: UnifiedVocab,
                seq_len: int) -> tuple[np.ndarray, int]:
    """Greedily fill [n, seq_len] rows with whole documents, back to back.

    A document joins the current row iff it fits entirely in the remaining
    space; otherwise the row is closed with a PAD tail and a new one starts.
    Documents longer than ``seq_len`` cannot be packed at all — they are
    skipped with a note on stderr.  Returns ``(rows, n_skipped)``.
    """
    kept, skipped = [], 0
    for t in doc_tokens:
        t = np.asarray(t, dtype=np.int64)
        if len(t) > seq_len:
            skipped += 1
        else:
            kept.append(t)
    if skipped:
        print(f"online_pack: skipped {skipped} document(s) longer than {seq_len}",
              file=sys.stderr)
    row_docs: list[list[np.ndarray]] = []
    used = seq_len  # force a fresh row for the first document
    for t in kept:
        if used + len(t) > seq_len:
            row_docs.append([])
            used = 0
        row_docs[-1].append(t)
        used += len(t)
    rows = np.full((len(row_docs), seq_len), vocab.pad, dtype=np.int64)
    for i, ts in enumerate(row_docs):
        cat = np.concatenate(ts)
        rows[i, :len(cat)] = cat
    return rows, skipped


def offline_pad(doc_tokens: Sequence[np.ndarray], vocab: UnifiedVocab,
                seq_len: Optional[int] = None) -> np.ndarray:
    """One document per row, PAD-filled to ``seq_len`` (default: longest)."""
    lens = [len(t) for t in doc_tokens]
    width = seq_len if seq_len is not None else max(lens, default=0)
    if any(l > width for l in lens):
        raise ValueError(f"document of {max(lens)} tokens exceeds row width {width}")
    rows = np.full((len(doc_tokens), width), vocab.pad, dtype=np.int64)
    for i, t in enumerate(doc_tokens):
        rows[i, :len(t)] = t
    return rows


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamW:
    """Decoupled-weight-decay Adam with global-gradient-norm clipping.

    When the global norm is at or under ``clip_norm`` the gradients are
    used untouched — no rescale by 1.0 — so the update is bitwise identical
    to an unclipped optimizer.
    """

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 5.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        if not self.m:
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
        gsq = sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())
        gnorm = float(np.sqrt(gsq))
        clipped = self.clip_norm is not None and gnorm > self.clip_norm
        if clipped:
            scale = self.clip_norm / gnorm
            grads = {k: g * scale for k, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, p in params.items():
            g = grads[k]
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * np.square(g)
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            upd = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * p
            p -= (lr * upd).astype(p.dtype, copy=False)
        return {"grad_norm": gnorm, "clipped": clipped}


def lr_schedule(step: int, base_lr: float, warmup: int, total: int,
                min_frac: float = 0.1) -> float:
    """Linear warmup then cosine decay to ``min_frac * base_lr``."""
    if step < warmup:
        return base_lr * (step + 1) / max(warmup, 1)
    if total <= warmup:
        return base_lr
    prog = (step - warmup) / (total - warmup)
    prog = min(max(prog, 0.0), 1.0)
    return base_lr * (min_frac + (1.0 - min_frac) * 0.5 * (1.0 + np.cos(np.pi * prog)))


# ---------------------------------------------------------------------------
# Base next-token training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    seq_len: int = 256
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.0
    clip_norm: float = 5.0
    seed: int = 0
    loss_weights: LossWeights = LossWeights()


class MetricsLog:
    """JSON-lines metrics writer (no-op without a path)."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, **row):
        self.rows.append(row)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(row) + "\n")


def train_base(params: dict, cfg: ModelConfig, tcfg: TrainConfig,
               doc_tokens: Sequence[np.ndarray], vocab: UnifiedVocab,
               metrics: Optional[MetricsLog] = None,
               progress: Optional[int] = None) -> dict:
    """Next-token training over packed rows; mutates and returns ``params``.

    Packs the corpus anew each epoch under a seeded shuffle, so the step
    sequence is a pure function of (params seed, corpus, tcfg.seed).
    """
    metrics = metrics or MetricsLog()
    rng = np.random.default_rng(tcfg.seed)
    opt = AdamW(weight_decay=tcfg.weight_decay, clip_norm=tcfg.clip_norm)
    T = tcfg.seq_len
    causal_add = BlockMask.causal(T).additive(np.float32)
    positions = np.tile(np.arange(T), (tcfg.batch_size, 1))
    step = 0
    t0 = time.monotonic()
    while step < tcfg.steps:
        order = rng.permutation(len(doc_tokens))
        rows, _ = online_pack([doc_tokens[i] for i in order], vocab, T)
        for i in range(0, len(rows) - tcfg.batch_size + 1, tcfg.batch_size):
            if step >= tcfg.steps:
                break
            batch = rows[i:i + tcfg.batch_size]
            targets, coeffs = ntp_targets_and_coeffs(batch, vocab, tcfg.loss_weights)
            csum = coeffs.sum()
            logits, saved = forward_batched(params, cfg, batch, positions,
                                            causal_add, return_saved=True)
            loss, dlogits, ce = weighted_ce(logits, targets, coeffs / csum,
                                            return_ce=True)
            grads = backward_batched(params, cfg, saved, dlogits)
            lr = lr_schedule(step, tcfg.lr, tcfg.warmup, tcfg.steps)
            stats = opt.step(params, grads, lr)
            step += 1
            loss_text, loss_vis = role_mean_ce(ce, targets, coeffs, vocab)
            metrics.log(step=step, loss=round(loss, 6),
                        loss_text=round(loss_text, 6),
                        loss_vis=round(loss_vis, 6),
                        grad_norm=round(stats["grad_norm"], 4), lr=lr)
            if progress and (step % progress == 0 or step == tcfg.steps):
                wall = time.monotonic() - t0
                print(f"  step {step}/{tcfg.steps}  loss {loss:.4f}  "
                      f"lr {lr:.2e}  {wall:.0f}s", flush=True)
    return params


# ---------------------------------------------------------------------------
# Denoising adaptation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdaptConfig:
    steps: int = 400
    batch_size: int = 8
    lr: float = 1e-4
    warmup: int = 100
    weight_decay: float = 0.0
    clip_norm: float = 5.0
    seed: int = 0
    w_diff: float = 1.0
    w_ntp: float = 1.0
    rate: Optional[float] = None  # None: uniform (0,1] per image
    loss_weights: LossWeights = LossWeights()


def adaptation_batch(layouts: Sequence[AdaptedLayout], vocab: UnifiedVocab,
                     acfg: AdaptConfig):
    """Assemble padded rows, per-row masks, and the folded coefficient vector.

    The objective is
    ``w_diff * mean(CE over corrupted noisy cells -> clean partner)
    + w_ntp * weighted-mean(CE over the clean next-token chain)``,
    folded into one absolute coefficient per position so the whole step is
    a single ``weighted_ce`` call.
    """
    B = len(layouts)
    L = max(len(a.tokens) for a in layouts)
    tokens = np.full((B, L), vocab.pad, dtype=np.int64)
    positions = np.zeros((B, L), dtype=np.int64)
    targets = np.zeros((B, L), dtype=np.int64)
    is_diff = np.zeros((B, L), dtype=bool)
    is_ntp = np.zeros((B, L), dtype=bool)
    add = np.full((B, L, L), -np.inf, dtype=np.float32)
    for b, a in enumerate(layouts):
        l = len(a.tokens)
        tokens[b, :l] = a.tokens
        positions[b, :l] = a.positions
        targets[b, :l] = a.targets
        is_diff[b, :l] = a.is_diff
        is_ntp[b, :l] = a.is_ntp
        spans = a.spans
        if l < L:  # pad tail joins the clean stream: inert but attendable
            spans = spans + (LayoutSpan(CLEAN, l, L),)
            positions[b, l:] = np.arange(L - l) + int(a.positions.max()) + 1
        add[b] = BlockMask.dida_train(spans).additive(np.float32)
    role_w = LossWeights(acfg.loss_weights.text, acfg.loss_weights.vision,
                         acfg.loss_weights.special).lookup()[vocab.roles(targets)]
    ntp_w = np.where(is_ntp, role_w, 0.0)
    coeffs = np.zeros((B, L))
    n_diff = int(is_diff.sum())
    if n_diff:
        coeffs[is_diff] += acfg.w_diff / n_diff
    ntp_total = ntp_w.sum()
    if ntp_total > 0:
        coeffs += acfg.w_ntp * ntp_w / ntp_total
    return tokens, positions, add, targets, coeffs


def train_adapt(params: dict, cfg: ModelConfig, acfg: AdaptConfig,
                flats: Sequence[FlatSequence], vocab: UnifiedVocab,
                metrics: Optional[MetricsLog] = None,
                progress: Optional[int] = None) -> dict:
    """Denoising adaptation over documents that contain at least one image."""
    flats = [f for f in flats if f.image_spans()]
    if not flats:
        raise ValueError("adaptation needs documents with images")
    metrics = metrics or MetricsLog()
    rng = np.random.default_rng(acfg.seed)
    opt = AdamW(weight_decay=acfg.weight_decay, clip_norm=acfg.clip_norm)
    t0 = time.monotonic()
    for step in range(acfg.steps):
        pick = rng.choice(len(flats), size=min(acfg.batch_size, len(flats)),
                          replace=False)
        layouts = [adapt_layout(flats[i], vocab, rng, acfg.rate) for i in pick]
        tokens, positions, add, targets, coeffs = adaptation_batch(
            layouts, vocab, acfg)
        logits, saved = forward_batched(params, cfg, tokens, positions, add,
                                        return_saved=True)
        loss, dlogits, ce = weighted_ce(logits, targets, coeffs, return_ce=True)
        grads = backward_batched(params, cfg, saved, dlogits)
        lr = lr_schedule(step, acfg.lr, acfg.warmup, acfg.steps)
        stats = opt.step(params, grads, lr)
        loss_text, loss_vis = role_mean_ce(ce, targets, coeffs, vocab)
        metrics.log(step=step + 1, loss=round(loss, 6),
                    loss_text=round(loss_text, 6), loss_vis=round(loss_vis, 6),
                    grad_norm=round(stats["grad_norm"], 4), lr=lr)
        if progress and ((step + 1) % progress == 0 or step + 1 == acfg.steps):
            wall = time.monotonic() - t0
            print(f"  adapt {step + 1}/{acfg.steps}  loss {loss:.4f}  "
                  f"{wall:.0f}s", flush=True)
    return params
