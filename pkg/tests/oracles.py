"""Independent reference implementations used to pin expected test values.

Everything here is written directly from the prose rules, against dense
tables and explicit loops, deliberately sharing no code with the package.
"""

import numpy as np

from tokenweave.mask import CLEAN, NOISY, LayoutSpan


def dense_causal(n):
    q = np.arange(n)
    return q[None, :] <= q[:, None]


def dense_adapt(spans):
    """Reachability table for an adaptation layout, from the prose rule."""
    n = spans[-1].stop
    span_id = np.empty(n, dtype=np.int64)
    for i, s in enumerate(spans):
        span_id[s.start:s.stop] = i
    is_clean = np.array([spans[i].kind == CLEAN for i in span_id])
    span_stop = np.array([spans[i].stop for i in span_id])
    ks = np.arange(n)
    m = np.zeros((n, n), dtype=bool)
    for q in range(n):
        s = spans[span_id[q]]
        if s.kind == CLEAN:
            # causal over the clean stream only
            m[q] = is_clean & (ks <= q)
        else:
            own = span_id == span_id[q]
            before = is_clean & (span_stop <= s.start) & (span_id != s.partner)
            m[q] = own | before
    return m


def dense_denoise(prefix_len, block_len):
    n = prefix_len + block_len
    m = np.zeros((n, n), dtype=bool)
    m[:prefix_len, :prefix_len] = dense_causal(prefix_len)
    m[prefix_len:, :] = True
    return m


def random_layout(rng, max_images=2, max_seq=256):
    """Random well-formed adaptation layout: clean runs interleaved with
    (noisy block, clean partner cells) pairs, total length <= max_seq."""
    n_images = int(rng.integers(0, max_images + 1))
    sizes = []
    room = max_seq - 4  # keep space for at least a short clean run
    for _ in range(n_images):
        fits = [s for s in (4, 9, 16, 25, 36, 64) if 2 * s <= room]
        if not fits:
            break
        s = int(rng.choice(fits))
        sizes.append(s)
        room -= 2 * s
    budget = max_seq - sum(2 * s for s in sizes)
    spans, pos = [], 0

    def clean_run(lo, hi):
        nonlocal pos, budget
        ln = int(rng.integers(lo, hi + 1))
        ln = min(ln, budget)
        if ln > 0:
            spans.append(LayoutSpan(CLEAN, pos, pos + ln))
            pos += ln
            budget -= ln

    clean_run(1, 24)
    for s in sizes:
        if rng.random() < 0.5:
            clean_run(1, 12)
        i_noisy = len(spans)
        spans.append(LayoutSpan(NOISY, pos, pos + s, partner=i_noisy + 1))
        spans.append(LayoutSpan(CLEAN, pos + s, pos + 2 * s))
        pos += 2 * s
    if rng.random() < 0.8:
        clean_run(1, 24)
    if not spans:
        spans.append(LayoutSpan(CLEAN, 0, 1))
    return tuple(spans)


def weighted_ce_oracle(logits, targets, weights):
    """Scalar weighted cross entropy via mpmath-free plain float sums."""
    total, wsum = 0.0, 0.0
    for i in range(len(targets)):
        row = np.asarray(logits[i], dtype=np.float64)
        row = row - row.max()
        logz = np.log(np.exp(row).sum())
        total += float(weights[i]) * (logz - row[targets[i]])
        wsum += float(weights[i])
    return total / wsum if wsum else 0.0
