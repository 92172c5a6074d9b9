"""A small decoder-only transformer in plain numpy, forward and backward.

Architecture: token embedding (tied with the output head), then blocks of
pre-norm attention and pre-norm gated MLP with residual connections:

* RMSNorm everywhere (no biases anywhere in the model);
* grouped-query attention: ``n_heads`` query heads share ``n_kv_heads``
  key/value heads, query head ``h`` reading kv head ``h // group``;
* per-head RMSNorm on queries and keys (applied after projection, before
  rotary), with one learned per-dimension scale shared across heads;
* rotary positions in half-split form: dimension pairs ``(j, j + hd/2)``
  rotate by ``pos * base**(-2j/hd)``;
* gated MLP: ``w_down( silu(x @ w_gate) * (x @ w_up) )``.

Three execution paths over the same parameters:

``forward_batched`` / ``backward_batched``
    Dense masked attention over ``[B, T]`` token grids; the training path.
    The backward pass is handwritten and checked against finite
    differences.

``forward_rowwise``
    A per-row reference path: every projection is a fixed-shape
    vector-matrix product and every attention row gathers exactly its
    reachable keys.  Row results therefore do not depend on how many other
    rows are in the sequence — BLAS kernels are *not* row-stable across
    shapes — which is what makes equal-context comparisons across
    different sequence lengths exactly reproducible, bit for bit.

``forward_step`` / ``forward_block``
    Incremental decoding against a ``KVCache``: one token at a time
    (rowwise, so every step is shape-identical), or a whole block attending
    to the cache plus itself either bidirectionally (denoise sweeps) or
    causally (committing a finished block into the cache).
"""

from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .mask import BlockMask


class ShapeError(ValueError):
    """An input's shape is inconsistent with the model configuration."""


class NumericsError(FloatingPointError):
    """A forward pass produced non-finite values."""


class CacheError(RuntimeError):
    """A KV cache was used out of order (position/capacity mismatch)."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 8
    n_kv_heads: int = 2
    d_intermediate: int = 320
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ShapeError("d_model must divide into n_heads")
        if self.n_heads % self.n_kv_heads:
            raise ShapeError("n_kv_heads must divide n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ShapeError("head_dim must be even for rotary pairs")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def group(self) -> int:
        return self.n_heads // self.n_kv_heads


def param_order(cfg: ModelConfig) -> list[str]:
    """Canonical parameter order, used by checkpoints and the optimizer."""
    names = ["embed"]
    for l in range(cfg.n_layers):
        names += [
            f"l{l}.attn_norm", f"l{l}.wq", f"l{l}.wk", f"l{l}.wv", f"l{l}.wo",
            f"l{l}.q_norm", f"l{l}.k_norm",
            f"l{l}.mlp_norm", f"l{l}.w_gate", f"l{l}.w_up", f"l{l}.w_down",
        ]
    names.append("final_norm")
    return names


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Scaled normal init; residual-output projections shrunk by depth."""
    rng = np.random.default_rng(seed)
    hd, d, dk = cfg.head_dim, cfg.d_model, cfg.n_kv_heads * (cfg.d_model // cfg.n_heads)
    std = 0.02
    out_std = std / np.sqrt(2 * cfg.n_layers)

    def normal(shape, s):
        return rng.normal(0.0, s, size=shape).astype(dtype)

    p: dict[str, np.ndarray] = {"embed": normal((cfg.vocab_size, d), std)}
    for l in range(cfg.n_layers):
        p[f"l{l}.attn_norm"] = np.ones(d, dtype=dtype)
        p[f"l{l}.wq"] = normal((d, cfg.n_heads * hd), std)
        p[f"l{l}.wk"] = normal((d, dk), std)
        p[f"l{l}.wv"] = normal((d, dk), std)
        p[f"l{l}.wo"] = normal((cfg.n_heads * hd, d), out_std)
        p[f"l{l}.q_norm"] = np.ones(hd, dtype=dtype)
        p[f"l{l}.k_norm"] = np.ones(hd, dtype=dtype)
        p[f"l{l}.mlp_norm"] = np.ones(d, dtype=dtype)
        p[f"l{l}.w_gate"] = normal((d, cfg.d_intermediate), std)
        p[f"l{l}.w_up"] = normal((d, cfg.d_intermediate), std)
        p[f"l{l}.w_down"] = normal((cfg.d_intermediate, d), out_std)
    p["final_norm"] = np.ones(d, dtype=dtype)
    return p


def count_params(params: dict[str, np.ndarray]) -> int:
    return sum(int(v.size) for v in params.values())


# ---------------------------------------------------------------------------
# Primitive ops (forward + backward pieces)
# ---------------------------------------------------------------------------

def _rmsnorm(x, scale, eps):
    """Returns (y, inv_rms); reduction over the last axis."""
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    return x * inv * scale, inv


def _rmsnorm_bwd(dy, x, inv, scale):
    """dx and dscale for y = x * inv_rms * scale."""
    d = x.shape[-1]
    g = dy * scale
    dot = np.sum(g * x, axis=-1, keepdims=True)
    dx = g * inv - x * (inv ** 3) * (dot / d)
    dscale = np.sum(dy * x * inv, axis=tuple(range(dy.ndim - 1)))
    return dx, dscale


def _rope_tables(positions, head_dim, base, dtype):
    """cos/sin tables for half-split rotary, shape [..., hd/2]."""
    half = head_dim // 2
    inv = base ** (-(np.arange(half, dtype=np.float64) * 2.0 / head_dim))
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


@functools.lru_cache(maxsize=32)
def _rope_tables_cached(pos_bytes: bytes, n: int, head_dim: int, base: float,
                        dtype_str: str):
    positions = np.frombuffer(pos_bytes, dtype=np.int64, count=n)
    return _rope_tables(positions, head_dim, base, np.dtype(dtype_str))


def _rope(x, cos, sin):
    """Rotate pairs (j, j + hd/2) of the last axis by the table angles."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate((x1 * cos - x2 * sin, x1 * sin + x2 * cos), axis=-1)


def _rope_lean(x, cos, sin):
    """Same rotation as ``_rope`` with fewer temporaries (decode hot path)."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    out = np.empty_like(x)
    o1, o2 = out[..., :half], out[..., half:]
    np.multiply(x1, cos, out=o1)
    o1 -= x2 * sin
    np.multiply(x2, cos, out=o2)
    o2 += x1 * sin
    return out


def _rope_bwd(dy, cos, sin):
    """Transpose of the rotation (i.e. rotate by the negated angle)."""
    half = dy.shape[-1] // 2
    d1, d2 = dy[..., :half], dy[..., half:]
    return np.concatenate((d1 * cos + d2 * sin, -d1 * sin + d2 * cos), axis=-1)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softmax_lastaxis(x):
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Batched training path
# ---------------------------------------------------------------------------

def forward_batched(params, cfg: ModelConfig, tokens, positions, additive_mask,
                    return_saved=False, dropout_rng=None, check_finite=True):
    """Dense masked forward over a [B, T] token grid.

    Parameters
    ----------
    tokens : int array [B, T]
    positions : int array [B, T]
        Rotary position of every token (need not be 0..T-1: packed rows
        restart per document, adaptation layouts repeat partner positions).
    additive_mask : float array [T, T] or [B, T, T]
        0 where key is reachable, -inf elsewhere.  Every row must have at
        least one reachable key.
    dropout_rng : np.random.Generator, optional
        Required iff cfg.dropout > 0; residual branches are dropped with
        inverted scaling.

    Returns logits [B, T, vocab] (and the saved activations when
    ``return_saved`` — feed those to ``backward_batched``).
    """
    tokens = np.asarray(tokens)
    positions = np.asarray(positions)
    if tokens.ndim != 2 or positions.shape != tokens.shape:
        raise ShapeError(f"tokens {tokens.shape} / positions {positions.shape}")
    B, T = tokens.shape
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ShapeError("token id outside vocabulary")
    mask = np.asarray(additive_mask)
    if mask.shape not in ((T, T), (B, T, T)):
        raise ShapeError(f"additive mask {mask.shape} incompatible with T={T}")
    mask5 = mask.reshape((1, 1, 1, T, T) if mask.ndim == 2 else (B, 1, 1, T, T))
    dtype = params["embed"].dtype
    hd, H, Hkv, G = cfg.head_dim, cfg.n_heads, cfg.n_kv_heads, cfg.group
    scale = 1.0 / float(np.sqrt(hd))
    if cfg.dropout > 0 and dropout_rng is None:
        raise ValueError("dropout > 0 needs dropout_rng")

    cos, sin = _rope_tables(positions, hd, cfg.rope_base, dtype)  # [B,T,hd/2]
    cos, sin = cos[:, :, None, :], sin[:, :, None, :]             # broadcast heads

    x = params["embed"][tokens]
    saved = {"tokens": tokens, "positions": positions, "mask5": mask5,
             "cos": cos, "sin": sin, "layers": []}

    def dropmask(shape):
        if cfg.dropout <= 0:
            return None
        keep = (dropout_rng.random(shape) >= cfg.dropout)
        return keep.astype(dtype) / (1.0 - cfg.dropout)

    for l in range(cfg.n_layers):
        s: dict = {"x_in": x}
        a_in, r_a = _rmsnorm(x, params[f"l{l}.attn_norm"], cfg.norm_eps)
        q = (a_in @ params[f"l{l}.wq"]).reshape(B, T, H, hd)
        k = (a_in @ params[f"l{l}.wk"]).reshape(B, T, Hkv, hd)
        v = (a_in @ params[f"l{l}.wv"]).reshape(B, T, Hkv, hd)
        qn, r_q = _rmsnorm(q, params[f"l{l}.q_norm"], cfg.norm_eps)
        kn, r_k = _rmsnorm(k, params[f"l{l}.k_norm"], cfg.norm_eps)
        qr = _rope(qn, cos, sin)
        kr = _rope(kn, cos, sin)
        # attention layout: [B, Hkv, G, T, hd]; query head h = kv * G + g
        q5 = qr.transpose(0, 2, 1, 3).reshape(B, Hkv, G, T, hd)
        k5 = kr.transpose(0, 2, 1, 3)[:, :, None]                 # [B,Hkv,1,T,hd]
        v5 = v.transpose(0, 2, 1, 3)[:, :, None]
        scores = (q5 @ k5.swapaxes(-1, -2)) * scale + mask5
        probs = _softmax_lastaxis(scores)
        ctx = probs @ v5                                          # [B,Hkv,G,T,hd]
        merged = ctx.transpose(0, 3, 1, 2, 4).reshape(B, T, H * hd)
        attn_out = merged @ params[f"l{l}.wo"]
        dm_attn = dropmask(attn_out.shape)
        if dm_attn is not None:
            attn_out = attn_out * dm_attn
        x = x + attn_out

        s.update(a_in=a_in, r_a=r_a, q=q, k=k, r_q=r_q, r_k=r_k,
                 qr=qr, kr=kr, v=v, probs=probs, merged=merged,
                 dm_attn=dm_attn, x_mid=x)
        m_in, r_m = _rmsnorm(x, params[f"l{l}.mlp_norm"], cfg.norm_eps)
        gate = m_in @ params[f"l{l}.w_gate"]
        up = m_in @ params[f"l{l}.w_up"]
        sig = _sigmoid(gate)
        act = gate * sig * up
        mlp_out = act @ params[f"l{l}.w_down"]
        dm_mlp = dropmask(mlp_out.shape)
        if dm_mlp is not None:
            mlp_out = mlp_out * dm_mlp
        x = x + mlp_out
        s.update(m_in=m_in, r_m=r_m, gate=gate, up=up, sig=sig, act=act,
                 dm_mlp=dm_mlp)
        saved["layers"].append(s)

    h, r_f = _rmsnorm(x, params["final_norm"], cfg.norm_eps)
    logits = h @ params["embed"].T
    saved.update(x_final=x, h=h, r_f=r_f)
    if check_finite and not np.isfinite(logits).all():
        raise NumericsError("non-finite logits")
    return (logits, saved) if return_saved else logits


def backward_batched(params, cfg: ModelConfig, saved, dlogits):
    """Gradients of sum(dlogits * logits) w.r.t. every parameter.

    The caller supplies dlogits (e.g. softmax-cross-entropy rows already
    scaled by per-token loss coefficients), so scaling the coefficients
    scales every gradient exactly linearly.
    """
    B, T = saved["tokens"].shape
    hd, H, Hkv, G = cfg.head_dim, cfg.n_heads, cfg.n_kv_heads, cfg.group
    scale = 1.0 / float(np.sqrt(hd))
    cos, sin = saved["cos"], saved["sin"]
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    # head (tied embedding): logits = h @ embed.T
    dlog2 = dlogits.reshape(B * T, -1)
    grads["embed"] += dlog2.T @ saved["h"].reshape(B * T, -1)
    dh = dlogits @ params["embed"]
    dx, dsc = _rmsnorm_bwd(dh, saved["x_final"], saved["r_f"], params["final_norm"])
    grads["final_norm"] += dsc

    for l in reversed(range(cfg.n_layers)):
        s = saved["layers"][l]
        # MLP branch
        dmlp_out = dx if s["dm_mlp"] is None else dx * s["dm_mlp"]
        dact = dmlp_out @ params[f"l{l}.w_down"].T
        grads[f"l{l}.w_down"] += s["act"].reshape(B * T, -1).T @ dmlp_out.reshape(B * T, -1)
        silu = s["gate"] * s["sig"]
        dgate = dact * s["up"] * (s["sig"] * (1.0 + s["gate"] * (1.0 - s["sig"])))
        dup = dact * silu
        dm_in = dgate @ params[f"l{l}.w_gate"].T + dup @ params[f"l{l}.w_up"].T
        grads[f"l{l}.w_gate"] += s["m_in"].reshape(B * T, -1).T @ dgate.reshape(B * T, -1)
        grads[f"l{l}.w_up"] += s["m_in"].reshape(B * T, -1).T @ dup.reshape(B * T, -1)
        dx_mid, dsc = _rmsnorm_bwd(dm_in, s["x_mid"], s["r_m"], params[f"l{l}.mlp_norm"])
        grads[f"l{l}.mlp_norm"] += dsc
        dx = dx + dx_mid

        # attention branch
        dattn_out = dx if s["dm_attn"] is None else dx * s["dm_attn"]
        dmerged = dattn_out @ params[f"l{l}.wo"].T
        grads[f"l{l}.wo"] += s["merged"].reshape(B * T, -1).T @ dattn_out.reshape(B * T, -1)
        dctx = dmerged.reshape(B, T, Hkv, G, hd).transpose(0, 2, 3, 1, 4)
        probs = s["probs"]
        v5 = s["v"].transpose(0, 2, 1, 3)[:, :, None]
        dprobs = dctx @ v5.swapaxes(-1, -2)
        dv5 = (probs.swapaxes(-1, -2) @ dctx).sum(axis=2)          # [B,Hkv,T,hd]
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        q5 = s["qr"].transpose(0, 2, 1, 3).reshape(B, Hkv, G, T, hd)
        k5 = s["kr"].transpose(0, 2, 1, 3)[:, :, None]
        dq5 = (dscores @ k5) * scale
        dk5 = (dscores.swapaxes(-1, -2) @ q5).sum(axis=2) * scale  # [B,Hkv,T,hd]
        dqr = dq5.reshape(B, Hkv * G, T, hd).transpose(0, 2, 1, 3)
        dkr = dk5.transpose(0, 2, 1, 3)
        dqn = _rope_bwd(dqr, cos, sin)
        dkn = _rope_bwd(dkr, cos, sin)
        dq, dsc = _rmsnorm_bwd(dqn, s["q"], s["r_q"], params[f"l{l}.q_norm"])
        grads[f"l{l}.q_norm"] += dsc
        dk, dsc = _rmsnorm_bwd(dkn, s["k"], s["r_k"], params[f"l{l}.k_norm"])
        grads[f"l{l}.k_norm"] += dsc
        dv = dv5.transpose(0, 2, 1, 3)
        a2 = s["a_in"].reshape(B * T, -1)
        da_in = (dq.reshape(B, T, -1) @ params[f"l{l}.wq"].T
                 + dk.reshape(B, T, -1) @ params[f"l{l}.wk"].T
                 + dv.reshape(B, T, -1) @ params[f"l{l}.wv"].T)
        grads[f"l{l}.wq"] += a2.T @ dq.reshape(B * T, -1)
        grads[f"l{l}.wk"] += a2.T @ dk.reshape(B * T, -1)
        grads[f"l{l}.wv"] += a2.T @ dv.reshape(B * T, -1)
        dx_in, dsc = _rmsnorm_bwd(da_in, s["x_in"], s["r_a"], params[f"l{l}.attn_norm"])
        grads[f"l{l}.attn_norm"] += dsc
        dx = dx + dx_in

    np.add.at(grads["embed"], saved["tokens"].reshape(-1), dx.reshape(B * T, -1))
    return grads


# ---------------------------------------------------------------------------
# Rowwise reference path
# ---------------------------------------------------------------------------

def _gemv(x, W):
    # 1-D @ 2-D keeps the kernel shape fixed by (len(x), W.shape[1]) only.
    return x @ W


def forward_rowwise(params, cfg: ModelConfig, tokens, mask: BlockMask, positions,
                    dtype=np.float64):
    """Reference forward: one sequence, per-row ops, gathered attention.

    Every arithmetic step touching row ``i`` has a shape determined only by
    the model dims and the number of keys row ``i`` reaches.  Two calls
    whose corresponding rows have equal inputs, positions, and gathered
    key lists therefore produce bitwise-equal rows, regardless of the
    surrounding sequence.
    """
    tokens = np.asarray(tokens).ravel()
    positions = np.asarray(positions).ravel()
    T = len(tokens)
    if mask.n != T or len(positions) != T:
        raise ShapeError(f"mask n={mask.n}, T={T}, positions {len(positions)}")
    hd, H, Hkv, G = cfg.head_dim, cfg.n_heads, cfg.n_kv_heads, cfg.group
    scale = 1.0 / float(np.sqrt(hd))
    eps = cfg.norm_eps
    P = {k: v.astype(dtype, copy=False) for k, v in params.items()}
    keys = [mask.keys_for(q) for q in range(T)]

    cos_t, sin_t = _rope_tables(positions, hd, cfg.rope_base, dtype)  # [T, hd/2]

    def norm_row(x, s):
        inv = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + eps)
        return x * inv * s

    x = np.stack([P["embed"][t] for t in tokens])
    for l in range(cfg.n_layers):
        qs = np.empty((T, H, hd), dtype=dtype)
        ks = np.empty((T, Hkv, hd), dtype=dtype)
        vs = np.empty((T, Hkv, hd), dtype=dtype)
        a_rows = np.empty((T, cfg.d_model), dtype=dtype)
        for i in range(T):
            a = norm_row(x[i], P[f"l{l}.attn_norm"])
            a_rows[i] = a
            q = _gemv(a, P[f"l{l}.wq"]).reshape(H, hd)
            k = _gemv(a, P[f"l{l}.wk"]).reshape(Hkv, hd)
            v = _gemv(a, P[f"l{l}.wv"]).reshape(Hkv, hd)
            qs[i] = _rope(norm_row(q, P[f"l{l}.q_norm"]), cos_t[i], sin_t[i])
            ks[i] = _rope(norm_row(k, P[f"l{l}.k_norm"]), cos_t[i], sin_t[i])
            vs[i] = v
        for i in range(T):
            kk = keys[i]
            Kg = ks[kk]                       # [L, Hkv, hd] in ascending key order
            Vg = vs[kk]
            merged = np.empty(H * hd, dtype=dtype)
            for h in range(H):
                kv = h // G
                sc = _gemv(Kg[:, kv, :], qs[i, h]) * scale          # [L]
                sc = sc - sc.max()
                e = np.exp(sc)
                p = e / e.sum()
                merged[h * hd:(h + 1) * hd] = _gemv(p, Vg[:, kv, :])
            x[i] = x[i] + _gemv(merged, P[f"l{l}.wo"])
        for i in range(T):
            m = norm_row(x[i], P[f"l{l}.mlp_norm"])
            gate = _gemv(m, P[f"l{l}.w_gate"])
            up = _gemv(m, P[f"l{l}.w_up"])
            x[i] = x[i] + _gemv(gate * _sigmoid(gate) * up, P[f"l{l}.w_down"])

    logits = np.empty((T, cfg.vocab_size), dtype=dtype)
    for i in range(T):
        logits[i] = _gemv(norm_row(x[i], P["final_norm"]), P["embed"].T)
    return logits


# ---------------------------------------------------------------------------
# Incremental decoding
# ---------------------------------------------------------------------------

class KVCache:
    """Per-layer rotated key / value store for incremental decoding."""

    def __init__(self, cfg: ModelConfig, capacity: int, dtype=np.float32):
        self.cfg = cfg
        self.capacity = capacity
        self.length = 0
        hd = cfg.head_dim
        self.k = [np.zeros((capacity, cfg.n_kv_heads, hd), dtype=dtype)
                  for _ in range(cfg.n_layers)]
        self.v = [np.zeros((capacity, cfg.n_kv_heads, hd), dtype=dtype)
                  for _ in range(cfg.n_layers)]
        self._scratch: dict = {}  # reusable block-attention buffers, see below

    def append(self, layer: int, k_rows, v_rows):
        n = k_rows.shape[0]
        if self.length + n > self.capacity:
            raise CacheError(f"cache overflow: {self.length}+{n} > {self.capacity}")
        self.k[layer][self.length:self.length + n] = k_rows
        self.v[layer][self.length:self.length + n] = v_rows
        if layer == self.cfg.n_layers - 1:
            self.length += n
            self._scratch.clear()

    def block_scratch(self, layer: int, n_block: int):
        """Head-major [Hkv, length+n_block, hd] K/V buffers for block attention.

        The cached prefix is copied in once and reused until the cache grows
        (denoise sweeps over one image hit the same buffers every time); the
        caller overwrites the trailing ``n_block`` rows each call.
        """
        key = (layer, n_block)
        hit = self._scratch.get(key)
        if hit is None:
            L, hkv = self.length, self.cfg.n_kv_heads
            shape = (hkv, L + n_block, self.cfg.head_dim)
            K = np.empty(shape, dtype=self.k[layer].dtype)
            V = np.empty(shape, dtype=self.k[layer].dtype)
            K[:, :L] = self.k[layer][:L].transpose(1, 0, 2)
            V[:, :L] = self.v[layer][:L].transpose(1, 0, 2)
            hit = self._scratch[key] = (K, V)
        return hit

    def fork(self) -> "KVCache":
        """Independent copy (speculative block decoding)."""
        c = KVCache(self.cfg, self.capacity, self.k[0].dtype)
        c.length = self.length
        for l in range(self.cfg.n_layers):
            c.k[l][:self.length] = self.k[l][:self.length]
            c.v[l][:self.length] = self.v[l][:self.length]
        return c


def forward_step(params, cfg: ModelConfig, token: int, position: int, cache: KVCache):
    """Decode one token: returns its logits row and appends its K/V.

    Rowwise ops throughout, so every step of a generation runs the same
    kernel shapes (up to cache length) no matter how it was reached.
    """
    hd, H, Hkv, G = cfg.head_dim, cfg.n_heads, cfg.n_kv_heads, cfg.group
    dtype = params["embed"].dtype
    eps = cfg.norm_eps
    scale = 1.0 / float(np.sqrt(hd))
    if not (0 <= token < cfg.vocab_size):
        raise ShapeError(f"token id {token} outside vocabulary")
    cos, sin = _rope_tables(np.array([position]), hd, cfg.rope_base, dtype)
    cos, sin = cos[0], sin[0]
    L = cache.length

    def norm_row(x, s):
        inv = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + eps)
        return x * inv * s

    x = params["embed"][token].astype(dtype, copy=True)
    for l in range(cfg.n_layers):
        a = norm_row(x, params[f"l{l}.attn_norm"])
        q = norm_row((a @ params[f"l{l}.wq"]).reshape(H, hd), params[f"l{l}.q_norm"])
        k = norm_row((a @ params[f"l{l}.wk"]).reshape(Hkv, hd), params[f"l{l}.k_norm"])
        v = (a @ params[f"l{l}.wv"]).reshape(Hkv, hd)
        q = _rope(q, cos, sin)
        k = _rope(k, cos, sin)
        cache.append(l, k[None], v[None])
        Kg = cache.k[l][:L + 1]
        Vg = cache.v[l][:L + 1]
        merged = np.empty(H * hd, dtype=dtype)
        for h in range(H):
            kv = h // G
            sc = (Kg[:, kv, :] @ q[h]) * scale
            sc = sc - sc.max()
            e = np.exp(sc)
            p = e / e.sum()
            merged[h * hd:(h + 1) * hd] = p @ Vg[:, kv, :]
        x = x + merged @ params[f"l{l}.wo"]
        m = norm_row(x, params[f"l{l}.mlp_norm"])
        gate = m @ params[f"l{l}.w_gate"]
        up = m @ params[f"l{l}.w_up"]
        x = x + (gate * _sigmoid(gate) * up) @ params[f"l{l}.w_down"]
    logits = norm_row(x, params["final_norm"]) @ params["embed"].T
    if not np.isfinite(logits).all():
        raise NumericsError("non-finite logits in forward_step")
    return logits


def forward_block(params, cfg: ModelConfig, tokens, positions, cache: KVCache,
                  self_mode: str, commit: bool, logit_rows=None):
    """One forward over a token block attending to the cache plus itself.

    ``self_mode="full"``   — bidirectional within the block (denoise sweep);
    ``self_mode="causal"`` — causal within the block (committing pass, so
    cached K/V are exactly what sequential decoding would have produced).
    ``commit`` appends the block's K/V to the cache.

    ``logit_rows`` optionally restricts the output head to those block rows
    (the hidden states of all rows are still computed — attention needs
    them); ``None`` returns logits for every row.

    Returns logits [N, vocab] (or [len(logit_rows), vocab]).

    This is the hot path of parallel decoding, so it trades a little
    clarity for allocation discipline: in-place softmax and residual
    updates, contiguous K/V layouts so matmuls hit fast BLAS paths, and
    memoized rotary tables (block positions repeat across sweeps).
    """
    if self_mode not in ("full", "causal"):
        raise ValueError(f"self_mode {self_mode!r}")
    tokens = np.asarray(tokens).ravel()
    positions = np.ascontiguousarray(positions, dtype=np.int64).ravel()
    N = len(tokens)
    if N == 0 or len(positions) != N:
        raise ShapeError("empty block or positions mismatch")
    hd, H, Hkv, G = cfg.head_dim, cfg.n_heads, cfg.n_kv_heads, cfg.group
    dtype = params["embed"].dtype
    eps = cfg.norm_eps
    scale = 1.0 / float(np.sqrt(hd))
    L = cache.length
    if commit and L + N > cache.capacity:
        raise CacheError("block would overflow cache")
    cos, sin = _rope_tables_cached(positions.tobytes(), N, hd, cfg.rope_base,
                                   dtype.str)
    cos, sin = cos[:, None, :], sin[:, None, :]
    if self_mode == "causal":
        iq = np.arange(N)
        self_add = np.where(iq[None, :] <= iq[:, None], 0.0, -np.inf).astype(dtype)
    else:
        self_add = None
    rows = None if logit_rows is None else np.asarray(logit_rows,
                                                      dtype=np.int64).ravel()
    last = cfg.n_layers - 1

    def norm(x, s):
        ss = np.einsum("...i,...i->...", x, x)
        ss /= x.shape[-1]
        ss += eps
        np.sqrt(ss, out=ss)
        np.reciprocal(ss, out=ss)
        out = x * ss[..., None]
        out *= s
        return out

    x = params["embed"][tokens]               # fancy indexing copies: x is owned
    for l in range(cfg.n_layers):
        # In the last layer, rows outside `rows` are needed only as attention
        # keys, so the query side (q projection, scores, output, MLP, head)
        # shrinks to the requested rows; k/v are always computed for all rows.
        restrict = rows is not None and l == last
        a = norm(x, params[f"l{l}.attn_norm"])
        kp = a @ params[f"l{l}.wk"]
        v = (a @ params[f"l{l}.wv"]).reshape(N, Hkv, hd)
        if restrict:
            nq = len(rows)
            q = norm((a[rows] @ params[f"l{l}.wq"]).reshape(nq, H, hd),
                     params[f"l{l}.q_norm"])
            q = _rope_lean(q, cos[rows], sin[rows])
            k = _rope_lean(norm(kp.reshape(N, Hkv, hd), params[f"l{l}.k_norm"]),
                      cos, sin)
        else:
            nq = N
            # One fused QK-norm + rotation over q and k stacked head-wise.
            qp = a @ params[f"l{l}.wq"]
            qk = np.concatenate((qp, kp), axis=1).reshape(N, H + Hkv, hd)
            s_qk = np.empty((H + Hkv, hd), dtype=dtype)
            s_qk[:H] = params[f"l{l}.q_norm"]
            s_qk[H:] = params[f"l{l}.k_norm"]
            qk = _rope_lean(norm(qk, s_qk), cos, sin)
            q, k = qk[:, :H], qk[:, H:]
        K, V = cache.block_scratch(l, N)  # head-major, prefix already in place
        K[:, L:] = k.transpose(1, 0, 2)
        V[:, L:] = v.transpose(1, 0, 2)
        q4 = q.transpose(1, 0, 2).reshape(Hkv, G, nq, hd)  # reshape copies
        q4 *= scale
        sc = q4 @ K[:, None].swapaxes(-1, -2)             # [Hkv,G,nq,L+N]
        # Softmax shifted by a provable score bound instead of the row max:
        # |q.k|*scale <= sqrt(hd)*max|g_q|*max|g_k| because RMSNorm caps the
        # vector norms at sqrt(hd)*max|scale| and rotary is norm-preserving.
        # Softmax is shift-invariant, and every exp argument stays <= 0.
        bound = float(np.sqrt(hd)) * float(np.abs(params[f"l{l}.q_norm"]).max()
                                           * np.abs(params[f"l{l}.k_norm"]).max())
        if bound <= 30.0:
            sc -= bound
        else:  # extreme learned scales: exact row max, still pre-mask sound
            mx = sc.max(axis=-1, keepdims=True)
            np.subtract(sc, mx, out=sc)
        if self_add is not None:
            sc[..., L:] += self_add[rows] if restrict else self_add
        np.exp(sc, out=sc)
        ssum = sc.sum(axis=-1, keepdims=True)
        np.reciprocal(ssum, out=ssum)
        ctx = sc @ V[:, None]                             # [Hkv,G,nq,hd]
        ctx *= ssum                                       # fold 1/sum into ctx
        merged = ctx.transpose(2, 0, 1, 3).reshape(nq, H * hd)
        if restrict:
            x = x[rows] + merged @ params[f"l{l}.wo"]
        else:
            x += merged @ params[f"l{l}.wo"]
        if commit:
            cache.append(l, k, v)
        m = norm(x, params[f"l{l}.mlp_norm"])
        gate = m @ params[f"l{l}.w_gate"]
        up = m @ params[f"l{l}.w_up"]
        act = np.negative(gate)
        np.exp(act, out=act)
        act += 1.0
        np.reciprocal(act, out=act)
        act *= gate
        act *= up
        x += act @ params[f"l{l}.w_down"]
    logits = norm(x, params["final_norm"]) @ params["embed"].T
    if not np.isfinite(logits).all():
        raise NumericsError("non-finite logits in forward_block")
    return logits


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "tokenweave-ckpt-v1"


def save_checkpoint(path: Union[str, Path], params, cfg: ModelConfig,
                    extra: Optional[dict] = None) -> None:
    """One JSON header line (config, parameter order, shapes, dtype, extras)
    followed by the raw little-endian parameter payload in order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    order = param_order(cfg)
    missing = [n for n in order if n not in params]
    if missing:
        raise ValueError(f"params missing {missing}")
    dt = np.dtype(params[order[0]].dtype)
    header = {
        "format": _CKPT_MAGIC,
        "config": asdict(cfg),
        "dtype": dt.newbyteorder("<").str,
        "order": order,
        "shapes": {n: list(params[n].shape) for n in order},
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode())
        f.write(b"\n")
        for n in order:
            f.write(np.ascontiguousarray(params[n], dtype=dt.newbyteorder("<")).tobytes())


def load_checkpoint(path: Union[str, Path]):
    """Returns (params, cfg, extra)."""
    path = Path(path)
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        payload = f.read()
    if header.get("format") != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (format {header.get('format')!r})")
    cfg = ModelConfig(**header["config"])
    dt = np.dtype(header["dtype"])
    params = {}
    off = 0
    for n in header["order"]:
        shape = tuple(header["shapes"][n])
        nbytes = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(payload[off:off + nbytes], dtype=dt).reshape(shape)
        params[n] = arr.astype(dt.newbyteorder("="))  # native-order, writable copy
        off += nbytes
    if off != len(payload):
        raise ValueError(f"{path}: payload length mismatch ({len(payload)} vs {off})")
    return params, cfg, header["extra"]
