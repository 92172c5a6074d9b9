"""Transformer forward/backward paths, cache behavior, checkpoints."""

import numpy as np
import pytest

from tokenweave.mask import CLEAN, NOISY, BlockMask, LayoutSpan, layout_positions
from tokenweave.model import (
    CacheError,
    KVCache,
    ModelConfig,
    NumericsError,
    ShapeError,
    backward_batched,
    count_params,
    forward_batched,
    forward_block,
    forward_rowwise,
    forward_step,
    init_params,
    load_checkpoint,
    param_order,
    save_checkpoint,
    _rope,
    _rope_tables,
)

CFG = ModelConfig(vocab_size=50, d_model=32, n_layers=2, n_heads=4, n_kv_heads=2,
                  d_intermediate=48)


@pytest.fixture(scope="module")
def setup():
    params = init_params(CFG, seed=0, dtype=np.float64)
    rng = np.random.default_rng(1)
    tokens = rng.integers(0, CFG.vocab_size, 12)
    return params, tokens


def test_param_inventory():
    params = init_params(CFG, seed=0)
    assert set(param_order(CFG)) == set(params)
    assert params["embed"].shape == (50, 32)
    assert params["l0.wq"].shape == (32, 32)
    assert params["l0.wk"].shape == (32, 16)      # 2 kv heads * head_dim 8
    assert params["l0.q_norm"].shape == (8,)      # one scale per head dim, shared
    assert count_params(params) == sum(v.size for v in params.values())


def test_rope_rotates_half_split_pairs():
    # pair (j, j + hd/2) rotates by pos * base**(-2j/hd)
    cos, sin = _rope_tables(np.array([3]), 4, 100.0, np.float64)
    e0 = _rope(np.array([1.0, 0.0, 0.0, 0.0]), cos[0], sin[0])
    assert np.allclose(e0, [np.cos(3), 0, np.sin(3), 0])
    ang1 = 3 * 100.0 ** (-0.5)
    e1 = _rope(np.array([0.0, 1.0, 0.0, 0.0]), cos[0], sin[0])
    assert np.allclose(e1, [0, np.cos(ang1), 0, np.sin(ang1)])
    # position 0 is the identity
    cos0, sin0 = _rope_tables(np.array([0]), 4, 100.0, np.float64)
    x = np.array([0.3, -1.2, 0.7, 2.0])
    assert (_rope(x, cos0[0], sin0[0]) == x).all()


def test_batched_equals_rowwise_and_stepwise(setup):
    params, tokens = setup
    T = len(tokens)
    bm = BlockMask.causal(T)
    pos = np.arange(T)
    lb = forward_batched(params, CFG, tokens[None], pos[None], bm.additive(np.float64))
    lr = forward_rowwise(params, CFG, tokens, bm, pos)
    assert np.abs(lb[0] - lr).max() < 1e-12
    cache = KVCache(CFG, T, dtype=np.float64)
    ls = np.stack([forward_step(params, CFG, int(t), i, cache)
                   for i, t in enumerate(tokens)])
    assert np.abs(lb[0] - ls).max() < 1e-12


def test_block_commit_matches_stepwise_cache(setup):
    params, tokens = setup
    T = len(tokens)
    ref = KVCache(CFG, T, dtype=np.float64)
    for i, t in enumerate(tokens):
        forward_step(params, CFG, int(t), i, ref)
    cache = KVCache(CFG, T, dtype=np.float64)
    for i in range(4):
        forward_step(params, CFG, int(tokens[i]), i, cache)
    logits = forward_block(params, CFG, tokens[4:], np.arange(4, T), cache,
                           self_mode="causal", commit=True)
    assert cache.length == T
    for l in range(CFG.n_layers):
        assert np.abs(cache.k[l][:T] - ref.k[l][:T]).max() < 1e-12
        assert np.abs(cache.v[l][:T] - ref.v[l][:T]).max() < 1e-12
    lb = forward_batched(params, CFG, tokens[None], np.arange(T)[None],
                         BlockMask.causal(T).additive(np.float64))
    assert np.abs(logits - lb[0, 4:]).max() < 1e-12


def test_block_full_matches_denoise_mask(setup):
    params, tokens = setup
    cache = KVCache(CFG, 16, dtype=np.float64)
    for i in range(4):
        forward_step(params, CFG, int(tokens[i]), i, cache)
    lfull = forward_block(params, CFG, tokens[4:], np.arange(4, 12), cache,
                          self_mode="full", commit=False)
    assert cache.length == 4  # sweeps never mutate the cache
    lr = forward_rowwise(params, CFG, tokens, BlockMask.dida_infer(4, 8), np.arange(12))
    assert np.abs(lfull - lr[4:]).max() < 1e-12
    lfull2 = forward_block(params, CFG, tokens[4:], np.arange(4, 12), cache,
                           self_mode="full", commit=False)
    assert (lfull == lfull2).all()


def test_rowwise_clean_rows_bitwise_under_layout(setup):
    """Noisy blocks must not perturb clean rows even in the last bit."""
    params, tokens = setup
    rng = np.random.default_rng(9)
    plain = tokens  # treat positions 4..8 as the "image cells"
    spans = (
        LayoutSpan(CLEAN, 0, 4),
        LayoutSpan(NOISY, 4, 8, partner=2),
        LayoutSpan(CLEAN, 8, 12),
        LayoutSpan(CLEAN, 12, 16),
    )
    noisy = rng.integers(0, CFG.vocab_size, 4)
    layout_tokens = np.concatenate([plain[:4], noisy, plain[4:8], plain[8:12]])
    pos = layout_positions(spans)
    l_layout = forward_rowwise(params, CFG, layout_tokens,
                               BlockMask.dida_train(spans), pos)
    l_plain = forward_rowwise(params, CFG, plain, BlockMask.causal(12), np.arange(12))
    clean_idx = np.concatenate([np.arange(0, 4), np.arange(8, 16)])
    assert (l_layout[clean_idx] == l_plain).all()


def test_backward_matches_finite_differences(setup):
    params, tokens = setup
    T = len(tokens)
    add = BlockMask.causal(T).additive(np.float64)
    pos = np.arange(T)[None]
    tok = tokens[None]
    tgt = np.roll(tok, -1, axis=1)
    coeff = np.random.default_rng(7).random((1, T))

    def loss_grads(p):
        logits, saved = forward_batched(p, CFG, tok, pos, add, return_saved=True)
        m = logits.max(-1, keepdims=True)
        lse = m[..., 0] + np.log(np.exp(logits - m).sum(-1))
        ce = lse - np.take_along_axis(logits, tgt[..., None], -1)[..., 0]
        pr = np.exp(logits - lse[..., None])
        dlog = (pr - np.eye(CFG.vocab_size)[tgt]) * coeff[..., None]
        return float((coeff * ce).sum()), backward_batched(p, CFG, saved, dlog)

    _, grads = loss_grads(params)
    h = 1e-6
    rng = np.random.default_rng(3)
    for name in ("embed", "l0.wq", "l0.wo", "l0.k_norm", "l1.w_gate", "final_norm"):
        arr = params[name]
        for _ in range(3):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            lp, _ = loss_grads(params)
            arr[idx] = orig - h
            lm, _ = loss_grads(params)
            arr[idx] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name][idx]
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-4, (name, idx)


def test_checkpoint_roundtrip(tmp_path, setup):
    params, _ = setup
    p32 = {k: v.astype(np.float32) for k, v in params.items()}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, p32, CFG, extra={"note": "unit", "step": 3})
    loaded, cfg2, extra = load_checkpoint(path)
    assert cfg2 == CFG
    assert extra == {"note": "unit", "step": 3}
    for k in p32:
        assert loaded[k].dtype == np.float32
        assert (loaded[k] == p32[k]).all()
    loaded["embed"][0, 0] = 5.0  # loaded params must be writable

    with pytest.raises(ValueError):
        save_checkpoint(path, {"embed": p32["embed"]}, CFG)
    (tmp_path / "junk").write_bytes(b'{"format": "nope"}\n')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "junk")


def test_error_conditions(setup):
    params, tokens = setup
    add = BlockMask.causal(12).additive(np.float64)
    with pytest.raises(ShapeError):
        forward_batched(params, CFG, tokens[None], np.arange(11)[None], add)
    with pytest.raises(ShapeError):
        forward_batched(params, CFG, np.full((1, 12), 99), np.arange(12)[None], add)
    with pytest.raises(ShapeError):
        forward_batched(params, CFG, tokens[None], np.arange(12)[None], add[:4, :4])
    cache = KVCache(CFG, 2, dtype=np.float64)
    forward_step(params, CFG, 1, 0, cache)
    forward_step(params, CFG, 2, 1, cache)
    with pytest.raises(CacheError):
        forward_step(params, CFG, 3, 2, cache)
    bad = {k: v.copy() for k, v in params.items()}
    bad["embed"][0] = np.inf
    with np.errstate(all="ignore"), pytest.raises(NumericsError):
        forward_batched(bad, CFG, np.zeros((1, 4), dtype=int), np.arange(4)[None],
                        BlockMask.causal(4).additive(np.float64))
    with pytest.raises(ShapeError):
        ModelConfig(vocab_size=10, d_model=30, n_heads=4)


def test_dropout_knob(setup):
    params, tokens = setup
    add = BlockMask.causal(12).additive(np.float64)
    pos = np.arange(12)[None]
    cfg_d = ModelConfig(vocab_size=50, d_model=32, n_layers=2, n_heads=4,
                        n_kv_heads=2, d_intermediate=48, dropout=0.5)
    with pytest.raises(ValueError):
        forward_batched(params, cfg_d, tokens[None], pos, add)  # needs rng
    l1 = forward_batched(params, cfg_d, tokens[None], pos, add,
                         dropout_rng=np.random.default_rng(0))
    l2 = forward_batched(params, cfg_d, tokens[None], pos, add,
                         dropout_rng=np.random.default_rng(0))
    l3 = forward_batched(params, cfg_d, tokens[None], pos, add,
                         dropout_rng=np.random.default_rng(1))
    assert (l1 == l2).all() and not (l1 == l3).all()
    l0 = forward_batched(params, CFG, tokens[None], pos, add)
    assert not (l1 == l0).all()


def test_fork_isolates_cache(setup):
    params, tokens = setup
    cache = KVCache(CFG, 8, dtype=np.float64)
    forward_step(params, CFG, int(tokens[0]), 0, cache)
    fork = cache.fork()
    forward_step(params, CFG, int(tokens[1]), 1, fork)
    assert cache.length == 1 and fork.length == 2
    assert (fork.k[0][0] == cache.k[0][0]).all()
