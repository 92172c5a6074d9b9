"""Acceptance gate: one test per release criterion, thresholds pinned.

Run ``pytest -v tests/test_acceptance.py``: each line of the verbose report
is the pass/fail verdict for exactly one numbered criterion.  Every
tolerance, budget, and threshold is a module constant next to the tests —
nothing is tuned at runtime.

Criteria 5 and 6 exercise the full default pipeline (corpus generation,
base training, adaptation, held-out evaluation) through the command-line
entry points via session-scoped fixtures, so the whole gate costs one real
training run (about half an hour of CPU).  Everything else finishes in
seconds and is independent of trained weights.
"""

import json

import numpy as np
import pytest

from tokenweave.cli import main
from tokenweave.diffusion import (
    DecodeRule,
    DenoiseSchedule,
    DenoiseState,
    adapt_layout,
    denoise_sweep,
)
from tokenweave.infer import generate_ar, generate_hybrid, validate_stream
from tokenweave.mask import NOISY, BlockMask
from tokenweave.model import (
    KVCache,
    ModelConfig,
    backward_batched,
    forward_batched,
    forward_rowwise,
    forward_step,
    init_params,
    load_checkpoint,
)
from tokenweave.train import LossWeights, ntp_loss
from tokenweave.vocab import (
    ROLE_VISION,
    UnifiedVocab,
    flatten_document,
    load_corpus,
    parse_sequence,
)
from tokenweave.worldsim import evaluate_exact_match, sample_scene, scene_document

from oracles import (
    dense_adapt,
    dense_causal,
    dense_denoise,
    random_layout,
    weighted_ce_oracle,
)

# --------------------------------------------------------------------------
# Pinned thresholds.  Change these only with a ledger entry.
# --------------------------------------------------------------------------
MASK_LAYOUTS = 200          # criterion 1: randomized layouts, exact equality
GRAD_SAMPLES = 50           # criterion 3: parameters probed by central diff
GRAD_RTOL = 1e-4            # criterion 3: max relative error allowed
LOSS_ATOL = 1e-9            # criterion 4: loss vs. hand oracle
BASE_EXACT_MIN = 0.90       # criterion 5: held-out exact-grid rate, greedy AR
TRAIN_BUDGET_S = 1800.0     # criterion 5: base training wall budget
PARITY_POINTS = 0.05        # criterion 6: parallel decode may trail AR by 5pt
BENCH_N = 64                # criterion 7: cells per benchmarked image (8x8)
BENCH_S = 8                 # criterion 7: denoise sweeps in the benchmark
WALL_RATIO_MIN = 3.0        # criterion 7: measured per-image speedup floor
FSM_GENERATIONS = 500       # criterion 8: seeded hybrid generations
DET_TRAIN_STEPS = 100       # criterion 10: steps per deterministic rerun

V = UnifiedVocab()


def _small_cfg(**kw):
    base = dict(vocab_size=V.vocab_size, d_model=32, n_layers=2, n_heads=4,
                n_kv_heads=2, d_intermediate=48)
    base.update(kw)
    return ModelConfig(**base)


# --------------------------------------------------------------------------
# Criterion 1 — mask constructors vs. brute-force visibility predicate
# --------------------------------------------------------------------------

def test_criterion_01_masks_match_bruteforce_predicate():
    """Every mask constructor equals its dense loop-and-prose oracle,
    exactly, on >= 200 randomized layouts (plus causal / inference grids)."""
    rng = np.random.default_rng(0xACC1)
    checked = 0
    for _ in range(MASK_LAYOUTS):
        spans = random_layout(rng, max_images=2, max_seq=256)
        got = BlockMask.dida_train(spans).dense()
        assert np.array_equal(got, dense_adapt(spans)), "layout mask mismatch"
        checked += 1
    assert checked >= MASK_LAYOUTS
    for n in (1, 2, 3, 7, 64, 256):
        assert np.array_equal(BlockMask.causal(n).dense(), dense_causal(n))
    for prefix, block in ((1, 1), (1, 4), (5, 16), (37, 64), (192, 64)):
        assert np.array_equal(BlockMask.dida_infer(prefix, block).dense(),
                              dense_denoise(prefix, block))


# --------------------------------------------------------------------------
# Criterion 2 — noisy copies are invisible to the clean stream (bitwise)
# --------------------------------------------------------------------------

def test_criterion_02_clean_stream_isolation_bitwise():
    """With 64-bit weights, logits at every clean position of an adaptation
    layout are bit-identical to the same document without noisy copies."""
    cfg = _small_cfg()
    params = init_params(cfg, seed=7, dtype=np.float64)
    rng = np.random.default_rng(11)
    for _ in range(3):
        scene = sample_scene(rng, rows=4, cols=4)
        flat = flatten_document(scene_document(scene, 2, V), V)
        layout = adapt_layout(flat, V, rng)
        noisy = np.zeros(len(layout.tokens), dtype=bool)
        for sp in layout.spans:
            if sp.kind == NOISY:
                noisy[sp.start:sp.stop] = True
        clean_idx = np.flatnonzero(~noisy)
        assert np.array_equal(layout.tokens[clean_idx], flat.tokens)
        lg_layout = forward_rowwise(params, cfg, layout.tokens,
                                    BlockMask.dida_train(layout.spans),
                                    layout.positions)
        lg_plain = forward_rowwise(params, cfg, flat.tokens,
                                   BlockMask.causal(len(flat.tokens)),
                                   np.arange(len(flat.tokens)))
        same = lg_layout[clean_idx] == lg_plain
        assert same.all(), f"{(~same).sum()} logits differ at clean positions"


# --------------------------------------------------------------------------
# Criterion 3 — analytic gradients vs. central differences
# --------------------------------------------------------------------------

def test_criterion_03_gradients_match_central_difference():
    """On a 2-layer d=16 model, the max relative error between analytic and
    central-difference gradients over >= 50 sampled parameters is < 1e-4."""
    cfg = ModelConfig(vocab_size=V.vocab_size, d_model=16, n_layers=2,
                      n_heads=2, n_kv_heads=1, d_intermediate=40)
    params = init_params(cfg, seed=5, dtype=np.float64)

    rng = np.random.default_rng(17)
    scene = sample_scene(rng, rows=4, cols=4)
    flat = flatten_document(scene_document(scene, 1, V), V)
    tok = flat.tokens[None]
    T = tok.shape[1]
    pos = np.arange(T)[None]
    add = BlockMask.causal(T).additive(np.float64)
    targets = np.zeros_like(tok)
    targets[:, :-1] = tok[:, 1:]
    coeff = np.zeros(tok.shape)
    coeff[:, :-1] = LossWeights().lookup()[V.roles(targets)][:, :-1]

    def loss_grads(p):
        logits, saved = forward_batched(p, cfg, tok, pos, add,
                                        return_saved=True)
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logp, targets[..., None], -1)[..., 0]
        ce = -picked
        dlog = (np.exp(logp) - np.eye(cfg.vocab_size)[targets]) * coeff[..., None]
        return float((coeff * ce).sum()), backward_batched(p, cfg, saved, dlog)

    _, grads = loss_grads(params)
    prng = np.random.default_rng(23)
    names = sorted(params)
    h, worst = 1e-6, 0.0
    for s in range(GRAD_SAMPLES):
        name = names[s % len(names)]
        flat_w = params[name].reshape(-1)
        i = int(prng.integers(flat_w.size))
        keep = flat_w[i]
        flat_w[i] = keep + h
        up, _ = loss_grads(params)
        flat_w[i] = keep - h
        dn, _ = loss_grads(params)
        flat_w[i] = keep
        numeric = (up - dn) / (2 * h)
        analytic = grads[name].reshape(-1)[i]
        rel = abs(analytic - numeric) / max(abs(numeric), 1e-8)
        worst = max(worst, rel)
    assert worst < GRAD_RTOL, f"max relative gradient error {worst:.3e}"


# --------------------------------------------------------------------------
# Criterion 4 — role-weighted loss vs. per-position hand oracle
# --------------------------------------------------------------------------

def test_criterion_04_loss_matches_weighted_oracle():
    """ntp_loss equals an explicit per-position cross-entropy oracle with
    0.5 visual / 1.0 text weighting to within 1e-9 on random batches."""
    rng = np.random.default_rng(31)
    for _ in range(5):
        scene_rng = np.random.default_rng(int(rng.integers(1 << 30)))
        docs = []
        for _ in range(3):
            scene = sample_scene(scene_rng, rows=4, cols=4)
            docs.append(flatten_document(
                scene_document(scene, 1, V), V).tokens)
        T = max(len(d) for d in docs) + int(rng.integers(0, 8))
        rows = np.full((len(docs), T), V.pad, dtype=np.int64)
        for i, d in enumerate(docs):
            rows[i, :len(d)] = d
        logits = rng.normal(size=(rows.shape[0], T, V.vocab_size))

        flat_logits, flat_targets, flat_w = [], [], []
        for b in range(rows.shape[0]):
            for t in range(T - 1):
                cur, nxt = int(rows[b, t]), int(rows[b, t + 1])
                if cur in (V.eos, V.pad) or nxt == V.pad:
                    continue
                w = 0.5 if V.vision_start <= nxt < V.vision_stop else 1.0
                flat_logits.append(logits[b, t])
                flat_targets.append(nxt)
                flat_w.append(w)
        want = weighted_ce_oracle(np.asarray(flat_logits),
                                  np.asarray(flat_targets), flat_w)
        got = ntp_loss(logits, rows, V)
        assert abs(got - want) < LOSS_ATOL, f"|{got} - {want}| >= {LOSS_ATOL}"


# --------------------------------------------------------------------------
# Criteria 5 & 6 — trained pipeline quality (session fixtures)
# --------------------------------------------------------------------------

@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """Default-config pipeline through the CLI: data -> train -> adapt."""
    out = tmp_path_factory.mktemp("acceptance") / "run"
    base = ["--out-dir", str(out)]
    assert main(["gen-data", *base]) == 0
    assert main(["train", *base]) == 0
    assert main(["adapt", *base]) == 0
    return out


@pytest.fixture(scope="session")
def heldout_rates(trained_run):
    """Exact-match rates on the held-out corpus for both checkpoints."""
    params_b, cfg_b, _ = load_checkpoint(trained_run / "base.ckpt")
    params_a, cfg_a, _ = load_checkpoint(trained_run / "adapted.ckpt")
    docs, vocab = load_corpus(trained_run / "corpus_held")
    ar_base = evaluate_exact_match(params_b, cfg_b, vocab, docs, mode="ar")
    ar_adapt = evaluate_exact_match(params_a, cfg_a, vocab, docs, mode="ar")
    dida = evaluate_exact_match(params_a, cfg_a, vocab, docs, mode="hybrid",
                                denoise_steps=16)
    report = json.loads((trained_run / "train_report.json").read_text())
    return {
        "ar_base": ar_base["exact_rate"],
        "ar_adapted": ar_adapt["exact_rate"],
        "dida_adapted": dida["exact_rate"],
        "n_docs": ar_base["n_docs"],
        "train_wall_s": report["wall_s"],
    }


def test_criterion_05_base_model_heldout_quality(heldout_rates):
    """After default training, greedy sequential decoding reproduces >= 90%
    of held-out grids exactly, within the 30-minute training budget."""
    wall = heldout_rates["train_wall_s"]
    assert wall <= TRAIN_BUDGET_S, f"training took {wall:.0f}s"
    rate = heldout_rates["ar_base"]
    assert rate >= BASE_EXACT_MIN, (
        f"AR exact-match {rate:.3f} on {heldout_rates['n_docs']} held-out "
        f"docs, need >= {BASE_EXACT_MIN}")


def test_criterion_06_parallel_decode_parity(heldout_rates):
    """After adaptation, parallel denoising (S=16) holds exact-match within
    5 points of sequential decoding on the same held-out set."""
    ar, dd = heldout_rates["ar_adapted"], heldout_rates["dida_adapted"]
    assert dd >= ar - PARITY_POINTS, (
        f"parallel {dd:.3f} vs sequential {ar:.3f}: "
        f"gap {ar - dd:.3f} > {PARITY_POINTS}")


# --------------------------------------------------------------------------
# Criterion 7 — forward-pass accounting and measured speedup
# --------------------------------------------------------------------------

def test_criterion_07_speedup_accounting_and_wall_ratio(tmp_path):
    """Benchmarked image blocks spend exactly N sequential / S+1 parallel
    forwards, and the measured per-image wall ratio is >= 3x at N=64, S=8;
    the report carries the arithmetic 4096-cell projection plus published
    reference wall times for context (no tolerance claimed on those)."""
    out = tmp_path / "bench"
    assert main(["bench", "--out-dir", str(out), "--steps", str(BENCH_S),
                 "--size", "8x8", "--repeats", "11"]) == 0
    rep = json.loads((out / "bench_report.json").read_text())
    recs = {r["method"]: r for r in rep["records"]}
    assert recs["ar"]["forward_passes"] == BENCH_N
    assert recs["dida"]["forward_passes"] == BENCH_S + 1
    ratio = rep["wall_ratio"]
    assert ratio >= WALL_RATIO_MIN, f"measured wall ratio {ratio}x < 3x"
    proj = rep["projection"]
    assert proj["N"] == 4096
    assert proj["forward_ratio"] == round(4096 / (BENCH_S + 1), 1)
    assert len(rep["reference_wall_times"]) == 2


# --------------------------------------------------------------------------
# Criterion 8 — grammar-constrained decoding is total
# --------------------------------------------------------------------------

def test_criterion_08_constrained_decoding_always_parses():
    """500 seeded hybrid generations from a random-weight model all pass
    stream validation and parse back into documents; prompts that leave no
    room for an image decode bit-identically to the sequential path."""
    cfg = _small_cfg(d_intermediate=80)
    params = init_params(cfg, seed=3, dtype=np.float32)
    rule = DecodeRule("sample", temperature=1.0)
    scene_rng = np.random.default_rng(0xF5A)
    ok = 0
    for i in range(FSM_GENERATIONS):
        if i % 2 == 0:
            prompt = np.array([V.bos], dtype=np.int64)
        else:
            scene = sample_scene(scene_rng, rows=4, cols=4)
            flat = flatten_document(scene_document(scene, 1, V), V)
            prompt = flat.tokens[:flat.image_spans()[0].start]
        res = generate_hybrid(params, cfg, V, prompt, max_len=96, rule=rule,
                              denoise_steps=4, rng=np.random.default_rng(i))
        validate_stream(res.tokens, V)
        parse_sequence(res.tokens, V)
        ok += 1
    assert ok == FSM_GENERATIONS

    for i in range(100):
        prompt = np.array([V.bos, 1, 2, 3], dtype=np.int64)
        cap = len(prompt) + 12  # below the smallest image bracket cost
        a = generate_ar(params, cfg, V, prompt, cap, rule=rule,
                        rng=np.random.default_rng(1000 + i))
        b = generate_hybrid(params, cfg, V, prompt, cap, rule=rule,
                            denoise_steps=4, rng=np.random.default_rng(1000 + i))
        assert np.array_equal(a.tokens, b.tokens), f"diverged at seed {1000+i}"


# --------------------------------------------------------------------------
# Criterion 9 — denoising commits monotonically and completes
# --------------------------------------------------------------------------

def test_criterion_09_denoise_monotone_commit_and_completion():
    """For S in {1, 8, 16, 64} on a 64-cell block: committed cells never
    change, open cells stay masked, and after sweep S no mask remains."""
    cfg = _small_cfg()
    params = init_params(cfg, seed=9, dtype=np.float64)
    prefix = [V.bos, 3, 5, V.boi, V.size_row(8), V.size_col(8)]
    positions = np.arange(len(prefix), len(prefix) + 64)
    for steps in (1, 8, 16, 64):
        cache = KVCache(cfg, 256, dtype=np.float64)
        for i, t in enumerate(prefix):
            forward_step(params, cfg, int(t), i, cache)
        sched = DenoiseSchedule(64, steps)
        state = DenoiseState.fresh(64, V)
        rng = np.random.default_rng(steps)
        prev_tok = state.tokens.copy()
        prev_com = state.committed.copy()
        for _ in range(steps):
            denoise_sweep(params, cfg, V, state, cache, positions, sched,
                          DecodeRule("greedy"), rng)
            assert (prev_com <= state.committed).all(), "commitment regressed"
            assert (state.tokens[prev_com] == prev_tok[prev_com]).all(), \
                "a committed cell changed value"
            assert (state.tokens[~state.committed] == V.mask).all()
            prev_tok = state.tokens.copy()
            prev_com = state.committed.copy()
        assert state.committed.all(), f"S={steps}: block incomplete"
        assert not (state.tokens == V.mask).any()
        assert (V.vision_start <= state.tokens).all()
        assert (state.tokens < V.vision_stop).all()


# --------------------------------------------------------------------------
# Criterion 10 — deterministic mode reruns are byte-identical
# --------------------------------------------------------------------------

def test_criterion_10_deterministic_rerun_byte_identical(tmp_path):
    """Two fresh runs of train(100 steps) + generate under the same config
    in deterministic mode produce byte-identical checkpoints and outputs."""
    cfg_file = tmp_path / "det.json"
    cfg_file.write_text(json.dumps({
        "d_model": 32, "n_layers": 2, "n_heads": 4, "n_kv_heads": 2,
        "d_intermediate": 80, "n_docs": 300, "grid_rows": 4, "grid_cols": 4,
        "frames_min": 1, "frames_max": 2, "train_steps": DET_TRAIN_STEPS,
        "batch_size": 4, "seq_len": 96, "warmup": 20, "max_tokens": 128,
        "deterministic": True, "seed": 123}))
    dirs = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["--config", str(cfg_file), "--out-dir", str(out)]
        assert main(["gen-data", *args]) == 0
        assert main(["train", *args]) == 0
        assert main(["generate", *args, "--mode", "dida", "--steps", "4",
                     "--force-size", "4x4", "--decode", "temp:1.0"]) == 0
        dirs.append(out)
    a, b = dirs
    for rel in ("corpus_train.tokens", "base.ckpt", "train_metrics.jsonl",
                "gen_tokens.txt"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), \
            f"{rel} differs between identical deterministic runs"
