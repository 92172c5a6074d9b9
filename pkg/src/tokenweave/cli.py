"""Command-line workflow: data generation, training, adaptation,
generation, benchmarking, and evaluation as one subcommand-style binary.

Every command resolves a :class:`RunConfig` from an optional JSON config
file plus flag overrides, archives the resolved config beside its outputs
(``config.json``), and stamps each JSON report with a 12-hex-digit hash of
that config so every artifact names the settings that produced it.  With a
fixed (config, seed), re-running a command reproduces its report byte for
byte apart from wall-time fields.

Artifacts under ``--out-dir``::

    gen-data   corpus_train.*  corpus_held.*  manifest.json
    train      base.ckpt       train_metrics.jsonl  train_report.json
    adapt      distill.*       adapted.ckpt  adapt_metrics.jsonl  adapt_report.json
    generate   gen_tokens.txt  gen_stats.json  [frame_*.ppm]
    bench      bench_report.json
    eval       eval_report.json

A command that needs an artifact another command produces fails with a
message naming that command.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .diffusion import DecodeRule
from .infer import generate_ar, generate_hybrid, self_distill, stop_after_n_images
from .mask import BlockMask
from .model import (
    ModelConfig,
    count_params,
    forward_batched,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .train import (
    AdaptConfig,
    LossWeights,
    MetricsLog,
    TrainConfig,
    ntp_targets_and_coeffs,
    offline_pad,
    train_adapt,
    train_base,
    weighted_ce,
)
from .vocab import (
    ROLE_TEXT,
    ImageSegment,
    ParseError,
    UnifiedVocab,
    flatten_document,
    load_corpus,
    save_corpus,
    serialize_document,
)
from .worldsim import evaluate_exact_match, gen_corpus, sample_scene, save_ppm, scene_document


class CliError(Exception):
    """User-facing failure: printed to stderr, exit code 1."""


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Every knob of the workflow, flat and JSON-serializable.

    A config file holds any subset of these fields as a flat JSON object;
    unknown keys are rejected.  Command-line flags override file values.
    """

    # model
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 8
    n_kv_heads: int = 2
    d_intermediate: int = 320
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    # corpus
    n_docs: int = 20000
    holdout_frac: float = 0.05
    grid_rows: int = 8
    grid_cols: int = 8
    frames_min: int = 1
    frames_max: int = 3
    # base training
    train_steps: int = 2000
    batch_size: int = 16
    seq_len: int = 256
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.0
    clip_norm: float = 5.0
    # adaptation
    adapt_steps: int = 2000
    adapt_batch: int = 16
    adapt_lr: float = 1e-3
    adapt_warmup: int = 100
    w_diff: float = 1.0
    w_ntp: float = 1.0
    distill_docs: int = 2000
    # inference
    denoise_steps: int = 16
    max_tokens: int = 320
    # run
    seed: int = 0
    deterministic: bool = False  # 64-bit numerics for new parameters
    out_dir: str = "runs/default"

    def model_config(self, vocab: UnifiedVocab) -> ModelConfig:
        return ModelConfig(vocab_size=vocab.vocab_size, d_model=self.d_model,
                           n_layers=self.n_layers, n_heads=self.n_heads,
                           n_kv_heads=self.n_kv_heads,
                           d_intermediate=self.d_intermediate,
                           rope_base=self.rope_base, norm_eps=self.norm_eps)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.train_steps, batch_size=self.batch_size,
                           seq_len=self.seq_len, lr=self.lr, warmup=self.warmup,
                           weight_decay=self.weight_decay,
                           clip_norm=self.clip_norm, seed=self.seed)

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(steps=self.adapt_steps, batch_size=self.adapt_batch,
                           lr=self.adapt_lr, warmup=self.adapt_warmup,
                           weight_decay=self.weight_decay,
                           clip_norm=self.clip_norm, seed=self.seed,
                           w_diff=self.w_diff, w_ntp=self.w_ntp)

    @property
    def dtype(self):
        return np.float64 if self.deterministic else np.float32


def config_hash(rc: RunConfig) -> str:
    """12 hex chars identifying the exact resolved configuration.

    ``out_dir`` is excluded: it says where a run lives, not what it
    computes, and reruns of one experiment in two directories must hash
    alike."""
    d = asdict(rc)
    del d["out_dir"]
    canon = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha256(canon).hexdigest()[:12]


def load_run_config(path: Optional[Path], overrides: dict) -> RunConfig:
    """Defaults <- config file <- command-line overrides, rejecting typos."""
    known = {f.name for f in fields(RunConfig)}
    merged: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise CliError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise CliError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(data) - known)
        if unknown:
            raise CliError(f"unknown config keys {unknown}; known keys: "
                           f"{sorted(known)}")
        merged.update(data)
    merged.update({k: v for k, v in overrides.items()
                   if k in known and v is not None})
    try:
        return RunConfig(**merged)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad configuration: {e}")


# ---------------------------------------------------------------------------
# Small helpers
# ---------------------------------------------------------------------------

def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _require(path: Path, what: str, producer: str) -> Path:
    if not path.exists():
        raise CliError(f"{what} not found at {path} — produce it with "
                       f"`tokenweave {producer}`")
    return path


def _load_ckpt(path: Path):
    """Checkpoint -> (params, model config, vocab, extra)."""
    params, cfg, extra = load_checkpoint(path)
    vocab = (UnifiedVocab.from_json(extra["vocab"]) if "vocab" in extra
             else UnifiedVocab())
    return params, cfg, vocab, extra


def _pick_ckpt(out: Path, flag: Optional[str]) -> Path:
    if flag:
        return _require(Path(flag), "checkpoint", "train (or adapt)")
    adapted, base = out / "adapted.ckpt", out / "base.ckpt"
    if adapted.exists():
        return adapted
    return _require(base, "checkpoint", "train (then optionally adapt)")


def parse_decode(spec: str) -> DecodeRule:
    """``greedy`` | ``temp:T`` | ``topk:K`` -> DecodeRule."""
    try:
        if spec == "greedy":
            return DecodeRule("greedy")
        if spec.startswith("temp:"):
            return DecodeRule("sample", temperature=float(spec[5:]))
        if spec.startswith("topk:"):
            return DecodeRule("top_k", top_k=int(spec[5:]))
    except ValueError as e:
        raise CliError(f"bad decode spec {spec!r}: {e}")
    raise CliError(f"decode spec {spec!r} not of the form "
                   "greedy | temp:T | topk:K")


def parse_size(spec: str, vocab: UnifiedVocab) -> tuple[int, int]:
    try:
        r_s, c_s = spec.lower().split("x")
        r, c = int(r_s), int(c_s)
    except ValueError:
        raise CliError(f"size spec {spec!r} not of the form RxC, e.g. 8x8")
    for v in (r, c):
        if v not in vocab.sizes:
            raise CliError(f"size {v} unsupported; choices: {vocab.sizes}")
    return r, c


def _read_prompt(path: Path) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise CliError(f"prompt file not found: {path}")
    try:
        toks = [int(t) for t in text.split()]
    except ValueError:
        raise CliError(f"prompt file {path} must hold whitespace-separated "
                       "integer token ids")
    if not toks:
        raise CliError(f"prompt file {path} is empty")
    return np.asarray(toks, dtype=np.int64)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(rc: RunConfig, out: Path, args) -> int:
    vocab = UnifiedVocab()
    t0 = time.monotonic()
    train_docs, held_docs = gen_corpus(
        rc.n_docs, rc.seed, vocab, holdout_frac=rc.holdout_frac,
        rows=rc.grid_rows, cols=rc.grid_cols,
        frames=(rc.frames_min, rc.frames_max))
    save_corpus(out / "corpus_train", train_docs, vocab)
    save_corpus(out / "corpus_held", held_docs, vocab)
    manifest = {
        "config_hash": config_hash(rc),
        "seed": rc.seed,
        "n_docs": rc.n_docs,
        "n_train": len(train_docs),
        "n_held": len(held_docs),
        "holdout_frac": rc.holdout_frac,
        "grid": [rc.grid_rows, rc.grid_cols],
        "frames": [rc.frames_min, rc.frames_max],
        "files": ["corpus_train.tokens", "corpus_train.vocab.json",
                  "corpus_held.tokens", "corpus_held.vocab.json"],
    }
    _write_json(out / "manifest.json", manifest)
    if args.verify:
        for stem, want in (("corpus_train", len(train_docs)),
                           ("corpus_held", len(held_docs))):
            docs, _ = load_corpus(out / stem)  # re-parses every line
            if len(docs) != want:
                raise CliError(f"verify: {stem} holds {len(docs)} documents, "
                               f"manifest says {want}")
        print(f"verified: all {rc.n_docs} documents re-parse cleanly")
    print(f"gen-data: {len(train_docs)} train + {len(held_docs)} held-out "
          f"documents in {time.monotonic() - t0:.1f}s -> {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(rc: RunConfig, out: Path, args) -> int:
    _require(out / "corpus_train.tokens", "training corpus", "gen-data")
    docs, vocab = load_corpus(out / "corpus_train")
    cfg = rc.model_config(vocab)
    params = init_params(cfg, seed=rc.seed, dtype=rc.dtype)
    toks = [serialize_document(d, vocab) for d in docs]
    metrics = MetricsLog(out / "train_metrics.jsonl")
    t0 = time.monotonic()
    train_base(params, cfg, rc.train_config(), toks, vocab,
               metrics=metrics, progress=args.progress)
    wall = time.monotonic() - t0
    h = config_hash(rc)
    save_checkpoint(out / "base.ckpt", params, cfg,
                    extra={"phase": "base", "config_hash": h,
                           "vocab": vocab.to_json()})
    report = {
        "command": "train",
        "config_hash": h,
        "steps": rc.train_steps,
        "n_params": count_params(params),
        "dtype": str(np.dtype(rc.dtype)),
        "final": metrics.rows[-1] if metrics.rows else None,
        "checkpoint": "base.ckpt",
        "wall_s": round(wall, 2),
    }
    _write_json(out / "train_report.json", report)
    print(f"train: {rc.train_steps} steps, final loss "
          f"{report['final']['loss'] if report['final'] else float('nan')}, "
          f"{wall:.0f}s -> {out / 'base.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# adapt
# ---------------------------------------------------------------------------

def cmd_adapt(rc: RunConfig, out: Path, args) -> int:
    ckpt = _require(out / "base.ckpt", "base checkpoint", "train")
    _require(out / "corpus_train.tokens", "training corpus", "gen-data")
    params, cfg, vocab, _ = _load_ckpt(ckpt)
    docs, corpus_vocab = load_corpus(out / "corpus_train")
    if corpus_vocab != vocab:
        raise CliError("corpus and checkpoint disagree on the vocabulary")
    t0 = time.monotonic()

    # Half the adaptation data is the model's own output: regenerate the
    # first n documents from their caption prompts and mix 50/50 with
    # originals.
    n_distill = min(rc.distill_docs, len(docs))
    prompts = []
    for doc in docs[:n_distill]:
        flat = flatten_document(doc, vocab)
        prompts.append(flat.tokens[:flat.image_spans()[0].cells_start])
    distilled = self_distill(params, cfg, vocab, prompts, rc.max_tokens,
                             DecodeRule("greedy"), seed=rc.seed + 1)
    save_corpus(out / "distill", distilled, vocab)
    distill_wall = time.monotonic() - t0

    flats = [flatten_document(d, vocab) for d in distilled]
    flats += [flatten_document(d, vocab) for d in docs[:n_distill]]
    metrics = MetricsLog(out / "adapt_metrics.jsonl")
    train_adapt(params, cfg, rc.adapt_config(), flats, vocab,
                metrics=metrics, progress=args.progress)
    wall = time.monotonic() - t0
    h = config_hash(rc)
    save_checkpoint(out / "adapted.ckpt", params, cfg,
                    extra={"phase": "adapted", "config_hash": h,
                           "vocab": vocab.to_json()})
    report = {
        "command": "adapt",
        "config_hash": h,
        "steps": rc.adapt_steps,
        "n_distilled": len(distilled),
        "n_original": n_distill,
        "final": metrics.rows[-1] if metrics.rows else None,
        "checkpoint": "adapted.ckpt",
        "distill_wall_s": round(distill_wall, 2),
        "wall_s": round(wall, 2),
    }
    _write_json(out / "adapt_report.json", report)
    print(f"adapt: {len(distilled)} self-distilled + {n_distill} original "
          f"documents, {rc.adapt_steps} steps, {wall:.0f}s "
          f"-> {out / 'adapted.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(rc: RunConfig, out: Path, args) -> int:
    params, cfg, vocab, extra = _load_ckpt(_pick_ckpt(out, args.ckpt))
    if args.prompt_file:
        prompt = _read_prompt(Path(args.prompt_file))
    else:
        prompt = np.array([vocab.bos], dtype=np.int64)
    if args.force_size:
        r, c = parse_size(args.force_size, vocab)
        prompt = np.concatenate([prompt, [vocab.boi, vocab.size_row(r),
                                          vocab.size_col(c)]])
    rule = parse_decode(args.decode)
    rng = np.random.default_rng(rc.seed)
    steps = args.steps if args.steps is not None else rc.denoise_steps
    try:
        if args.mode == "ar":
            res = generate_ar(params, cfg, vocab, prompt, rc.max_tokens,
                              rule=rule, rng=rng)
        else:
            res = generate_hybrid(params, cfg, vocab, prompt, rc.max_tokens,
                                  rule=rule, rng=rng, denoise_steps=steps)
    except ValueError as e:
        raise CliError(f"generation failed: {e}")
    doc = res.document(vocab)  # raises if ungrammatical; cannot happen

    line = " ".join(str(int(t)) for t in res.tokens)
    (out / "gen_tokens.txt").write_text(line + "\n")
    stats = {
        "command": "generate",
        "config_hash": config_hash(rc),
        "checkpoint_phase": extra.get("phase", "unknown"),
        "mode": args.mode,
        "decode": args.decode,
        "denoise_steps": steps if args.mode == "dida" else None,
        "n_prompt": int(len(prompt)),
        "n_tokens": int(len(res.tokens)),
        "n_images": sum(isinstance(s, ImageSegment) for s in doc.segments),
        "forwards": {
            "prefill": res.stats.prefill_forwards,
            "step": res.stats.step_forwards,
            "sweep": res.stats.sweep_forwards,
            "commit": res.stats.commit_forwards,
            "total": res.stats.total_forwards,
        },
        "images": res.stats.images,
        "wall_s": round(res.stats.wall_s, 4),
    }
    _write_json(out / "gen_stats.json", stats)
    if args.ppm_dir:
        ppm_dir = Path(args.ppm_dir)
        ppm_dir.mkdir(parents=True, exist_ok=True)
        k = 0
        for seg in doc.segments:
            if isinstance(seg, ImageSegment):
                grid = np.asarray(seg.cells).reshape(seg.rows, seg.cols)
                save_ppm(ppm_dir / f"frame_{k:02d}.ppm", grid, vocab)
                k += 1
        print(f"wrote {k} PPM frame(s) to {ppm_dir}")
    print(line)
    print(f"generate: {stats['n_tokens']} tokens, "
          f"{stats['forwards']['total']} forwards, mode {args.mode} "
          f"-> {out / 'gen_tokens.txt'}")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

# Reference wall times for one 4096-token image at production scale
# (sequential vs parallel decoding, plain and optimized serving stacks),
# included in reports for context only: desk-scale measurements make no
# claim of matching or extrapolating to these.
REFERENCE_WALL_TIMES = (
    {"stack": "plain", "sequential_s": 512, "parallel_s": 22},
    {"stack": "optimized", "sequential_s": 120, "parallel_s": 10},
)

# Fixed model used by default for benchmarking.  Timing, unlike accounting,
# depends on model size: at this width each forward pass is dominated by
# per-call fixed costs — the regime the forward-count reduction targets —
# and the run stays under a second.  The report discloses the dimensions;
# pass --ckpt to time a trained toy checkpoint instead.
BENCH_MODEL = dict(d_model=64, n_layers=4, n_heads=8, n_kv_heads=2,
                   d_intermediate=160)


def _bench_once(params, cfg, vocab, prompt, span, mode, steps, repeats,
                truth):
    """Best-of-``repeats`` per-image wall time plus exact accounting."""
    n_cells = span.rows * span.cols
    walls, forwards, exact = [], None, None
    for _ in range(repeats):
        if mode == "ar":
            res = generate_ar(params, cfg, vocab, prompt, len(truth) + 4,
                              stop_after=stop_after_n_images(1))
        else:
            res = generate_hybrid(params, cfg, vocab, prompt, len(truth) + 4,
                                  denoise_steps=steps,
                                  stop_after=stop_after_n_images(1))
        img = res.stats.images[-1]
        walls.append(img["wall_s"])
        forwards = img["forwards"]
        got = res.tokens[span.cells_start:span.cells_stop]
        want = truth[span.cells_start:span.cells_stop]
        exact = bool(np.array_equal(got, want))
    want_fwd = n_cells if mode == "ar" else steps + 1
    if forwards != want_fwd:
        raise CliError(f"forward accounting broken: {mode} spent {forwards} "
                       f"image-block forwards, contract says {want_fwd}")
    return {
        "method": mode,
        "N": n_cells,
        "S": None if mode == "ar" else steps,
        "forward_passes": forwards,
        "wall_time_ms": round(min(walls) * 1e3, 3),
        "exact_match": exact,
    }


def cmd_bench(rc: RunConfig, out: Path, args) -> int:
    steps, repeats = args.steps, args.repeats
    if args.ckpt:
        params, cfg, vocab, extra = _load_ckpt(Path(args.ckpt))
        params = {k: v.astype(np.float32) for k, v in params.items()}
        source = f"checkpoint {args.ckpt} ({extra.get('phase', 'unknown')})"
    else:
        vocab = UnifiedVocab()
        cfg = ModelConfig(vocab_size=vocab.vocab_size, **BENCH_MODEL)
        params = init_params(cfg, seed=rc.seed, dtype=np.float32)
        source = "fresh init (timing needs no trained weights)"
    r, c = parse_size(args.size, vocab)
    n_cells = r * c

    scene = sample_scene(np.random.default_rng(rc.seed), rows=r, cols=c)
    flat = flatten_document(scene_document(scene, 1, vocab), vocab)
    span = flat.image_spans()[0]
    prompt = flat.tokens[:span.cells_start]  # caption + BOI + size markers

    records = [
        _bench_once(params, cfg, vocab, prompt, span, "ar", steps,
                    repeats, flat.tokens),
        _bench_once(params, cfg, vocab, prompt, span, "dida", steps,
                    repeats, flat.tokens),
    ]
    ratio = records[0]["wall_time_ms"] / records[1]["wall_time_ms"]
    report = {
        "command": "bench",
        "config_hash": config_hash(rc),
        "model": {"source": source, "d_model": cfg.d_model,
                  "n_layers": cfg.n_layers, "n_heads": cfg.n_heads,
                  "n_kv_heads": cfg.n_kv_heads,
                  "d_intermediate": cfg.d_intermediate,
                  "n_params": count_params(params), "dtype": "float32"},
        "repeats": repeats,
        "records": records,
        "wall_ratio": round(ratio, 2),
        "projection": {
            "N": 4096,
            "S": steps,
            "sequential_forwards": 4096,
            "parallel_forwards": steps + 1,
            "forward_ratio": round(4096 / (steps + 1), 1),
            "note": "arithmetic forward-count projection to a "
                    "4096-cell image; not a timing claim",
        },
        "reference_wall_times": list(REFERENCE_WALL_TIMES),
    }
    _write_json(out / "bench_report.json", report)
    print(f"{'method':>6} {'N':>5} {'S':>4} {'forwards':>8} {'ms/image':>9} "
          f"{'exact':>5}")
    for rec in records:
        print(f"{rec['method']:>6} {rec['N']:>5} "
              f"{rec['S'] if rec['S'] is not None else '-':>4} "
              f"{rec['forward_passes']:>8} {rec['wall_time_ms']:>9.3f} "
              f"{str(rec['exact_match']):>5}")
    print(f"bench: wall ratio {ratio:.2f}x at N={n_cells}, S={steps} "
          f"(forward ratio {n_cells}/{steps + 1}); projected forward ratio "
          f"{report['projection']['forward_ratio']}x at N=4096 "
          f"-> {out / 'bench_report.json'}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _text_val_loss(params, cfg, vocab, doc_tokens, batch_size=16) -> float:
    """Mean next-token CE over text-role targets of padded document rows."""
    ce_sum, n = 0.0, 0
    dtype = next(iter(params.values())).dtype.type
    for i in range(0, len(doc_tokens), batch_size):
        chunk = doc_tokens[i:i + batch_size]
        rows = offline_pad(chunk, vocab)
        T = rows.shape[1]
        add = BlockMask.causal(T).additive(dtype)
        positions = np.tile(np.arange(T), (len(rows), 1))
        logits = forward_batched(params, cfg, rows, positions, add)
        targets, coeffs = ntp_targets_and_coeffs(rows, vocab, LossWeights())
        _, _, ce = weighted_ce(logits, targets, coeffs, return_ce=True)
        pick = (coeffs > 0) & (vocab.roles(targets) == ROLE_TEXT)
        ce_sum += float(ce[pick].sum())
        n += int(pick.sum())
    return ce_sum / n if n else float("nan")


def cmd_eval(rc: RunConfig, out: Path, args) -> int:
    ckpt = _pick_ckpt(out, args.ckpt)
    _require(out / "corpus_held.tokens", "held-out corpus", "gen-data")
    params, cfg, vocab, extra = _load_ckpt(ckpt)
    held, corpus_vocab = load_corpus(out / "corpus_held")
    if corpus_vocab != vocab:
        raise CliError("corpus and checkpoint disagree on the vocabulary")
    if not held:
        raise CliError("held-out corpus is empty; regenerate with a "
                       "nonzero holdout_frac")
    limit = args.limit
    steps = args.steps if args.steps is not None else rc.denoise_steps
    t0 = time.monotonic()
    ar = evaluate_exact_match(params, cfg, vocab, held, mode="ar", limit=limit)
    dida = evaluate_exact_match(params, cfg, vocab, held, mode="hybrid",
                                denoise_steps=steps, limit=limit)
    subset = held[:limit] if limit is not None else held
    text_loss = _text_val_loss(params, cfg, vocab,
                               [serialize_document(d, vocab) for d in subset])
    report = {
        "command": "eval",
        "config_hash": config_hash(rc),
        "checkpoint": ckpt.name,
        "checkpoint_phase": extra.get("phase", "unknown"),
        "denoise_steps": steps,
        "n_docs": ar["n_docs"],
        "ar": ar,
        "dida": dida,
        "text_val_loss": round(text_loss, 6),
        "wall_s": round(time.monotonic() - t0, 2),
    }
    try:  # validate against the shipped schema when jsonschema is present
        import jsonschema

        jsonschema.validate(report, json.loads(
            (Path(__file__).parent / "schemas" /
             "eval_report.schema.json").read_text()))
    except ImportError:
        pass
    _write_json(out / "eval_report.json", report)
    print(f"eval[{extra.get('phase', '?')}]: AR exact {ar['exact_rate']:.3f} "
          f"| DiDA(S={steps}) exact {dida['exact_rate']:.3f} "
          f"| text val loss {text_loss:.4f} ({ar['n_docs']} docs) "
          f"-> {out / 'eval_report.json'}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tokenweave",
        description="Interleaved text+image token modeling: corpus "
                    "generation, training, adaptation, generation, "
                    "benchmarking, evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, default=None,
                        help="JSON file of RunConfig fields")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", dest="out_dir", default=None,
                        help="artifact directory (default runs/default)")
        sp.add_argument("--deterministic", action="store_const", const=True,
                        default=None,
                        help="use 64-bit numerics for new parameters")

    sp = sub.add_parser("gen-data", help="write the synthetic corpus")
    common(sp)
    sp.add_argument("--n-docs", dest="n_docs", type=int, default=None)
    sp.add_argument("--verify", action="store_true",
                    help="re-parse every written document")

    sp = sub.add_parser("train", help="base next-token training")
    common(sp)
    sp.add_argument("--steps", dest="train_steps", type=int, default=None)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    sp.add_argument("--seq-len", dest="seq_len", type=int, default=None)
    sp.add_argument("--lr", dest="lr", type=float, default=None)
    sp.add_argument("--progress", type=int, default=200,
                    help="console progress cadence in steps (0: quiet)")

    sp = sub.add_parser("adapt", help="denoising adaptation of a base model")
    common(sp)
    sp.add_argument("--steps", dest="adapt_steps", type=int, default=None)
    sp.add_argument("--batch-size", dest="adapt_batch", type=int, default=None)
    sp.add_argument("--lr", dest="adapt_lr", type=float, default=None)
    sp.add_argument("--distill-docs", dest="distill_docs", type=int,
                    default=None)
    sp.add_argument("--progress", type=int, default=100,
                    help="console progress cadence in steps (0: quiet)")

    sp = sub.add_parser("generate", help="generate one sequence")
    common(sp)
    sp.add_argument("--prompt-file", default=None,
                    help="file of whitespace-separated token ids "
                         "(default: start from BOS)")
    sp.add_argument("--mode", choices=("ar", "dida"), default="ar")
    sp.add_argument("--steps", type=int, default=None,
                    help="denoise sweeps per image in dida mode")
    sp.add_argument("--max-tokens", dest="max_tokens", type=int, default=None)
    sp.add_argument("--force-size", default=None, metavar="RxC",
                    help="open an image with this size right after the prompt")
    sp.add_argument("--decode", default="greedy",
                    help="greedy | temp:T | topk:K (default greedy)")
    sp.add_argument("--ckpt", default=None,
                    help="checkpoint path (default: adapted, then base)")
    sp.add_argument("--ppm-dir", default=None,
                    help="also dump generated grids as PPM images here")

    sp = sub.add_parser("bench", help="sequential vs parallel decoding timing")
    common(sp)
    sp.add_argument("--steps", type=int, default=8,
                    help="denoise sweeps S (default 8)")
    sp.add_argument("--size", default="8x8", metavar="RxC",
                    help="image size to time (default 8x8)")
    sp.add_argument("--repeats", type=int, default=9,
                    help="timing repeats; the minimum is reported")
    sp.add_argument("--ckpt", default=None,
                    help="time this checkpoint instead of the fixed "
                         "bench model")

    sp = sub.add_parser("eval", help="exact-match and validation-loss report")
    common(sp)
    sp.add_argument("--limit", type=int, default=None,
                    help="evaluate only the first N held-out documents")
    sp.add_argument("--steps", type=int, default=None,
                    help="denoise sweeps per image (default: config)")
    sp.add_argument("--ckpt", default=None,
                    help="checkpoint path (default: adapted, then base)")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "generate": cmd_generate,
    "bench": cmd_bench,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in
                 ("seed", "out_dir", "deterministic", "n_docs", "train_steps",
                  "batch_size", "seq_len", "lr", "adapt_steps", "adapt_batch",
                  "adapt_lr", "distill_docs", "max_tokens")
                 if hasattr(args, k)}
    try:
        rc = load_run_config(args.config, overrides)
        out = Path(rc.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json",
                    {"config": asdict(rc), "config_hash": config_hash(rc)})
        return COMMANDS[args.command](rc, out, args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ParseError as e:
        print(f"error: corrupt data file — {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
