"""tokenweave: desk-scale interleaved text+image token modeling in numpy.

The package is organized around one flat token stream that carries text,
rasterized images, and structural markers in a single vocabulary:

``vocab``
    Token-space layout, document serialization grammar, and corpus file I/O.
``mask``
    Block-sparse attention reachability masks (causal, denoising-train,
    denoising-infer) with an exact dense reference.
``model``
    A small decoder-only transformer (grouped-query attention, RMSNorm,
    rotary positions, gated MLP) with handwritten forward and backward
    passes and a KV cache.
``diffusion``
    Masked-token corruption and iterative parallel denoising of image
    blocks, converting per-cell sequential decoding into a few
    bidirectional refinement sweeps.
``train``
    Losses, AdamW, schedules, the base next-token training loop, and the
    denoising adaptation loop.
``infer``
    A stream-grammar validator, legality masking, sequential decoding, and
    the hybrid decoder that switches between sequential text decoding and
    parallel image denoising.
``worldsim``
    A deterministic synthetic world of colored shapes on grids, used to
    produce corpora where generation quality can be checked exactly.
``cli``
    Command-line entry points: gen-data, train, adapt, generate, bench, eval.
"""

__version__ = "0.1.0"
