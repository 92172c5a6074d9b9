"""Unified token space and document serialization.

One flat integer vocabulary carries three kinds of tokens:

* text ids occupy ``[0, n_text)``,
* vision ids (image cell values) occupy ``[n_text, n_text + n_vision)``,
* structural specials sit after the vision range, in a fixed order:
  ``BOS, EOS, BOI, EOI, MASK, PAD`` followed by one row-size marker and one
  column-size marker per supported image size.

A document is a list of text and image segments.  Serialization is a small
bracketing grammar::

    document  :=  BOS segment* EOS
    segment   :=  text-token+  |  image
    image     :=  BOI SIZE_ROW(r) SIZE_COL(c) cell{r*c} EOI

so an ``r x c`` image costs ``r*c + 4`` tokens and the whole stream is
parseable without lookahead.  ``parse_sequence`` inverts
``serialize_document`` exactly and reports the first offending position on
malformed input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Union

import numpy as np

# Token roles, used for loss weighting and stream accounting.  Kept as small
# ints so role arrays can live alongside token arrays.
ROLE_TEXT = 0
ROLE_VISION = 1
ROLE_SPECIAL = 2

_ROLE_NAMES = {ROLE_TEXT: "text", ROLE_VISION: "vision", ROLE_SPECIAL: "special"}


class MalformedDocument(ValueError):
    """Raised when a Document violates the serialization grammar's premises
    (unsupported image size, wrong cell count, out-of-range token ids)."""


class ParseError(ValueError):
    """Raised by ``parse_sequence`` on input that is not a serialized document.

    Attributes
    ----------
    position : int
        Index into the token array of the first offending token (or
        ``len(tokens)`` when the stream ends too early).
    """

    def __init__(self, position: int, message: str):
        super().__init__(f"position {position}: {message}")
        self.position = position


@dataclass(frozen=True)
class UnifiedVocab:
    """Layout of the shared text+vision+special token space.

    Parameters
    ----------
    n_text : int
        Number of text ids; they occupy ``[0, n_text)``.
    n_vision : int
        Number of vision ids; they occupy ``[n_text, n_text + n_vision)``.
    sizes : tuple[int, ...]
        Supported image side lengths.  Each size `s` gets a dedicated
        ``SIZE_ROW(s)`` and ``SIZE_COL(s)`` marker, so images declare their
        own raster shape in-band.
    """

    n_text: int = 64
    n_vision: int = 256
    sizes: tuple[int, ...] = (4, 8, 16)

    def __post_init__(self):
        if self.n_text <= 0 or self.n_vision <= 0:
            raise ValueError("n_text and n_vision must be positive")
        if len(self.sizes) != len(set(self.sizes)) or any(s <= 0 for s in self.sizes):
            raise ValueError("sizes must be distinct positive integers")
        object.__setattr__(self, "sizes", tuple(sorted(self.sizes)))

    # -- range boundaries ---------------------------------------------------

    @property
    def text_start(self) -> int:
        return 0

    @property
    def text_stop(self) -> int:
        return self.n_text

    @property
    def vision_start(self) -> int:
        return self.n_text

    @property
    def vision_stop(self) -> int:
        return self.n_text + self.n_vision

    @property
    def special_start(self) -> int:
        return self.vision_stop

    @property
    def vocab_size(self) -> int:
        # 6 fixed specials + one row and one column marker per size.
        return self.special_start + 6 + 2 * len(self.sizes)

    # -- the fixed specials -------------------------------------------------

    @property
    def bos(self) -> int:
        return self.special_start + 0

    @property
    def eos(self) -> int:
        return self.special_start + 1

    @property
    def boi(self) -> int:
        return self.special_start + 2

    @property
    def eoi(self) -> int:
        return self.special_start + 3

    @property
    def mask(self) -> int:
        return self.special_start + 4

    @property
    def pad(self) -> int:
        return self.special_start + 5

    # -- per-size markers ---------------------------------------------------

    def size_row(self, s: int) -> int:
        """Token id of the row-count marker for side length ``s``."""
        try:
            i = self.sizes.index(s)
        except ValueError:
            raise MalformedDocument(f"unsupported image size {s} (have {self.sizes})")
        return self.special_start + 6 + i

    def size_col(self, s: int) -> int:
        """Token id of the column-count marker for side length ``s``."""
        try:
            i = self.sizes.index(s)
        except ValueError:
            raise MalformedDocument(f"unsupported image size {s} (have {self.sizes})")
        return self.special_start + 6 + len(self.sizes) + i

    def row_size_of(self, tok: int) -> Union[int, None]:
        """Side length if ``tok`` is a row marker, else None."""
        base = self.special_start + 6
        if base <= tok < base + len(self.sizes):
            return self.sizes[tok - base]
        return None

    def col_size_of(self, tok: int) -> Union[int, None]:
        """Side length if ``tok`` is a column marker, else None."""
        base = self.special_start + 6 + len(self.sizes)
        if base <= tok < base + len(self.sizes):
            return self.sizes[tok - base]
        return None

    # -- classification -----------------------------------------------------

    def classify_token(self, tok: int) -> int:
        """Role of a single token id: ROLE_TEXT, ROLE_VISION, or ROLE_SPECIAL."""
        if 0 <= tok < self.n_text:
            return ROLE_TEXT
        if self.n_text <= tok < self.vision_stop:
            return ROLE_VISION
        if self.vision_stop <= tok < self.vocab_size:
            return ROLE_SPECIAL
        raise ValueError(f"token id {tok} outside vocabulary of size {self.vocab_size}")

    def roles(self, tokens: np.ndarray) -> np.ndarray:
        """Vectorized ``classify_token`` over an integer array."""
        t = np.asarray(tokens)
        if t.size and (t.min() < 0 or t.max() >= self.vocab_size):
            bad = int(t.flat[int(np.argmax((t < 0) | (t >= self.vocab_size)))])
            raise ValueError(f"token id {bad} outside vocabulary of size {self.vocab_size}")
        out = np.full(t.shape, ROLE_SPECIAL, dtype=np.uint8)
        out[t < self.vision_stop] = ROLE_VISION
        out[t < self.n_text] = ROLE_TEXT
        return out

    def token_name(self, tok: int) -> str:
        """Human-readable name for traces and error messages."""
        role = self.classify_token(tok)
        if role == ROLE_TEXT:
            return f"t{tok}"
        if role == ROLE_VISION:
            return f"v{tok - self.vision_start}"
        for name in ("bos", "eos", "boi", "eoi", "mask", "pad"):
            if tok == getattr(self, name):
                return name.upper()
        r = self.row_size_of(tok)
        if r is not None:
            return f"ROW{r}"
        c = self.col_size_of(tok)
        if c is not None:
            return f"COL{c}"
        return f"?{tok}"  # unreachable if classify_token passed

    # -- persistence --------------------------------------------------------

    def to_json(self) -> dict:
        return {"n_text": self.n_text, "n_vision": self.n_vision, "sizes": list(self.sizes)}

    @classmethod
    def from_json(cls, d: dict) -> "UnifiedVocab":
        return cls(n_text=int(d["n_text"]), n_vision=int(d["n_vision"]),
                   sizes=tuple(int(s) for s in d["sizes"]))


# ---------------------------------------------------------------------------
# Documents
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TextSegment:
    """A run of text tokens (ids in the text range)."""

    tokens: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ImageSegment:
    """A rasterized image: ``rows x cols`` vision ids in row-major order."""

    rows: int
    cols: int
    cells: tuple[int, ...]

    def __post_init__(self):
        if len(self.cells) != self.rows * self.cols:
            raise MalformedDocument(
                f"image declares {self.rows}x{self.cols} but has {len(self.cells)} cells")

    def grid(self) -> np.ndarray:
        """Cells as a ``(rows, cols)`` int array."""
        return np.asarray(self.cells, dtype=np.int32).reshape(self.rows, self.cols)


Segment = Union[TextSegment, ImageSegment]


@dataclass(frozen=True)
class Document:
    """An ordered list of text and image segments.

    Canonical form (enforced by ``serialize_document`` and produced by
    ``parse_sequence``): no empty text segments and no two adjacent text
    segments, so document equality matches serialized-stream equality.
    """

    segments: tuple[Segment, ...]

    def __iter__(self) -> Iterator[Segment]:
        return iter(self.segments)

    def images(self) -> list[ImageSegment]:
        return [s for s in self.segments if isinstance(s, ImageSegment)]

    def token_length(self, vocab: UnifiedVocab) -> int:
        """Length of the serialized stream, without serializing."""
        n = 2  # BOS, EOS
        for seg in self.segments:
            if isinstance(seg, TextSegment):
                n += len(seg.tokens)
            else:
                n += seg.rows * seg.cols + 4
        return n


def _check_canonical(doc: Document) -> None:
    prev_text = False
    for seg in doc.segments:
        if isinstance(seg, TextSegment):
            if len(seg.tokens) == 0:
                raise MalformedDocument("empty text segment")
            if prev_text:
                raise MalformedDocument("adjacent text segments (merge them)")
            prev_text = True
        elif isinstance(seg, ImageSegment):
            prev_text = False
        else:
            raise MalformedDocument(f"unknown segment type {type(seg).__name__}")


def serialize_document(doc: Document, vocab: UnifiedVocab) -> np.ndarray:
    """Flatten a document to its token stream.

    Returns an int32 array ``[BOS, ..., EOS]``.  Raises MalformedDocument if
    the document is not canonical, uses an unsupported image size, or
    contains out-of-range token ids.
    """
    _check_canonical(doc)
    out = [vocab.bos]
    for seg in doc.segments:
        if isinstance(seg, TextSegment):
            for t in seg.tokens:
                if not (0 <= t < vocab.n_text):
                    raise MalformedDocument(f"text token {t} outside [0, {vocab.n_text})")
            out.extend(seg.tokens)
        else:
            row_tok = vocab.size_row(seg.rows)  # raises on unsupported size
            col_tok = vocab.size_col(seg.cols)
            for v in seg.cells:
                if not (vocab.vision_start <= v < vocab.vision_stop):
                    raise MalformedDocument(
                        f"cell value {v} outside vision range "
                        f"[{vocab.vision_start}, {vocab.vision_stop})")
            out.append(vocab.boi)
            out.append(row_tok)
            out.append(col_tok)
            out.extend(seg.cells)
            out.append(vocab.eoi)
    out.append(vocab.eos)
    return np.asarray(out, dtype=np.int32)


def parse_sequence(tokens: np.ndarray, vocab: UnifiedVocab) -> Document:
    """Invert ``serialize_document``; strict, single pass, no lookahead.

    Raises ParseError carrying the index of the first offending token.
    """
    toks = [int(t) for t in np.asarray(tokens).ravel()]
    n = len(toks)

    def fail(pos: int, msg: str) -> ParseError:
        return ParseError(pos, msg)

    if n == 0:
        raise fail(0, "empty stream (expected BOS)")
    if toks[0] != vocab.bos:
        raise fail(0, f"expected BOS, got {vocab.token_name(toks[0]) if toks[0] < vocab.vocab_size and toks[0] >= 0 else toks[0]}")

    segments: list[Segment] = []
    text_buf: list[int] = []
    i = 1
    while True:
        if i >= n:
            raise fail(n, "stream ended without EOS")
        t = toks[i]
        if not (0 <= t < vocab.vocab_size):
            raise fail(i, f"token id {t} outside vocabulary")
        if t == vocab.eos:
            break
        if 0 <= t < vocab.n_text:
            text_buf.append(t)
            i += 1
            continue
        if t == vocab.boi:
            if text_buf:
                segments.append(TextSegment(tuple(text_buf)))
                text_buf = []
            # image header: SIZE_ROW then SIZE_COL
            if i + 1 >= n:
                raise fail(n, "stream ended inside image header")
            r = vocab.row_size_of(toks[i + 1])
            if r is None:
                raise fail(i + 1, f"expected row-size marker, got {vocab.token_name(toks[i + 1])}")
            if i + 2 >= n:
                raise fail(n, "stream ended inside image header")
            c = vocab.col_size_of(toks[i + 2])
            if c is None:
                raise fail(i + 2, f"expected column-size marker, got {vocab.token_name(toks[i + 2])}")
            cells_start = i + 3
            cells_stop = cells_start + r * c
            if cells_stop > n:
                raise fail(n, f"stream ended inside {r}x{c} image body")
            for j in range(cells_start, cells_stop):
                v = toks[j]
                if not (vocab.vision_start <= v < vocab.vision_stop):
                    raise fail(j, f"expected vision cell, got {vocab.token_name(v) if 0 <= v < vocab.vocab_size else v}")
            if cells_stop >= n:
                raise fail(n, "stream ended before EOI")
            if toks[cells_stop] != vocab.eoi:
                raise fail(cells_stop, f"expected EOI after {r * c} cells, got {vocab.token_name(toks[cells_stop])}")
            segments.append(ImageSegment(r, c, tuple(toks[cells_start:cells_stop])))
            i = cells_stop + 1
            continue
        raise fail(i, f"unexpected {vocab.token_name(t)} at top level")

    # i points at EOS
    if text_buf:
        segments.append(TextSegment(tuple(text_buf)))
    if i != n - 1:
        raise fail(i + 1, "trailing tokens after EOS")
    return Document(tuple(segments))


# ---------------------------------------------------------------------------
# Flat view: per-token segment ids and spans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SegmentSpan:
    """Location of one segment inside a serialized stream.

    ``start:stop`` covers the whole segment including image brackets;
    ``cells_start:cells_stop`` covers just the raster cells (equal to
    ``start:stop`` for text segments).
    """

    kind: str  # "text" | "image"
    start: int
    stop: int
    cells_start: int
    cells_stop: int
    rows: int = 0
    cols: int = 0


@dataclass(frozen=True)
class FlatSequence:
    """A serialized document plus per-token bookkeeping.

    Attributes
    ----------
    tokens : np.ndarray
        int32 stream, ``[BOS, ..., EOS]``.
    roles : np.ndarray
        uint8 per-token role (ROLE_TEXT / ROLE_VISION / ROLE_SPECIAL).
    seg_ids : np.ndarray
        int32 per-token segment index; -1 on BOS/EOS.
    spans : tuple[SegmentSpan, ...]
        One span per segment, in order.
    """

    tokens: np.ndarray
    roles: np.ndarray
    seg_ids: np.ndarray
    spans: tuple[SegmentSpan, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def image_spans(self) -> list[SegmentSpan]:
        return [s for s in self.spans if s.kind == "image"]


def flatten_document(doc: Document, vocab: UnifiedVocab) -> FlatSequence:
    """Serialize and annotate a document in one pass."""
    tokens = serialize_document(doc, vocab)
    seg_ids = np.full(len(tokens), -1, dtype=np.int32)
    spans: list[SegmentSpan] = []
    i = 1
    for k, seg in enumerate(doc.segments):
        if isinstance(seg, TextSegment):
            span = SegmentSpan("text", i, i + len(seg.tokens), i, i + len(seg.tokens))
        else:
            body = seg.rows * seg.cols
            span = SegmentSpan("image", i, i + body + 4, i + 3, i + 3 + body,
                               rows=seg.rows, cols=seg.cols)
        spans.append(span)
        seg_ids[span.start:span.stop] = k
        i = span.stop
    return FlatSequence(tokens, vocab.roles(tokens), seg_ids, tuple(spans))


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------
#
# A corpus is a pair of files sharing a stem:
#   {stem}.tokens      one serialized document per line, space-separated ids
#   {stem}.vocab.json  the vocabulary layout plus a document count
#
# Lines are parsed on load, so a corpus file that does not round-trip is
# rejected eagerly rather than poisoning training downstream.

def save_corpus(stem: Union[str, Path], docs: Iterable[Document], vocab: UnifiedVocab) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(stem.with_suffix(".tokens"), "w") as f:
        for doc in docs:
            toks = serialize_document(doc, vocab)
            f.write(" ".join(str(int(t)) for t in toks))
            f.write("\n")
            count += 1
    meta = dict(vocab.to_json(), n_docs=count, format="tokenweave-corpus-v1")
    with open(stem.with_suffix(".vocab.json"), "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


def load_corpus(stem: Union[str, Path]) -> tuple[list[Document], UnifiedVocab]:
    stem = Path(stem)
    with open(stem.with_suffix(".vocab.json")) as f:
        meta = json.load(f)
    vocab = UnifiedVocab.from_json(meta)
    docs: list[Document] = []
    with open(stem.with_suffix(".tokens")) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            toks = np.asarray([int(x) for x in line.split()], dtype=np.int32)
            try:
                docs.append(parse_sequence(toks, vocab))
            except ParseError as e:
                raise ParseError(e.position, f"line {lineno} of {stem}.tokens: {e}") from e
    if "n_docs" in meta and meta["n_docs"] != len(docs):
        raise ValueError(f"{stem}: header says {meta['n_docs']} documents, file has {len(docs)}")
    return docs, vocab
