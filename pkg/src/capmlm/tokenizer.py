"""Subword vocabulary, tokenization, fixed-size chunking and [MASK]-only masking."""

from __future__ import annotations

import hashlib
import heapq
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import AllPad, EmptyCorpus, IdOutOfRange
from .representation import SerializedCapture
from .sanitize import REDACTED

PAD, UNK, MASK = "[PAD]", "[UNK]", "[MASK]"
SPECIALS = (PAD, UNK, MASK, REDACTED)
PAD_ID, UNK_ID, MASK_ID, REDACTED_ID = 0, 1, 2, 3

CONT = "##"
VOCAB_MAGIC = "#capmlm-vocab"
CHUNK_STORE_FORMAT = "capmlm-chunks"
CHUNK_STORE_VERSION = 1


def is_continuation(token: str) -> bool:
    return token.startswith(CONT) and len(token) > len(CONT)


def split_words(text: str) -> list[str]:
    """Whitespace split, with every ``[REDACTED]`` isolated as its own word."""
    words = []
    for w in text.split():
        if REDACTED in w and w != REDACTED:
            parts = w.split(REDACTED)
            for i, part in enumerate(parts):
                if i:
                    words.append(REDACTED)
                if part:
                    words.append(part)
        else:
            words.append(w)
    return words


def normalize_whitespace(text: str) -> str:
    """Canonical form under which ``detokenize(tokenize(x))`` equals ``x``.

    Whitespace runs collapse to one space and whitespace touching
    ``[REDACTED]`` is dropped (the placeholder always stands alone as a token).
    """
    return REDACTED.join(" ".join(p.split()) for p in " ".join(text.split()).split(REDACTED)).strip()


class Vocabulary:
    """Immutable token table; ids 0-3 are ``[PAD] [UNK] [MASK] [REDACTED]``."""

    def __init__(self, tokens: Sequence[str], meta: dict | None = None):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the four special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tuple(tokens)
        self.meta = dict(meta or {})
        self.initial: dict[str, int] = {}
        self.cont: dict[str, int] = {}
        for i, t in enumerate(self.tokens[4:], start=4):
            (self.cont if is_continuation(t) else self.initial)[t] = i
        self.max_len = max((len(t) - (2 if is_continuation(t) else 0) for t in self.tokens[4:]), default=1)
        self._cache: dict[str, list[int]] = {}

    @property
    def size(self) -> int:
        return len(self.tokens)

    pad_id, unk_id, mask_id, redacted_id = PAD_ID, UNK_ID, MASK_ID, REDACTED_ID

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self):
        return hash(self.tokens)

    def encode_word(self, word: str) -> list[int]:
        if word == REDACTED:
            return [REDACTED_ID]
        ids = self._cache.get(word)
        if ids is None:
            ids = kernels.wordpiece(word, self.initial, self.cont, UNK_ID, self.max_len)
            if len(self._cache) < 200_000:
                self._cache[word] = ids
        return ids

    def save(self, path, config_hash: str = "") -> None:
        meta = dict(self.meta, size=self.size, hash=self.hash)
        if config_hash:
            meta["config_hash"] = config_hash
        head = VOCAB_MAGIC + " " + json.dumps(meta, sort_keys=True)
        Path(path).write_text(head + "\n" + "\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        rows = Path(path).read_text(encoding="utf-8").split("\n")
        if not rows or not rows[0].startswith(VOCAB_MAGIC):
            raise ValueError(f"{path}: not a vocabulary file")
        meta = json.loads(rows[0][len(VOCAB_MAGIC) :].strip() or "{}")
        tokens = rows[1:]
        if tokens and tokens[-1] == "":
            tokens.pop()
        vocab = cls(tokens, {k: v for k, v in meta.items() if k not in ("size", "hash")})
        if meta.get("hash") and meta["hash"] != vocab.hash:
            raise ValueError(f"{path}: vocabulary hash mismatch (file edited?)")
        return vocab


# ---------------------------------------------------------------- training


def corpus_hash(corpus: Iterable[SerializedCapture]) -> str:
    h = hashlib.sha256()
    for sc in corpus:
        h.update(sc.capture_id.encode())
        for frame, text in sc.lines:
            h.update(f"{frame}\t{text}\n".encode())
    return h.hexdigest()[:16]


def _allowed_merge(a: str, b: str) -> str | None:
    merged = a + b[len(CONT) :]
    # a word-initial token spelled "##x..." would read back as a continuation
    if not is_continuation(a) and is_continuation(merged):
        return None
    return merged


def train_vocab(
    corpus: Sequence[SerializedCapture],
    target_size: int,
    seed: int = 0,
    min_pair_freq: int = 2,
) -> Vocabulary:
    """Learn a wordpiece-style vocabulary by frequency-ranked pair merges.

    Starts from every character seen (word-initial and ``##``-continuation
    forms), then repeatedly merges the most frequent adjacent symbol pair
    (ties: lexicographically smallest pair) until ``target_size`` entries
    exist or no pair occurs ``min_pair_freq`` times. The result depends only
    on the corpus contents and order; ``seed`` is recorded, not consumed.
    """
    if target_size < 16:
        raise ValueError("target_size must be at least 16")
    word_freq: Counter[str] = Counter()
    for sc in corpus:
        for _, text in sc.lines:
            for w in split_words(text):
                if w != REDACTED:
                    word_freq[w] += 1
    if not word_freq:
        raise EmptyCorpus("cannot train a vocabulary on an empty corpus")

    words = sorted(word_freq)
    freqs = [word_freq[w] for w in words]
    symbols = [[w[0]] + [CONT + c for c in w[1:]] for w in words]

    char_freq: Counter[str] = Counter()
    for syms, f in zip(symbols, freqs):
        for s in syms:
            char_freq[s] += f
    budget = target_size - len(SPECIALS)
    alphabet = sorted(char_freq, key=lambda s: (-char_freq[s], s))[:budget]
    tokens = list(SPECIALS) + sorted(alphabet)
    known = set(tokens)

    pair_count: Counter[tuple[str, str]] = Counter()
    where: dict[tuple[str, str], set[int]] = {}
    for wi, (syms, f) in enumerate(zip(symbols, freqs)):
        for p in zip(syms, syms[1:]):
            pair_count[p] += f
            where.setdefault(p, set()).add(wi)
    heap = [(-c, a, b) for (a, b), c in pair_count.items()]
    heapq.heapify(heap)

    while len(tokens) < target_size and heap:
        negc, a, b = heapq.heappop(heap)
        count = -negc
        if pair_count.get((a, b), 0) != count or count < min_pair_freq:
            if count < min_pair_freq and pair_count.get((a, b), 0) == count:
                break
            continue
        merged = _allowed_merge(a, b)
        if merged is None:
            continue
        if merged not in known:
            tokens.append(merged)
            known.add(merged)
        touched: set[tuple[str, str]] = set()
        for wi in sorted(where.pop((a, b), ())):
            syms, f = symbols[wi], freqs[wi]
            for p in zip(syms, syms[1:]):
                pair_count[p] -= f
                touched.add(p)
            out, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            symbols[wi] = out
            for p in zip(out, out[1:]):
                pair_count[p] += f
                where.setdefault(p, set()).add(wi)
                touched.add(p)
        pair_count.pop((a, b), None)
        for p in sorted(touched):
            c = pair_count.get(p, 0)
            if c <= 0:
                pair_count.pop(p, None)
                where.pop(p, None)
            else:
                heapq.heappush(heap, (-c, p[0], p[1]))

    meta = {"seed": seed, "corpus": corpus_hash(corpus), "target_size": target_size}
    return Vocabulary(tokens, meta)


# ---------------------------------------------------------------- (de)tokenize


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match subword ids; ``[REDACTED]`` maps to its reserved id."""
    ids: list[int] = []
    for w in split_words(text):
        ids.extend(vocab.encode_word(w))
    return ids


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    parts: list[str] = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= vocab.size:
            raise IdOutOfRange(f"token id {i} outside vocabulary of size {vocab.size}")
        if i == PAD_ID:
            continue
        tok = vocab.tokens[i]
        if i >= len(SPECIALS) and is_continuation(tok) and parts:
            parts[-1] += tok[len(CONT) :]
        else:
            parts.append(tok)
    return " ".join(parts)


def token_texts(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    return [vocab.tokens[int(i)] for i in ids]


# ---------------------------------------------------------------- chunking


@dataclass(eq=False)
class Chunk:
    capture_id: str
    chunk_index: int
    token_ids: np.ndarray
    pad_count: int
    frame_span: tuple[int, int]
    # per-position source frame (0 at padding) and the positions opening a line
    token_frames: np.ndarray = field(default=None, repr=False)
    line_starts: tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return len(self.token_ids)

    @property
    def n_real(self) -> int:
        return self.size - self.pad_count

    def same_as(self, other: "Chunk") -> bool:
        return (
            self.capture_id == other.capture_id
            and self.chunk_index == other.chunk_index
            and self.pad_count == other.pad_count
            and tuple(self.frame_span) == tuple(other.frame_span)
            and np.array_equal(self.token_ids, other.token_ids)
            and np.array_equal(self.token_frames, other.token_frames)
            and tuple(self.line_starts) == tuple(other.line_starts)
        )


@dataclass(frozen=True)
class TokenStream:
    ids: np.ndarray
    frames: np.ndarray
    line_starts: tuple[int, ...]


def tokenize_serialized(sc: SerializedCapture, vocab: Vocabulary) -> TokenStream:
    ids: list[int] = []
    frames: list[int] = []
    starts: list[int] = []
    for frame, text in sc.lines:
        t = tokenize(text, vocab)
        if not t:
            continue
        starts.append(len(ids))
        ids.extend(t)
        frames.extend([frame] * len(t))
    return TokenStream(np.asarray(ids, dtype=np.int32), np.asarray(frames, dtype=np.int32), tuple(starts))


def chunk(
    ids,
    chunk_size: int = 64,
    capture_id: str = "",
    frames=None,
    line_starts: Sequence[int] = (),
) -> list[Chunk]:
    """Split a token stream into ``ceil(N / chunk_size)`` windows, padding the last."""
    if chunk_size < 2:
        raise ValueError("chunk_size must be at least 2")
    ids = np.asarray(ids, dtype=np.int32)
    n = len(ids)
    frames = np.zeros(n, dtype=np.int32) if frames is None else np.asarray(frames, dtype=np.int32)
    starts = np.asarray(line_starts, dtype=np.int64)
    out = []
    for ci, lo in enumerate(range(0, n, chunk_size)):
        hi = min(lo + chunk_size, n)
        pad = chunk_size - (hi - lo)
        tok = np.full(chunk_size, PAD_ID, dtype=np.int32)
        tok[: hi - lo] = ids[lo:hi]
        fr = np.zeros(chunk_size, dtype=np.int32)
        fr[: hi - lo] = frames[lo:hi]
        ls = tuple(int(s - lo) for s in starts[(starts >= lo) & (starts < hi)])
        out.append(Chunk(capture_id, ci, tok, pad, (int(fr[0]), int(fr[hi - lo - 1])), fr, ls))
    return out


def chunk_serialized(sc: SerializedCapture, vocab: Vocabulary, chunk_size: int = 64) -> list[Chunk]:
    stream = tokenize_serialized(sc, vocab)
    return chunk(stream.ids, chunk_size, sc.capture_id, stream.frames, stream.line_starts)


# ---------------------------------------------------------------- masking


@dataclass(eq=False)
class MaskedChunk:
    chunk: Chunk
    masked_positions: np.ndarray
    original_ids: np.ndarray
    input_ids: np.ndarray

    @property
    def capture_id(self) -> str:
        return self.chunk.capture_id

    @property
    def chunk_index(self) -> int:
        return self.chunk.chunk_index


def mask_count(n: int, rate: float) -> int:
    """round-half-up(rate * n), at least 1 for a non-empty chunk."""
    if n <= 0:
        return 0
    return max(1, math.floor(Fraction(str(rate)) * n + Fraction(1, 2)))


def _id_entropy(capture_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(capture_id.encode("utf-8"), digest_size=8).digest(), "little")


def mask_rng(seed: int, capture_id: str, chunk_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), _id_entropy(capture_id), chunk_index]))


def mask(c: Chunk, mask_rate: float = 0.20, seed: int = 0) -> MaskedChunk:
    """Replace ``mask_count`` distinct non-pad positions with ``[MASK]``.

    Positions are drawn uniformly without replacement from a generator keyed
    by ``(seed, capture_id, chunk_index)``. No random-word or keep-original
    substitutions are made.
    """
    if not 0 < mask_rate < 1:
        raise ValueError("mask_rate must lie in (0, 1)")
    n = c.n_real
    if n <= 0:
        raise AllPad(f"chunk {c.capture_id}#{c.chunk_index} has no non-pad tokens")
    m = mask_count(n, mask_rate)
    rng = mask_rng(seed, c.capture_id, c.chunk_index)
    pos = np.sort(rng.choice(n, size=m, replace=False)).astype(np.int64)
    inp = c.token_ids.copy()
    orig = inp[pos].copy()
    inp[pos] = MASK_ID
    return MaskedChunk(c, pos, orig, inp)


def mask_all(chunks: Iterable[Chunk], mask_rate: float = 0.20, seed: int = 0) -> list[MaskedChunk]:
    return [mask(c, mask_rate, seed) for c in chunks]


# ---------------------------------------------------------------- chunk store


def _chunk_record(c: Chunk) -> dict:
    return {
        "capture_id": c.capture_id,
        "chunk_index": c.chunk_index,
        "token_ids": c.token_ids.tolist(),
        "pad_count": c.pad_count,
        "frame_span": list(c.frame_span),
        "token_frames": c.token_frames.tolist(),
        "line_starts": list(c.line_starts),
    }


def _chunk_from(rec: dict) -> Chunk:
    return Chunk(
        rec["capture_id"],
        rec["chunk_index"],
        np.asarray(rec["token_ids"], dtype=np.int32),
        rec["pad_count"],
        tuple(rec["frame_span"]),
        np.asarray(rec["token_frames"], dtype=np.int32),
        tuple(rec["line_starts"]),
    )


def save_chunks(chunks: Iterable[Chunk], path, chunk_size: int, vocab_hash: str, config_hash: str = "") -> None:
    head = {
        "format": CHUNK_STORE_FORMAT,
        "version": CHUNK_STORE_VERSION,
        "chunk_size": chunk_size,
        "vocab_hash": vocab_hash,
        "config_hash": config_hash,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for c in chunks:
            fh.write(json.dumps(_chunk_record(c), separators=(",", ":")) + "\n")


def load_chunks(path) -> tuple[dict, list[Chunk]]:
    with open(path, encoding="utf-8") as fh:
        head = json.loads(fh.readline())
        if head.get("format") != CHUNK_STORE_FORMAT:
            raise ValueError(f"{path}: not a chunk store")
        if head.get("version") != CHUNK_STORE_VERSION:
            raise ValueError(f"{path}: unsupported chunk store version {head.get('version')}")
        chunks = [_chunk_from(json.loads(line)) for line in fh if line.strip()]
    return head, chunks
