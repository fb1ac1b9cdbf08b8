import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from capmlm.errors import AllPad, EmptyCorpus, IdOutOfRange
from capmlm.representation import ReprKind, SerializedCapture
from capmlm.sanitize import REDACTED
from capmlm.tokenizer import (
    MASK_ID,
    PAD_ID,
    REDACTED_ID,
    UNK_ID,
    Chunk,
    Vocabulary,
    chunk,
    chunk_serialized,
    detokenize,
    load_chunks,
    mask,
    mask_count,
    normalize_whitespace,
    save_chunks,
    tokenize,
    train_vocab,
)


def _sc(lines, cid="c"):
    return SerializedCapture(cid, ReprKind.PCT_DICT, tuple((i + 1, t) for i, t in enumerate(lines)))


CORPUS = [
    _sc(["sip.method: invite", "sip.status-code: 200 ok", f"ip.src: {REDACTED}"] * 3, "a"),
    _sc(["sip.method: bye", "sip.status-code: 180 ringing", "sip.method: invite"], "b"),
]


@pytest.fixture(scope="module")
def vocab():
    return train_vocab(CORPUS, 200)


def test_special_ids(vocab):
    assert vocab.tokens[:4] == ("[PAD]", "[UNK]", "[MASK]", REDACTED)
    assert (PAD_ID, UNK_ID, MASK_ID, REDACTED_ID) == (0, 1, 2, 3)


def test_vocab_is_deterministic(vocab):
    assert train_vocab(CORPUS, 200) == vocab
    assert train_vocab(CORPUS, 200, seed=9).tokens == vocab.tokens


def test_vocab_respects_target_size():
    v = train_vocab(CORPUS, 30)
    assert v.size == 30


def test_empty_corpus():
    with pytest.raises(EmptyCorpus):
        train_vocab([_sc([])], 100)
    with pytest.raises(EmptyCorpus):
        train_vocab([_sc([REDACTED])], 100)


def test_frequent_words_become_single_tokens(vocab):
    assert len(tokenize("invite", vocab)) == 1
    assert tokenize(f"a{REDACTED}b", vocab)[1] == REDACTED_ID


def test_unknown_character_is_unk(vocab):
    assert UNK_ID in tokenize("zzzé", vocab)


@given(st.text(alphabet="sipmethodnvt:.-0123456789 \t[]REDACT", max_size=80))
def test_round_trip_up_to_whitespace(vocab, text):
    ids = tokenize(text, vocab)
    if UNK_ID in ids:
        return
    assert detokenize(ids, vocab) == normalize_whitespace(text)


def test_detokenize_rejects_bad_ids(vocab):
    with pytest.raises(IdOutOfRange):
        detokenize([vocab.size], vocab)


def test_vocab_file_round_trip(tmp_path, vocab):
    p = tmp_path / "v.txt"
    vocab.save(p, "cfg")
    back = Vocabulary.load(p)
    assert back == vocab and back.hash == vocab.hash
    p.write_text(p.read_text().replace("invite", "invitf"))
    with pytest.raises(ValueError):
        Vocabulary.load(p)


# ------------------------------------------------------------------ chunking


def test_130_tokens_pad_62():
    cs = chunk(np.arange(4, 134), 64)
    assert [c.pad_count for c in cs] == [0, 0, 62]
    assert np.all(cs[-1].token_ids[2:] == PAD_ID)


@given(st.lists(st.integers(4, 500), max_size=400), st.integers(2, 70))
def test_chunk_reconstruction(ids, size):
    cs = chunk(ids, size)
    assert len(cs) == -(-len(ids) // size)
    flat = np.concatenate([c.token_ids[: c.n_real] for c in cs]) if cs else np.array([], dtype=np.int32)
    assert flat.tolist() == ids
    assert all(c.size == size for c in cs)
    assert all(c.pad_count == 0 for c in cs[:-1])


def test_chunk_frames_and_line_starts(vocab):
    cs = chunk_serialized(CORPUS[0], vocab, 8)
    assert cs[0].frame_span[0] == 1
    assert all(0 <= s < 8 for c in cs for s in c.line_starts)
    assert cs[0].line_starts[0] == 0


def test_chunk_store_round_trip(tmp_path, vocab):
    cs = chunk_serialized(CORPUS[1], vocab, 16)
    p = tmp_path / "chunks.jsonl"
    save_chunks(cs, p, 16, vocab.hash, "cfg")
    meta, back = load_chunks(p)
    assert meta["vocab_hash"] == vocab.hash
    assert all(a.same_as(b) for a, b in zip(cs, back)) and len(back) == len(cs)


# ------------------------------------------------------------------ masking


@pytest.mark.parametrize("n,expected", [(1, 1), (2, 1), (3, 1), (5, 1), (7, 1), (8, 2), (13, 3), (63, 13), (64, 13)])
def test_mask_count_examples(n, expected):
    assert mask_count(n, 0.2) == expected


def test_mask_count_half_rounds_up():
    # 0.2 * 12.5 is not an integer count, so probe the tie with rate 0.5
    assert mask_count(3, 0.5) == 2
    assert mask_count(5, 0.5) == 3


def _chunk(n, size=64, cid="c"):
    ids = np.full(size, PAD_ID, dtype=np.int32)
    ids[:n] = np.arange(n) % 50 + 4
    return Chunk(cid, 0, ids, size - n, (1, 1), np.ones(size, dtype=np.int32))


@given(st.integers(1, 64), st.integers(0, 2**32))
def test_mask_invariants(n, seed):
    c = _chunk(n)
    m = mask(c, 0.2, seed)
    assert len(m.masked_positions) == mask_count(n, 0.2)
    assert len(set(m.masked_positions.tolist())) == len(m.masked_positions)
    assert np.all(m.masked_positions < n)
    assert np.all(m.input_ids[m.masked_positions] == MASK_ID)
    assert np.array_equal(m.original_ids, c.token_ids[m.masked_positions])
    keep = np.ones(64, bool)
    keep[m.masked_positions] = False
    assert np.array_equal(m.input_ids[keep], c.token_ids[keep])


def test_mask_is_deterministic_per_key():
    c = _chunk(64)
    assert np.array_equal(mask(c, 0.2, 1).masked_positions, mask(c, 0.2, 1).masked_positions)
    assert not np.array_equal(mask(c, 0.2, 1).masked_positions, mask(c, 0.2, 2).masked_positions)


def test_all_pad_chunk_rejected():
    with pytest.raises(AllPad):
        mask(_chunk(0), 0.2, 0)
