import math
from dataclasses import replace

import numpy as np
import pytest

from capmlm.errors import CorruptHeader, EmptySet, NonFiniteGradient, VocabHashMismatch
from capmlm.mlm import checkpoint
from capmlm.mlm.config import ModelConfig, TrainConfig
from capmlm.mlm.model import ModelParams
from capmlm.mlm.optim import AdamState, adamw_step
from capmlm.mlm.train import LOG_HEADER, epoch_seed, train
from capmlm.tokenizer import PAD_ID, Chunk

CFG = ModelConfig(layers=1, heads=2, hidden_dim=16, intermediate_dim=32, dropout=0.1,
                  max_positions=12, vocab_size=12, chunk_size=12)


def _params():
    return ModelParams.init(CFG, 0, "float64")


# ------------------------------------------------------------------ AdamW


def test_adamw_matches_scalar_reference():
    tc = TrainConfig(lr=0.1, weight_decay=0.05, beta1=0.8, beta2=0.9, epsilon=1e-8)
    p = _params()
    name = "head.b"
    state = AdamState.zeros_like(p)
    w = float(p[name][0])
    m = v = 0.0
    grads_seq = [0.3, -1.2, 0.7]
    for t, g in enumerate(grads_seq, start=1):
        grads = {n: np.zeros_like(x) for n, x in p.tensors.items()}
        grads[name][0] = g
        adamw_step(p, grads, state, tc)
        m = 0.8 * m + 0.2 * g
        v = 0.9 * v + 0.1 * g * g
        w = w - 0.1 * ((m / (1 - 0.8**t)) / (math.sqrt(v / (1 - 0.9**t)) + 1e-8) + 0.05 * w)
        assert p[name][0] == pytest.approx(w, rel=1e-12, abs=1e-15)
    assert state.step == 3


def test_weight_decay_is_decoupled():
    tc = TrainConfig(lr=0.01, weight_decay=0.1)
    p = _params()
    before = p["tok_emb"].copy()
    adamw_step(p, {n: np.zeros_like(x) for n, x in p.tensors.items()}, AdamState.zeros_like(p), tc)
    np.testing.assert_allclose(p["tok_emb"], before * (1 - 0.01 * 0.1), rtol=1e-12)


def test_non_finite_gradient_rejected():
    p = _params()
    grads = {n: np.zeros_like(x) for n, x in p.tensors.items()}
    grads["out.b"][0] = np.nan
    before = p.copy()
    with pytest.raises(NonFiniteGradient):
        adamw_step(p, grads, AdamState.zeros_like(p), TrainConfig())
    assert all(np.array_equal(before[n], p[n]) for n in p.names())


# ------------------------------------------------------------------ loop


def _corpus(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        k = int(rng.integers(6, 13))
        base = np.array([4, 5, 6, 7, 8, 9, 10, 11, 4, 5, 6, 7])[:k]
        ids = np.full(12, PAD_ID, np.int32)
        ids[:k] = base
        out.append(Chunk(f"c{seed}_{i}", 0, ids, 12 - k, (1, 1), np.ones(12, np.int32)))
    return out


TC = TrainConfig(lr=5e-3, batch_size=4, max_epochs=8, patience=3, seed=1, dtype="float64")


def test_training_reduces_loss_and_is_deterministic():
    seen = []
    a = train(_corpus(24, 0), _corpus(6, 1), CFG, TC, on_epoch=seen.append)
    b = train(_corpus(24, 0), _corpus(6, 1), CFG, TC)
    assert a.log_text() == b.log_text()
    assert a.log_text().splitlines()[0] == LOG_HEADER
    assert [r.epoch for r in seen] == list(range(a.epochs_run + 1))
    assert min(r.val_nll for r in a.log[1:]) < a.log[0].val_nll
    best = min(a.log[1:], key=lambda r: (r.val_nll, r.epoch))
    assert a.best_epoch == best.epoch


def test_early_stopping_rule():
    r = train(_corpus(8, 0), _corpus(4, 1), CFG, replace(TC, lr=0.5, max_epochs=30, patience=2))
    assert r.epochs_run - r.best_epoch <= 2
    if r.epochs_run < 30:
        assert r.epochs_run - r.best_epoch == 2


def test_empty_sets_rejected():
    with pytest.raises(EmptySet):
        train([], _corpus(2, 1), CFG, TC)
    with pytest.raises(EmptySet):
        train(_corpus(2, 1), [], CFG, TC)


def test_epoch_seeds_are_distinct():
    seeds = {epoch_seed(0, e, s) for e in range(20) for s in range(3)}
    assert len(seeds) == 60


# ------------------------------------------------------------------ checkpoint


def _ck():
    p = ModelParams.init(CFG, 3)
    return checkpoint.Checkpoint(p, TC, "abcd", "pct-dict", "cfg", {"note": 1})


def test_checkpoint_round_trip(tmp_path):
    ck = _ck()
    path = tmp_path / "m.lcap"
    checkpoint.save(ck, path)
    back = checkpoint.load(path, expect_vocab_hash="abcd")
    assert path.read_bytes()[:4] == b"LCAP"
    assert back.params.config == ck.params.config
    assert back.train_config == TC
    assert (back.vocab_hash, back.repr_kind, back.config_hash, back.extra) == ("abcd", "pct-dict", "cfg", {"note": 1})
    for n in ck.params.names():
        assert np.array_equal(back.params[n], ck.params[n])
    assert checkpoint.dumps(back) == checkpoint.dumps(ck)


def test_checkpoint_errors():
    data = checkpoint.dumps(_ck())
    with pytest.raises(VocabHashMismatch):
        checkpoint.loads(data, expect_vocab_hash="zzzz")
    with pytest.raises(CorruptHeader):
        checkpoint.loads(b"NOPE" + data[4:])
    with pytest.raises(CorruptHeader):
        checkpoint.loads(data[:-5])
    with pytest.raises(CorruptHeader):
        checkpoint.loads(data + b"\0")
