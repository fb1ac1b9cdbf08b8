"""Post-LN transformer encoder with an MLM head, forward and backward by hand.

Layout per layer (DistilBERT style): ``x -> LN(x + Attn(x)) -> LN(. + FFN(.))``
with GELU in the feed-forward block. Embeddings are token + learned absolute
position, followed by LayerNorm. The head maps the hidden state at each masked
position through dense -> GELU -> LayerNorm -> vocabulary logits.

Attention and output softmaxes and the loss are accumulated in float64
whatever the parameter dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import kernels
from ..errors import DegenerateLogits, EmptyMask, MissingTrace, ShapeMismatch
from ..tokenizer import MaskedChunk, PAD_ID
from .config import ModelConfig


# ---------------------------------------------------------------- primitives


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax over the last axis, in float64."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        if np.any(np.isneginf(m)):
            raise DegenerateLogits("all logits are -inf")
        raise DegenerateLogits("non-finite logits")
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def gelu(x):
    """x * Phi(x), exact erf form."""
    if np.isscalar(x):
        return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))
    return kernels.gelu(np.asarray(x))


# ---------------------------------------------------------------- parameters


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F, V, P = cfg.hidden_dim, cfg.intermediate_dim, cfg.vocab_size, cfg.max_positions
    shapes = {
        "tok_emb": (V, D),
        "pos_emb": (P, D),
        "emb_ln.g": (D,),
        "emb_ln.b": (D,),
    }
    for i in range(cfg.layers):
        p = f"layers.{i}."
        for name in ("q", "k", "v", "o"):
            shapes[p + name + ".w"] = (D, D)
            shapes[p + name + ".b"] = (D,)
        shapes[p + "ln1.g"] = (D,)
        shapes[p + "ln1.b"] = (D,)
        shapes[p + "ff1.w"] = (D, F)
        shapes[p + "ff1.b"] = (F,)
        shapes[p + "ff2.w"] = (F, D)
        shapes[p + "ff2.b"] = (D,)
        shapes[p + "ln2.g"] = (D,)
        shapes[p + "ln2.b"] = (D,)
    shapes["head.w"] = (D, D)
    shapes["head.b"] = (D,)
    shapes["head_ln.g"] = (D,)
    shapes["head_ln.b"] = (D,)
    shapes["out.w"] = (D, V)
    shapes["out.b"] = (V,)
    return shapes


class ModelParams:
    """Named weight tensors plus the config they were built for."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors
        self.validate()

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype="float32") -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".g"):
                t = np.ones(shape)
            elif name.endswith(".b"):
                t = np.zeros(shape)
            else:
                t = rng.normal(0.0, config.init_std, size=shape)
            tensors[name] = t.astype(dtype)
        return cls(config, tensors)

    def validate(self) -> None:
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.tensors):
            missing = sorted(set(shapes) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(shapes))
            raise ShapeMismatch(f"parameter names differ from config (missing={missing}, extra={extra})")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ShapeMismatch(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors.values())

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(param_shapes(self.config))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


# ---------------------------------------------------------------- forward


@dataclass(eq=False)
class ChunkPrediction:
    capture_id: str
    chunk_index: int
    masked_positions: np.ndarray
    probabilities: np.ndarray  # (M, V) float64
    predicted_ids: np.ndarray
    true_ids: np.ndarray
    trace: "Trace | None" = field(default=None, repr=False)

    @property
    def n_masked(self) -> int:
        return len(self.masked_positions)


@dataclass(eq=False)
class Trace:
    ids: np.ndarray
    valid: np.ndarray
    rows: tuple[np.ndarray, np.ndarray]
    row_weight: np.ndarray
    cache: dict
    probs: np.ndarray


class _Dropout:
    def __init__(self, rate: float, rng: np.random.Generator | None):
        self.rate = rate if rng is not None else 0.0
        self.rng = rng

    def mask(self, shape, dtype):
        if self.rate <= 0:
            return None
        keep = self.rng.random(shape) >= self.rate
        return keep.astype(dtype) / dtype.type(1.0 - self.rate)


def _apply(x, m):
    return x if m is None else x * m


def _batch_arrays(params: ModelParams, chunks: Sequence[MaskedChunk]):
    cfg = params.config
    if not chunks:
        raise ShapeMismatch("empty batch")
    L = len(chunks[0].input_ids)
    if L > cfg.max_positions:
        raise ShapeMismatch(f"chunk length {L} exceeds max_positions {cfg.max_positions}")
    ids = np.empty((len(chunks), L), dtype=np.int64)
    valid = np.empty((len(chunks), L), dtype=bool)
    bidx, pos, weight = [], [], []
    for b, mc in enumerate(chunks):
        if len(mc.input_ids) != L:
            raise ShapeMismatch("all chunks in a batch must share one length")
        ids[b] = mc.input_ids
        valid[b] = np.arange(L) < mc.chunk.n_real
        m = len(mc.masked_positions)
        if m == 0:
            raise EmptyMask(f"chunk {mc.capture_id}#{mc.chunk_index} has no masked positions")
        bidx.append(np.full(m, b))
        pos.append(np.asarray(mc.masked_positions))
        weight.append(np.full(m, 1.0 / m))
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ShapeMismatch(f"token id outside [0, {cfg.vocab_size})")
    return ids, valid, (np.concatenate(bidx), np.concatenate(pos)), np.concatenate(weight)


def forward_batch(
    params: ModelParams,
    chunks: Sequence[MaskedChunk],
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    keep_trace: bool = False,
) -> list[ChunkPrediction]:
    """Run the encoder over a batch of equal-length masked chunks.

    ``mode="train"`` applies dropout drawn from ``rng`` (a seeded generator is
    required); ``mode="eval"`` is deterministic. Probabilities are produced
    only at masked positions.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if mode == "train" and rng is None:
        raise ValueError("train mode needs a seeded generator for dropout")
    cfg = params.config
    P = params.tensors
    dt = params.dtype
    ids, valid, rows, row_weight = _batch_arrays(params, chunks)
    B, L = ids.shape
    H, dh, D = cfg.heads, cfg.head_dim, cfg.hidden_dim
    eps = cfg.layer_norm_eps
    drop = _Dropout(cfg.dropout if mode == "train" else 0.0, rng)
    scale = dt.type(1.0 / math.sqrt(dh))
    cache: dict = {}

    x0 = P["tok_emb"][ids] + P["pos_emb"][:L][None, :, :]
    h, xhat, rstd = kernels.layernorm(x0, P["emb_ln.g"], P["emb_ln.b"], eps)
    cache["emb"] = (xhat, rstd)
    m = drop.mask(h.shape, dt)
    cache["emb_drop"] = m
    h = _apply(h, m)

    for i in range(cfg.layers):
        p = f"layers.{i}."
        c: dict = {"h_in": h}
        q = (h @ P[p + "q.w"] + P[p + "q.b"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        k = (h @ P[p + "k.w"] + P[p + "k.b"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        v = (h @ P[p + "v.w"] + P[p + "v.b"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        attn = kernels.masked_softmax(scores, valid).astype(dt, copy=False)
        am = drop.mask(attn.shape, dt)
        attn_d = _apply(attn, am)
        ctx = (attn_d @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
        a = ctx @ P[p + "o.w"] + P[p + "o.b"]
        om = drop.mask(a.shape, dt)
        h1, xh1, rs1 = kernels.layernorm(h + _apply(a, om), P[p + "ln1.g"], P[p + "ln1.b"], eps)
        f1 = h1 @ P[p + "ff1.w"] + P[p + "ff1.b"]
        g = kernels.gelu(f1)
        f2 = g @ P[p + "ff2.w"] + P[p + "ff2.b"]
        fm = drop.mask(f2.shape, dt)
        h2, xh2, rs2 = kernels.layernorm(h1 + _apply(f2, fm), P[p + "ln2.g"], P[p + "ln2.b"], eps)
        c.update(q=q, k=k, v=v, attn=attn, am=am, attn_d=attn_d, ctx=ctx, om=om,
                 ln1=(xh1, rs1), h1=h1, f1=f1, g=g, fm=fm, ln2=(xh2, rs2))
        cache[i] = c
        h = h2

    hm = h[rows]
    t = hm @ P["head.w"] + P["head.b"]
    tg = kernels.gelu(t)
    tn, xht, rst = kernels.layernorm(tg, P["head_ln.g"], P["head_ln.b"], eps)
    logits = tn.astype(np.float64) @ P["out.w"].astype(np.float64) + P["out.b"].astype(np.float64)
    probs = softmax(logits)
    cache.update(hm=hm, t=t, tn=tn, head_ln=(xht, rst))

    trace = Trace(ids, valid, rows, row_weight / B, cache, probs) if keep_trace else None
    preds = []
    start = 0
    for mc in chunks:
        mlen = len(mc.masked_positions)
        pr = probs[start : start + mlen]
        preds.append(
            ChunkPrediction(
                mc.capture_id,
                mc.chunk_index,
                np.asarray(mc.masked_positions),
                pr,
                pr.argmax(axis=-1),
                np.asarray(mc.original_ids),
                trace,
            )
        )
        start += mlen
    return preds


def forward(params: ModelParams, chunk: MaskedChunk, mode: str = "eval", rng=None, keep_trace=False) -> ChunkPrediction:
    return forward_batch(params, [chunk], mode, rng, keep_trace)[0]


# ---------------------------------------------------------------- loss


def nll_loss(pred: ChunkPrediction) -> float:
    """Mean negative log-probability of the true token over masked positions."""
    if pred.n_masked == 0:
        raise EmptyMask("prediction has no masked positions")
    p = pred.probabilities[np.arange(pred.n_masked), pred.true_ids]
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(p)))


def batch_loss(preds: Sequence[ChunkPrediction]) -> float:
    """Mean over chunks of :func:`nll_loss` (the quantity ``backward`` differentiates)."""
    return float(np.mean([nll_loss(p) for p in preds]))


# ---------------------------------------------------------------- backward


def backward(params: ModelParams, preds: Sequence[ChunkPrediction] | ChunkPrediction) -> dict[str, np.ndarray]:
    """Exact gradients of :func:`batch_loss` with respect to every tensor.

    ``preds`` must be the complete output of one ``forward_batch`` call made
    with ``keep_trace=True`` (or the single prediction of ``forward``).
    """
    if isinstance(preds, ChunkPrediction):
        preds = [preds]
    if not preds or preds[0].trace is None:
        raise MissingTrace("forward pass was run without keep_trace=True")
    tr = preds[0].trace
    if any(p.trace is not tr for p in preds):
        raise MissingTrace("predictions come from different forward passes")
    if len(preds) != tr.ids.shape[0]:
        raise MissingTrace("backward needs every prediction of the forward batch")
    cfg = params.config
    P = params.tensors
    dt = params.dtype
    B, L = tr.ids.shape
    H, dh, D = cfg.heads, cfg.head_dim, cfg.hidden_dim
    scale = dt.type(1.0 / math.sqrt(dh))
    cache = tr.cache
    G = {}

    true_ids = np.concatenate([p.true_ids for p in preds])
    dlogits = tr.probs.copy()
    dlogits[np.arange(len(true_ids)), true_ids] -= 1.0
    dlogits *= tr.row_weight[:, None]

    tn = cache["tn"]
    G["out.w"] = (tn.astype(np.float64).T @ dlogits).astype(dt)
    G["out.b"] = dlogits.sum(axis=0).astype(dt)
    dtn = (dlogits @ P["out.w"].astype(np.float64).T).astype(dt)
    xht, rst = cache["head_ln"]
    dtg, G["head_ln.g"], G["head_ln.b"] = kernels.layernorm_grad(dtn, xht, rst, P["head_ln.g"])
    dtt = kernels.gelu_grad(cache["t"], dtg)
    G["head.w"] = cache["hm"].T @ dtt
    G["head.b"] = dtt.sum(axis=0)
    dhm = dtt @ P["head.w"].T

    dh_ = np.zeros((B, L, D), dtype=dt)
    dh_[tr.rows] = dhm

    for i in reversed(range(cfg.layers)):
        p = f"layers.{i}."
        c = cache[i]
        xh2, rs2 = c["ln2"]
        dr2, G[p + "ln2.g"], G[p + "ln2.b"] = kernels.layernorm_grad(dh_, xh2, rs2, P[p + "ln2.g"])
        df2 = _apply(dr2, c["fm"])
        g2 = c["g"].reshape(-1, cfg.intermediate_dim)
        df2_2 = df2.reshape(-1, D)
        G[p + "ff2.w"] = g2.T @ df2_2
        G[p + "ff2.b"] = df2_2.sum(axis=0)
        dg = df2 @ P[p + "ff2.w"].T
        df1 = kernels.gelu_grad(c["f1"], dg)
        df1_2 = df1.reshape(-1, cfg.intermediate_dim)
        G[p + "ff1.w"] = c["h1"].reshape(-1, D).T @ df1_2
        G[p + "ff1.b"] = df1_2.sum(axis=0)
        dh1 = dr2 + df1 @ P[p + "ff1.w"].T

        xh1, rs1 = c["ln1"]
        dr1, G[p + "ln1.g"], G[p + "ln1.b"] = kernels.layernorm_grad(dh1, xh1, rs1, P[p + "ln1.g"])
        da = _apply(dr1, c["om"])
        da2 = da.reshape(-1, D)
        G[p + "o.w"] = c["ctx"].reshape(-1, D).T @ da2
        G[p + "o.b"] = da2.sum(axis=0)
        dctx = (da @ P[p + "o.w"].T).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        dattn_d = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["attn_d"].transpose(0, 1, 3, 2) @ dctx
        dattn = _apply(dattn_d, c["am"])
        attn = c["attn"]
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores *= scale
        dq = dscores @ c["k"]
        dk = dscores.transpose(0, 1, 3, 2) @ c["q"]

        h_in2 = c["h_in"].reshape(-1, D)
        dx = dr1
        for name, d in (("q", dq), ("k", dk), ("v", dv)):
            d2 = d.transpose(0, 2, 1, 3).reshape(-1, D)
            G[p + name + ".w"] = h_in2.T @ d2
            G[p + name + ".b"] = d2.sum(axis=0)
            dx = dx + (d2 @ P[p + name + ".w"].T).reshape(B, L, D)
        dh_ = dx

    dh_ = _apply(dh_, cache["emb_drop"])
    xhat, rstd = cache["emb"]
    dx0, G["emb_ln.g"], G["emb_ln.b"] = kernels.layernorm_grad(dh_, xhat, rstd, P["emb_ln.g"])
    dtok = np.zeros_like(P["tok_emb"])
    np.add.at(dtok, tr.ids.reshape(-1), dx0.reshape(-1, D))
    G["tok_emb"] = dtok
    dpos = np.zeros_like(P["pos_emb"])
    dpos[:L] = dx0.sum(axis=0)
    G["pos_emb"] = dpos
    return {name: G[name].astype(dt, copy=False) for name in params.names()}


def loss_and_grad(params: ModelParams, chunks: Sequence[MaskedChunk], rng=None, mode="train"):
    preds = forward_batch(params, chunks, mode, rng, keep_trace=True)
    loss = batch_loss(preds)
    grads = backward(params, preds)
    for p in preds:
        p.trace = None
    return loss, grads


# ---------------------------------------------------------------- inference


def _group_by_length(chunks):
    groups: dict[int, list[int]] = {}
    for i, c in enumerate(chunks):
        groups.setdefault(len(c.input_ids), []).append(i)
    return groups


def predict(params: ModelParams, masked_chunks: Sequence[MaskedChunk], batch_size: int = 64) -> list[ChunkPrediction]:
    """Eval-mode predictions, one per input chunk, in input order.

    Chunks are independent: batching never changes a chunk's output beyond
    float rounding, and callers may split the list across workers freely.
    """
    out: list[ChunkPrediction | None] = [None] * len(masked_chunks)
    for _, idx in _group_by_length(masked_chunks).items():
        for s in range(0, len(idx), batch_size):
            sel = idx[s : s + batch_size]
            preds = forward_batch(params, [masked_chunks[i] for i in sel], "eval")
            for i, p in zip(sel, preds):
                out[i] = p
    return out  # type: ignore[return-value]
