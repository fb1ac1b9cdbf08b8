"""End-to-end orchestration shared by the command line and the test-suite.

An artifact bundle is a directory holding ``vocab.txt``, ``model.lcap``,
``fda.txt``, ``train_log.tsv`` and ``manifest.json``.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import fda as fdam
from .capture import CaptureFile, load_capture
from .config import PipelineConfig
from .errors import DataError, VocabHashMismatch
from .mlm import checkpoint
from .mlm.model import ChunkPrediction, ModelParams, predict
from .mlm.train import LogRecord, TrainResult, train
from .representation import SerializedCapture, serialize
from .sanitize import redact_capture
from .tokenizer import Chunk, MaskedChunk, Vocabulary, chunk_serialized, mask, train_vocab

log = logging.getLogger(__name__)

CAPTURE_SUFFIXES = (".pcap", ".cap", ".pdml", ".xml")
BUNDLE_FILES = ("vocab.txt", "model.lcap", "fda.txt", "train_log.tsv", "manifest.json")


# ---------------------------------------------------------------- ingest


def prepare_capture(capture: CaptureFile, cfg: PipelineConfig) -> SerializedCapture:
    return serialize(redact_capture(capture, cfg.rules()), cfg.kind, cfg.field_allowlist())


def ingest_file(path, cfg: PipelineConfig) -> SerializedCapture:
    try:
        return prepare_capture(load_capture(path), cfg)
    except DataError as exc:
        raise type(exc)(f"{path}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc


def list_captures(directory) -> list[Path]:
    d = Path(directory)
    if d.is_file():
        return [d]
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in CAPTURE_SUFFIXES)


def _ingest_one(args):
    path, cfg = args
    return ingest_file(path, cfg)


def map_ordered(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally across processes; output keeps input order."""
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def ingest_paths(paths: Sequence, cfg: PipelineConfig, workers: int | None = None) -> list[SerializedCapture]:
    return map_ordered(_ingest_one, [(p, cfg) for p in paths], cfg.workers if workers is None else workers)


# ---------------------------------------------------------------- scoring


@dataclass
class CaptureAnalysis:
    capture_id: str
    chunks: list[Chunk]
    masked: list[MaskedChunk]
    predictions: list[ChunkPrediction]
    metrics: list[fdam.ChunkMetrics]
    score: fdam.PcapScore | None
    verdict: fdam.Verdict | None = None
    seconds: float = 0.0


def chunks_for(sc: SerializedCapture, vocab: Vocabulary, cfg: PipelineConfig) -> list[Chunk]:
    return [c for c in chunk_serialized(sc, vocab, cfg.chunk_size) if c.n_real > 0]


def analyze(
    params: ModelParams, vocab: Vocabulary, sc: SerializedCapture, cfg: PipelineConfig
) -> CaptureAnalysis:
    """Mask every chunk with the inference seed, predict, and aggregate."""
    t0 = time.perf_counter()
    chunks = chunks_for(sc, vocab, cfg)
    masked = [mask(c, cfg.mask_rate, cfg.seed) for c in chunks]
    preds = predict(params, masked)
    metrics = [fdam.score_chunk(p, c) for p, c in zip(preds, chunks)]
    score = fdam.aggregate(metrics, cfg.fda.k, cfg.fda.aggregation) if metrics else None
    return CaptureAnalysis(sc.capture_id, chunks, masked, preds, metrics, score, None, time.perf_counter() - t0)


# ---------------------------------------------------------------- bundle


@dataclass
class Bundle:
    vocab: Vocabulary
    params: ModelParams
    fda_model: fdam.FdaModel
    config_hash: str
    repr_kind: str
    train_log: str = ""
    manifest: dict = field(default_factory=dict)

    def save(self, directory, ck_train_config) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.vocab.save(d / "vocab.txt", self.config_hash)
        checkpoint.save(
            checkpoint.Checkpoint(
                self.params, ck_train_config, self.vocab.hash, self.repr_kind, self.config_hash,
                {"fda_file": "fda.txt"},
            ),
            d / "model.lcap",
        )
        (d / "fda.txt").write_text(
            f"#config_hash\t{self.config_hash}\n" + fdam.dumps_model(self.fda_model), encoding="utf-8"
        )
        (d / "train_log.tsv").write_text(f"#config_hash\t{self.config_hash}\n" + self.train_log, encoding="utf-8")
        (d / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return d

    @classmethod
    def load(cls, directory) -> "Bundle":
        d = Path(directory)
        missing = [f for f in BUNDLE_FILES if not (d / f).exists()]
        if missing:
            raise DataError(f"{d}: bundle is missing {', '.join(missing)}")
        vocab = Vocabulary.load(d / "vocab.txt")
        ck = checkpoint.load(d / "model.lcap", expect_vocab_hash=vocab.hash)
        fda_text = (d / "fda.txt").read_text(encoding="utf-8")
        model = fdam.loads_model("\n".join(line for line in fda_text.splitlines() if not line.startswith("#config_hash")))
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        log_text = (d / "train_log.tsv").read_text(encoding="utf-8")
        return cls(vocab, ck.params, model, ck.config_hash, ck.repr_kind, log_text, manifest)


def fit_detector(scores: Sequence[fdam.PcapScore], cfg: PipelineConfig) -> fdam.FdaModel:
    s = cfg.fda
    if s.detector == "threshold":
        model = fdam.fit_threshold(scores, s.multiplier)
    else:
        model = fdam.fit_elliptic(scores, s.level, s.robust)
    return fdam.with_settings(model, s.k, s.aggregation)


def fit(
    train_corpus: Sequence[SerializedCapture],
    val_corpus: Sequence[SerializedCapture],
    cfg: PipelineConfig,
    on_epoch: Callable[[LogRecord], None] | None = None,
) -> tuple[Bundle, TrainResult, list[CaptureAnalysis]]:
    """Vocabulary, MLM and detector from success-only training captures."""
    vocab = train_vocab(train_corpus, cfg.vocab.size, cfg.vocab.seed, cfg.vocab.min_pair_freq)
    train_chunks = [c for sc in train_corpus for c in chunks_for(sc, vocab, cfg)]
    val_chunks = [c for sc in val_corpus for c in chunks_for(sc, vocab, cfg)]
    mc = cfg.model_config(vocab.size)
    tc = cfg.train_config()
    result = train(train_chunks, val_chunks, mc, tc, on_epoch)
    analyses = [analyze(result.params, vocab, sc, cfg) for sc in train_corpus]
    scores = [a.score for a in analyses if a.score is not None]
    model = fit_detector(scores, cfg)
    h = cfg.hash()
    manifest = {
        "config_hash": h,
        "config": cfg.to_dict(),
        "vocab_hash": vocab.hash,
        "vocab_size": vocab.size,
        "repr_kind": cfg.kind.value,
        "train_captures": len(train_corpus),
        "val_captures": len(val_corpus),
        "train_chunks": len(train_chunks),
        "val_chunks": len(val_chunks),
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "files": list(BUNDLE_FILES),
    }
    bundle = Bundle(vocab, result.params, model, h, cfg.kind.value, result.log_text(), manifest)
    return bundle, result, analyses


def refit_detector(bundle: Bundle, analyses: Sequence[CaptureAnalysis], cfg: PipelineConfig) -> Bundle:
    """Same MLM, different detector settings (for the ablation grid)."""
    scores = [fdam.aggregate(a.metrics, cfg.fda.k, cfg.fda.aggregation) for a in analyses if a.metrics]
    return Bundle(bundle.vocab, bundle.params, fit_detector(scores, cfg), bundle.config_hash,
                  bundle.repr_kind, bundle.train_log, bundle.manifest)


# ---------------------------------------------------------------- detect


def check_compatible(bundle: Bundle, cfg: PipelineConfig) -> None:
    if bundle.repr_kind != cfg.kind.value:
        raise DataError(f"bundle was trained on {bundle.repr_kind} captures, config asks for {cfg.kind.value}")
    if bundle.params.config.chunk_size != cfg.chunk_size:
        raise DataError("bundle chunk size differs from config")


def classify_analysis(a: CaptureAnalysis, model: fdam.FdaModel, cfg: PipelineConfig) -> CaptureAnalysis:
    if a.score is None:
        # nothing to reconstruct: no evidence of failure
        a.score = fdam.PcapScore(a.capture_id, 0.0, 0.0, cfg.fda.k, ())
    a.verdict = fdam.classify(a.score, model)
    return a


def detect(
    bundle: Bundle, corpus: Iterable[SerializedCapture], cfg: PipelineConfig, expect_vocab_hash: str | None = None
) -> list[CaptureAnalysis]:
    if expect_vocab_hash is not None and expect_vocab_hash != bundle.vocab.hash:
        raise VocabHashMismatch(f"vocabulary {expect_vocab_hash} does not match bundle {bundle.vocab.hash}")
    check_compatible(bundle, cfg)
    out = []
    for sc in corpus:
        a = analyze(bundle.params, bundle.vocab, sc, cfg)
        out.append(classify_analysis(a, bundle.fda_model, cfg))
    return out


__all__ = [
    "Bundle",
    "CaptureAnalysis",
    "analyze",
    "check_compatible",
    "chunks_for",
    "classify_analysis",
    "detect",
    "fit",
    "fit_detector",
    "ingest_file",
    "ingest_paths",
    "list_captures",
    "map_ordered",
    "prepare_capture",
    "refit_detector",
]
