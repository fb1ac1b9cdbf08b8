"""Command line: ``capmlm {synth,ingest,train,detect,tag,eval}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import pipeline, report
from . import representation as rep
from .config import PipelineConfig
from .errors import CapmlmError, DataError, IdMismatch, InsufficientCaptures
from .fda import Label, Verdict
from .synth import FlowGrammar, generate, parse_labels, parse_split, split, write_corpus
from .tokenizer import Vocabulary, chunk_serialized, save_chunks

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
ARTIFACT_ENV = "CAPMLM_ARTIFACT_DIR"
SERIALIZED_SUFFIX = ".ser"

log = logging.getLogger("capmlm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML pipeline config")
    common.add_argument("--seed", type=int)
    common.add_argument("--repr", dest="repr_kind", choices=[k.value for k in rep.ReprKind])
    common.add_argument("--detector", choices=["threshold", "elliptic"])
    common.add_argument("--k", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--artifacts", help="artifact directory (overrides config and $" + ARTIFACT_ENV + ")")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="capmlm", description="Self-supervised failure detection for packet captures.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a labeled synthetic SIP corpus")
    s.add_argument("--success", type=int, default=20)
    s.add_argument("--failure", type=int, default=20)
    s.add_argument("--mode", action="append", choices=["error_status", "timeout_gap", "missing_message"],
                   help="restrict failure modes (repeatable)")
    s.add_argument("--out", type=Path, help="output directory (default: config corpus path)")

    s = sub.add_parser("ingest", parents=[common], help="parse, sanitize and serialize captures")
    s.add_argument("inputs", nargs="+", type=Path, help="capture files or directories")
    s.add_argument("--out", type=Path, help="output directory (default: <artifacts>/serialized)")
    s.add_argument("--vocab", type=Path, help="vocabulary used to also write a chunk store")

    s = sub.add_parser("train", parents=[common], help="train vocabulary, MLM and detector")
    s.add_argument("corpus", type=Path, nargs="?", help="capture directory (default: config corpus path)")
    s.add_argument("--labels", type=Path, help="labels.tsv (default: <corpus>/labels.tsv if present)")
    s.add_argument("--split", dest="split_file", type=Path, help="split.tsv (default: <corpus>/split.tsv if present)")
    s.add_argument("--bundle", type=Path, help="bundle directory (default: <artifacts>/bundle)")

    for name, hlp in (("detect", "classify captures"), ("tag", "classify and emit failure tag reports")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("inputs", nargs="*", type=Path, help="capture files or directories")
        s.add_argument("--bundle", type=Path, help="bundle directory (default: <artifacts>/bundle)")
        s.add_argument("--out", type=Path, help="verdict stream (default: stdout)")
        s.add_argument("--tags-out", type=Path, help="tag report text file (default: <out>.tags.txt, or stdout)")
        s.add_argument("--partition", choices=["train", "val", "test"],
                       help="only captures of this partition of <dir>/split.tsv")
        if name == "detect":
            s.add_argument("--tag", action="store_true", help="also emit tag reports for failures")

    s = sub.add_parser("eval", parents=[common], help="per-class metrics from verdict streams")
    s.add_argument("verdicts", nargs="+", type=Path, help="one or more verdict files (NAME=PATH to label rows)")
    s.add_argument("--labels", type=Path, required=True)
    s.add_argument("--scatter", type=Path, help="write the NOM-k/MNLL-k scatter table here")
    s.add_argument("--out", type=Path, help="write the metrics table here as well as stdout")
    return p


# ---------------------------------------------------------------- helpers


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    artifacts = args.artifacts or os.environ.get(ARTIFACT_ENV)
    base = args.config.parent if args.config else None
    paths = {}
    if artifacts:
        paths["artifacts"] = artifacts
    elif base is not None and not Path(cfg.paths.artifacts).is_absolute():
        paths["artifacts"] = str(base / cfg.paths.artifacts)
    if base is not None and not Path(cfg.paths.corpus).is_absolute():
        paths["corpus"] = str(base / cfg.paths.corpus)
    return cfg.with_overrides(
        seed=args.seed, repr_kind=args.repr_kind, detector=args.detector, k=args.k, workers=args.workers, **paths
    )


def expand_inputs(inputs) -> list[Path]:
    out: list[Path] = []
    for p in inputs:
        if not p.exists():
            raise DataError(f"{p}: no such file or directory")
        if p.is_dir():
            out.extend(pipeline.list_captures(p))
            out.extend(sorted(q for q in p.iterdir() if q.suffix == SERIALIZED_SUFFIX))
        else:
            out.append(p)
    return out


def load_corpus(paths, cfg: PipelineConfig) -> list[rep.SerializedCapture]:
    """Serialized files are read back; anything else is ingested."""
    raw = [p for p in paths if p.suffix != SERIALIZED_SUFFIX]
    ingested = dict(zip(raw, pipeline.ingest_paths(raw, cfg)))
    out = []
    for p in paths:
        if p in ingested:
            out.append(ingested[p])
        else:
            sc, _ = rep.load(p)
            if sc.kind != cfg.kind:
                raise DataError(f"{p}: serialized as {sc.kind.value}, config asks for {cfg.kind.value}")
            out.append(sc)
    return out


def _write(path: Path | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


def _bundle_dir(args, cfg) -> Path:
    return args.bundle or Path(cfg.paths.artifacts) / "bundle"


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = args.out or Path(cfg.paths.corpus)
    caps = generate(FlowGrammar.default(), args.success, args.failure, cfg.seed, args.mode)
    try:
        s = split(caps, cfg.split_ratios, cfg.seed)
    except InsufficientCaptures as exc:
        log.warning("no split written: %s", exc)
        s = None
    write_corpus(caps, out, s)
    n_fail = sum(c.label == "failure" for c in caps)
    print(f"wrote {len(caps)} captures ({len(caps) - n_fail} success, {n_fail} failure) to {out}")
    return EXIT_OK


def cmd_ingest(args, cfg: PipelineConfig) -> int:
    paths = [p for p in expand_inputs(args.inputs) if p.suffix != SERIALIZED_SUFFIX]
    out = args.out or Path(cfg.paths.artifacts) / "serialized"
    out.mkdir(parents=True, exist_ok=True)
    corpus = pipeline.ingest_paths(paths, cfg)
    h = cfg.hash()
    vocab = Vocabulary.load(args.vocab) if args.vocab else None
    all_chunks = []
    for sc in corpus:
        rep.save(sc, out / f"{sc.capture_id}{SERIALIZED_SUFFIX}", h)
        if vocab is not None:
            chunks = [c for c in chunk_serialized(sc, vocab, cfg.chunk_size) if c.n_real > 0]
            all_chunks.extend(chunks)
            print(f"{sc.capture_id}\t{len(sc.lines)} lines\t{len(chunks)} chunks")
        else:
            print(f"{sc.capture_id}\t{len(sc.lines)} lines")
    if vocab is not None:
        save_chunks(all_chunks, out / "chunks.jsonl", cfg.chunk_size, vocab.hash, h)
    return EXIT_OK


def _labels_for(corpus_dir: Path, explicit: Path | None) -> dict:
    path = explicit or corpus_dir / "labels.tsv"
    if not path.exists():
        return {}
    return {r.capture_id: r for r in parse_labels(path.read_text(encoding="utf-8"))}


def cmd_train(args, cfg: PipelineConfig) -> int:
    corpus_dir = args.corpus or Path(cfg.paths.corpus)
    labels = _labels_for(corpus_dir, args.labels)
    split_path = args.split_file or corpus_dir / "split.tsv"
    paths = expand_inputs([corpus_dir])
    by_id = {Path(p).stem: p for p in paths}
    if split_path.exists():
        s = parse_split(split_path.read_text(encoding="utf-8"))
        train_ids = list(s.train)
        val_ids = [i for i in s.val if labels.get(i) is None or labels[i].label == "success"]
    else:
        ids = [i for i in sorted(by_id) if labels.get(i) is None or labels[i].label == "success"]
        n_val = max(1, len(ids) // 10)
        train_ids, val_ids = ids[n_val:], ids[:n_val]
    bad = [i for i in train_ids if labels.get(i) is not None and labels[i].label != "success"]
    if bad:
        raise DataError(f"training partition holds failure captures: {bad[:5]}")
    missing = [i for i in train_ids + val_ids if i not in by_id]
    if missing:
        raise DataError(f"captures listed in the split are missing: {missing[:5]}")
    corpus = dict(zip(train_ids + val_ids, load_corpus([by_id[i] for i in train_ids + val_ids], cfg)))
    t0 = time.perf_counter()
    bundle, result, _ = pipeline.fit(
        [corpus[i] for i in train_ids],
        [corpus[i] for i in val_ids],
        cfg,
        on_epoch=lambda r: log.info("epoch %d train %.4f val %.4f", r.epoch, r.train_nll, r.val_nll),
    )
    out = _bundle_dir(args, cfg)
    bundle.save(out, cfg.train_config())
    print(f"trained on {len(train_ids)} captures in {time.perf_counter() - t0:.1f}s; "
          f"best epoch {result.best_epoch} of {result.epochs_run}; bundle at {out}")
    return EXIT_OK


def _select_partition(paths, partition: str | None, inputs) -> list[Path]:
    if partition is None:
        return paths
    split_files = [p / "split.tsv" for p in inputs if p.is_dir() and (p / "split.tsv").exists()]
    if not split_files:
        raise DataError("--partition needs a split.tsv in an input directory")
    keep: set[str] = set()
    for f in split_files:
        keep |= set(getattr(parse_split(f.read_text(encoding="utf-8")), partition))
    return [p for p in paths if p.stem in keep]


def cmd_detect(args, cfg: PipelineConfig, force_tag: bool = False) -> int:
    bundle = pipeline.Bundle.load(_bundle_dir(args, cfg))
    if cfg.fda.k != bundle.fda_model.k or cfg.fda.detector != bundle.fda_model.detector:
        log.warning("config detector/k differ from the bundle; using the bundle's fitted %s detector (k=%d)",
                    bundle.fda_model.detector, bundle.fda_model.k)
    cfg = cfg.with_overrides(k=bundle.fda_model.k, detector=bundle.fda_model.detector,
                             aggregation=bundle.fda_model.aggregation)
    pipeline.check_compatible(bundle, cfg)
    paths = _select_partition(expand_inputs(args.inputs), args.partition, args.inputs)
    corpus = load_corpus(paths, cfg)
    analyses = pipeline.map_ordered(_DetectJob(bundle, cfg), corpus, cfg.workers)
    _write(args.out, report.dumps_jsonl(a.verdict.to_record() for a in analyses))
    if args.out is not None:
        timing = "capture_id\tseconds\tchunks\n" + "".join(
            f"{a.capture_id}\t{a.seconds:.6f}\t{len(a.chunks)}\n" for a in analyses
        )
        args.out.with_suffix(".timing.tsv").write_text(timing, encoding="utf-8")
    if analyses:
        mean = sum(a.seconds for a in analyses) / len(analyses)
        log.info("average inference time per capture: %.4fs over %d captures", mean, len(analyses))
    if force_tag or getattr(args, "tag", False):
        reports = []
        for a in analyses:
            if a.verdict.label is Label.FAILURE:
                reports.append(report.tag(a.verdict, a.metrics, a.chunks, a.predictions, bundle.vocab,
                                          filename=f"{a.capture_id}.pcap"))
        text = "\n".join(r.render() for r in reports)
        tags_out = args.tags_out or (args.out.with_suffix(".tags.txt") if args.out else None)
        if tags_out is None:
            sys.stdout.write(text)
        else:
            tags_out.write_text(text, encoding="utf-8")
            tags_out.with_suffix(".jsonl").write_text(
                report.dumps_jsonl(r.to_record() for r in reports), encoding="utf-8"
            )
    return EXIT_OK


class _DetectJob:
    """Picklable per-capture detection step for the worker pool."""

    def __init__(self, bundle, cfg):
        self.bundle, self.cfg = bundle, cfg

    def __call__(self, sc):
        a = pipeline.analyze(self.bundle.params, self.bundle.vocab, sc, self.cfg)
        return pipeline.classify_analysis(a, self.bundle.fda_model, self.cfg)


def cmd_eval(args, cfg: PipelineConfig) -> int:
    rows = parse_labels(args.labels.read_text(encoding="utf-8"))
    truth_all = {r.capture_id: Label(r.label) for r in rows}
    reports = {}
    scatter_parts = []
    timing_lines = []
    for item in args.verdicts:
        name, _, path = str(item).rpartition("=")
        path = Path(path)
        name = name or path.stem
        verdicts = [Verdict.from_record(r) for r in report.loads_jsonl(path.read_text(encoding="utf-8"))]
        truth = {v.capture_id: truth_all.get(v.capture_id) for v in verdicts}
        unlabeled = [i for i, t in truth.items() if t is None]
        if unlabeled:
            raise IdMismatch(f"{path}: captures without labels: {unlabeled[:5]}")
        reports[name] = report.evaluate(verdicts, truth)
        predicted = {v.capture_id: v.label for v in verdicts}
        scatter_parts.append(report.scatter_tsv([v.score for v in verdicts], truth, predicted))
        timing = path.with_suffix(".timing.tsv")
        if timing.exists():
            secs = [float(line.split("\t")[1]) for line in timing.read_text().splitlines()[1:] if line]
            if secs:
                timing_lines.append(f"{name}\taverage inference time per capture\t{sum(secs) / len(secs):.4f}s")
    table = report.render_table(reports)
    sys.stdout.write(table)
    for line in timing_lines:
        print(line)
    if args.out:
        _write(args.out, table)
    if args.scatter:
        head = report.SCATTER_HEADER + "\n"
        _write(args.scatter, head + "".join(part[len(head):] for part in scatter_parts))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "detect": cmd_detect,
    "tag": lambda a, c: cmd_detect(a, c, force_tag=True),
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"capmlm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
    except (ValueError, TypeError, OSError) as exc:
        print(f"capmlm: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, cfg)
    except DataError as exc:
        print(f"capmlm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CapmlmError, Exception) as exc:  # last-resort exit code
        log.debug("internal error", exc_info=True)
        print(f"capmlm: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
