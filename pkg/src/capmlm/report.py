"""Failure tag reports, per-class precision/recall/F-scores and scatter tables."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

from .errors import IdMismatch, VerdictIsSuccess
from .fda import ChunkMetrics, Label, PcapScore, Verdict, evidence_order
from .mlm.model import ChunkPrediction
from .tokenizer import Chunk, Vocabulary, is_continuation

HIGHLIGHT = "**"


# ---------------------------------------------------------------- tagging


@dataclass(frozen=True)
class Highlight:
    position: int
    true_token: str
    predicted_token: str


@dataclass(frozen=True)
class TagEntry:
    frame_no: int
    chunk_index: int
    nom: int
    text: str
    highlights: tuple[Highlight, ...]


@dataclass(frozen=True)
class TagReport:
    capture_id: str
    filename: str
    verdict: Verdict
    entries: tuple[TagEntry, ...]

    def render(self) -> str:
        out = ["Found failure for PCAP:"]
        for e in self.entries:
            out.append(f"PCAP filename: {self.filename}, in frame: {e.frame_no}.")
            out.append(f"Number of misclassifications in chunk: {e.nom}.")
            out.append("Chunk content:")
            out.append(e.text)
            out.append("")
        return "\n".join(out)

    def to_record(self) -> dict:
        return {
            "capture_id": self.capture_id,
            "filename": self.filename,
            "label": self.verdict.label.value,
            "entries": [
                {
                    "frame": e.frame_no,
                    "chunk_index": e.chunk_index,
                    "nom": e.nom,
                    "highlights": [asdict(h) for h in e.highlights],
                    "text": e.text,
                }
                for e in self.entries
            ],
        }


def render_chunk(chunk: Chunk, vocab: Vocabulary, highlight: Iterable[int] = ()) -> str:
    """Detokenize a chunk, one serialized line per text line, marking ``highlight`` positions."""
    marked = set(int(p) for p in highlight)
    starts = set(chunk.line_starts)
    lines: list[str] = []
    cur = ""
    for pos, tid in enumerate(chunk.token_ids[: chunk.n_real]):
        tok = vocab.tokens[int(tid)]
        if pos in starts and cur:
            lines.append(cur)
            cur = ""
        glue = is_continuation(tok) and cur != ""
        piece = tok[2:] if is_continuation(tok) else tok
        if pos in marked:
            piece = f"{HIGHLIGHT}{piece}{HIGHLIGHT}"
        cur = cur + piece if glue else (cur + " " + piece if cur else piece)
    if cur:
        lines.append(cur)
    return "\n".join(lines)


def mispredicted_positions(pred: ChunkPrediction) -> list[tuple[int, int, int]]:
    """(position, true id, predicted id) for each wrongly reconstructed masked token."""
    predicted = pred.probabilities.argmax(axis=-1)
    return [
        (int(p), int(t), int(q))
        for p, t, q in zip(pred.masked_positions, pred.true_ids, predicted)
        if t != q
    ]


def tag(
    verdict: Verdict,
    metrics: Sequence[ChunkMetrics],
    chunks: Sequence[Chunk],
    predictions: Sequence[ChunkPrediction],
    vocab: Vocabulary,
    k: int | None = None,
    filename: str | None = None,
) -> TagReport:
    """Evidence report for a failure verdict: the top-NOM chunks with mispredictions marked."""
    if verdict.label is not Label.FAILURE:
        raise VerdictIsSuccess(f"{verdict.capture_id}: tagging applies to failure verdicts only")
    k = verdict.score.k if k is None else k
    by_index = {c.chunk_index: c for c in chunks}
    pred_by_index = {p.chunk_index: p for p in predictions}
    entries = []
    for m in evidence_order(metrics)[:k]:
        c = by_index[m.chunk_index]
        wrong = mispredicted_positions(pred_by_index[m.chunk_index])
        hl = tuple(Highlight(p, vocab.tokens[t], vocab.tokens[q]) for p, t, q in wrong)
        entries.append(
            TagEntry(int(c.frame_span[0]), m.chunk_index, m.nom, render_chunk(c, vocab, [p for p, _, _ in wrong]), hl)
        )
    return TagReport(verdict.capture_id, filename or f"{verdict.capture_id}.pcap", verdict, tuple(entries))


def chunk_has_frame(chunk: Chunk, frame_no: int) -> bool:
    real = chunk.token_frames[: chunk.n_real]
    return bool((real == frame_no).any())


def planted_in_evidence(
    evidence: Sequence[int], chunks: Sequence[Chunk], planted_frames: Sequence[int]
) -> bool:
    """True if any evidence chunk holds a token from a planted frame."""
    by_index = {c.chunk_index: c for c in chunks}
    return any(chunk_has_frame(by_index[i], f) for i in evidence for f in planted_frames)


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with the failure class as positive."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def swapped(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.tn, self.fn, self.tp, self.fp)


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    f2: float
    degenerate: bool = False


def fbeta(p: float, r: float, beta: float) -> float:
    b2 = beta * beta
    den = b2 * p + r
    return 0.0 if den == 0 else (1 + b2) * p * r / den


def prf_scores(p: float, r: float) -> ClassScores:
    """F1 and F2 of a given precision/recall pair."""
    return ClassScores(p, r, fbeta(p, r, 1.0), fbeta(p, r, 2.0), p + r == 0)


def class_scores(cm: ConfusionMatrix) -> ClassScores:
    pd = cm.tp + cm.fp
    rd = cm.tp + cm.fn
    p = cm.tp / pd if pd else 0.0
    r = cm.tp / rd if rd else 0.0
    s = prf_scores(p, r)
    return ClassScores(s.precision, s.recall, s.f1, s.f2, pd == 0 or rd == 0 or s.degenerate)


@dataclass(frozen=True)
class EvalReport:
    failure: ClassScores
    success: ClassScores
    counts: ConfusionMatrix

    def to_record(self) -> dict:
        return {"failure": asdict(self.failure), "success": asdict(self.success), "counts": asdict(self.counts)}

    def render(self, name: str = "") -> str:
        return render_table({name or "result": self})


def confusion(pairs: Iterable[tuple[Label, Label]]) -> ConfusionMatrix:
    tp = fp = tn = fn = 0
    for pred, true in pairs:
        if pred is Label.FAILURE:
            tp, fp = (tp + 1, fp) if true is Label.FAILURE else (tp, fp + 1)
        else:
            fn, tn = (fn + 1, tn) if true is Label.FAILURE else (fn, tn + 1)
    return ConfusionMatrix(tp, fp, tn, fn)


def evaluate(verdicts: Sequence[Verdict], truth: Mapping[str, Label | str]) -> EvalReport:
    ids = [v.capture_id for v in verdicts]
    if len(set(ids)) != len(ids):
        raise IdMismatch("duplicate capture ids among verdicts")
    if set(ids) != set(truth):
        missing = sorted(set(truth) - set(ids))[:5]
        extra = sorted(set(ids) - set(truth))[:5]
        raise IdMismatch(f"verdict ids and labels differ (missing={missing}, unlabeled={extra})")
    cm = confusion((v.label, Label(truth[v.capture_id])) for v in verdicts)
    return EvalReport(class_scores(cm), class_scores(cm.swapped()), cm)


def render_table(reports: Mapping[str, EvalReport]) -> str:
    """Per-class precision/recall/F1/F2, one row per (experiment, class)."""
    rows = ["experiment\tclass\tprecision\trecall\tf1\tf2\ttp\tfp\ttn\tfn"]
    for name, rep in reports.items():
        for cls, s in (("success", rep.success), ("failure", rep.failure)):
            c = rep.counts if cls == "failure" else rep.counts.swapped()
            rows.append(
                f"{name}\t{cls}\t{s.precision:.3f}\t{s.recall:.3f}\t{s.f1:.3f}\t{s.f2:.3f}\t{c.tp}\t{c.fp}\t{c.tn}\t{c.fn}"
            )
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- scatter / records

SCATTER_HEADER = "capture_id\tnom_k\tmnll_k\ttrue_label\tpredicted_label"


def scatter_rows(scores: Sequence[PcapScore], truth: Mapping[str, Label | str], predicted: Mapping[str, Label | str]):
    for s in scores:
        yield (s.capture_id, s.nom_k, s.mnll_k, Label(truth[s.capture_id]).value, Label(predicted[s.capture_id]).value)


def scatter_tsv(scores, truth, predicted) -> str:
    lines = [SCATTER_HEADER]
    for cid, n, m, t, p in scatter_rows(scores, truth, predicted):
        lines.append(f"{cid}\t{n!r}\t{m!r}\t{t}\t{p}")
    return "\n".join(lines) + "\n"


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def loads_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


__all__ = [
    "ClassScores",
    "ConfusionMatrix",
    "EvalReport",
    "Highlight",
    "TagEntry",
    "TagReport",
    "chunk_has_frame",
    "class_scores",
    "confusion",
    "dumps_jsonl",
    "evaluate",
    "fbeta",
    "loads_jsonl",
    "mispredicted_positions",
    "planted_in_evidence",
    "prf_scores",
    "render_chunk",
    "render_table",
    "scatter_rows",
    "scatter_tsv",
    "tag",
]
