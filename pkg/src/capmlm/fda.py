"""Capture-level failure detection from per-chunk reconstruction errors.

Each chunk yields NOM (mispredicted masked tokens) and MNLL (mean NLL of the
true tokens). A capture is summarised by the mean of its k largest values of
each, then classified by a one-sided threshold on NOM-k or by the squared
Mahalanobis distance of (NOM-k, MNLL-k) from the training fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import DegenerateCovariance, EmptyMask, EmptyMetrics, TooFewSamples, UnfittedModel
from .mlm.model import ChunkPrediction
from .tokenizer import Chunk

FDA_MAGIC = "#capmlm-fda"
FDA_VERSION = 1


class Aggregation(str, Enum):
    INDEPENDENT = "independent"  # top-k of each metric ranked separately
    PAIRED = "paired"  # top-k chunks by NOM, MNLL taken from the same chunks
    MEAN = "mean"  # mean over all chunks (ablation only)


class Label(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"


@dataclass(frozen=True)
class ChunkMetrics:
    capture_id: str
    chunk_index: int
    nom: int
    mnll: float
    frame_span: tuple[int, int] = (0, 0)
    n_masked: int = 0


@dataclass(frozen=True)
class PcapScore:
    capture_id: str
    nom_k: float
    mnll_k: float
    k: int
    top_chunks: tuple[int, ...]


def score_chunk(pred: ChunkPrediction, chunk: Chunk | None = None) -> ChunkMetrics:
    m = pred.n_masked
    if m == 0:
        raise EmptyMask("prediction has no masked positions")
    # argmax returns the first maximum, i.e. the lowest token id on ties
    predicted = pred.probabilities.argmax(axis=-1)
    nom = int(np.count_nonzero(predicted != pred.true_ids))
    p = pred.probabilities[np.arange(m), pred.true_ids]
    with np.errstate(divide="ignore"):
        mnll = float(-np.mean(np.log(p)))
    span = tuple(chunk.frame_span) if chunk is not None else (0, 0)
    return ChunkMetrics(pred.capture_id, pred.chunk_index, nom, mnll, span, m)


def evidence_order(metrics: Sequence[ChunkMetrics]) -> list[ChunkMetrics]:
    return sorted(metrics, key=lambda c: (-c.nom, -c.mnll, c.chunk_index))


def aggregate(metrics: Sequence[ChunkMetrics], k: int = 3, mode: Aggregation | str = Aggregation.INDEPENDENT) -> PcapScore:
    if not metrics:
        raise EmptyMetrics("no chunk metrics to aggregate")
    if k < 1:
        raise ValueError("k must be >= 1")
    mode = Aggregation(mode)
    ranked = evidence_order(metrics)
    top = ranked[:k]
    if mode is Aggregation.INDEPENDENT:
        noms = sorted((c.nom for c in metrics), reverse=True)[:k]
        mnlls = sorted((c.mnll for c in metrics), reverse=True)[:k]
    elif mode is Aggregation.PAIRED:
        noms = [c.nom for c in top]
        mnlls = [c.mnll for c in top]
    else:
        noms = [c.nom for c in metrics]
        mnlls = [c.mnll for c in metrics]
    return PcapScore(
        metrics[0].capture_id,
        float(np.mean(noms)),
        float(np.mean(mnlls)),
        k,
        tuple(c.chunk_index for c in top),
    )


# ---------------------------------------------------------------- detectors


@dataclass(frozen=True)
class ThresholdModel:
    mean_nom_k: float
    std_nom_k: float
    multiplier: float = 3.0
    threshold: float = field(default=math.nan)
    k: int = 3
    aggregation: str = Aggregation.INDEPENDENT.value

    detector = "threshold"

    def __post_init__(self):
        if math.isnan(self.threshold):
            object.__setattr__(self, "threshold", self.mean_nom_k + self.multiplier * self.std_nom_k)
        if self.std_nom_k < 0 or not math.isfinite(self.threshold):
            raise ValueError("threshold model needs std >= 0 and a finite threshold")

    def statistic(self, score: PcapScore) -> float:
        return score.nom_k

    def fires(self, score: PcapScore) -> bool:
        return score.nom_k > self.threshold


@dataclass(frozen=True)
class EllipticModel:
    mean: tuple[float, float]
    covariance: tuple[tuple[float, float], tuple[float, float]]
    cutoff_d2: float
    level: float = 0.997
    ridge: float = 0.0
    robust: bool = False
    k: int = 3
    aggregation: str = Aggregation.INDEPENDENT.value

    detector = "elliptic"

    def __post_init__(self):
        c = np.asarray(self.covariance)
        if c.shape != (2, 2) or c[0, 1] != c[1, 0]:
            raise ValueError("covariance must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(c).min() <= 0:
            raise DegenerateCovariance("covariance is not positive definite")

    def mahalanobis2(self, point) -> float:
        v = np.asarray(point, dtype=np.float64) - np.asarray(self.mean)
        return float(v @ np.linalg.solve(np.asarray(self.covariance), v))

    def statistic(self, score: PcapScore) -> float:
        return self.mahalanobis2((score.nom_k, score.mnll_k))

    def fires(self, score: PcapScore) -> bool:
        return self.statistic(score) > self.cutoff_d2


FdaModel = Union[ThresholdModel, EllipticModel]


def fit_threshold(train_scores: Sequence[PcapScore], multiplier: float = 3.0) -> ThresholdModel:
    if len(train_scores) < 2:
        raise TooFewSamples("threshold fit needs at least 2 training scores")
    x = np.array([s.nom_k for s in train_scores], dtype=np.float64)
    mean = float(x.mean())
    std = float(x.std())  # population
    return ThresholdModel(mean, std, multiplier, mean + multiplier * std, train_scores[0].k)


def chi2_2dof_quantile(level: float) -> float:
    """Quantile of the chi-square distribution with 2 degrees of freedom."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    return -2.0 * math.log1p(-level)


RIDGE_RCOND = 1e-9
RIDGE_SCALE = 1e-6


def fit_elliptic(train_scores: Sequence[PcapScore], level: float = 0.997, robust: bool = False) -> EllipticModel:
    """Mean and covariance of (NOM-k, MNLL-k) with a chi-square(2) cutoff.

    The empirical covariance (normalised by n) is used unless ``robust``, which
    takes the minimum covariance determinant estimate from scikit-learn. A
    ridge proportional to the covariance trace is added only when the smaller
    eigenvalue is below ``RIDGE_RCOND`` times the larger.
    """
    if len(train_scores) < 3:
        raise TooFewSamples("elliptic fit needs at least 3 training scores")
    cutoff = chi2_2dof_quantile(level)
    X = np.array([(s.nom_k, s.mnll_k) for s in train_scores], dtype=np.float64)
    if robust:
        from sklearn.covariance import MinCovDet

        mcd = MinCovDet(random_state=0).fit(X)
        mean, cov = mcd.location_, mcd.covariance_
    else:
        mean = X.mean(axis=0)
        d = X - mean
        cov = d.T @ d / len(X)
    cov = (cov + cov.T) / 2
    ev = np.linalg.eigvalsh(cov)
    ridge = 0.0
    if ev[0] <= RIDGE_RCOND * max(ev[1], 0.0):
        ridge = RIDGE_SCALE * float(np.trace(cov)) / 2
        cov = cov + ridge * np.eye(2)
        if ridge <= 0 or np.linalg.eigvalsh(cov)[0] <= 0:
            raise DegenerateCovariance("training scores are identical; covariance is singular")
    return EllipticModel(
        (float(mean[0]), float(mean[1])),
        ((float(cov[0, 0]), float(cov[0, 1])), (float(cov[0, 1]), float(cov[1, 1]))),
        cutoff,
        level,
        ridge,
        robust,
        train_scores[0].k,
    )


@dataclass(frozen=True)
class Verdict:
    capture_id: str
    label: Label
    score: PcapScore
    detector: str
    statistic: float
    evidence: tuple[int, ...]

    def to_record(self) -> dict:
        return {
            "capture_id": self.capture_id,
            "label": self.label.value,
            "detector": self.detector,
            "statistic": self.statistic,
            "nom_k": self.score.nom_k,
            "mnll_k": self.score.mnll_k,
            "k": self.score.k,
            "evidence": list(self.evidence),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Verdict":
        score = PcapScore(rec["capture_id"], rec["nom_k"], rec["mnll_k"], rec["k"], tuple(rec["evidence"]))
        return cls(rec["capture_id"], Label(rec["label"]), score, rec["detector"], rec["statistic"], tuple(rec["evidence"]))


def classify(score: PcapScore, model: FdaModel | None) -> Verdict:
    if model is None or not isinstance(model, (ThresholdModel, EllipticModel)):
        raise UnfittedModel("classify needs a fitted threshold or elliptic model")
    label = Label.FAILURE if model.fires(score) else Label.SUCCESS
    return Verdict(score.capture_id, label, score, model.detector, model.statistic(score), score.top_chunks)


# ---------------------------------------------------------------- model file


def dumps_model(model: FdaModel) -> str:
    rows: list[tuple[str, object]] = [("detector", model.detector), ("k", model.k), ("aggregation", model.aggregation)]
    if isinstance(model, ThresholdModel):
        rows += [
            ("multiplier", model.multiplier),
            ("mean_nom_k", model.mean_nom_k),
            ("std_nom_k", model.std_nom_k),
            ("threshold", model.threshold),
        ]
    else:
        (c00, c01), (_, c11) = model.covariance
        rows += [
            ("level", model.level),
            ("robust", int(model.robust)),
            ("mean_nom_k", model.mean[0]),
            ("mean_mnll_k", model.mean[1]),
            ("cov_nn", c00),
            ("cov_nm", c01),
            ("cov_mm", c11),
            ("ridge", model.ridge),
            ("cutoff_d2", model.cutoff_d2),
        ]
    body = "".join(f"{k}\t{v!r}\n" if isinstance(v, float) else f"{k}\t{v}\n" for k, v in rows)
    return f"{FDA_MAGIC}\t{FDA_VERSION}\n" + body


def loads_model(text: str) -> FdaModel:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(FDA_MAGIC):
        raise ValueError("not an FDA model file")
    version = int(lines[0].split("\t")[1])
    if version != FDA_VERSION:
        raise ValueError(f"unsupported FDA model version {version}")
    kv = dict(line.split("\t", 1) for line in lines[1:] if line.strip())
    k = int(kv["k"])
    agg = kv.get("aggregation", Aggregation.INDEPENDENT.value)
    if kv["detector"] == "threshold":
        return ThresholdModel(
            float(kv["mean_nom_k"]), float(kv["std_nom_k"]), float(kv["multiplier"]), float(kv["threshold"]), k, agg
        )
    if kv["detector"] == "elliptic":
        c01 = float(kv["cov_nm"])
        return EllipticModel(
            (float(kv["mean_nom_k"]), float(kv["mean_mnll_k"])),
            ((float(kv["cov_nn"]), c01), (c01, float(kv["cov_mm"]))),
            float(kv["cutoff_d2"]),
            float(kv["level"]),
            float(kv["ridge"]),
            bool(int(kv["robust"])),
            k,
            agg,
        )
    raise ValueError(f"unknown detector {kv['detector']!r}")


def save_model(model: FdaModel, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def load_model(path) -> FdaModel:
    return loads_model(Path(path).read_text(encoding="utf-8"))


def with_settings(model: FdaModel, k: int, aggregation: str) -> FdaModel:
    return replace(model, k=k, aggregation=aggregation)
