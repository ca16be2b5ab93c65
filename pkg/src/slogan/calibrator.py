"""Confidence scoring, class-adaptive thresholds, confident-set selection, and
the supervised losses on source labels and target pseudo-labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .graphdata import Dataset, make_batch
from .model import SloganModel


@dataclass
class PredictionRecord:
    graph_id: int
    probs: np.ndarray
    confidence: float
    predicted: int


@dataclass
class ThresholdTable:
    max_conf: np.ndarray   # per-class maximum observed confidence
    per_class: np.ndarray  # per-class threshold = max_conf * tau (tau where unobserved)
    tau: float


@dataclass
class ConfidentSet:
    """Target graphs admitted by the class-adaptive rule, with pseudo-labels."""

    graph_ids: np.ndarray
    pseudo_labels: np.ndarray
    confidences: np.ndarray

    def __len__(self) -> int:
        return len(self.graph_ids)

    def label_of(self) -> dict[int, int]:
        return {int(g): int(y) for g, y in zip(self.graph_ids, self.pseudo_labels)}


def score_target(ds_target: Dataset, model: SloganModel, batch_size: int = 128,
                 ) -> list[PredictionRecord]:
    """One record per target graph, predicted from causal features only.

    Ties in the argmax break toward the lowest class index.
    """
    if not ds_target.graphs:
        raise ValueError("score_target: empty dataset")
    records = []
    for start in range(0, len(ds_target.graphs), batch_size):
        chunk = ds_target.graphs[start:start + batch_size]
        probs = model.predict_probs(make_batch(chunk))
        for g, p in zip(chunk, probs):
            cls = int(np.argmax(p))  # argmax takes the first maximum
            records.append(PredictionRecord(
                graph_id=g.id, probs=p, confidence=float(p[cls]), predicted=cls))
    return records


def build_thresholds(records: list[PredictionRecord], tau: float, num_classes: int,
                     ) -> ThresholdTable:
    """Per-class threshold = (max confidence among records predicted as that
    class) * tau; classes never predicted fall back to tau itself."""
    if not records:
        raise ValueError("build_thresholds: no records")
    if not (0.0 < tau <= 1.0):
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    max_conf = np.full(num_classes, np.nan)
    for r in records:
        if np.isnan(max_conf[r.predicted]) or r.confidence > max_conf[r.predicted]:
            max_conf[r.predicted] = r.confidence
    per_class = np.where(np.isnan(max_conf), tau, max_conf * tau)
    return ThresholdTable(max_conf=max_conf, per_class=per_class, tau=tau)


def select_confident(records: list[PredictionRecord], table: ThresholdTable) -> ConfidentSet:
    """Members are exactly the records with confidence strictly above their
    predicted class threshold."""
    ids, labels, confs = [], [], []
    for r in records:
        if r.confidence > table.per_class[r.predicted]:
            ids.append(r.graph_id)
            labels.append(r.predicted)
            confs.append(r.confidence)
    return ConfidentSet(
        graph_ids=np.array(ids, dtype=np.int64),
        pseudo_labels=np.array(labels, dtype=np.int64),
        confidences=np.array(confs),
    )


def write_confident_csv(records: list[PredictionRecord], confident: ConfidentSet, path) -> None:
    admitted = set(int(g) for g in confident.graph_ids)
    with open(path, "w") as fh:
        fh.write("id,predicted_class,confidence,admitted\n")
        for r in records:
            fh.write(f"{r.graph_id},{r.predicted},{r.confidence:.10g},{int(r.graph_id in admitted)}\n")


# ---------------------------------------------------------------------------
# supervised losses


def source_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-probability of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0):
        raise ValueError("source_loss: missing label in source batch")
    return gc.mean(gc.cross_entropy_rows(logits, labels))


def target_loss(logits: Tensor | None, pseudo_labels: np.ndarray) -> Tensor:
    """Mean negative log-probability of pseudo-labels over the confident
    members present; an empty set contributes 0 by convention."""
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
    if logits is None or pseudo_labels.size == 0:
        return gc.constant(0.0)
    return gc.mean(gc.cross_entropy_rows(logits, pseudo_labels))


def sup_loss(l_so: Tensor, l_ta: Tensor) -> Tensor:
    return gc.add(l_so, l_ta)
