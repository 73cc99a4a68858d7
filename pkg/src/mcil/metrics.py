"""Incremental-learning metrics.

An AccuracyMatrix accumulates per-(stage, task) correct/total counts as
the run progresses; everything downstream — average accuracy, forgetting,
backward/forward transfer, task-similarity weights, clustering NMI, and
the two composite metrics — is a pure function of the recorded matrix and
per-stage ledger entries. Counts (not fractions) are stored so pooled
stage accuracy and every rate can be recomputed exactly.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from .errors import (
    ConfigError,
    DegeneratePrototype,
    EmptyLedger,
    ProtocolError,
    ShapeError,
)

KMEANS_RESTARTS = 10


class AccuracyMatrix:
    """Lower-triangular accuracy record R[t][i] plus FWT reference columns.

    R[t][i] is the Top-1 accuracy on task i's test data after training
    stage t, predicted over the full C_{1:t} label space. zero_shot[t] and
    pre_eval[t] hold the untrained-model and before-stage-t accuracies on
    task t used by forward transfer.
    """

    def __init__(self):
        self._cells: dict[tuple[int, int], tuple[int, int]] = {}
        self._zero_shot: dict[int, float] = {}
        self._pre_eval: dict[int, float] = {}

    def record(self, t: int, i: int, correct: int, total: int) -> None:
        if not 1 <= i <= t:
            raise ProtocolError(f"cell ({t}, {i}) is outside the lower triangle")
        if total < 1 or not 0 <= correct <= total:
            raise ProtocolError(f"bad counts {correct}/{total} for cell ({t}, {i})")
        if (t, i) in self._cells:
            raise ProtocolError(f"cell ({t}, {i}) already recorded")
        self._cells[(t, i)] = (correct, total)

    def record_zero_shot(self, t: int, acc: float) -> None:
        if not 0.0 <= acc <= 1.0:
            raise ProtocolError(f"zero-shot accuracy {acc} outside [0, 1]")
        self._zero_shot[t] = acc

    def record_pre_eval(self, t: int, acc: float) -> None:
        if not 0.0 <= acc <= 1.0:
            raise ProtocolError(f"pre-task accuracy {acc} outside [0, 1]")
        self._pre_eval[t] = acc

    def get(self, t: int, i: int) -> float:
        if (t, i) not in self._cells:
            raise ProtocolError(f"cell ({t}, {i}) was never recorded")
        correct, total = self._cells[(t, i)]
        return correct / total

    def zero_shot(self, t: int) -> float:
        if t not in self._zero_shot:
            raise ProtocolError(f"no zero-shot accuracy recorded for task {t}")
        return self._zero_shot[t]

    def pre_eval(self, t: int) -> float:
        if t not in self._pre_eval:
            raise ProtocolError(f"no pre-task evaluation recorded for task {t}")
        return self._pre_eval[t]

    @property
    def stages(self) -> int:
        return max((t for t, _ in self._cells), default=0)

    def _require_row(self, t: int) -> None:
        for i in range(1, t + 1):
            if (t, i) not in self._cells:
                raise ProtocolError(f"stage {t} row is missing cell ({t}, {i})")

    def stage_accuracy(self, t: int) -> float:
        """Pooled A_t: accuracy over the union of test sets of tasks 1..t."""
        self._require_row(t)
        correct = sum(self._cells[(t, i)][0] for i in range(1, t + 1))
        total = sum(self._cells[(t, i)][1] for i in range(1, t + 1))
        return correct / total

    def to_rows(self) -> list[list[float]]:
        """Lower-triangular R as nested lists (row t has t entries)."""
        return [
            [self.get(t, i) for i in range(1, t + 1)]
            for t in range(1, self.stages + 1)
        ]


def avg_accuracy(matrix: AccuracyMatrix) -> float:
    """Mean pooled stage accuracy (1/T) sum_t A_t."""
    T = matrix.stages
    if T == 0:
        raise EmptyLedger("no stages recorded")
    return sum(matrix.stage_accuracy(t) for t in range(1, T + 1)) / T


def forgetting(matrix: AccuracyMatrix, t: int) -> float:
    """Max-over-history forgetting at stage t, percent clamped to [0, 100]."""
    if t < 1:
        raise ProtocolError(f"stage index must be >= 1, got {t}")
    if t == 1:
        return 0.0
    drops = []
    for i in range(1, t):
        best = max(matrix.get(j, i) for j in range(i, t))
        drops.append(best - matrix.get(t, i))
    value = 100.0 * sum(drops) / len(drops)
    return min(100.0, max(0.0, value))


def bwt_fwt(matrix: AccuracyMatrix, t: int) -> tuple[float, float]:
    """Backward transfer (vs the diagonal) and forward transfer (vs zero-shot)."""
    if t < 1:
        raise ProtocolError(f"stage index must be >= 1, got {t}")
    if t == 1:
        return 0.0, 0.0
    bwt = sum(matrix.get(t, i) - matrix.get(i, i) for i in range(1, t)) / (t - 1)
    fwt = matrix.pre_eval(t) - matrix.zero_shot(t)
    return bwt, fwt


def _cosine(u: np.ndarray, v: np.ndarray, what: str) -> float:
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu < 1e-12 or nv < 1e-12:
        raise DegeneratePrototype(f"zero-norm mean {what}")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def task_similarity(
    t: int,
    mean_proto_current: np.ndarray | None = None,
    mean_proto_previous: np.ndarray | None = None,
    mean_feat_current: np.ndarray | None = None,
    mean_feat_previous: np.ndarray | None = None,
) -> float:
    """w_t: semantic + feature-distribution similarity mapped into [0, 1].

    w_1 = 0 by convention (no previous tasks). For t >= 2 the four mean
    vectors are required.
    """
    if t < 1:
        raise ProtocolError(f"stage index must be >= 1, got {t}")
    if t == 1:
        return 0.0
    if any(x is None for x in (mean_proto_current, mean_proto_previous,
                               mean_feat_current, mean_feat_previous)):
        raise ProtocolError(f"task_similarity at t={t} needs all four mean vectors")
    c_sem = _cosine(mean_proto_current, mean_proto_previous, "prototype")
    c_feat = _cosine(mean_feat_current, mean_feat_previous, "fused feature")
    return (0.5 * (c_sem + c_feat) + 1.0) / 2.0


def _entropy_nats(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assign_a, assign_b) -> float:
    """Normalized mutual information I/sqrt(Ha*Hb) of two label vectors, in nats.

    Conventions: both partitions single-cluster -> 1.0; exactly one partition
    with zero entropy -> 0.0.
    """
    a = np.asarray(assign_a)
    b = np.asarray(assign_b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"assignment shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < 1:
        raise ShapeError("assignments must be non-empty")

    _, a_idx = np.unique(a, return_inverse=True)
    _, b_idx = np.unique(b, return_inverse=True)
    n_a, n_b = a_idx.max() + 1, b_idx.max() + 1
    joint = np.zeros((n_a, n_b), dtype=np.int64)
    np.add.at(joint, (a_idx, b_idx), 1)

    h_a = _entropy_nats(joint.sum(axis=1))
    h_b = _entropy_nats(joint.sum(axis=0))
    if h_a == 0.0 and h_b == 0.0:
        return 1.0
    if h_a == 0.0 or h_b == 0.0:
        return 0.0
    h_ab = _entropy_nats(joint.reshape(-1))
    mutual = h_a + h_b - h_ab
    return float(np.clip(mutual / math.sqrt(h_a * h_b), 0.0, 1.0))


def fusion_nmi(features_fused: np.ndarray, features_modal: np.ndarray,
               k: int, seed: int) -> float:
    """NMI between seeded k-means clusterings of two feature sets."""
    fused = np.asarray(features_fused, dtype=np.float64)
    modal = np.asarray(features_modal, dtype=np.float64)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if fused.shape[0] != modal.shape[0]:
        raise ShapeError("feature sets must have the same number of rows")
    if fused.shape[0] < k:
        raise ConfigError(f"need at least k={k} samples, got {fused.shape[0]}")
    state = seed % (2 ** 32)  # k-means accepts only 32-bit states
    assign = []
    for feats in (fused, modal):
        km = KMeans(n_clusters=k, n_init=KMEANS_RESTARTS, random_state=state)
        assign.append(km.fit_predict(feats))
    return nmi(assign[0], assign[1])


@dataclass(frozen=True)
class StageMetrics:
    """One completed stage: pooled accuracy plus the per-stage metric row."""

    t: int
    acc: float  # pooled A_t, fraction
    For: float  # percent in [0, 100]
    w: float  # task-similarity weight in [0, 1]
    BWT: float
    FWT: float
    confusion: np.ndarray  # |C_{1:t}| x |C_{1:t}| counts

    def __post_init__(self):
        if not 0.0 <= self.acc <= 1.0:
            raise ProtocolError(f"stage accuracy {self.acc} outside [0, 1]")
        if not 0.0 <= self.For <= 100.0:
            raise ProtocolError(f"forgetting {self.For} outside [0, 100]")
        if not 0.0 <= self.w <= 1.0:
            raise ProtocolError(f"similarity weight {self.w} outside [0, 1]")
        for tag, x in (("BWT", self.BWT), ("FWT", self.FWT)):
            if not -1.0 <= x <= 1.0:
                raise ProtocolError(f"{tag} {x} outside [-1, 1]")


@dataclass
class MetricsLedger:
    """Append-only per-stage metrics plus the end-of-run NMI pair."""

    matrix: AccuracyMatrix = field(default_factory=AccuracyMatrix)
    stages: list[StageMetrics] = field(default_factory=list)
    nmi_f_v: float | None = None
    nmi_f_a: float | None = None

    def append_stage(self, stage: StageMetrics) -> None:
        if stage.t != len(self.stages) + 1:
            raise ProtocolError(
                f"stage {stage.t} appended out of order (have {len(self.stages)})"
            )
        self.stages.append(stage)

    @property
    def T(self) -> int:
        return len(self.stages)


def metric_m1(ledger: MetricsLedger) -> float:
    """Composite forgetting-weighted score in [0, 100]."""
    if not ledger.stages:
        raise EmptyLedger("ledger has no completed stages")
    T = ledger.T
    acc_pct = 100.0 * sum(s.acc for s in ledger.stages) / T
    retention = sum((1.0 - s.w) * (100.0 - s.For) for s in ledger.stages)
    return 0.5 * acc_pct + retention / (2.0 * T)


def metric_m2(ledger: MetricsLedger) -> float:
    """Composite transfer-and-consistency score in [0, 1]."""
    if not ledger.stages:
        raise EmptyLedger("ledger has no completed stages")
    if ledger.nmi_f_v is None or ledger.nmi_f_a is None:
        raise EmptyLedger("ledger is missing the final NMI values")
    T = ledger.T
    acc = sum(s.acc for s in ledger.stages) / T
    transfer = sum(max(0.0, s.BWT) + max(0.0, s.FWT) for s in ledger.stages)
    nmi_term = 0.5 * (ledger.nmi_f_v + ledger.nmi_f_a)
    return 0.25 * acc + transfer / (4.0 * T) + 0.25 * nmi_term


def confusion_matrix(predictions, labels, C: int) -> np.ndarray:
    """M[i][j] = count of true class i predicted as class j."""
    preds = np.asarray(predictions, dtype=np.int64)
    trues = np.asarray(labels, dtype=np.int64)
    if preds.shape != trues.shape or preds.ndim != 1:
        raise ShapeError(f"prediction/label shapes differ: {preds.shape} vs {trues.shape}")
    if preds.size and (preds.min() < 0 or preds.max() >= C
                       or trues.min() < 0 or trues.max() >= C):
        raise ShapeError(f"labels outside [0, {C})")
    out = np.zeros((C, C), dtype=np.int64)
    np.add.at(out, (trues, preds), 1)
    return out
