"""Class-incremental training loop and staged evaluation.

One run walks a task stream in order. For the incremental method each
task grows every expert mixture by one adapter, trains only the live
parameter set (new experts, routers, fusion, critics) with AdamW under
a per-task cosine learning-rate schedule, and then scores the model on
the test data of every task seen so far with task identity withheld.
Baselines share the same loop: naive fine-tuning updates the whole
visual/text backbone instead of adapters, and the zero-shot method
skips training entirely.

Class prototypes come from the text encoder. Old-class prototypes are
refreshed once per epoch (held constant within it), while current-task
prototypes stay inside the autograd graph so the text adapters receive
gradient through them.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .encoders import MCILModel, ModelConfig
from .errors import InvalidConfig, ProtocolError
from .losses import BatchFeatures, Prototypes, predict, total_loss
from .metrics import (
    AccuracyMatrix,
    MetricsLedger,
    StageMetrics,
    bwt_fwt,
    confusion_matrix,
    forgetting,
    fusion_nmi,
    task_similarity,
)
from .scenario import ClassLabel, Dataset, TaskStream, build_stream, default_templates, modality_arrays
from .seeding import child_seed

METHODS = ("ours", "naive_finetune", "zero_shot")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and protocol settings for one run."""

    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    lr_floor: float = 0.0
    weight_decay: float = 1e-4
    alpha: float = 0.7
    tau: float = 1.0
    n_templates: int = 35
    seed: int = 0
    method: str = "ours"

    def __post_init__(self):
        for name, value in (("epochs", self.epochs), ("batch_size", self.batch_size),
                            ("n_templates", self.n_templates)):
            if value < 1:
                raise InvalidConfig(f"{name} must be positive, got {value}")
        if self.lr <= 0:
            raise InvalidConfig(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.lr_floor <= self.lr:
            raise InvalidConfig(f"lr_floor must lie in [0, lr], got {self.lr_floor}")
        if self.weight_decay < 0:
            raise InvalidConfig(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidConfig(f"alpha must be in [0, 1], got {self.alpha}")
        if self.tau <= 0:
            raise InvalidConfig(f"tau must be positive, got {self.tau}")
        if self.method not in METHODS:
            raise InvalidConfig(f"method must be one of {METHODS}, got {self.method!r}")


@dataclass(frozen=True)
class RunConfig:
    """Everything a scenario run needs: architecture, training, task count."""

    model: ModelConfig
    train: TrainConfig
    T: int = 4

    def __post_init__(self):
        if self.T < 1:
            raise InvalidConfig(f"T must be >= 1, got {self.T}")


@dataclass(frozen=True)
class StageEval:
    """Accuracy counts per seen task plus the pooled confusion matrix."""

    t: int
    correct: tuple[int, ...]
    total: tuple[int, ...]
    confusion: np.ndarray

    @property
    def accuracies(self) -> tuple[float, ...]:
        return tuple(c / n for c, n in zip(self.correct, self.total))


@dataclass
class RunRecord:
    """The full outcome of one scenario run."""

    config: RunConfig
    ledger: MetricsLedger
    wall_clock: list[float] = field(default_factory=list)
    checkpoint_paths: list[str] = field(default_factory=list)
    epoch_losses: list[list[float]] = field(default_factory=list)
    incomplete: bool = True


def cosine_lr(step: int, total_steps: int, base: float, floor: float = 0.0) -> float:
    """Cosine-annealed rate over a task horizon; exactly `floor` at the end.

    A single-step horizon has no room to anneal and uses `base`.
    """
    if total_steps < 1 or not 0 <= step < total_steps:
        raise InvalidConfig(f"step {step} outside horizon of {total_steps}")
    if total_steps == 1:
        return base
    x = step / (total_steps - 1)
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * x))


def _label(dataset: Dataset, class_id: int) -> ClassLabel:
    return ClassLabel(id=class_id, name=dataset.label_name(class_id))


def _batch_tensors(dataset: Dataset, sample_ids):
    vis, aud, labels = modality_arrays(dataset, sample_ids)
    return (torch.from_numpy(vis), torch.from_numpy(aud),
            torch.from_numpy(labels))


def _frozen_prototypes(model: MCILModel, labels, templates) -> Prototypes | None:
    if not labels:
        return None
    with torch.no_grad():
        return model.prototypes(labels, templates)


def _batch_slices(n: int, batch_size: int) -> list[tuple[int, int]]:
    """Contiguous batch index ranges; a trailing singleton is folded into
    its neighbour so pairwise terms always see at least two samples."""
    slices = [(lo, min(lo + batch_size, n)) for lo in range(0, n, batch_size)]
    if len(slices) > 1 and slices[-1][1] - slices[-1][0] == 1:
        lo, _ = slices.pop()
        slices[-1] = (slices[-1][0], lo + 1)
    return slices


def train_task(model: MCILModel, dataset: Dataset, stream: TaskStream,
               t: int, cfg: TrainConfig) -> list[float]:
    """Optimize the method's parameter set on task t; returns per-epoch losses."""
    if cfg.method == "zero_shot":
        raise InvalidConfig("zero_shot performs no training")
    if cfg.method == "ours" and model.task_count != t:
        raise ProtocolError(
            f"add_task_expert({t}) must run before training task {t} "
            f"(model holds {model.task_count} experts)"
        )
    model.reset_critics(t)
    params = model.parameters_for_method(cfg.method)
    if cfg.method == "naive_finetune":
        for p in params.values():
            p.requires_grad_(True)
    opt = torch.optim.AdamW(params.values(), lr=cfg.lr,
                            weight_decay=cfg.weight_decay)

    templates = default_templates(cfg.n_templates)
    task = stream.task(t)
    old_labels = [_label(dataset, c) for c in stream.classes_up_to(t - 1)]
    cur_labels = [_label(dataset, c) for c in task.classes]
    train_ids = list(task.train_samples)
    slices = _batch_slices(len(train_ids), cfg.batch_size)
    total_steps = cfg.epochs * len(slices)
    rng = np.random.Generator(np.random.PCG64(child_seed(cfg.seed, "shuffle", t)))

    step = 0
    epoch_losses: list[float] = []
    for _epoch in range(cfg.epochs):
        old_protos = _frozen_prototypes(model, old_labels, templates)
        order = rng.permutation(len(train_ids))
        running = 0.0
        for lo, hi in slices:
            ids = [train_ids[k] for k in order[lo:hi]]
            v_raw, a_raw, labels = _batch_tensors(dataset, ids)
            v_feat, a_feat, fused, _, _ = model(v_raw, a_raw)
            cur = model.prototypes(cur_labels, templates)
            if old_protos is None:
                protos = cur
            else:
                protos = Prototypes(
                    class_ids=old_protos.class_ids + cur.class_ids,
                    matrix=torch.cat([old_protos.matrix, cur.matrix]),
                )
            batch = BatchFeatures(v_feat, a_feat, fused, labels, protos)
            loss = total_loss(batch, cfg.alpha, cfg.tau,
                              model.critic_v, model.critic_a)
            opt.zero_grad()
            loss.backward()
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_floor)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.step()
            step += 1
            running += float(loss.detach()) * len(ids)
        epoch_losses.append(running / len(train_ids))
    return epoch_losses


def _seen_prototypes(model: MCILModel, dataset: Dataset, stream: TaskStream,
                     t: int, cfg: TrainConfig) -> Prototypes:
    labels = [_label(dataset, c) for c in stream.classes_up_to(t)]
    templates = default_templates(cfg.n_templates)
    with torch.no_grad():
        return model.prototypes(labels, templates)


def _predicted_ids(model: MCILModel, protos: Prototypes, v_raw, a_raw,
                   tau: float) -> list[int]:
    with torch.no_grad():
        _, _, fused, _, _ = model(v_raw, a_raw)
        picked = predict(fused, protos, tau).argmax(dim=1)
    return [protos.class_ids[int(j)] for j in picked]


def _check_stage(model: MCILModel, t: int) -> None:
    # Expert-free baselines carry task_count 0; the incremental method must
    # have grown exactly t experts for stage t to be meaningful.
    if model.task_count not in (0, t):
        raise ProtocolError(
            f"stage {t} evaluated with {model.task_count} trained tasks"
        )


def evaluate_stage(model: MCILModel, dataset: Dataset, stream: TaskStream,
                   t: int, cfg: TrainConfig) -> StageEval:
    """Score tasks 1..t over the pooled C_{1:t} label space."""
    _check_stage(model, t)
    protos = _seen_prototypes(model, dataset, stream, t, cfg)
    position = {cid: k for k, cid in enumerate(protos.class_ids)}
    correct, total = [], []
    pred_pos: list[int] = []
    true_pos: list[int] = []
    for i in range(1, t + 1):
        ids = stream.task(i).test_samples
        v_raw, a_raw, labels = _batch_tensors(dataset, ids)
        predicted = _predicted_ids(model, protos, v_raw, a_raw, cfg.tau)
        hits = sum(p == int(y) for p, y in zip(predicted, labels))
        correct.append(hits)
        total.append(len(ids))
        pred_pos.extend(position[p] for p in predicted)
        true_pos.extend(position[int(y)] for y in labels)
    conf = confusion_matrix(pred_pos, true_pos, len(protos))
    return StageEval(t=t, correct=tuple(correct), total=tuple(total), confusion=conf)


def evaluate_pre_task(model: MCILModel, dataset: Dataset, stream: TaskStream,
                      t: int, cfg: TrainConfig) -> float:
    """Accuracy on task t test data over C_{1:t}, before task t is trained."""
    if model.task_count > t:
        raise ProtocolError(f"task {t} was already trained")
    protos = _seen_prototypes(model, dataset, stream, t, cfg)
    ids = stream.task(t).test_samples
    v_raw, a_raw, labels = _batch_tensors(dataset, ids)
    predicted = _predicted_ids(model, protos, v_raw, a_raw, cfg.tau)
    return sum(p == int(y) for p, y in zip(predicted, labels)) / len(ids)


def _mean_fused(model: MCILModel, dataset: Dataset, sample_ids) -> np.ndarray:
    v_raw, a_raw, _ = _batch_tensors(dataset, sample_ids)
    with torch.no_grad():
        _, _, fused, _, _ = model(v_raw, a_raw)
    return fused.numpy().mean(axis=0)


def _mean_prototype(model: MCILModel, dataset: Dataset, class_ids,
                    cfg: TrainConfig) -> np.ndarray:
    labels = [_label(dataset, c) for c in class_ids]
    templates = default_templates(cfg.n_templates)
    with torch.no_grad():
        protos = model.prototypes(labels, templates)
    return protos.matrix.numpy().mean(axis=0)


def _stage_similarity(model: MCILModel, dataset: Dataset, stream: TaskStream,
                      t: int, cfg: TrainConfig) -> float:
    if t == 1:
        return task_similarity(1)
    task = stream.task(t)
    previous_train: list[int] = []
    for i in range(1, t):
        previous_train.extend(stream.task(i).train_samples)
    return task_similarity(
        t,
        mean_proto_current=_mean_prototype(model, dataset, task.classes, cfg),
        mean_proto_previous=_mean_prototype(
            model, dataset, stream.classes_up_to(t - 1), cfg),
        mean_feat_current=_mean_fused(model, dataset, task.train_samples),
        mean_feat_previous=_mean_fused(model, dataset, previous_train),
    )


def _final_nmi(model: MCILModel, dataset: Dataset, stream: TaskStream,
               seed: int) -> tuple[float, float]:
    test_ids: list[int] = []
    for t in range(1, len(stream) + 1):
        test_ids.extend(stream.task(t).test_samples)
    v_raw, a_raw, _ = _batch_tensors(dataset, test_ids)
    with torch.no_grad():
        v_feat, a_feat, fused, _, _ = model(v_raw, a_raw)
    k = len(dataset.classes)
    nmi_seed = child_seed(seed, "nmi")
    return (
        fusion_nmi(fused.numpy(), v_feat.numpy(), k, nmi_seed),
        fusion_nmi(fused.numpy(), a_feat.numpy(), k, nmi_seed),
    )


def run_scenario(dataset: Dataset, cfg: RunConfig, checkpoint_dir=None,
                 record_sink=None) -> RunRecord:
    """Run the full protocol and return the completed record.

    `record_sink`, when given, is called with the in-progress record after
    every stage (still flagged incomplete) and once more at the end, so a
    crash mid-run leaves the last persisted snapshot behind.
    """
    if cfg.model.d_v_raw != dataset.d_v_raw or cfg.model.d_a_raw != dataset.d_a_raw:
        raise InvalidConfig(
            f"model expects raw dims ({cfg.model.d_v_raw}, {cfg.model.d_a_raw}), "
            f"dataset provides ({dataset.d_v_raw}, {dataset.d_a_raw})"
        )
    train_cfg = cfg.train
    stream = build_stream(dataset, cfg.T, seed=child_seed(train_cfg.seed, "stream"))
    model = MCILModel(cfg.model)
    matrix = AccuracyMatrix()
    ledger = MetricsLedger(matrix=matrix)
    record = RunRecord(config=cfg, ledger=ledger)

    # Zero-shot accuracies b_t from the untouched model: the FWT reference
    # for every method, and the whole story for the zero_shot baseline.
    for t in range(1, cfg.T + 1):
        matrix.record_zero_shot(
            t, evaluate_pre_task(model, dataset, stream, t, train_cfg))

    for t in range(1, cfg.T + 1):
        started = time.perf_counter()
        if train_cfg.method == "ours":
            model.add_task_expert(t)
        matrix.record_pre_eval(
            t, evaluate_pre_task(model, dataset, stream, t, train_cfg))
        if train_cfg.method == "zero_shot":
            record.epoch_losses.append([])
        else:
            record.epoch_losses.append(
                train_task(model, dataset, stream, t, train_cfg))
        stage = evaluate_stage(model, dataset, stream, t, train_cfg)
        for i in range(1, t + 1):
            matrix.record(t, i, stage.correct[i - 1], stage.total[i - 1])
        bwt, fwt = bwt_fwt(matrix, t)
        ledger.append_stage(StageMetrics(
            t=t,
            acc=matrix.stage_accuracy(t),
            For=forgetting(matrix, t),
            w=_stage_similarity(model, dataset, stream, t, train_cfg),
            BWT=bwt,
            FWT=fwt,
            confusion=stage.confusion,
        ))
        if checkpoint_dir is not None and train_cfg.method != "zero_shot":
            path = save_checkpoint(model, Path(checkpoint_dir) / f"task{t:02d}.ckpt")
            record.checkpoint_paths.append(str(path))
        record.wall_clock.append(time.perf_counter() - started)
        if record_sink is not None:
            record_sink(record)

    ledger.nmi_f_v, ledger.nmi_f_a = _final_nmi(model, dataset, stream,
                                                train_cfg.seed)
    record.incomplete = False
    if record_sink is not None:
        record_sink(record)
    return record
