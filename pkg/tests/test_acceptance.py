"""Release acceptance gates, one test per criterion.

A1  metric implementations agree with independent brute-force oracles
A2  hand-derived spot values for the composite score, loss terms, and softmax
A3  autograd gradients of the loss and fusion pipeline match finite differences
A4  incremental-training protocol invariants on a three-task run
A5  full-scale directional result: ours beats naive fine-tuning and zero-shot
A6  ablation directions: prompt count, adaptive fusion, and the MI loss term
A7  composite metrics stay inside their documented ranges on random ledgers
A8  end-to-end runs are bit-deterministic across processes

The six full-scale configurations behind A5/A6 each run once per session
(shared via the `full_runs` fixture); everything else is toy-scale.
"""

import copy
import json
import math
import os
import subprocess
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from _grad import check_grads
from mcil.checkpoint import load_checkpoint, read_header
from mcil.cli import main as cli_main
from mcil.encoders import ModelConfig
from mcil.fusion import AdaptiveFusion, pearson
from mcil.losses import (
    BatchFeatures,
    MICritic,
    Prototypes,
    mi_estimate,
    predict,
    total_loss,
    weighted_ce,
)
from mcil.metrics import (
    AccuracyMatrix,
    MetricsLedger,
    StageMetrics,
    confusion_matrix,
    metric_m1,
    metric_m2,
    nmi,
)
from mcil.scenario import SyntheticConfig, generate_synthetic
from mcil.trainer import RunConfig, TrainConfig, run_scenario

REPO = Path(__file__).resolve().parents[1]
DEFAULT_CONFIG = REPO / "configs" / "default.yaml"
TOY_CONFIG = REPO / "configs" / "toy.yaml"


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


def stage(t, acc, For, w, BWT=0.0, FWT=0.0):
    return StageMetrics(t=t, acc=acc, For=For, w=w, BWT=BWT, FWT=FWT,
                        confusion=np.zeros((2, 2), dtype=np.int64))


# --------------------------------------------------------------------------
# A1: oracle equivalence
# --------------------------------------------------------------------------

def oracle_pearson(x, y):
    """Pearson correlation from raw covariance sums in plain Python."""
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((xi - mx) * (yi - my) for xi, yi in zip(x, y))
    vx = sum((xi - mx) ** 2 for xi in x)
    vy = sum((yi - my) ** 2 for yi in y)
    return max(-1.0, min(1.0, cov / math.sqrt(vx * vy)))


def oracle_nmi(a, b):
    """NMI from direct entropy sums over the joint label distribution."""
    n = len(a)
    ca, cb, cab = Counter(a), Counter(b), Counter(zip(a, b))

    def entropy(counter):
        return -sum((c / n) * math.log(c / n) for c in counter.values())

    ha, hb = entropy(ca), entropy(cb)
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    mutual = sum(
        (c / n) * math.log((c / n) / ((ca[x] / n) * (cb[y] / n)))
        for (x, y), c in cab.items()
    )
    return min(1.0, max(0.0, mutual / math.sqrt(ha * hb)))


def all_partitions(n):
    """Every partition of n items as a restricted-growth label string."""

    def rec(prefix, bound):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for v in range(bound + 1):
            yield from rec(prefix + [v], max(bound, v + 1))

    yield from rec([], 0)


def test_a1_oracle_equivalence(criterion):
    rng = np.random.Generator(np.random.PCG64(101))

    worst_pearson = 0.0
    for _ in range(1000):
        d = int(rng.integers(2, 33))
        x, y = rng.normal(size=d), rng.normal(size=d)
        got = pearson(torch.from_numpy(x), torch.from_numpy(y))
        worst_pearson = max(worst_pearson, abs(got - oracle_pearson(x, y)))

    worst_nmi, nmi_pairs = 0.0, 0
    for n in range(1, 7):
        parts = list(all_partitions(n))
        for a in parts:
            for b in parts:
                worst_nmi = max(worst_nmi, abs(nmi(a, b) - oracle_nmi(a, b)))
                nmi_pairs += 1

    C = 7
    preds = rng.integers(0, C, size=400)
    trues = rng.integers(0, C, size=400)
    conf = confusion_matrix(preds, trues, C)
    by_hand = np.zeros((C, C), dtype=np.int64)
    for p, t in zip(preds, trues):
        by_hand[t, p] += 1
    conf_exact = np.array_equal(conf, by_hand)
    acc_err = abs(conf.trace() / 400 - float(np.mean(preds == trues)))

    matrix = AccuracyMatrix()
    counts = [(3, 8), (5, 9)]
    for i, (c, n) in enumerate(counts, start=1):
        matrix.record(2, i, c, n)
    pooled_err = abs(matrix.stage_accuracy(2) - (3 + 5) / (8 + 9))
    cell_err = max(abs(matrix.get(2, i) - c / n)
                   for i, (c, n) in enumerate(counts, start=1))

    ok = (worst_pearson <= 1e-6 and worst_nmi <= 1e-6 and conf_exact
          and acc_err <= 1e-12 and pooled_err <= 1e-12 and cell_err <= 1e-12)
    detail = (f"pearson max err {worst_pearson:.1e} over 1000 pairs; "
              f"nmi max err {worst_nmi:.1e} over {nmi_pairs} partition pairs; "
              f"confusion/accuracy recount err {max(acc_err, pooled_err, cell_err):.1e}")
    assert criterion("A1", ok, detail), detail


# --------------------------------------------------------------------------
# A2: formula spot values
# --------------------------------------------------------------------------

def test_a2_formula_spot_values(criterion):
    ledger = MetricsLedger()
    ledger.append_stage(stage(1, acc=0.5, For=20.0, w=0.5))
    m1 = metric_m1(ledger)

    wce = float(weighted_ce(t64([[1.0, 0.5], [0.5, 1.0]]), t64([1.0, 2.0])))

    protos = Prototypes((0, 1), torch.eye(2, dtype=torch.float64))
    probs = predict(t64([1.0, 0.0]), protos, tau=1.0)

    mi = float(mi_estimate(torch.eye(2, dtype=torch.float64),
                           torch.eye(2, dtype=torch.float64),
                           MICritic.identity(2, tau_mi=1.0)).detach())

    checks = [
        abs(m1 - 45.0) <= 1e-9,
        abs(wce - 1.125) <= 1e-9,
        abs(float(probs[0]) - 0.7311) <= 1e-4,
        abs(float(probs[1]) - 0.2689) <= 1e-4,
        abs(mi - 0.3799) <= 1e-4,
    ]
    ok = all(checks)
    detail = (f"m1 {m1:.6f} (want 45); weighted-ce {wce:.6f} (want 1.125); "
              f"softmax [{float(probs[0]):.4f}, {float(probs[1]):.4f}] "
              f"(want [0.7311, 0.2689]); mi {mi:.4f} (want 0.3799)")
    assert criterion("A2", ok, detail), detail


# --------------------------------------------------------------------------
# A3: gradient checks against central finite differences
# --------------------------------------------------------------------------

def test_a3_gradient_checks(criterion):
    rng = np.random.Generator(np.random.PCG64(19))
    v = torch.from_numpy(rng.normal(size=(3, 4))).requires_grad_(True)
    a = torch.from_numpy(rng.normal(size=(3, 4))).requires_grad_(True)
    f = torch.from_numpy(rng.normal(size=(3, 4))).requires_grad_(True)
    proto_raw = torch.from_numpy(rng.normal(size=(2, 4))).requires_grad_(True)
    labels = torch.tensor([0, 1, 0])
    cv = MICritic(4, 4, critic_dim=3, seed=3)
    ca = MICritic(4, 4, critic_dim=3, seed=4)

    def loss_objective():
        protos = Prototypes(
            (0, 1), proto_raw / torch.linalg.vector_norm(proto_raw, dim=1, keepdim=True)
        )
        batch = BatchFeatures(v_feat=v, a_feat=a, f_fusion=f,
                              labels=labels, prototypes=protos)
        return total_loss(batch, 0.7, 1.0, cv, ca)

    loss_leaves = {
        "v": v, "a": a, "f": f, "protos": proto_raw,
        "cv.map_f": cv.map_f.weight, "cv.map_g": cv.map_g.weight,
        "ca.map_f": ca.map_f.weight, "ca.map_g": ca.map_g.weight,
    }

    torch.manual_seed(0)
    fusion = AdaptiveFusion(d_v=4, d_a=3, apply_mask=False, seed=1)
    fv = torch.from_numpy(rng.normal(size=(3, 4))).requires_grad_(True)
    fa = torch.from_numpy(rng.normal(size=(3, 3)))

    def fusion_objective():
        fused, _, _ = fusion.fuse_batch(fv, fa)
        return fused.pow(2).sum()

    fusion_leaves = {
        "w_v": fusion.w_v, "w_a": fusion.w_a,
        "mlp_in.weight": fusion.mlp_in.weight, "mlp_in.bias": fusion.mlp_in.bias,
        "mlp_out.weight": fusion.mlp_out.weight, "mlp_out.bias": fusion.mlp_out.bias,
        "v_feat": fv,
    }

    n_checked = sum(p.numel() for p in loss_leaves.values())
    n_checked += sum(p.numel() for p in fusion_leaves.values())
    try:
        check_grads(loss_objective, loss_leaves, rtol=1e-4)
        check_grads(fusion_objective, fusion_leaves, rtol=1e-4)
    except AssertionError as exc:
        criterion("A3", False, f"finite-difference mismatch: {exc}")
        raise
    detail = (f"combined loss and fusion pipeline: {n_checked} gradient "
              f"elements within rel 1e-4 of central differences")
    assert criterion("A3", True, detail)


# --------------------------------------------------------------------------
# A4: protocol invariants on a three-task toy run
# --------------------------------------------------------------------------

def test_a4_protocol_invariants(criterion, tmp_path):
    dataset = generate_synthetic(SyntheticConfig(
        n_classes=6, samples_per_class=8, d_v_raw=7, d_a_raw=5,
        sigma_v=0.1, sigma_a=0.3, rho=1.0, seed=5,
    ))
    cfg = RunConfig(
        model=ModelConfig(d_v_raw=7, d_a_raw=5, d_v=12, d_a=10, d_l=12,
                          width=8, blocks=2, heads=2, ffn_mult=2, n_tokens=3,
                          vocab_size=32, lora_rank=2, router_hidden=6,
                          critic_dim=8, seed=1),
        train=TrainConfig(epochs=2, batch_size=8, n_templates=2, seed=0),
        T=3,
    )
    run_scenario(dataset, cfg, checkpoint_dir=tmp_path)

    rows2 = {r["name"]: r for r in read_header(tmp_path / "task02.ckpt")["tensors"]}
    rows3 = {r["name"]: r for r in read_header(tmp_path / "task03.ckpt")["tensors"]}

    frozen_moved = [
        name for name, row in rows2.items()
        if row["frozen"] and rows3[name]["sha256"] != row["sha256"]
    ]
    old_expert_rows = [n for n, r in rows3.items() if r["owner_task"] in (1, 2)]
    expert_moved = [
        name for name in old_expert_rows if rows3[name]["sha256"] != rows2[name]["sha256"]
    ]

    model = load_checkpoint(tmp_path / "task03.ckpt")
    rng = np.random.Generator(np.random.PCG64(7))
    gate_ok = True
    for layer in model.moe_layers():
        u = torch.from_numpy(rng.normal(size=(3, cfg.model.n_tokens, cfg.model.width)))
        g = layer.gates(u)
        gate_ok &= g.shape == (3, 3)
        gate_ok &= bool(torch.all(g >= 0))
        gate_ok &= bool(torch.allclose(g.sum(dim=1), torch.ones(3, dtype=torch.float64),
                                       atol=1e-12))

    ids = dataset.sample_ids_for(dataset.class_ids, "test")[:4]
    v_raw = torch.from_numpy(np.stack([dataset.by_id(i).visual for i in ids]).copy())
    a_raw = torch.from_numpy(np.stack([dataset.by_id(i).audio for i in ids]).copy())
    with torch.no_grad():
        _, _, fused1, masked1, _ = model(v_raw, a_raw)
        _, _, fused2, masked2, _ = model(
            v_raw, a_raw + 0.7 * torch.from_numpy(rng.normal(size=a_raw.shape)))
    mask_ok = bool(masked1.all()) and bool(masked2.all())
    invariant = bool(torch.equal(fused1, fused2))

    ok = (not frozen_moved and not expert_moved and len(old_expert_rows) == 16
          and gate_ok and mask_ok and invariant)
    detail = (f"{len([r for r in rows2.values() if r['frozen']])} frozen and "
              f"{len(old_expert_rows)} task-1/2 expert tensors bit-identical "
              f"across the task-3 stage; router gates sum to 1; masked fusion "
              f"ignores audio perturbation")
    if frozen_moved or expert_moved:
        detail = f"tensors changed across stage 3: {sorted(frozen_moved + expert_moved)[:4]}"
    assert criterion("A4", ok, detail), detail


# --------------------------------------------------------------------------
# A5 / A6: full-scale directional results (one run per arm per session)
# --------------------------------------------------------------------------

ARMS = {
    "ours": {},
    "naive_finetune": {("method",): "naive_finetune"},
    "zero_shot": {("method",): "zero_shot"},
    "single_template": {("train", "n_templates"): 1},
    "concat_fusion": {("model", "fusion_kind"): "concat"},
    "ce_only": {("train", "alpha"): 1.0},
}


@pytest.fixture(scope="session")
def full_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("full_runs")
    base = yaml.safe_load(DEFAULT_CONFIG.read_text())
    docs = {}
    for tag, patch in ARMS.items():
        cfg = copy.deepcopy(base)
        for path, value in patch.items():
            node = cfg
            for key in path[:-1]:
                node = node[key]
            node[path[-1]] = value
        cfg_path = root / f"{tag}.yaml"
        cfg_path.write_text(yaml.safe_dump(cfg))
        out = root / tag
        rc = cli_main(["run", "--config", str(cfg_path), "--out", str(out)])
        assert rc == 0, f"arm {tag} exited with {rc}"
        docs[tag] = json.loads((out / "results.json").read_text())
    return docs


def test_a5_beats_baselines(criterion, full_runs):
    ours = full_runs["ours"]
    naive = full_runs["naive_finetune"]
    zs = full_runs["zero_shot"]

    margin_naive = ours["acc_avg"] - naive["acc_avg"]
    margin_zs = ours["acc_avg"] - zs["acc_avg"]
    for_ours = ours["per_stage"][-1]["For"]
    for_naive = naive["per_stage"][-1]["For"]

    ok = margin_naive >= 0.02 and margin_zs >= 0.02 and for_ours < for_naive
    detail = (f"acc_avg ours {ours['acc_avg']:.4f} vs naive {naive['acc_avg']:.4f} "
              f"({100 * margin_naive:+.1f}pp, need >= +2) and zero-shot "
              f"{zs['acc_avg']:.4f} ({100 * margin_zs:+.1f}pp, need >= +2); "
              f"final forgetting {for_ours:.2f} < {for_naive:.2f}")
    assert criterion("A5", ok, detail), detail


def test_a6_ablation_directions(criterion, full_runs):
    ours = full_runs["ours"]
    n1 = full_runs["single_template"]
    concat = full_runs["concat_fusion"]
    ce_only = full_runs["ce_only"]

    a = ours["acc_avg"] >= n1["acc_avg"]
    b = ours["acc_avg"] > concat["acc_avg"]
    c = ours["M2"] >= ce_only["M2"]

    ok = a and b and c
    detail = (f"35 vs 1 template acc_avg {ours['acc_avg']:.4f} >= {n1['acc_avg']:.4f}; "
              f"adaptive vs concat {ours['acc_avg']:.4f} > {concat['acc_avg']:.4f}; "
              f"M2 with vs without MI term {ours['M2']:.4f} >= {ce_only['M2']:.4f}")
    assert criterion("A6", ok, detail), detail


# --------------------------------------------------------------------------
# A7: composite metric ranges on random ledgers
# --------------------------------------------------------------------------

def test_a7_metric_ranges(criterion):
    rng = np.random.Generator(np.random.PCG64(123))
    violations = 0
    for _ in range(1000):
        ledger = MetricsLedger()
        for t in range(1, int(rng.integers(1, 7)) + 1):
            ledger.append_stage(stage(
                t, acc=float(rng.uniform()), For=float(rng.uniform(0, 100)),
                w=float(rng.uniform()), BWT=float(rng.uniform(-1, 1)),
                FWT=float(rng.uniform(-1, 1)),
            ))
        ledger.nmi_f_v = float(rng.uniform())
        ledger.nmi_f_a = float(rng.uniform())
        m1, m2 = metric_m1(ledger), metric_m2(ledger)
        if not (0.0 <= m1 <= 100.0 and 0.0 <= m2 <= 1.0):
            violations += 1
    ok = violations == 0
    detail = (f"{violations} range violations in 1000 random ledgers "
              f"(m1 in [0, 100], m2 in [0, 1])")
    assert criterion("A7", ok, detail), detail


# --------------------------------------------------------------------------
# A8: cross-process determinism
# --------------------------------------------------------------------------

def test_a8_run_determinism(criterion, tmp_path):
    env = os.environ.copy()
    env.pop("MCIL_SEED", None)
    docs = []
    for i in (1, 2):
        out = tmp_path / f"run{i}"
        proc = subprocess.run(
            [sys.executable, "-m", "mcil", "run",
             "--config", str(TOY_CONFIG), "--out", str(out)],
            capture_output=True, text=True, env=env,
        )
        assert proc.returncode == 0, proc.stderr
        docs.append(json.loads((out / "results.json").read_text()))
    for doc in docs:
        doc.pop("timestamp")
    ok = docs[0] == docs[1]
    detail = (f"two isolated processes agree on every result field "
              f"except the timestamp (run_id {docs[0]['run_id']})")
    if not ok:
        diff = [k for k in docs[0] if docs[0][k] != docs[1][k]]
        detail = f"results differ between processes in fields: {diff}"
    assert criterion("A8", ok, detail), detail
