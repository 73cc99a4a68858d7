"""Training objectives.

Classification is cosine similarity against unit text prototypes followed
by a softmax (optionally temperature-scaled). The classification term is a
similarity-weighted cross-entropy: sample i's CE counts proportionally to
how similar its visual feature is to the rest of the batch. The auxiliary
term is a contrastive in-batch lower bound on the mutual information
between the fused feature and each modality feature, with a trainable
linear critic per pairing. The total is the affine mixture
alpha * L_CW + (1 - alpha) * L_MI.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .errors import (
    BatchTooSmall,
    ConfigError,
    DegenerateFeature,
    InvalidConfig,
    ShapeError,
)

EPS = 1e-12
PROB_FLOOR = 1e-12  # CE clamp: keeps confident mistakes finite
DEFAULT_TAU = 1.0
DEFAULT_TAU_MI = 0.07


@dataclass(frozen=True)
class Prototypes:
    """Unit-norm class prototypes in stream order (defines the logit layout)."""

    class_ids: tuple[int, ...]
    matrix: torch.Tensor  # (C, d), rows unit-norm

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.class_ids):
            raise ShapeError("prototype matrix must have one row per class id")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise InvalidConfig("duplicate class ids in prototype set")
        if len(self.class_ids) == 0:
            raise InvalidConfig("prototype set is empty")
        norms = torch.linalg.vector_norm(self.matrix, dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-6):
            raise InvalidConfig("prototype rows must be unit-norm")

    def __len__(self) -> int:
        return len(self.class_ids)

    def index_of(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise ConfigError(f"no prototype for class {class_id}") from None


@dataclass(frozen=True)
class BatchFeatures:
    """Paired per-sample features plus the prototype set for C_{1:t}."""

    v_feat: torch.Tensor  # (n, d_v)
    a_feat: torch.Tensor  # (n, d_a)
    f_fusion: torch.Tensor  # (n, d_v)
    labels: torch.Tensor  # (n,) class ids
    prototypes: Prototypes

    def __post_init__(self):
        n = self.labels.shape[0]
        if n < 1:
            raise ShapeError("batch must contain at least one sample")
        for tag, x in (("v_feat", self.v_feat), ("a_feat", self.a_feat),
                       ("f_fusion", self.f_fusion)):
            if x.ndim != 2 or x.shape[0] != n:
                raise ShapeError(f"{tag} must be (n, d) with n={n}, got {tuple(x.shape)}")
            if not torch.all(torch.isfinite(x)):
                raise ShapeError(f"{tag} contains NaN/Inf")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])


def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if bool((norms < EPS).any()):
        raise DegenerateFeature(f"zero-norm {what}")
    return x / norms


def predict(f_fusion: torch.Tensor, prototypes: Prototypes, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Softmax over cosine similarities to the class prototypes.

    Accepts a single (d,) feature or an (n, d) batch; returns probabilities
    of matching shape over len(prototypes) classes.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    single = f_fusion.ndim == 1
    f = f_fusion.unsqueeze(0) if single else f_fusion
    if f.shape[1] != prototypes.matrix.shape[1]:
        raise ShapeError(
            f"feature dim {f.shape[1]} != prototype dim {prototypes.matrix.shape[1]}"
        )
    logits = _unit_rows(f, "fused feature") @ prototypes.matrix.T / tau
    probs = torch.softmax(logits, dim=1)
    return probs[0] if single else probs


def pairwise_weight(v_i: torch.Tensor, v_j: torch.Tensor) -> float:
    """(cos(v_i, v_j) + 1) / 2, in [0, 1], symmetric."""
    ui = _unit_rows(v_i.unsqueeze(0), "visual feature")[0]
    uj = _unit_rows(v_j.unsqueeze(0), "visual feature")[0]
    cos = torch.clamp(ui @ uj, -1.0, 1.0)
    return float((cos + 1.0) / 2.0)


def pairwise_weights(v_feat: torch.Tensor) -> torch.Tensor:
    """All-pairs weight matrix (n, n) from batch visual features."""
    u = _unit_rows(v_feat, "visual feature")
    cos = torch.clamp(u @ u.T, -1.0, 1.0)
    return (cos + 1.0) / 2.0


def cross_entropy(probs: torch.Tensor, label_idx: torch.Tensor) -> torch.Tensor:
    """Per-sample -log p[label], probabilities floored at 1e-12."""
    picked = probs.gather(1, label_idx.unsqueeze(1)).squeeze(1)
    return -torch.log(torch.clamp(picked, min=PROB_FLOOR))


def weighted_ce(weights: torch.Tensor, ce: torch.Tensor) -> torch.Tensor:
    """(1/n^2) sum_i sum_j weights[i, j] * ce[i]."""
    n = ce.shape[0]
    if weights.shape != (n, n):
        raise ShapeError(f"weight matrix must be ({n}, {n}), got {tuple(weights.shape)}")
    return (weights.sum(dim=1) * ce).sum() / (n * n)


def loss_cw(batch: BatchFeatures, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Similarity-weighted cross-entropy over the batch."""
    label_idx = torch.tensor(
        [batch.prototypes.index_of(int(c)) for c in batch.labels], dtype=torch.int64
    )
    probs = predict(batch.f_fusion, batch.prototypes, tau)
    ce = cross_entropy(probs, label_idx)
    return weighted_ce(pairwise_weights(batch.v_feat), ce)


class MICritic(nn.Module):
    """Linear critic pair scoring (f, g) rows by cosine in a shared space."""

    def __init__(self, d_f: int, d_g: int, critic_dim: int = 128,
                 tau_mi: float = DEFAULT_TAU_MI, seed: int = 0):
        super().__init__()
        if tau_mi <= 0:
            raise InvalidConfig(f"tau_mi must be positive, got {tau_mi}")
        self.tau_mi = tau_mi
        gen = torch.Generator().manual_seed(seed)
        self.map_f = nn.Linear(d_f, critic_dim, bias=False, dtype=torch.float64)
        self.map_g = nn.Linear(d_g, critic_dim, bias=False, dtype=torch.float64)
        with torch.no_grad():
            for layer in (self.map_f, self.map_g):
                fan_in = layer.weight.shape[1]
                layer.weight.copy_(
                    torch.randn(*layer.weight.shape, generator=gen, dtype=torch.float64)
                    / fan_in ** 0.5
                )

    @classmethod
    def identity(cls, d: int, tau_mi: float = 1.0) -> "MICritic":
        """Critic whose maps are the identity; handy for closed-form checks."""
        critic = cls(d, d, critic_dim=d, tau_mi=tau_mi)
        with torch.no_grad():
            critic.map_f.weight.copy_(torch.eye(d, dtype=torch.float64))
            critic.map_g.weight.copy_(torch.eye(d, dtype=torch.float64))
        return critic

    def scores(self, f: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        """(n, n) cosine score matrix between mapped rows of f and g."""
        uf = self.map_f(f)
        ug = self.map_g(g)
        uf = uf / torch.clamp(torch.linalg.vector_norm(uf, dim=1, keepdim=True), min=EPS)
        ug = ug / torch.clamp(torch.linalg.vector_norm(ug, dim=1, keepdim=True), min=EPS)
        return uf @ ug.T


def mi_estimate(f: torch.Tensor, g: torch.Tensor, critic: MICritic) -> torch.Tensor:
    """Contrastive in-batch lower bound on I(f; g); always <= log n.

    I_hat = (1/n) sum_i log[ n * exp(s_ii / tau) / sum_j exp(s_ij / tau) ].
    """
    if f.ndim != 2 or g.ndim != 2 or f.shape[0] != g.shape[0]:
        raise ShapeError("f and g must be (n, d) with paired rows")
    n = f.shape[0]
    if n < 2:
        raise BatchTooSmall(f"mutual information estimate needs n >= 2, got {n}")
    s = critic.scores(f, g) / critic.tau_mi
    diag = s.diagonal()
    lse = torch.logsumexp(s, dim=1)
    return (torch.log(torch.tensor(float(n), dtype=torch.float64)) + diag - lse).mean()


def loss_mi(batch: BatchFeatures, critic_v: MICritic, critic_a: MICritic) -> torch.Tensor:
    """-I_hat(f_fusion; v_feat) - I_hat(f_fusion; a_feat)."""
    return -mi_estimate(batch.f_fusion, batch.v_feat, critic_v) - mi_estimate(
        batch.f_fusion, batch.a_feat, critic_a
    )


def total_loss(
    batch: BatchFeatures,
    alpha: float,
    tau: float,
    critic_v: MICritic,
    critic_a: MICritic,
) -> torch.Tensor:
    """alpha * L_CW + (1 - alpha) * L_MI."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    l_cw = loss_cw(batch, tau)
    if alpha == 1.0:
        return l_cw
    return alpha * l_cw + (1.0 - alpha) * loss_mi(batch, critic_v, critic_a)
