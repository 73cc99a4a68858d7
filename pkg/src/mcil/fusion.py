"""Adaptive audio-visual fusion.

The fusion block projects audio into the visual space through a frozen
linear map, gates the weak modality per sample by the Pearson correlation
of the two features, forms a learnable weighted 2-token sequence, attends
over it with the visual feature as the single query, and refines the
result with a trainable MLP. All math is float64.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .errors import InvalidConfig, MaskError, ShapeError, ZeroVariance

EPS = 1e-12

FUSE_BOTH = "fuse_both"
STRONG_ONLY = "strong_only"


@dataclass(frozen=True)
class FusedFeature:
    """Fused vector plus the per-sample gating evidence."""

    vector: torch.Tensor  # d_v
    masked: bool  # True when the weak modality was excluded from attention
    r: float  # Pearson coefficient used by the gate

    def __post_init__(self):
        if not torch.all(torch.isfinite(self.vector)):
            raise ShapeError("fused feature contains NaN/Inf")
        if not -1.0 <= self.r <= 1.0:
            raise ShapeError(f"pearson coefficient {self.r} outside [-1, 1]")


def pearson(v_feat: torch.Tensor, a_feat: torch.Tensor) -> float:
    """Pearson correlation of two equal-length vectors, clamped to [-1, 1].

    Raises ZeroVariance when either vector is constant; callers gate with
    r = 0 in that case.
    """
    if v_feat.ndim != 1 or a_feat.ndim != 1 or v_feat.shape != a_feat.shape:
        raise ShapeError(
            f"pearson needs two equal-length vectors, got {tuple(v_feat.shape)} "
            f"and {tuple(a_feat.shape)}"
        )
    if v_feat.numel() < 2:
        raise ShapeError("pearson needs vectors of length >= 2")
    dv = v_feat - v_feat.mean()
    da = a_feat - a_feat.mean()
    nv, na = torch.linalg.vector_norm(dv), torch.linalg.vector_norm(da)
    if nv < EPS or na < EPS:
        raise ZeroVariance("constant input vector has no correlation")
    r = (dv * da).sum() / (nv * na)
    return float(torch.clamp(r, -1.0, 1.0))


def pearson_rows(V: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    """Row-wise Pearson for (n, d) pairs; zero-variance rows yield r = 0."""
    dv = V - V.mean(dim=1, keepdim=True)
    da = A - A.mean(dim=1, keepdim=True)
    nv = torch.linalg.vector_norm(dv, dim=1)
    na = torch.linalg.vector_norm(da, dim=1)
    den = nv * na
    num = (dv * da).sum(dim=1)
    r = torch.where(den < EPS, torch.zeros_like(num), num / torch.clamp(den, min=EPS))
    return torch.clamp(r, -1.0, 1.0)


def gate_modalities(r: float, th: float) -> str:
    """Step gate: strong_only iff r < th, fuse_both iff r >= th."""
    if not -1.0 <= r <= 1.0:
        raise ShapeError(f"r={r} outside [-1, 1]")
    return STRONG_ONLY if r < th else FUSE_BOTH


def weighted_concat(
    v_feat: torch.Tensor,
    a_proj: torch.Tensor,
    w_v: torch.Tensor,
    w_a: torch.Tensor,
) -> torch.Tensor:
    """Stack the weighted modality features as a 2-token sequence (2, d_v)."""
    if v_feat.shape != a_proj.shape or v_feat.ndim != 1:
        raise ShapeError(
            f"weighted_concat needs equal-length vectors, got {tuple(v_feat.shape)} "
            f"and {tuple(a_proj.shape)}"
        )
    return torch.stack([w_v * v_feat, w_a * a_proj])


def cross_attention(
    query: torch.Tensor,
    tokens: torch.Tensor,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Single-query dot-product attention over a short token sequence.

    scores_j = query . token_j / sqrt(d_k) with d_k the token width; masked
    tokens are excluded from the softmax. mask[j] = True means "exclude".
    """
    if tokens.ndim != 2 or query.ndim != 1 or tokens.shape[1] != query.shape[0]:
        raise ShapeError(
            f"query {tuple(query.shape)} incompatible with tokens {tuple(tokens.shape)}"
        )
    d_k = tokens.shape[1]
    scores = tokens @ query / d_k ** 0.5
    if mask is not None:
        if bool(mask.all()):
            raise MaskError("attention needs at least one unmasked token")
        scores = scores.masked_fill(mask, float("-inf"))
    attn = torch.softmax(scores, dim=0)
    return attn @ tokens


class AdaptiveFusion(nn.Module):
    """Pearson-gated fusion of a strong and a weak modality feature.

    P (d_a x d_v) is frozen at initialization. w_v, w_a and the residual
    refinement MLP are trainable. The MLP starts as the exact identity
    (zero-initialized output layer), so an untrained fusion block passes
    the attended feature through unchanged.
    """

    def __init__(
        self,
        d_v: int,
        d_a: int,
        th: float = 0.8,
        strong_modality: str = "visual",
        apply_mask: bool = True,
        seed: int = 0,
    ):
        super().__init__()
        if d_v < 2 or d_a < 1:
            raise InvalidConfig(f"bad fusion dims d_v={d_v}, d_a={d_a}")
        if not -1.0 <= th <= 1.0:
            raise InvalidConfig(f"threshold must be in [-1, 1], got {th}")
        if strong_modality not in ("visual", "audio", "auto"):
            raise InvalidConfig(f"unknown strong_modality {strong_modality!r}")
        self.d_v = d_v
        self.d_a = d_a
        self.th = th
        self.strong_modality = strong_modality
        self.apply_mask = apply_mask
        # resolved per task when strong_modality == "auto"
        self.active_strong = "visual" if strong_modality == "auto" else strong_modality

        gen = torch.Generator().manual_seed(seed)
        P = torch.randn(d_a, d_v, generator=gen, dtype=torch.float64) / d_a ** 0.5
        self.register_buffer("P", P)

        self.w_v = nn.Parameter(torch.tensor(1.0, dtype=torch.float64))
        self.w_a = nn.Parameter(torch.tensor(1.0, dtype=torch.float64))

        self.mlp_in = nn.Linear(d_v, d_v, dtype=torch.float64)
        self.mlp_out = nn.Linear(d_v, d_v, dtype=torch.float64)
        with torch.no_grad():
            self.mlp_in.weight.copy_(
                torch.randn(d_v, d_v, generator=gen, dtype=torch.float64) / d_v ** 0.5
            )
            self.mlp_in.bias.zero_()
            self.mlp_out.weight.zero_()
            self.mlp_out.bias.zero_()

    def set_active_strong(self, modality: str) -> None:
        if modality not in ("visual", "audio"):
            raise InvalidConfig(f"strong modality must be visual or audio, got {modality!r}")
        if self.strong_modality != "auto" and modality != self.strong_modality:
            raise InvalidConfig("strong modality is fixed by configuration")
        self.active_strong = modality

    def refine(self, x: torch.Tensor) -> torch.Tensor:
        """Residual MLP; identity at initialization."""
        return x + self.mlp_out(torch.tanh(self.mlp_in(x)))

    def project_audio(self, a_feat: torch.Tensor) -> torch.Tensor:
        if a_feat.shape[-1] != self.d_a:
            raise ShapeError(f"audio feature dim {a_feat.shape[-1]} != d_a={self.d_a}")
        return a_feat @ self.P

    def fuse_batch(
        self, v_feat: torch.Tensor, a_feat: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Fuse (n, d_v) visual with (n, d_a) audio features.

        Returns (fused (n, d_v), masked (n,) bool, r (n,)). The gate is a
        step function of r, so it runs outside the autodiff graph.
        """
        if v_feat.ndim != 2 or v_feat.shape[1] != self.d_v:
            raise ShapeError(f"visual batch must be (n, {self.d_v}), got {tuple(v_feat.shape)}")
        if a_feat.ndim != 2 or a_feat.shape[0] != v_feat.shape[0]:
            raise ShapeError("visual and audio batches must pair row-wise")
        a_proj = self.project_audio(a_feat)

        with torch.no_grad():
            r = pearson_rows(v_feat, a_proj)
            weak_gated = r < self.th
            weak_w = self.w_a if self.active_strong == "visual" else self.w_v
            weak_off = weak_gated | (float(weak_w) == 0.0)
            if not self.apply_mask:
                weak_off = torch.zeros_like(weak_off)

        tokens = torch.stack([self.w_v * v_feat, self.w_a * a_proj], dim=1)  # (n, 2, d_v)
        weak_idx = 1 if self.active_strong == "visual" else 0
        mask = torch.zeros(v_feat.shape[0], 2, dtype=torch.bool)
        mask[:, weak_idx] = weak_off

        d_k = self.d_v
        scores = (tokens @ v_feat.unsqueeze(2)).squeeze(2) / d_k ** 0.5  # (n, 2)
        scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=1)
        attended = (attn.unsqueeze(1) @ tokens).squeeze(1)  # (n, d_v)
        return self.refine(attended), weak_off, r

    def fuse(self, v_feat: torch.Tensor, a_feat: torch.Tensor) -> FusedFeature:
        """Single-sample fusion; see fuse_batch."""
        if v_feat.ndim != 1 or a_feat.ndim != 1:
            raise ShapeError("fuse takes single feature vectors; use fuse_batch for batches")
        fused, masked, r = self.fuse_batch(v_feat.unsqueeze(0), a_feat.unsqueeze(0))
        return FusedFeature(vector=fused[0], masked=bool(masked[0]), r=float(r[0]))


class ConcatFusion(nn.Module):
    """Ablation: plain concatenation + MLP, no gating, no attention."""

    def __init__(self, d_v: int, d_a: int, seed: int = 0):
        super().__init__()
        self.d_v = d_v
        self.d_a = d_a
        gen = torch.Generator().manual_seed(seed)
        P = torch.randn(d_a, d_v, generator=gen, dtype=torch.float64) / d_a ** 0.5
        self.register_buffer("P", P)
        self.mlp_in = nn.Linear(2 * d_v, d_v, dtype=torch.float64)
        self.mlp_out = nn.Linear(d_v, d_v, dtype=torch.float64)
        with torch.no_grad():
            for layer in (self.mlp_in, self.mlp_out):
                fan_in = layer.weight.shape[1]
                layer.weight.copy_(
                    torch.randn(*layer.weight.shape, generator=gen, dtype=torch.float64)
                    / fan_in ** 0.5
                )
                layer.bias.zero_()

    def fuse_batch(
        self, v_feat: torch.Tensor, a_feat: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if v_feat.ndim != 2 or v_feat.shape[1] != self.d_v:
            raise ShapeError(f"visual batch must be (n, {self.d_v}), got {tuple(v_feat.shape)}")
        if a_feat.shape[-1] != self.d_a:
            raise ShapeError(f"audio feature dim {a_feat.shape[-1]} != d_a={self.d_a}")
        a_proj = a_feat @ self.P
        flat = torch.cat([v_feat, a_proj], dim=1)
        fused = self.mlp_out(torch.tanh(self.mlp_in(flat)))
        with torch.no_grad():
            r = pearson_rows(v_feat, a_proj)
        masked = torch.zeros(v_feat.shape[0], dtype=torch.bool)
        return fused, masked, r

    def fuse(self, v_feat: torch.Tensor, a_feat: torch.Tensor) -> FusedFeature:
        fused, masked, r = self.fuse_batch(v_feat.unsqueeze(0), a_feat.unsqueeze(0))
        return FusedFeature(vector=fused[0], masked=bool(masked[0]), r=float(r[0]))
