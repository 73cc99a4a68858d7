"""Three-branch multimodal feature extractor with incremental adapters.

Visual and text branches are small frozen transformer backbones (stand-ins
for a contrastively pre-trained encoder pair) carrying one mixture of
LoRA-decomposed adapter experts per block: each incremental task adds one
zero-initialized expert per mixture, freezes all previous experts, and
widens the router by one gate. The audio branch is a frozen projection.
All parameters are float64 and seeded, so construction is bit-reproducible.
"""

import hashlib
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import (
    DegeneratePrototype,
    InvalidConfig,
    ProtocolError,
    ShapeError,
)
from .fusion import AdaptiveFusion, ConcatFusion
from .losses import DEFAULT_TAU_MI, MICritic, Prototypes
from .scenario import ClassLabel, PromptTemplateSet
from .seeding import child_seed

F64 = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    """Architecture settings; defaults give the 512/1024 feature geometry."""

    d_v_raw: int = 32
    d_a_raw: int = 48
    d_v: int = 512
    d_a: int = 1024
    d_l: int = 512
    width: int = 64
    blocks: int = 2
    heads: int = 4
    ffn_mult: int = 4
    n_tokens: int = 4
    vocab_size: int = 512
    lora_rank: int = 4
    lora_scale: float = 1.0
    router_hidden: int = 32
    critic_dim: int = 128
    tau_mi: float = DEFAULT_TAU_MI
    th: float = 0.8
    strong_modality: str = "visual"
    apply_mask: bool = True
    fusion_kind: str = "adaptive"  # adaptive | concat
    seed: int = 0

    def __post_init__(self):
        counts = {
            "d_v_raw": self.d_v_raw, "d_a_raw": self.d_a_raw, "d_v": self.d_v,
            "d_a": self.d_a, "d_l": self.d_l, "width": self.width,
            "blocks": self.blocks, "heads": self.heads, "ffn_mult": self.ffn_mult,
            "n_tokens": self.n_tokens, "vocab_size": self.vocab_size,
            "lora_rank": self.lora_rank, "router_hidden": self.router_hidden,
            "critic_dim": self.critic_dim,
        }
        for name, value in counts.items():
            if value < 1:
                raise InvalidConfig(f"{name} must be positive, got {value}")
        if self.width % self.heads != 0:
            raise InvalidConfig(f"width {self.width} not divisible by heads {self.heads}")
        if self.d_l != self.d_v:
            raise InvalidConfig(
                f"text and visual feature dims must match for prototype scoring "
                f"(d_l={self.d_l}, d_v={self.d_v})"
            )
        if self.lora_scale <= 0:
            raise InvalidConfig(f"lora_scale must be positive, got {self.lora_scale}")
        if self.fusion_kind not in ("adaptive", "concat"):
            raise InvalidConfig(f"unknown fusion_kind {self.fusion_kind!r}")


def _seeded_linear(d_in: int, d_out: int, gen: torch.Generator,
                   bias_scale: float = 0.0) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, dtype=F64)
    with torch.no_grad():
        layer.weight.copy_(torch.randn(d_out, d_in, generator=gen, dtype=F64) / d_in ** 0.5)
        if bias_scale:
            layer.bias.copy_(bias_scale * torch.randn(d_out, generator=gen, dtype=F64))
        else:
            layer.bias.zero_()
    return layer


def _freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class SelfAttention(nn.Module):
    """Plain multi-head self-attention over a short token sequence."""

    def __init__(self, width: int, heads: int, gen: torch.Generator):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = _seeded_linear(width, 3 * width, gen)
        self.proj = _seeded_linear(width, width, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (b, t, w)
        b, t, w = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (b, t, self.heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)  # (b, h, t, hd)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim ** 0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, w)
        return self.proj(out)


class LoRAExpert(nn.Module):
    """Rank-rho adapter: x -> s * B(Ax). B starts at zero, so a fresh expert
    leaves the host layer's function unchanged."""

    def __init__(self, d: int, rank: int, scale: float, owner_task: int, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.A = nn.Parameter(torch.randn(rank, d, generator=gen, dtype=F64) / d ** 0.5)
        self.B = nn.Parameter(torch.zeros(d, rank, dtype=F64))
        self.scale = scale
        self.owner_task = owner_task
        self.frozen = False

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        self.A.requires_grad_(not frozen)
        self.B.requires_grad_(not frozen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * ((x @ self.A.T) @ self.B.T)


class Router(nn.Module):
    """Single-hidden-layer MLP producing one gate logit per expert.

    Growing by one expert appends a zero row to the output layer, which
    preserves the logits of existing experts bit-exactly.
    """

    def __init__(self, d_in: int, hidden: int, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.hidden = _seeded_linear(d_in, hidden, gen)
        self.out = nn.Linear(hidden, 1, dtype=F64)
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()

    @property
    def n_experts(self) -> int:
        return self.out.out_features

    def grow(self) -> None:
        old = self.out
        new = nn.Linear(old.in_features, old.out_features + 1, dtype=F64)
        with torch.no_grad():
            new.weight.zero_()
            new.bias.zero_()
            new.weight[:-1].copy_(old.weight)
            new.bias[:-1].copy_(old.bias)
        self.out = new

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        logits = self.out(torch.tanh(self.hidden(x)))
        return torch.softmax(logits, dim=-1)


class MoEFeedForward(nn.Module):
    """Frozen FFN plus a gated sum of per-task adapters in parallel.

    forward(u) = FFN(u) + sum_e gate_e(router(mean_tokens(u))) * expert_e(u).
    """

    def __init__(self, width: int, ffn_mult: int, router_hidden: int,
                 gen: torch.Generator, router_seed: int):
        super().__init__()
        self.width = width
        self.fc1 = _seeded_linear(width, ffn_mult * width, gen)
        self.fc2 = _seeded_linear(ffn_mult * width, width, gen)
        self.experts = nn.ModuleList()
        self.router = Router(width, router_hidden, seed=router_seed)
        self._router_live = False  # router participates once experts exist

    def base_ffn(self, u: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(u)))

    def add_expert(self, expert: LoRAExpert) -> None:
        if self._router_live:
            self.router.grow()
        self.experts.append(expert)
        self._router_live = True
        for p in self.router.parameters():  # router trains once experts exist
            p.requires_grad_(True)

    def gates(self, u: torch.Tensor) -> torch.Tensor:
        """(b, E) softmax gate weights from the token-mean of u."""
        return self.router(u.mean(dim=1))

    def forward(self, u: torch.Tensor) -> torch.Tensor:  # (b, t, w)
        if u.ndim != 3 or u.shape[-1] != self.width:
            raise ShapeError(f"MoE layer expects (b, t, {self.width}), got {tuple(u.shape)}")
        out = self.base_ffn(u)
        if self.experts:
            g = self.gates(u)  # (b, E)
            for e, expert in enumerate(self.experts):
                out = out + g[:, e].view(-1, 1, 1) * expert(u)
        return out


class Block(nn.Module):
    """Pre-LN transformer block whose FFN hosts the expert mixture."""

    def __init__(self, width: int, heads: int, ffn_mult: int, router_hidden: int,
                 gen: torch.Generator, router_seed: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width, dtype=F64)
        self.attn = SelfAttention(width, heads, gen)
        self.ln2 = nn.LayerNorm(width, dtype=F64)
        self.moe = MoEFeedForward(width, ffn_mult, router_hidden, gen, router_seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x + self.attn(self.ln1(x))
        return h + self.moe(self.ln2(h))


class _Backbone(nn.Module):
    """Shared block stack + pooling used by the visual and text branches."""

    def __init__(self, cfg: ModelConfig, d_out: int, modality: str):
        super().__init__()
        gen = torch.Generator().manual_seed(child_seed(cfg.seed, "backbone", modality))
        self.blocks = nn.ModuleList(
            Block(cfg.width, cfg.heads, cfg.ffn_mult, cfg.router_hidden, gen,
                  router_seed=child_seed(cfg.seed, "router", modality, b))
            for b in range(cfg.blocks)
        )
        self.out_proj = _seeded_linear(cfg.width, d_out, gen)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:  # (b, t, w) -> (b, d_out)
        h = tokens
        for block in self.blocks:
            h = block(h)
        return self.out_proj(h.mean(dim=1))

    def moe_layers(self) -> list[MoEFeedForward]:
        return [block.moe for block in self.blocks]


class VisualEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(child_seed(cfg.seed, "visual-adapter"))
        self.adapter = _seeded_linear(cfg.d_v_raw, cfg.n_tokens * cfg.width, gen)
        self.backbone = _Backbone(cfg, cfg.d_v, "visual")

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        single = v.ndim == 1
        x = v.unsqueeze(0) if single else v
        if x.ndim != 2 or x.shape[1] != self.cfg.d_v_raw:
            raise ShapeError(
                f"visual input must have dim {self.cfg.d_v_raw}, got {tuple(v.shape)}"
            )
        tokens = self.adapter(x).view(x.shape[0], self.cfg.n_tokens, self.cfg.width)
        out = self.backbone(tokens)
        return out[0] if single else out


class AudioEncoder(nn.Module):
    """Frozen projection with a smooth nonlinearity; never trainable."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(child_seed(cfg.seed, "audio"))
        self.proj = _seeded_linear(cfg.d_a_raw, cfg.d_a, gen, bias_scale=0.1)
        _freeze(self)

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        single = a.ndim == 1
        x = a.unsqueeze(0) if single else a
        if x.ndim != 2 or x.shape[1] != self.cfg.d_a_raw:
            raise ShapeError(
                f"audio input must have dim {self.cfg.d_a_raw}, got {tuple(a.shape)}"
            )
        out = torch.tanh(self.proj(x))
        return out[0] if single else out


def hash_token(token: str, vocab_size: int) -> int:
    """Stable token id from a short hash; independent of the process seed."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % vocab_size


class TextEncoder(nn.Module):
    """Bag-of-hashed-tokens embedding followed by the shared block stack."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(child_seed(cfg.seed, "text-embed"))
        self.embed = nn.Parameter(
            torch.randn(cfg.vocab_size, cfg.width, generator=gen, dtype=F64)
        )
        self.backbone = _Backbone(cfg, cfg.d_l, "text")

    def token_ids(self, text: str) -> list[int]:
        tokens = text.lower().split()
        if not tokens:
            raise ShapeError(f"cannot encode empty text {text!r}")
        return [hash_token(tok, self.cfg.vocab_size) for tok in tokens]

    def forward(self, text: str) -> torch.Tensor:
        ids = torch.tensor(self.token_ids(text), dtype=torch.int64)
        tokens = self.embed[ids].unsqueeze(0)  # (1, t, w)
        return self.backbone(tokens)[0]


@dataclass(frozen=True)
class TextPrototype:
    class_id: int
    vector: torch.Tensor  # unit d_l-vector

    def __post_init__(self):
        norm = float(torch.linalg.vector_norm(self.vector.detach()))
        if abs(norm - 1.0) > 1e-6:
            raise DegeneratePrototype(f"prototype norm {norm} != 1")


class MCILModel(nn.Module):
    """The full model: three encoders, fusion block, and MI critics.

    Everything except the expert mixtures, routers, fusion weights/MLP, and
    critics is frozen at construction. task_count tracks how many experts
    each mixture holds.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = VisualEncoder(cfg)
        self.text = TextEncoder(cfg)
        self.audio = AudioEncoder(cfg)
        if cfg.fusion_kind == "adaptive":
            self.fusion = AdaptiveFusion(
                cfg.d_v, cfg.d_a, th=cfg.th, strong_modality=cfg.strong_modality,
                apply_mask=cfg.apply_mask, seed=child_seed(cfg.seed, "fusion"),
            )
        else:
            self.fusion = ConcatFusion(cfg.d_v, cfg.d_a, seed=child_seed(cfg.seed, "fusion"))
        self.critic_v = self._make_critic("critic-v", cfg.d_v, task=0)
        self.critic_a = self._make_critic("critic-a", cfg.d_a, task=0)
        self.task_count = 0

        # Freeze the backbones; adapters/routers/fusion/critics stay live.
        _freeze(self.visual)
        _freeze(self.text)
        self.text.embed.requires_grad_(False)

    def _make_critic(self, tag: str, d_g: int, task: int) -> MICritic:
        return MICritic(
            self.cfg.d_v, d_g, critic_dim=self.cfg.critic_dim, tau_mi=self.cfg.tau_mi,
            seed=child_seed(self.cfg.seed, tag, task),
        )

    def reset_critics(self, task: int) -> None:
        """Fresh estimator plumbing for each task."""
        self.critic_v = self._make_critic("critic-v", self.cfg.d_v, task)
        self.critic_a = self._make_critic("critic-a", self.cfg.d_a, task)

    def moe_layers(self) -> list[MoEFeedForward]:
        return self.visual.backbone.moe_layers() + self.text.backbone.moe_layers()

    def add_task_expert(self, t: int) -> None:
        """Grow every mixture by one zero-init expert owned by task t."""
        if t != self.task_count + 1:
            raise ProtocolError(
                f"add_task_expert({t}) out of order: model has {self.task_count} experts"
            )
        for tag, layers in (("visual", self.visual.backbone.moe_layers()),
                            ("text", self.text.backbone.moe_layers())):
            for b, layer in enumerate(layers):
                for old in layer.experts:
                    old.set_frozen(True)
                layer.add_expert(
                    LoRAExpert(
                        d=self.cfg.width,
                        rank=self.cfg.lora_rank,
                        scale=self.cfg.lora_scale,
                        owner_task=t,
                        seed=child_seed(self.cfg.seed, "expert", tag, b, t),
                    )
                )
        self.task_count = t

    def encode_visual(self, v: torch.Tensor) -> torch.Tensor:
        return self.visual(v)

    def encode_audio(self, a: torch.Tensor) -> torch.Tensor:
        return self.audio(a)

    def encode_text_prototype(
        self, label: ClassLabel, templates: PromptTemplateSet
    ) -> TextPrototype:
        """Normalize each prompt embedding, average, re-normalize."""
        embeddings = []
        for template in templates.templates:
            e = self.text(template.replace("{}", label.name))
            norm = torch.linalg.vector_norm(e)
            if float(norm.detach()) < 1e-8:
                raise DegeneratePrototype(f"prompt embedding collapsed for {label.name!r}")
            embeddings.append(e / norm)
        mean = torch.stack(embeddings).mean(dim=0)
        norm = torch.linalg.vector_norm(mean)
        if float(norm.detach()) < 1e-8:
            raise DegeneratePrototype(f"prototype for class {label.name!r} has zero mean")
        return TextPrototype(class_id=label.id, vector=mean / norm)

    def prototypes(self, labels, templates: PromptTemplateSet) -> Prototypes:
        protos = [self.encode_text_prototype(lb, templates) for lb in labels]
        return Prototypes(
            class_ids=tuple(p.class_id for p in protos),
            matrix=torch.stack([p.vector for p in protos]),
        )

    def forward(
        self, v_raw: torch.Tensor, a_raw: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Encode and fuse a batch: (v_feat, a_feat, fused, masked, r)."""
        v_feat = self.encode_visual(v_raw)
        a_feat = self.encode_audio(a_raw)
        fused, masked, r = self.fusion.fuse_batch(v_feat, a_feat)
        return v_feat, a_feat, fused, masked, r

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        """The incremental-training set: live experts, routers, fusion, critics."""
        out: dict[str, nn.Parameter] = {}
        for tag, layers in (("visual", self.visual.backbone.moe_layers()),
                            ("text", self.text.backbone.moe_layers())):
            for b, layer in enumerate(layers):
                for expert in layer.experts:
                    if not expert.frozen:
                        out[f"{tag}.block{b}.expert{expert.owner_task}.A"] = expert.A
                        out[f"{tag}.block{b}.expert{expert.owner_task}.B"] = expert.B
                if layer.experts:
                    for name, p in layer.router.named_parameters():
                        out[f"{tag}.block{b}.router.{name}"] = p
        for name, p in self.fusion.named_parameters():
            if p.requires_grad:
                out[f"fusion.{name}"] = p
        for tag, critic in (("critic_v", self.critic_v), ("critic_a", self.critic_a)):
            for name, p in critic.named_parameters():
                out[f"{tag}.{name}"] = p
        return out

    def parameters_for_method(self, method: str) -> dict[str, nn.Parameter]:
        """Optimizer parameter set per training method."""
        if method == "ours":
            return self.trainable_parameters()
        if method == "naive_finetune":
            out: dict[str, nn.Parameter] = {}
            for tag, module in (("visual", self.visual), ("text", self.text)):
                for name, p in module.named_parameters():
                    out[f"{tag}.{name}"] = p
            for name, p in self.fusion.named_parameters():
                out[f"fusion.{name}"] = p
            for tag, critic in (("critic_v", self.critic_v), ("critic_a", self.critic_a)):
                for name, p in critic.named_parameters():
                    out[f"{tag}.{name}"] = p
            return out
        if method == "zero_shot":
            return {}
        raise InvalidConfig(f"unknown method {method!r}")

    def tensor_entries(self) -> list[tuple[str, torch.Tensor, int, bool]]:
        """(name, tensor, owner_task, frozen) for every tensor in the model.

        owner_task 0 marks task-agnostic tensors; frozen mirrors the live
        requires_grad state. Entries are sorted by name so serialization is
        order-stable.
        """
        entries = []
        for name, tensor in list(self.named_parameters()) + list(self.named_buffers()):
            owner = 0
            marker = ".experts."
            if marker in name:
                layer_path = name.split(marker)[0]
                idx = int(name.split(marker)[1].split(".")[0])
                owner = self.get_submodule(layer_path).experts[idx].owner_task
            entries.append((name, tensor, owner, not tensor.requires_grad))
        return sorted(entries, key=lambda e: e[0])
