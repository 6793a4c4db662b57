"""Structure stream: metadata-queried multi-scale attention with FiLM calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .backbones import global_avg_pool, make_encoder

D_VIS = 64
N_SCALES = 3
Z_DIM = D_VIS * N_SCALES  # 192
GATE_INIT = -2.0


def spatial_attention(q: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """Softmax over all positions of ``q . k_ij / sqrt(d)``.

    ``q`` is ``(B, d)``, ``keys`` ``(B, d, H, W)``; returns ``(B, H, W)``.
    """
    b, d, h, w = keys.shape
    scores = torch.einsum("bd,bdhw->bhw", q, keys) / math.sqrt(d)
    return torch.softmax(scores.reshape(b, h * w), dim=-1).reshape(b, h, w)


def gated_refine(v: torch.Tensor, attn: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """``(1 - g) V + g (A * V)`` with ``g = sigmoid(alpha)``; A broadcast over channels."""
    g = torch.sigmoid(alpha)
    return (1.0 - g) * v + g * (attn.unsqueeze(1) * v)


def film_modulate(z: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    if z.shape != gamma.shape or z.shape != beta.shape:
        raise ValueError(f"FiLM dimension mismatch: z {tuple(z.shape)}, gamma {tuple(gamma.shape)}, "
                         f"beta {tuple(beta.shape)}")
    return gamma * z + beta


class MetadataProjector(nn.Module):
    """``ReLU(W2 ReLU(W1 x))``; bias-free as written."""

    def __init__(self, in_dim: int = 3, hidden: int = 32, out_dim: int = D_VIS):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, out_dim, bias=False)

    def forward(self, x):
        return torch.relu(self.fc2(torch.relu(self.fc1(x))))


class ActiveQueryUnit(nn.Module):
    def __init__(self, d: int = D_VIS, meta_dim: int = 3, hidden: int = 32, gate_init: float = GATE_INIT):
        super().__init__()
        self.key = nn.Conv2d(d, d, 1, bias=False)
        self.projector = MetadataProjector(meta_dim, hidden, d)
        self.alpha = nn.Parameter(torch.tensor(float(gate_init)))

    @property
    def gate(self) -> torch.Tensor:
        return torch.sigmoid(self.alpha)

    def forward(self, v, x_tab):
        q = self.projector(x_tab)
        attn = spatial_attention(q, self.key(v))
        return gated_refine(v, attn, self.alpha), attn


class FiLMGenerator(nn.Module):
    """MLP emitting (gamma, beta); initialized at gamma = 1, beta = 0."""

    def __init__(self, meta_dim: int = 3, hidden: int = 64, dim: int = Z_DIM):
        super().__init__()
        self.fc1 = nn.Linear(meta_dim, hidden)
        self.fc2 = nn.Linear(hidden, 2 * dim)
        self.dim = dim
        with torch.no_grad():
            self.fc2.weight.mul_(0.01)
            self.fc2.bias.zero_()
            self.fc2.bias[:dim] = 1.0

    def forward(self, x_tab):
        out = self.fc2(torch.relu(self.fc1(x_tab)))
        return out[:, : self.dim], out[:, self.dim:]


class GroupNormHead(nn.Module):
    def __init__(self, dim: int = Z_DIM, groups: int = 8, hidden: int = 64, n_classes: int = 4, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.GroupNorm(groups, dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, z):
        return self.fc2(self.drop(torch.relu(self.fc1(self.norm(z)))))


@dataclass
class StructureOutput:
    main_logits: torch.Tensor
    aux_logits: list[torch.Tensor] | None
    attention_maps: list[torch.Tensor]
    gate_values: torch.Tensor


class MSAQNet(nn.Module):
    """Encoder pyramid -> three active query units -> GAP -> FiLM -> group-normalized head.

    ``use_metadata=False`` zeroes the clinical vector everywhere (ablation).
    """

    def __init__(self, backbone: str = "tiny", pretrained: bool = False, input_size: int = 384,
                 n_classes: int = 4, meta_dim: int = 3, query_hidden: int = 32, film_hidden: int = 64,
                 gn_groups: int = 8, head_hidden: int = 64, use_metadata: bool = True,
                 freeze_affine: bool = False):
        super().__init__()
        self.input_size = input_size
        self.use_metadata = use_metadata
        self.encoder = make_encoder(backbone, 3, pretrained, freeze_affine)
        self.pyramid_proj = nn.ModuleList(nn.Conv2d(c, D_VIS, 1) for c in self.encoder.out_channels)
        self.aqus = nn.ModuleList(ActiveQueryUnit(D_VIS, meta_dim, query_hidden) for _ in range(N_SCALES))
        self.film = FiLMGenerator(meta_dim, film_hidden, Z_DIM)
        self.head = GroupNormHead(Z_DIM, gn_groups, head_hidden, n_classes)
        self.aux_heads = nn.ModuleList(nn.Linear(D_VIS, n_classes) for _ in range(2))

    def backbone_parameters(self):
        return list(self.encoder.parameters())

    def head_parameters(self):
        ids = {id(p) for p in self.encoder.parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def extract_pyramid(self, image: torch.Tensor) -> list[torch.Tensor]:
        if image.dim() != 4 or image.shape[1] != 3 or tuple(image.shape[-2:]) != (self.input_size, self.input_size):
            raise ValueError(f"expected (B, 3, {self.input_size}, {self.input_size}) input, got {tuple(image.shape)}")
        return [proj(f) for proj, f in zip(self.pyramid_proj, self.encoder(image))]

    def query_forward(self, pyramid: list[torch.Tensor], x_tab: torch.Tensor) -> StructureOutput:
        """Everything downstream of the projected pyramid."""
        if not self.use_metadata:
            x_tab = torch.zeros_like(x_tab)
        refined, attns = [], []
        for aqu, v in zip(self.aqus, pyramid):
            r, a = aqu(v, x_tab)
            refined.append(r)
            attns.append(a)
        pooled = [global_avg_pool(r) for r in refined]
        z = torch.cat(pooled, dim=1)
        gamma, beta = self.film(x_tab)
        logits = self.head(film_modulate(z, gamma, beta))
        aux = [h(p) for h, p in zip(self.aux_heads, pooled[:2])] if self.training else None
        gates = torch.stack([aqu.gate for aqu in self.aqus])
        return StructureOutput(logits, aux, attns, gates)

    def forward(self, image: torch.Tensor, x_tab: torch.Tensor) -> StructureOutput:
        return self.query_forward(self.extract_pyramid(image), x_tab)
