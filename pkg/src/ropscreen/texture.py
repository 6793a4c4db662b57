"""Texture stream: gated-attention multiple-instance learning over vessel-map patches."""

from __future__ import annotations

import torch
from torch import nn

from .backbones import global_avg_pool, make_encoder

EMBED_DIM = 256
ATTN_DIM = 128
# GELU keeps a gradient for negative pre-activations; with ReLU the tiny encoder
# tends to zero out every embedding of plus-free bags early in training.
PHI_ACTIVATIONS = {"gelu": nn.GELU, "relu": nn.ReLU, "tanh": nn.Tanh}


def gated_attention(h: torch.Tensor, V: torch.Tensor, U: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Instance weights ``softmax_k w^T (tanh(V h_k) * sigmoid(U h_k))``.

    ``h`` is ``(..., N, L)``; ``V``, ``U`` are ``(M, L)``; ``w`` is ``(M,)`` or
    ``(M, 1)``. Softmax runs over the instance axis.
    """
    gated = torch.tanh(h @ V.T) * torch.sigmoid(h @ U.T)
    scores = gated @ w.reshape(-1)
    return torch.softmax(scores, dim=-1)


def aggregate(h: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """Attention-weighted sum of instance embeddings: ``(..., N, L), (..., N) -> (..., L)``."""
    return (a.unsqueeze(-1) * h).sum(dim=-2)


class GatedAttention(nn.Module):
    def __init__(self, embed_dim: int = EMBED_DIM, attn_dim: int = ATTN_DIM):
        super().__init__()
        self.V = nn.Linear(embed_dim, attn_dim, bias=False)
        self.U = nn.Linear(embed_dim, attn_dim, bias=False)
        self.w = nn.Linear(attn_dim, 1, bias=False)

    def forward(self, h):
        return gated_attention(h, self.V.weight, self.U.weight, self.w.weight)


class PlusHead(nn.Module):
    """MLP head: hidden layer, ReLU, dropout, single logit."""

    def __init__(self, embed_dim: int = EMBED_DIM, hidden: int = 64, dropout: float = 0.2):
        super().__init__()
        self.fc1 = nn.Linear(embed_dim, hidden)
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, z):
        return self.fc2(self.drop(torch.relu(self.fc1(z)))).squeeze(-1)


class VascuMIL(nn.Module):
    """Weight-shared patch encoder, projection to 256, gated attention pooling, plus head.

    ``in_channels=4`` widens the encoder stem (RGB filters kept, Kaiming for
    the vessel-map channel); ``in_channels=3`` is the RGB-only ablation.
    """

    def __init__(self, backbone: str = "tiny", pretrained: bool = False, in_channels: int = 4,
                 embed_dim: int = EMBED_DIM, attn_dim: int = ATTN_DIM, head_hidden: int = 64,
                 dropout: float = 0.2, freeze_affine: bool = False, phi_activation: str = "gelu"):
        super().__init__()
        if phi_activation not in PHI_ACTIVATIONS:
            raise ValueError(f"phi_activation must be one of {sorted(PHI_ACTIVATIONS)}")
        self.in_channels = in_channels
        self.encoder = make_encoder(backbone, 3, pretrained, freeze_affine)
        self.encoder.set_in_channels(in_channels)
        self.phi = nn.Sequential(nn.Linear(self.encoder.out_channels[-1], embed_dim), PHI_ACTIVATIONS[phi_activation]())
        self.attention = GatedAttention(embed_dim, attn_dim)
        self.head = PlusHead(embed_dim, head_hidden, dropout)

    def backbone_parameters(self):
        return list(self.encoder.parameters())

    def head_parameters(self):
        ids = {id(p) for p in self.encoder.parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def encode(self, patches: torch.Tensor) -> torch.Tensor:
        """``(N, C, p, p) -> (N, L)``."""
        if patches.dim() != 4 or patches.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, p, p) patches, got {tuple(patches.shape)}")
        return self.phi(global_avg_pool(self.encoder(patches)[-1]))

    def forward(self, bags: torch.Tensor):
        """``bags`` is ``(B, N, C, p, p)`` or a single ``(N, C, p, p)`` bag.

        Returns ``(logits (B,), attention (B, N))``.
        """
        single = bags.dim() == 4
        if single:
            bags = bags.unsqueeze(0)
        b, n = bags.shape[:2]
        h = self.encode(bags.reshape(b * n, *bags.shape[2:])).reshape(b, n, -1)
        a = self.attention(h)
        logits = self.head(aggregate(h, a))
        if single:
            return logits[0], a[0]
        return logits, a
