"""Stacked fusion meta-learner over frozen specialist logits and clinical metadata."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

FUSION_DIM = 8
LAYOUT = ("struct_0", "struct_1", "struct_2", "struct_3", "tex", "ga", "bw", "pa")


def build_fusion_vector(l_struct, l_tex, x_tab):
    """Concatenate (structure logits[4], texture logit[1], clinical vector[3]) along the last axis.

    Works on numpy arrays or torch tensors, single rows or batches.
    """
    is_torch = isinstance(l_struct, torch.Tensor)
    cat = torch.cat if is_torch else np.concatenate
    asarr = torch.as_tensor if is_torch else np.asarray
    l_struct, l_tex, x_tab = asarr(l_struct), asarr(l_tex), asarr(x_tab)
    if l_tex.ndim == l_struct.ndim - 1:
        l_tex = l_tex[..., None]
    if l_struct.shape[-1] != 4 or l_tex.shape[-1] != 1 or x_tab.shape[-1] != 3:
        raise ValueError(f"expected widths 4 + 1 + 3, got {l_struct.shape[-1]} + {l_tex.shape[-1]} "
                         f"+ {x_tab.shape[-1]}")
    if is_torch:
        return cat([l_struct, l_tex.to(l_struct.dtype), x_tab.to(l_struct.dtype)], dim=-1)
    return cat([l_struct, l_tex, x_tab], axis=-1).astype(np.float64)


class FusionMLP(nn.Module):
    """One rectified hidden layer (8 -> 32) feeding a 4-way diagnosis head and a plus head."""

    def __init__(self, in_dim: int = FUSION_DIM, hidden: int = 32, n_classes: int = 4):
        super().__init__()
        self.hidden = nn.Linear(in_dim, hidden)
        self.diag = nn.Linear(hidden, n_classes)
        self.plus = nn.Linear(hidden, 1)

    def forward(self, v: torch.Tensor):
        h = torch.relu(self.hidden(v))
        return self.diag(h), self.plus(h).squeeze(-1)

    def predict_proba(self, v: torch.Tensor):
        diag, plus = self(v)
        return torch.softmax(diag, -1), torch.sigmoid(plus)
