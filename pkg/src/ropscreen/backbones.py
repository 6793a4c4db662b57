"""Pluggable three-stage convolutional encoders with frozen batch statistics."""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F


class FrozenBatchNorm2d(nn.Module):
    """Batch norm whose running statistics never update, in train or eval mode.

    The affine scale/shift stay trainable unless ``freeze_affine`` is set.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, freeze_affine: bool = False):
        super().__init__()
        self.eps = eps
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))
        self.weight = nn.Parameter(torch.ones(num_features), requires_grad=not freeze_affine)
        self.bias = nn.Parameter(torch.zeros(num_features), requires_grad=not freeze_affine)

    @classmethod
    def from_batchnorm(cls, bn: nn.BatchNorm2d, freeze_affine: bool = False) -> "FrozenBatchNorm2d":
        out = cls(bn.num_features, bn.eps, freeze_affine)
        with torch.no_grad():
            if bn.track_running_stats and bn.running_mean is not None:
                out.running_mean.copy_(bn.running_mean)
                out.running_var.copy_(bn.running_var)
            if bn.affine:
                out.weight.copy_(bn.weight)
                out.bias.copy_(bn.bias)
        return out

    def forward(self, x):
        scale = self.weight * torch.rsqrt(self.running_var + self.eps)
        shift = self.bias - self.running_mean * scale
        return x * scale.view(1, -1, 1, 1) + shift.view(1, -1, 1, 1)


def freeze_batchnorm(module: nn.Module, freeze_affine: bool = False) -> nn.Module:
    """Replace every BatchNorm2d under ``module`` in place."""
    for name, child in module.named_children():
        if isinstance(child, nn.BatchNorm2d):
            setattr(module, name, FrozenBatchNorm2d.from_batchnorm(child, freeze_affine))
        else:
            freeze_batchnorm(child, freeze_affine)
    return module


def expand_stem(conv: nn.Conv2d, in_channels: int) -> nn.Conv2d:
    """Widen a stem convolution, keeping the existing filters for the leading channels.

    Filters for the added channels get Kaiming-normal initialization.
    """
    old = conv.in_channels
    if in_channels == old:
        return conv
    new = nn.Conv2d(in_channels, conv.out_channels, conv.kernel_size, conv.stride, conv.padding,
                    conv.dilation, conv.groups, conv.bias is not None)
    with torch.no_grad():
        keep = min(old, in_channels)
        new.weight[:, :keep] = conv.weight[:, :keep]
        if in_channels > old:
            extra = torch.empty_like(new.weight[:, old:])
            nn.init.kaiming_normal_(extra, mode="fan_in", nonlinearity="relu")
            new.weight[:, old:] = extra
        if conv.bias is not None:
            new.bias.copy_(conv.bias)
    return new


def _norm(kind: str, channels: int, freeze_affine: bool) -> nn.Module:
    if kind == "frozen_bn":
        return FrozenBatchNorm2d(channels, freeze_affine=freeze_affine)
    if kind == "group":
        gn = nn.GroupNorm(8 if channels % 8 == 0 else 4, channels)
        gn.weight.requires_grad_(not freeze_affine)
        gn.bias.requires_grad_(not freeze_affine)
        return gn
    raise ValueError(f"unknown norm {kind!r}; expected 'group' or 'frozen_bn'")


def _block(cin: int, cout: int, stride: int, freeze_affine: bool, norm: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
        _norm(norm, cout, freeze_affine),
        nn.ReLU(inplace=True),
    )


class TinyEncoder(nn.Module):
    """Small CNN with stage outputs at strides 8, 16 and 32 (desk-scale stand-in).

    It trains from scratch, so there are no pretrained batch statistics to
    freeze; group normalization (batch-size independent) is the default.
    ``norm="frozen_bn"`` gives identity-statistics frozen batch norm instead.
    """

    strides = (8, 16, 32)

    def __init__(self, in_channels: int = 3, widths=(16, 24, 32, 48, 64), freeze_affine: bool = False,
                 norm: str = "group"):
        super().__init__()
        w, fa = widths, freeze_affine
        self.stem = nn.Conv2d(in_channels, w[0], 3, 2, 1, bias=False)
        self.stem_rest = nn.Sequential(_norm(norm, w[0], fa), nn.ReLU(inplace=True), _block(w[0], w[1], 2, fa, norm))
        self.stage1 = nn.Sequential(_block(w[1], w[2], 2, fa, norm), _block(w[2], w[2], 1, fa, norm))
        self.stage2 = nn.Sequential(_block(w[2], w[3], 2, fa, norm), _block(w[3], w[3], 1, fa, norm))
        self.stage3 = nn.Sequential(_block(w[3], w[4], 2, fa, norm), _block(w[4], w[4], 1, fa, norm))
        self.out_channels = (w[2], w[3], w[4])
        for m in self.modules():
            if isinstance(m, nn.Conv2d) and m is not self.stem:
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        nn.init.kaiming_normal_(self.stem.weight, mode="fan_out", nonlinearity="relu")

    @property
    def in_channels(self) -> int:
        return self.stem.in_channels

    def set_in_channels(self, n: int) -> None:
        self.stem = expand_stem(self.stem, n)

    def forward(self, x) -> list[torch.Tensor]:
        x = self.stem_rest(self.stem(x))
        v1 = self.stage1(x)
        v2 = self.stage2(v1)
        v3 = self.stage3(v2)
        return [v1, v2, v3]


class EfficientNetB0Encoder(nn.Module):
    """torchvision EfficientNet-B0 trunk exposing the stride-8/16/32 stage outputs."""

    strides = (8, 16, 32)
    taps = (3, 5, 7)

    def __init__(self, in_channels: int = 3, pretrained: bool = False, freeze_affine: bool = False):
        super().__init__()
        from torchvision.models import EfficientNet_B0_Weights, efficientnet_b0

        net = efficientnet_b0(weights=EfficientNet_B0_Weights.IMAGENET1K_V1 if pretrained else None)
        self.features = freeze_batchnorm(net.features[: self.taps[-1] + 1], freeze_affine)
        self.out_channels = (40, 112, 320)
        if in_channels != 3:
            self.set_in_channels(in_channels)

    @property
    def stem(self) -> nn.Conv2d:
        return self.features[0][0]

    @property
    def in_channels(self) -> int:
        return self.stem.in_channels

    def set_in_channels(self, n: int) -> None:
        self.features[0][0] = expand_stem(self.features[0][0], n)

    def forward(self, x) -> list[torch.Tensor]:
        outs = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                outs.append(x)
        return outs


def make_encoder(name: str = "tiny", in_channels: int = 3, pretrained: bool = False,
                 freeze_affine: bool = False) -> nn.Module:
    if name == "tiny":
        return TinyEncoder(in_channels, freeze_affine=freeze_affine)
    if name == "tiny_frozen_bn":
        return TinyEncoder(in_channels, freeze_affine=freeze_affine, norm="frozen_bn")
    if name == "efficientnet_b0":
        return EfficientNetB0Encoder(in_channels, pretrained, freeze_affine)
    raise ValueError(f"unknown backbone {name!r}")


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    return F.adaptive_avg_pool2d(x, 1).flatten(1)
