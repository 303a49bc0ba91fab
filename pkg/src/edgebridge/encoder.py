"""Shared backbone, projection head, and their EMA momentum copies.

The backbone is a residual CNN ending in global average pooling; the
projector is a two-layer MLP whose output is L2-normalized. Momentum
copies share the architecture, never receive gradients, and are updated
only through `ema_update`. GroupNorm is used throughout so forward passes
carry no running statistics and train/eval behavior is identical.
"""

from __future__ import annotations

import copy

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-12

BACKBONE_WIDTHS = {
    "tiny": (16, 32, 64, 128),
    "small": (64, 128, 256, 512),
    "wide": (96, 192, 384, 768),
}


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _gn(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.norm2 = _gn(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _gn(out_ch)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResidualBackbone(nn.Module):
    """4-stage residual CNN with GAP; feature dim = last stage width."""

    def __init__(self, widths: tuple[int, ...] = BACKBONE_WIDTHS["small"]):
        super().__init__()
        self.widths = tuple(widths)
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, stride=1, padding=1, bias=False),
            _gn(widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = widths[0]
        for i, w in enumerate(widths):
            stages.append(ResidualBlock(in_ch, w, stride=1 if i == 0 else 2))
            in_ch = w
        self.stages = nn.Sequential(*stages)
        self.feature_dim = widths[-1]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected B*3*H*W input, got shape {tuple(x.shape)}")
        out = self.stages(self.stem(x))
        return out.mean(dim=(2, 3))


def build_backbone(arch: str) -> ResidualBackbone:
    if arch not in BACKBONE_WIDTHS:
        raise ValueError(f"unknown backbone arch '{arch}', have {sorted(BACKBONE_WIDTHS)}")
    return ResidualBackbone(BACKBONE_WIDTHS[arch])


def l2_normalize(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Unit-normalize rows; an eps guard keeps zero vectors finite."""
    return x / (x.norm(dim=-1, keepdim=True) + eps)


class ProjectionHead(nn.Module):
    """Two-layer MLP d -> hidden -> p with L2 normalization on the output."""

    def __init__(self, in_dim: int, out_dim: int, hidden_dim: int | None = None,
                 bias: bool = True, activation: bool = True):
        super().__init__()
        hidden_dim = hidden_dim or in_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim, bias=bias)
        self.fc2 = nn.Linear(hidden_dim, out_dim, bias=bias)
        self.activation = activation
        self.out_dim = out_dim

    def forward(self, x):
        h = self.fc1(x)
        if self.activation:
            h = F.relu(h)
        return l2_normalize(self.fc2(h))


class EncoderState(nn.Module):
    """Online backbone+projector and their EMA momentum twins.

    The momentum copies are initialized as exact copies of the online
    networks and have requires_grad disabled; the only way they change is
    `ema_update`.
    """

    def __init__(self, backbone: nn.Module, projector: ProjectionHead,
                 momentum: float = 0.999):
        super().__init__()
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0,1], got {momentum}")
        self.backbone = backbone
        self.projector = projector
        self.momentum_backbone = copy.deepcopy(backbone)
        self.momentum_projector = copy.deepcopy(projector)
        for p in self.momentum_backbone.parameters():
            p.requires_grad_(False)
        for p in self.momentum_projector.parameters():
            p.requires_grad_(False)
        self.m = momentum

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    @property
    def embed_dim(self) -> int:
        return self.projector.out_dim

    def encode(self, images: torch.Tensor, momentum: bool = False) -> torch.Tensor:
        net = self.momentum_backbone if momentum else self.backbone
        if momentum:
            with torch.no_grad():
                return net(images)
        return net(images)

    def project(self, features: torch.Tensor, momentum: bool = False) -> torch.Tensor:
        net = self.momentum_projector if momentum else self.projector
        if momentum:
            with torch.no_grad():
                return net(features)
        return net(features)

    def embed(self, images: torch.Tensor, momentum: bool = False) -> torch.Tensor:
        return self.project(self.encode(images, momentum), momentum)

    @torch.no_grad()
    def ema_update(self, m: float | None = None) -> None:
        """theta_m <- m*theta_m + (1-m)*theta for every parameter pair."""
        m = self.m if m is None else m
        if not 0.0 <= m <= 1.0:
            raise ValueError(f"momentum must lie in [0,1], got {m}")
        pairs = [
            (self.backbone, self.momentum_backbone),
            (self.projector, self.momentum_projector),
        ]
        for online, ema in pairs:
            for p, pm in zip(online.parameters(), ema.parameters()):
                pm.mul_(m).add_(p, alpha=1.0 - m)

    def trainable_parameters(self):
        yield from self.backbone.parameters()
        yield from self.projector.parameters()


def build_encoder(arch: str = "small", proj_dim: int = 128,
                  proj_hidden: int | None = None, momentum: float = 0.999,
                  seed: int | None = None) -> EncoderState:
    if seed is not None:
        torch.manual_seed(seed)
    backbone = build_backbone(arch)
    projector = ProjectionHead(backbone.feature_dim, proj_dim, proj_hidden)
    return EncoderState(backbone, projector, momentum)
