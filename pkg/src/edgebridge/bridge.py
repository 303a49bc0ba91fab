"""Per-domain image-to-edge mappers and the bridge regularization losses.

Each training domain owns one mapper that projects its images into a
shared domain of single-channel edge-like maps. The learnable mapper is a
multi-stage convolutional network with per-stage side outputs fused by a
learned 1x1 combination (only the fused output is supervised). Fixed
variants wrap the Canny detector or a frozen pretrained edge network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import edges

BRIDGE_VARIANTS = ("l2_hed", "l2_canny_blur", "l1_canny_blur_stretch")

# Stage widths for the desk-scale (3-stage, 64px) and full (5-stage, 224px)
# mapper configurations.
MAPPER_PRESETS = {
    3: (16, 32, 64),
    5: (64, 128, 256, 512, 512),
}


class EdgeNet(nn.Module):
    """Multi-stage side-output edge network with a learned fusion layer.

    Stage k runs at stride 2^(k-1); the input's spatial size must be
    divisible by the total stride. Side outputs are 1x1-conv logit maps,
    bilinearly upsampled to the input size, fused by a 1x1 conv, then
    squashed by a sigmoid into [0,1].
    """

    def __init__(self, stages: int = 3, widths: tuple[int, ...] | None = None):
        super().__init__()
        widths = tuple(widths) if widths is not None else MAPPER_PRESETS[stages]
        if len(widths) != stages:
            raise ValueError(f"need {stages} widths, got {widths}")
        self.stages_n = stages
        self.widths = widths
        self.total_stride = 2 ** (stages - 1)

        blocks = []
        side_convs = []
        in_ch = 3
        for i, w in enumerate(widths):
            layers = []
            if i > 0:
                layers.append(nn.MaxPool2d(2, 2))
            layers += [
                nn.Conv2d(in_ch, w, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(w, w, 3, padding=1),
                nn.ReLU(inplace=True),
            ]
            blocks.append(nn.Sequential(*layers))
            side_convs.append(nn.Conv2d(w, 1, 1))
            in_ch = w
        self.blocks = nn.ModuleList(blocks)
        self.side_convs = nn.ModuleList(side_convs)
        self.fuse = nn.Conv2d(stages, 1, 1)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        for side in self.side_convs:
            nn.init.normal_(side.weight, std=0.01)
            nn.init.zeros_(side.bias)
        # fuse starts as the average of the side maps
        nn.init.constant_(self.fuse.weight, 1.0 / self.stages_n)
        nn.init.zeros_(self.fuse.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected B*3*H*W input, got shape {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.total_stride or w % self.total_stride:
            raise ValueError(
                f"spatial size {h}x{w} not divisible by the network stride "
                f"{self.total_stride}; pad the input to a multiple of "
                f"{self.total_stride}"
            )
        sides = []
        feat = x
        for block, side in zip(self.blocks, self.side_convs):
            feat = block(feat)
            logit = side(feat)
            if logit.shape[-2:] != (h, w):
                logit = F.interpolate(logit, size=(h, w), mode="bilinear",
                                      align_corners=False)
            sides.append(logit)
        fused = self.fuse(torch.cat(sides, dim=1))
        return torch.sigmoid(fused)


class CannyMapper(nn.Module):
    """Non-learned mapper: the Canny detector as an image-to-edge function."""

    def __init__(self, low: float = edges.CANNY_LOW_DEFAULT,
                 high: float = edges.CANNY_HIGH_DEFAULT):
        super().__init__()
        self.low = low
        self.high = high

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            imgs = x.detach().permute(0, 2, 3, 1).cpu().numpy()
            maps = edges.canny_batch(imgs, self.low, self.high)
            return torch.from_numpy(maps[:, None]).to(dtype=x.dtype, device=x.device)


class BridgeMapper(nn.Module):
    """One domain's mapper into the shared edge-like domain."""

    def __init__(self, domain_id: int, network: nn.Module, trainable: bool = True):
        super().__init__()
        self.domain_id = domain_id
        self.network = network
        self.trainable = trainable
        if not trainable:
            for p in self.network.parameters():
                p.requires_grad_(False)

    def forward(self, views: torch.Tensor) -> torch.Tensor:
        if self.trainable:
            return self.network(views)
        with torch.no_grad():
            return self.network(views)


def map_to_bridge(mapper: BridgeMapper, views: torch.Tensor,
                  domain_id: int) -> torch.Tensor:
    """Project views of domain `domain_id` to their edge maps (B*1*H*W).

    Mapper n only ever sees domain-n images; the id check enforces that
    ownership contract.
    """
    if domain_id != mapper.domain_id:
        raise ValueError(
            f"mapper for domain {mapper.domain_id} received domain {domain_id} views"
        )
    out = mapper(views)
    if out.shape[1] != 1:
        raise ValueError(f"mapper must emit single-channel maps, got {out.shape}")
    return out


def bridge_to_encoder_input(bridge_map: torch.Tensor) -> torch.Tensor:
    """Replicate the single bridge channel to the encoder's 3 channels."""
    return bridge_map.expand(-1, 3, -1, -1)


@dataclass
class BridgeLossConfig:
    """Selects one regularization target for the mapper output.

    l2_hed: squared error against a frozen pretrained edge network.
    l2_canny_blur: squared error against a Gaussian-blurred Canny map.
    l1_canny_blur_stretch: absolute error of the range-stretched mapper
    output against the blurred Canny map.
    """

    variant: str = "l2_canny_blur"
    oracle: Callable[[np.ndarray], np.ndarray] | None = None
    blur_kernel: int = 5
    blur_sigma: float = 0.15
    canny_low: float = edges.CANNY_LOW_DEFAULT
    canny_high: float = edges.CANNY_HIGH_DEFAULT

    def __post_init__(self):
        if self.variant not in BRIDGE_VARIANTS:
            raise ValueError(
                f"unknown bridge loss variant '{self.variant}', have {BRIDGE_VARIANTS}"
            )
        if self.variant == "l2_hed" and self.oracle is None:
            raise ValueError("l2_hed variant requires a pretrained edge oracle")
        if self.variant != "l2_hed" and self.oracle is not None:
            raise ValueError(f"variant '{self.variant}' does not take an edge oracle")


def bridge_targets(views: np.ndarray, cfg: BridgeLossConfig) -> np.ndarray:
    """Regularization targets for a B*H*W*3 stack of views (no gradients)."""
    if views.ndim == 3:
        views = views[None]
    if cfg.variant == "l2_hed":
        return np.stack([cfg.oracle(v) for v in views])
    maps = np.stack(
        [edges.canny(v, cfg.canny_low, cfg.canny_high) for v in views]
    )
    return edges.gaussian_blur(maps, cfg.blur_kernel, cfg.blur_sigma)


def _stretch_unit_torch(x: torch.Tensor) -> torch.Tensor:
    """Per-image affine stretch to [0,1]; constant maps collapse to zeros."""
    flat = x.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    span = hi - lo
    stretched = (x - lo) / torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span.expand_as(x) > 0, stretched, torch.zeros_like(x))


def bridge_loss(mapper_out: torch.Tensor, views: np.ndarray | torch.Tensor,
                cfg: BridgeLossConfig,
                targets: torch.Tensor | None = None) -> torch.Tensor:
    """Mean-reduced bridge regularization for a batch of mapper outputs.

    `targets` can be passed when the caller has already computed the edge
    targets for these views (the training loop does); otherwise they are
    derived here from `views` via the configured oracle.
    """
    if mapper_out.ndim == 3:
        mapper_out = mapper_out[None]
    if targets is None:
        if isinstance(views, torch.Tensor):
            views = views.detach().cpu().numpy()
            if views.ndim == 4 and views.shape[1] == 3:
                views = views.transpose(0, 2, 3, 1)
        targets = torch.as_tensor(
            bridge_targets(views, cfg), dtype=mapper_out.dtype,
            device=mapper_out.device,
        )
    if targets.ndim == 3:  # B*H*W -> B*1*H*W
        targets = targets[:, None]
    if targets.shape != mapper_out.shape:
        raise ValueError(
            f"mapper output {tuple(mapper_out.shape)} and target "
            f"{tuple(targets.shape)} shapes differ"
        )
    if cfg.variant == "l1_canny_blur_stretch":
        return (_stretch_unit_torch(mapper_out) - targets).abs().mean()
    return ((mapper_out - targets) ** 2).mean()


def save_edge_weights(path, net: EdgeNet) -> None:
    """Persist an edge network as a loadable oracle/initialization file."""
    torch.save(
        {
            "arch": {"stages": net.stages_n, "widths": list(net.widths)},
            "state_dict": net.state_dict(),
        },
        path,
    )


def make_reference_edge_weights(path, seed: int = 0, stages: int = 3,
                                widths: tuple[int, ...] | None = None) -> None:
    """Write deterministic stand-in weights for the pretrained edge oracle.

    Real pretrained weights are an external artifact; this helper builds a
    seeded network with an edge-sparsity prior (strongly negative output
    biases), so edge-free images map near zero as a trained detector would.
    """
    torch.manual_seed(seed)
    net = EdgeNet(stages=stages, widths=widths)
    with torch.no_grad():
        for side in net.side_convs:
            side.bias.fill_(-4.0)
    save_edge_weights(path, net)
