"""Domain discriminator over bridge-image features and its two-phase
adversarial protocol.

The discriminator classifies which domain a bridge-projected image came
from, using the backbone's final features. It is trained with its own
optimizer while encoder/mapper gradients are blocked (detached inputs);
the encoder and mappers then minimize the negated objective while the
discriminator's parameters are frozen. Features routed to the
discriminator carry a provenance tag asserting they came off the bridge
path.
"""

from __future__ import annotations

from contextlib import contextmanager

import torch
import torch.nn as nn
import torch.nn.functional as F

_PROVENANCE_ATTR = "_edgebridge_bridge_feature"


def tag_bridge_features(features: torch.Tensor) -> torch.Tensor:
    """Mark a feature tensor as produced from bridge-projected images."""
    setattr(features, _PROVENANCE_ATTR, True)
    return features


def is_bridge_tagged(features: torch.Tensor) -> bool:
    return getattr(features, _PROVENANCE_ATTR, False)


class DomainDiscriminator(nn.Module):
    """MLP with hidden widths (1024, 512, 256), LeakyReLU, linear N-way head."""

    def __init__(self, feature_dim: int, n_domains: int,
                 hidden_dims: tuple[int, ...] = (1024, 512, 256),
                 negative_slope: float = 0.2):
        super().__init__()
        if n_domains < 1:
            raise ValueError(f"n_domains must be >= 1, got {n_domains}")
        layers: list[nn.Module] = []
        in_dim = feature_dim
        for width in hidden_dims:
            layers += [nn.Linear(in_dim, width), nn.LeakyReLU(negative_slope)]
            in_dim = width
        layers.append(nn.Linear(in_dim, n_domains))
        self.mlp = nn.Sequential(*layers)
        self.n_domains = n_domains

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.mlp(features)


def adv_loss(disc: DomainDiscriminator, features: torch.Tensor,
             domain_ids: torch.Tensor | int) -> torch.Tensor:
    """Cross-entropy of the discriminator's domain prediction.

    Only accepts bridge-tagged features; raw-domain features must never
    reach the discriminator.
    """
    if not is_bridge_tagged(features):
        raise ValueError(
            "discriminator input lacks the bridge-path provenance tag; "
            "route features through the bridge projection first"
        )
    if features.ndim == 1:
        features = features[None]
    if isinstance(domain_ids, int):
        domain_ids = torch.tensor([domain_ids], device=features.device)
    domain_ids = domain_ids.reshape(-1).long()
    if int(domain_ids.max()) >= disc.n_domains or int(domain_ids.min()) < 0:
        raise ValueError(
            f"domain id out of range [0, {disc.n_domains}) in {domain_ids.tolist()}"
        )
    logits = disc(features)
    return F.cross_entropy(logits, domain_ids)


@contextmanager
def frozen(module: nn.Module):
    """Temporarily disable grad accumulation into a module's parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def check_optimizers_disjoint(opt_a: torch.optim.Optimizer,
                              opt_b: torch.optim.Optimizer) -> None:
    """Two-optimizer protocol precondition: no shared parameters."""
    params_a = {id(p) for group in opt_a.param_groups for p in group["params"]}
    params_b = {id(p) for group in opt_b.param_groups for p in group["params"]}
    if params_a & params_b:
        raise ValueError(
            f"adversarial optimizers share {len(params_a & params_b)} parameters; "
            "discriminator and generator parameter sets must be disjoint"
        )


def discriminator_phase(disc: DomainDiscriminator, features: torch.Tensor,
                        domain_ids: torch.Tensor,
                        optimizer: torch.optim.Optimizer) -> float:
    """Update only the discriminator; inputs are detached so no gradient
    reaches the encoder or mappers."""
    detached = tag_bridge_features(features.detach())
    loss = adv_loss(disc, detached, domain_ids)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def generator_adv_penalty(disc: DomainDiscriminator, features: torch.Tensor,
                          domain_ids: torch.Tensor) -> torch.Tensor:
    """The adversarial term as seen by the generator.

    Returns +CE with the discriminator frozen; the caller subtracts it
    from the generator objective (minimizing -CE confuses the
    discriminator). Gradients flow into `features` but not into the
    discriminator's parameters.
    """
    with frozen(disc):
        return adv_loss(disc, features, domain_ids)
