"""Training orchestration: composite objective, step protocol, schedules,
checkpointing, and the config ablation ladder.

One logical step runs, in order: forward of both augmented views and their
bridge projections, loss computation against queue snapshots, the
discriminator update (inputs detached), the generator update of backbone,
projector and mappers (discriminator frozen), the EMA update, and finally
the queue pushes for this batch. Every ablation row is a config diff, not
a code fork.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import adversary as adv
from . import bridge as bridge_mod
from .config import LossWeights, TrainConfig, config_from_mapping
from .contrast import (ContrastiveConfig, QueueSet, exclusion_mask,
                       info_nce_batch)
from .data import (AugmentConfig, Batch, MultiDomainDataset, PairBatchSampler,
                   ingest_directory)
from .edges import FrozenEdgeNet
from .encoder import build_backbone, build_encoder

CHECKPOINT_VERSION = "edgebridge-ckpt-1"
EXPORT_VERSION = "edgebridge-backbone-1"


def cosine_lr(step: int, total_steps: int, lr0: float, lr1: float) -> float:
    """Cosine decay from lr0 at step 0 to lr1 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + math.cos(math.pi * step / total_steps))


def full_loss(l_contrast, l_bridge, l_adversary, w: LossWeights):
    """w1*L_contrast + w2*L_bridge - w3*L_adversary (the generator's view).

    The discriminator's own step uses +L_adversary; that sign flip lives in
    the step protocol, not here.
    """
    parts = {"contrast": l_contrast, "bridge": l_bridge, "adversary": l_adversary}
    for name, value in parts.items():
        scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if math.isnan(scalar):
            raise FloatingPointError(f"loss component '{name}' is NaN")
    return w.contrast * l_contrast + w.bridge * l_bridge - w.adversary * l_adversary


@dataclass
class StepForward:
    """Everything the phase updates need from one batch's forward pass."""

    a1: torch.Tensor  # B*3*H*W
    a2: torch.Tensor
    domain_ids: np.ndarray
    sample_ids: list[str]
    q_raw: torch.Tensor  # online embeddings, grad
    q_bridge: torch.Tensor
    k_bridge: torch.Tensor  # momentum embeddings, no grad
    k_raw: torch.Tensor
    bridge_feat: torch.Tensor  # backbone features of bridge(a1), tagged
    mapper_out1: torch.Tensor | None  # mapper outputs on a1 (grad), B*1*H*W
    bridge_targets: torch.Tensor | None


class Trainer:
    """Owns all mutable training state and the step protocol."""

    def __init__(self, cfg: TrainConfig, dataset: MultiDomainDataset | None = None,
                 dtype: torch.dtype = torch.float32):
        self.cfg = cfg
        self.dtype = dtype
        torch.manual_seed(cfg.seed)

        if dataset is None:
            dataset = ingest_directory(cfg.data_root, cfg.image_size)
        if cfg.train_domains:
            dataset = dataset.subset(list(cfg.train_domains))
        self.dataset = dataset
        self.n_domains = dataset.catalog.n_domains

        self.encoder = build_encoder(cfg.arch, cfg.proj_dim,
                                     cfg.proj_hidden or None, cfg.ema_m)
        self.mappers = self._build_mappers()
        self.bridge_cfg = self._build_bridge_loss_cfg()
        self.contrast_cfg = ContrastiveConfig(cfg.temperature, cfg.exclude_own_cached)
        self.weights = cfg.loss_weights()
        if self.bridge_cfg is None:
            # identity or fixed mappers carry no regularizable parameters
            self.weights = LossWeights(self.weights.contrast, 0.0,
                                       self.weights.adversary)

        self.adversary_on = cfg.use_adversary and self.n_domains > 1
        if self.adversary_on:
            self.discriminator = adv.DomainDiscriminator(
                self.encoder.feature_dim, self.n_domains, cfg.disc_hidden)
        else:
            self.discriminator = None

        if dtype != torch.float32:
            self.encoder.to(dtype)
            for m in self.mappers.values():
                m.to(dtype)
            if self.discriminator is not None:
                self.discriminator.to(dtype)

        gen_params = list(self.encoder.trainable_parameters())
        for mapper in self._unique_mappers():
            if mapper.trainable:
                gen_params += list(mapper.parameters())
        self.gen_opt = torch.optim.SGD(gen_params, lr=cfg.base_lr,
                                       momentum=cfg.sgd_momentum,
                                       weight_decay=cfg.weight_decay)
        if self.adversary_on:
            self.disc_opt = torch.optim.SGD(self.discriminator.parameters(),
                                            lr=cfg.base_lr,
                                            momentum=cfg.sgd_momentum,
                                            weight_decay=cfg.weight_decay)
            adv.check_optimizers_disjoint(self.gen_opt, self.disc_opt)
        else:
            self.disc_opt = None

        domain_sizes = {
            d: dataset.catalog.per_domain_counts[d] for d in range(self.n_domains)
        }
        self.queues = QueueSet(domain_sizes, cfg.proj_dim, cfg.cap_max,
                               cfg.multi_queue)
        if dtype != torch.float32:
            for q in self.queues.queues.values():
                q.buffer = q.buffer.to(dtype)

        self.aug_cfg = AugmentConfig(
            crop_scale=cfg.crop_scale, flip_p=cfg.flip_p, jitter_p=cfg.jitter_p,
            jitter_strength=cfg.jitter_strength, gray_p=cfg.gray_p,
            blur_p=cfg.blur_p,
        )
        self.sampler = PairBatchSampler(dataset, cfg.batch_size, cfg.seed,
                                        self.aug_cfg, workers=cfg.workers)
        self.global_step = 0

    # -- construction helpers ------------------------------------------------

    def _unique_mappers(self) -> list[bridge_mod.BridgeMapper]:
        seen, unique = set(), []
        for mapper in self.mappers.values():
            if id(mapper.network) not in seen:
                seen.add(id(mapper.network))
                unique.append(mapper)
        return unique

    def _build_mappers(self) -> dict[int, bridge_mod.BridgeMapper]:
        cfg = self.cfg
        mode = cfg.use_bridge
        mappers: dict[int, bridge_mod.BridgeMapper] = {}
        if mode == "none":
            return mappers
        if mode == "canny_fixed":
            shared = bridge_mod.CannyMapper(cfg.canny_low, cfg.canny_high)
            for d in range(self.n_domains):
                mappers[d] = bridge_mod.BridgeMapper(d, shared, trainable=False)
            return mappers
        if mode == "hed_fixed":
            oracle = FrozenEdgeNet(cfg.edge_weights_path)
            for d in range(self.n_domains):
                mappers[d] = bridge_mod.BridgeMapper(d, oracle.net, trainable=False)
            return mappers
        # learned / learned_no_pretrain
        pretrained = None
        if mode == "learned" and cfg.edge_weights_path:
            pretrained = torch.load(cfg.edge_weights_path, map_location="cpu",
                                    weights_only=True)
        for d in range(self.n_domains):
            net = bridge_mod.EdgeNet(cfg.mapper_stages, cfg.mapper_widths)
            if pretrained is not None:
                net.load_state_dict(pretrained["state_dict"])
            mappers[d] = bridge_mod.BridgeMapper(d, net, trainable=True)
        return mappers

    def _build_bridge_loss_cfg(self) -> bridge_mod.BridgeLossConfig | None:
        cfg = self.cfg
        if cfg.use_bridge not in ("learned", "learned_no_pretrain"):
            return None  # nothing trainable to regularize
        oracle = None
        if cfg.bridge_variant == "l2_hed":
            oracle = FrozenEdgeNet(cfg.edge_weights_path)
        return bridge_mod.BridgeLossConfig(
            variant=cfg.bridge_variant, oracle=oracle,
            blur_kernel=cfg.blur_kernel, blur_sigma=cfg.blur_sigma,
            canny_low=cfg.canny_low, canny_high=cfg.canny_high,
        )

    # -- forward -------------------------------------------------------------

    def _to_tensor(self, views: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(views.transpose(0, 3, 1, 2)).to(self.dtype).contiguous()

    def _bridge_views(self, views: torch.Tensor, domain_ids: np.ndarray,
                      grad: bool) -> torch.Tensor | None:
        """Mapper outputs (B*1*H*W) grouped by domain; None in no-bridge mode."""
        if not self.mappers:
            return None
        out = torch.zeros(views.shape[0], 1, *views.shape[2:], dtype=views.dtype)
        for d in np.unique(domain_ids):
            idx = np.nonzero(domain_ids == d)[0]
            sel = torch.from_numpy(idx)
            mapper = self.mappers[int(d)]
            if grad and mapper.trainable:
                mapped = bridge_mod.map_to_bridge(mapper, views[sel], int(d))
            else:
                with torch.no_grad():
                    mapped = bridge_mod.map_to_bridge(mapper, views[sel], int(d))
            out = out.index_copy(0, sel, mapped)
        return out

    def forward_batch(self, batch: Batch) -> StepForward:
        a1 = self._to_tensor(batch.a1)
        a2 = self._to_tensor(batch.a2)
        domain_ids = batch.domain_ids

        mapper_out1 = self._bridge_views(a1, domain_ids, grad=True)

        if mapper_out1 is None:  # identity bridge: raw and bridge paths coincide
            feat_raw = self.encoder.encode(a1)
            q_raw = self.encoder.project(feat_raw)
            bridge_feat = feat_raw
            q_bridge = q_raw
            with torch.no_grad():
                k_raw = self.encoder.embed(a2, momentum=True)
                k_bridge = k_raw
        else:
            with torch.no_grad():
                mapper_out2 = self._bridge_views(a2, domain_ids, grad=False)
            bridge1 = bridge_mod.bridge_to_encoder_input(mapper_out1)
            bridge2 = bridge_mod.bridge_to_encoder_input(mapper_out2)
            q_raw = self.encoder.embed(a1)
            bridge_feat = self.encoder.encode(bridge1)
            q_bridge = self.encoder.project(bridge_feat)
            with torch.no_grad():
                k_bridge = self.encoder.embed(bridge2, momentum=True)
                k_raw = self.encoder.embed(a2, momentum=True)
        adv.tag_bridge_features(bridge_feat)

        targets = None
        if self.bridge_cfg is not None:
            targets = torch.as_tensor(
                bridge_mod.bridge_targets(batch.a1.astype(np.float64), self.bridge_cfg),
                dtype=self.dtype,
            )[:, None]

        return StepForward(a1, a2, domain_ids, batch.sample_ids, q_raw, q_bridge,
                           k_bridge, k_raw, bridge_feat, mapper_out1, targets)

    # -- losses --------------------------------------------------------------

    def contrast_loss(self, fwd: StepForward) -> torch.Tensor:
        """Mean over batch of the per-image two-term loss, negatives drawn
        from each image's own domain queue snapshot."""
        losses = torch.zeros(len(fwd.sample_ids), dtype=fwd.q_raw.dtype)
        for d in np.unique(fwd.domain_ids):
            idx = np.nonzero(fwd.domain_ids == d)[0]
            sel = torch.from_numpy(idx)
            queue = self.queues.for_domain(int(d))
            negatives, queue_ids = queue.snapshot()
            negatives = negatives.to(fwd.q_raw.dtype)
            group_ids = [fwd.sample_ids[i] for i in idx]
            mask = None
            if self.contrast_cfg.exclude_own_cached and queue_ids:
                mask = exclusion_mask(queue_ids, group_ids)
            negs = negatives if negatives.numel() else None
            t1 = info_nce_batch(fwd.q_raw[sel], fwd.k_bridge[sel], negs,
                                self.contrast_cfg.temperature, mask)
            t2 = info_nce_batch(fwd.q_bridge[sel], fwd.k_raw[sel], negs,
                                self.contrast_cfg.temperature, mask)
            losses = losses.index_add(0, sel, t1 + t2)
        return losses.mean()

    def bridge_loss(self, fwd: StepForward) -> torch.Tensor:
        if self.bridge_cfg is None or fwd.mapper_out1 is None:
            return torch.zeros((), dtype=self.dtype)
        return bridge_mod.bridge_loss(fwd.mapper_out1, fwd.a1, self.bridge_cfg,
                                      targets=fwd.bridge_targets)

    def adversary_loss(self, fwd: StepForward) -> torch.Tensor:
        """The literal cross-entropy term, fully differentiable (used for
        reporting and gradient checks; the phased updates detach/freeze)."""
        if not self.adversary_on:
            return torch.zeros((), dtype=self.dtype)
        ids = torch.from_numpy(fwd.domain_ids)
        return adv.adv_loss(self.discriminator, fwd.bridge_feat, ids)

    def composite_loss(self, batch: Batch) -> torch.Tensor:
        """Pure evaluation of the composite objective on one batch.

        Mutates nothing (no optimizer, EMA, or queue writes); used by
        gradient-fidelity checks where the loss must be a deterministic
        function of the parameters.
        """
        fwd = self.forward_batch(batch)
        return full_loss(self.contrast_loss(fwd), self.bridge_loss(fwd),
                         self.adversary_loss(fwd), self.weights)

    # -- phases --------------------------------------------------------------

    def discriminator_phase(self, fwd: StepForward) -> float:
        """Phase 1: update only the discriminator on detached features."""
        if not self.adversary_on:
            return 0.0
        ids = torch.from_numpy(fwd.domain_ids)
        return adv.discriminator_phase(self.discriminator, fwd.bridge_feat, ids,
                                       self.disc_opt)

    def generator_phase(self, fwd: StepForward) -> dict:
        """Phase 2: update backbone, projector and mappers; the adversarial
        term enters negatively with the discriminator frozen."""
        l_contrast = self.contrast_loss(fwd)
        l_bridge = self.bridge_loss(fwd)
        if self.adversary_on:
            ids = torch.from_numpy(fwd.domain_ids)
            penalty = adv.generator_adv_penalty(self.discriminator,
                                                fwd.bridge_feat, ids)
        else:
            penalty = torch.zeros((), dtype=self.dtype)
        total = full_loss(l_contrast, l_bridge, penalty, self.weights)
        self.gen_opt.zero_grad(set_to_none=True)
        total.backward()
        self.gen_opt.step()
        return {
            "loss_contrast": float(l_contrast.detach()),
            "loss_bridge": float(l_bridge.detach()),
            "gen_penalty": float(penalty.detach()),
        }

    def _set_lr(self, lr: float) -> None:
        for opt in (self.gen_opt, self.disc_opt):
            if opt is None:
                continue
            for group in opt.param_groups:
                group["lr"] = lr

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.sampler.batches_per_epoch

    def train_step(self, batch: Batch) -> dict:
        lr = cosine_lr(self.global_step, max(self.total_steps, 1),
                       self.cfg.base_lr, self.cfg.final_lr)
        self._set_lr(lr)

        fwd = self.forward_batch(batch)
        l_adv = self.discriminator_phase(fwd)
        gen_metrics = self.generator_phase(fwd)
        self.encoder.ema_update()
        self.queues.push_batch(fwd.k_bridge, fwd.k_raw, fwd.domain_ids,
                               fwd.sample_ids)

        self.global_step += 1
        l_full = (self.weights.contrast * gen_metrics["loss_contrast"]
                  + self.weights.bridge * gen_metrics["loss_bridge"]
                  - self.weights.adversary * l_adv)
        return {
            "step": self.global_step,
            "lr": lr,
            "loss_contrast": gen_metrics["loss_contrast"],
            "loss_bridge": gen_metrics["loss_bridge"],
            "loss_adv": l_adv,
            "loss_full": l_full,
        }

    def train(self, out_dir=None, max_steps: int | None = None) -> list[dict]:
        """Run the configured schedule, optionally logging to out_dir."""
        out_dir = Path(out_dir) if out_dir is not None else None
        metrics_path = None
        writer = None
        fh = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = out_dir / "metrics.csv"
            new_file = not metrics_path.exists()
            fh = open(metrics_path, "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=[
                "step", "lr", "loss_contrast", "loss_bridge", "loss_adv",
                "loss_full"])
            if new_file:
                writer.writeheader()

        history = []
        end = self.total_steps if max_steps is None else min(max_steps, self.total_steps)
        try:
            while self.global_step < end:
                batch = self.sampler.batch_at(self.global_step)
                metrics = self.train_step(batch)
                history.append(metrics)
                if writer is not None and (metrics["step"] % self.cfg.log_every == 0):
                    writer.writerow(metrics)
                if (out_dir is not None and self.cfg.checkpoint_every
                        and metrics["step"] % self.cfg.checkpoint_every == 0):
                    self.save_checkpoint(out_dir / f"checkpoint_{metrics['step']:06d}.pt")
            if out_dir is not None:
                self.save_checkpoint(out_dir / "checkpoint_final.pt")
        finally:
            if fh is not None:
                fh.close()
        return history

    # -- persistence ----------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        path = Path(path)
        payload = {
            "version": CHECKPOINT_VERSION,
            "meta": {
                "d": self.encoder.feature_dim,
                "p": self.encoder.embed_dim,
                "m": self.encoder.m,
                "arch": self.cfg.arch,
                "step": self.global_step,
                "config": self.cfg.to_dict(),
                "domain_names": list(self.dataset.catalog.domains),
            },
            "encoder": {
                "backbone": self.encoder.backbone.state_dict(),
                "projector": self.encoder.projector.state_dict(),
                "momentum_backbone": self.encoder.momentum_backbone.state_dict(),
                "momentum_projector": self.encoder.momentum_projector.state_dict(),
            },
            "mappers": {
                self.dataset.domain_name(d): (
                    mapper.network.state_dict() if mapper.trainable else None
                )
                for d, mapper in self.mappers.items()
            },
            "discriminator": (self.discriminator.state_dict()
                              if self.discriminator is not None else None),
            "gen_opt": self.gen_opt.state_dict(),
            "disc_opt": self.disc_opt.state_dict() if self.disc_opt else None,
            "queues": self.queues.state_dict(),
            "rng": {"torch": torch.get_rng_state()},
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    @staticmethod
    def _read_checkpoint(path) -> dict:
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise ValueError(f"corrupt checkpoint {path}: {exc}")
        if not isinstance(payload, dict) or "version" not in payload:
            raise ValueError(f"corrupt checkpoint {path}: missing version")
        if payload["version"] != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint version mismatch: file has '{payload['version']}', "
                f"this build expects '{CHECKPOINT_VERSION}'"
            )
        return payload

    def load_checkpoint(self, path) -> None:
        """Restore full training state; on any validation error the current
        state is left untouched."""
        payload = self._read_checkpoint(path)
        enc = payload["encoder"]
        self.encoder.backbone.load_state_dict(enc["backbone"])
        self.encoder.projector.load_state_dict(enc["projector"])
        self.encoder.momentum_backbone.load_state_dict(enc["momentum_backbone"])
        self.encoder.momentum_projector.load_state_dict(enc["momentum_projector"])
        for d, mapper in self.mappers.items():
            blob = payload["mappers"].get(self.dataset.domain_name(d))
            if blob is not None and mapper.trainable:
                mapper.network.load_state_dict(blob)
        if self.discriminator is not None and payload["discriminator"] is not None:
            self.discriminator.load_state_dict(payload["discriminator"])
        self.gen_opt.load_state_dict(payload["gen_opt"])
        if self.disc_opt is not None and payload["disc_opt"] is not None:
            self.disc_opt.load_state_dict(payload["disc_opt"])
        self.queues.load_state_dict(payload["queues"])
        self.global_step = payload["meta"]["step"]
        torch.set_rng_state(payload["rng"]["torch"])

    @classmethod
    def from_checkpoint(cls, path, dataset: MultiDomainDataset | None = None) -> "Trainer":
        payload = cls._read_checkpoint(path)
        cfg = config_from_mapping(payload["meta"]["config"])
        trainer = cls(cfg, dataset)
        trainer.load_checkpoint(path)
        return trainer

    def export_backbone(self, path) -> None:
        """Inference export: the backbone is the only persisted component."""
        torch.save(
            {
                "version": EXPORT_VERSION,
                "meta": {
                    "arch": self.cfg.arch,
                    "d": self.encoder.feature_dim,
                    "step": self.global_step,
                },
                "backbone": self.encoder.backbone.state_dict(),
            },
            path,
        )


def load_backbone(path) -> torch.nn.Module:
    """Load a backbone-only export (or full checkpoint) for inference."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "version" not in payload:
        raise ValueError(f"corrupt backbone file {path}")
    if payload["version"] == EXPORT_VERSION:
        arch, blob = payload["meta"]["arch"], payload["backbone"]
    elif payload["version"] == CHECKPOINT_VERSION:
        arch, blob = payload["meta"]["arch"], payload["encoder"]["backbone"]
    else:
        raise ValueError(
            f"unsupported version '{payload['version']}'; expected "
            f"'{EXPORT_VERSION}' or '{CHECKPOINT_VERSION}'"
        )
    net = build_backbone(arch)
    net.load_state_dict(blob)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net
