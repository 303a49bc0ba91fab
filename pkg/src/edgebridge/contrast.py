"""InfoNCE loss, the two-term cross-bridge contrastive objective, and
per-domain circular negative queues.

The two-term loss pulls (a) the raw view's embedding toward the momentum
embedding of the other view's bridge projection and (b) the bridge
projection's embedding toward the momentum embedding of the other raw
view, against negatives cached in the image's own domain queue. Queue
pushes are strictly decoupled from the loss computation: the loss reads a
snapshot, the trainer pushes afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .bridge import BridgeMapper, bridge_to_encoder_input, map_to_bridge
from .encoder import EncoderState


@dataclass
class ContrastiveConfig:
    temperature: float = 0.2
    exclude_own_cached: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def info_nce(q: torch.Tensor, k_plus: torch.Tensor,
             negatives: torch.Tensor | None, tau: float) -> torch.Tensor:
    """-log( exp(q.k+/tau) / (exp(q.k+/tau) + sum_i exp(q.k-_i/tau)) ).

    All inputs are expected unit-normalized; similarities are plain dot
    products (cosine). With no negatives the positive has probability one
    and the loss is exactly zero.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if q.numel() == 0 or k_plus.numel() == 0:
        raise ValueError("query and positive key must be non-empty")
    q = q.reshape(-1)
    k_plus = k_plus.reshape(-1)
    pos = (q * k_plus).sum() / tau
    if negatives is None or negatives.numel() == 0:
        logits = pos[None]
    else:
        neg = negatives.reshape(-1, q.shape[0]) @ q / tau
        logits = torch.cat([pos[None], neg])
    return torch.logsumexp(logits, dim=0) - pos


def info_nce_batch(queries: torch.Tensor, positives: torch.Tensor,
                   negatives: torch.Tensor | None, tau: float,
                   exclude_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Row-wise InfoNCE for B queries sharing one negative set.

    `exclude_mask` (B*K bool, True = drop) removes individual negatives
    per query, e.g. an image's own cached embeddings.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    pos = (queries * positives).sum(dim=1, keepdim=True) / tau
    if negatives is None or negatives.numel() == 0:
        return torch.zeros(queries.shape[0], dtype=queries.dtype,
                           device=queries.device)
    neg = queries @ negatives.T / tau
    if exclude_mask is not None:
        neg = neg.masked_fill(exclude_mask, float("-inf"))
    logits = torch.cat([pos, neg], dim=1)
    return torch.logsumexp(logits, dim=1) - pos.squeeze(1)


class NegativeQueue:
    """Circular FIFO buffer of unit embeddings from a single domain.

    `domain_id=None` denotes the shared single-queue mode where all
    domains are cached together (ablation baseline).
    """

    def __init__(self, domain_id: int | None, capacity: int, dim: int,
                 dtype: torch.dtype = torch.float32):
        if capacity < 2:
            raise ValueError(f"capacity must be >= 2, got {capacity}")
        self.domain_id = domain_id
        self.capacity = capacity
        self.dim = dim
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.source_ids: list[str | None] = [None] * capacity
        self.head = 0  # next write slot
        self.fill = 0

    def _check_row(self, emb: torch.Tensor) -> torch.Tensor:
        emb = emb.detach().reshape(-1)
        if emb.shape[0] != self.dim:
            raise ValueError(f"embedding dim {emb.shape[0]} != queue dim {self.dim}")
        norm = emb.norm().item()
        if abs(norm - 1.0) > 1e-4:
            raise ValueError(f"queue rows must be unit vectors, got norm {norm:.6f}")
        return emb

    def _push_row(self, emb: torch.Tensor, source_id: str) -> None:
        self.buffer[self.head] = self._check_row(emb)
        self.source_ids[self.head] = source_id
        self.head = (self.head + 1) % self.capacity
        self.fill = min(self.fill + 1, self.capacity)

    def push_pair(self, emb_bridge: torch.Tensor, emb_raw: torch.Tensor,
                  source_id: str, domain_id: int) -> None:
        """Append the (bridge, raw) momentum embedding pair of one image."""
        if self.domain_id is not None and domain_id != self.domain_id:
            raise ValueError(
                f"queue for domain {self.domain_id} rejected domain {domain_id} "
                f"embeddings (source {source_id})"
            )
        self._push_row(emb_bridge, source_id)
        self._push_row(emb_raw, source_id)

    def snapshot(self) -> tuple[torch.Tensor, list[str]]:
        """Valid rows oldest-to-newest, detached from queue storage."""
        if self.fill < self.capacity:
            rows = self.buffer[: self.fill].clone()
            ids = list(self.source_ids[: self.fill])
        else:
            order = list(range(self.head, self.capacity)) + list(range(self.head))
            rows = self.buffer[order].clone()
            ids = [self.source_ids[i] for i in order]
        return rows, ids

    def state_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "capacity": self.capacity,
            "dim": self.dim,
            "buffer": self.buffer.clone(),
            "source_ids": list(self.source_ids),
            "head": self.head,
            "fill": self.fill,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "NegativeQueue":
        q = cls(state["domain_id"], state["capacity"], state["dim"],
                dtype=state["buffer"].dtype)
        q.buffer = state["buffer"].clone()
        q.source_ids = list(state["source_ids"])
        q.head = state["head"]
        q.fill = state["fill"]
        return q


def queue_capacity(cap_max: int, domain_size: int) -> int:
    """Queue sizing rule: min(cap_max, 2 * domain size)."""
    return min(cap_max, 2 * domain_size)


class QueueSet:
    """All negative queues of a run: one per domain, or one shared."""

    def __init__(self, domain_sizes: dict[int, int], dim: int, cap_max: int,
                 multi_queue: bool = True):
        self.multi_queue = multi_queue
        if multi_queue:
            self.queues = {
                d: NegativeQueue(d, queue_capacity(cap_max, n), dim)
                for d, n in domain_sizes.items()
            }
        else:
            total = sum(domain_sizes.values())
            self.queues = {None: NegativeQueue(None, queue_capacity(cap_max, total), dim)}

    def for_domain(self, domain_id: int) -> NegativeQueue:
        if self.multi_queue:
            return self.queues[domain_id]
        return self.queues[None]

    def push_batch(self, emb_bridge: torch.Tensor, emb_raw: torch.Tensor,
                   domain_ids, sample_ids: list[str]) -> None:
        for i, sid in enumerate(sample_ids):
            d = int(domain_ids[i])
            self.for_domain(d).push_pair(emb_bridge[i], emb_raw[i], sid, d)

    def state_dict(self) -> dict:
        return {
            "multi_queue": self.multi_queue,
            "queues": {str(k): q.state_dict() for k, q in self.queues.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.multi_queue = state["multi_queue"]
        self.queues = {}
        for key, qstate in state["queues"].items():
            k = None if key == "None" else int(key)
            self.queues[k] = NegativeQueue.from_state_dict(qstate)


def enqueue_pair(queue: NegativeQueue, emb_bridge: torch.Tensor,
                 emb_raw: torch.Tensor, source_id: str, domain_id: int) -> None:
    queue.push_pair(emb_bridge, emb_raw, source_id, domain_id)


def exclusion_mask(queue_ids: list[str], sample_ids: list[str],
                   device=None) -> torch.Tensor | None:
    """B*K mask, True where negative row k was cached from query image b."""
    if not queue_ids:
        return None
    mask = torch.zeros(len(sample_ids), len(queue_ids), dtype=torch.bool,
                       device=device)
    for b, sid in enumerate(sample_ids):
        for k, qid in enumerate(queue_ids):
            if qid == sid:
                mask[b, k] = True
    return mask


def cross_bridge_losses(q_raw: torch.Tensor, q_bridge: torch.Tensor,
                        k_bridge: torch.Tensor, k_raw: torch.Tensor,
                        negatives: torch.Tensor | None,
                        neg_mask: torch.Tensor | None,
                        cfg: ContrastiveConfig) -> torch.Tensor:
    """Per-image two-term loss given precomputed unit embeddings.

    Term 1: raw-view query against the momentum bridge key; term 2:
    bridge-view query against the momentum raw key. Both terms share the
    same negative snapshot and exclusion mask.
    """
    t1 = info_nce_batch(q_raw, k_bridge.detach(), negatives, cfg.temperature, neg_mask)
    t2 = info_nce_batch(q_bridge, k_raw.detach(), negatives, cfg.temperature, neg_mask)
    return t1 + t2


def contrastive_pair_loss(a1: torch.Tensor, a2: torch.Tensor, sample_id: str,
                          domain_id: int, encoder: EncoderState,
                          mapper: BridgeMapper | None, queue: NegativeQueue,
                          cfg: ContrastiveConfig) -> torch.Tensor:
    """Two-term contrastive loss for a single image's augmented views.

    `mapper=None` means the bridge projection is the identity (no-bridge
    baseline). Views are 3*H*W tensors; the queue is read, never written.
    """
    if a1.ndim == 3:
        a1 = a1[None]
    if a2.ndim == 3:
        a2 = a2[None]

    def to_bridge(views: torch.Tensor) -> torch.Tensor:
        if mapper is None:
            return views
        return bridge_to_encoder_input(map_to_bridge(mapper, views, domain_id))

    q_raw = encoder.embed(a1)
    q_bridge = encoder.embed(to_bridge(a1))
    with torch.no_grad():
        k_bridge = encoder.embed(to_bridge(a2), momentum=True)
        k_raw = encoder.embed(a2, momentum=True)

    negatives, queue_ids = queue.snapshot()
    negatives = negatives.to(q_raw.dtype)
    mask = None
    if cfg.exclude_own_cached:
        mask = exclusion_mask(queue_ids, [sample_id], device=q_raw.device)
    losses = cross_bridge_losses(q_raw, q_bridge, k_bridge, k_raw,
                                 negatives if negatives.numel() else None,
                                 mask, cfg)
    return losses[0]
