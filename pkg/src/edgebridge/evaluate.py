"""Frozen-feature evaluation: kNN and linear probes, the label-fraction
generalization protocol over unseen target domains, few-shot adaptation
with 1/3 labeled source images per class, and a retrieval-grid renderer.

All operations are read-only over a frozen backbone; features are compared
by cosine similarity throughout.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .data import DomainSample, MultiDomainDataset


@dataclass
class EmbeddingIndex:
    features: np.ndarray  # M*d float32
    labels: np.ndarray  # M int64
    domains: np.ndarray  # M int64
    sample_ids: list[str]

    def __post_init__(self):
        m = self.features.shape[0]
        if not (len(self.labels) == len(self.domains) == len(self.sample_ids) == m):
            raise ValueError("index field lengths are inconsistent")

    def __len__(self) -> int:
        return self.features.shape[0]

    def select(self, mask: np.ndarray) -> "EmbeddingIndex":
        idx = np.nonzero(mask)[0]
        return EmbeddingIndex(
            self.features[idx], self.labels[idx], self.domains[idx],
            [self.sample_ids[i] for i in idx],
        )


@dataclass
class EvalReport:
    """Per-domain and aggregate accuracies plus protocol metadata.

    `overall` pools correct/total across every test item; `average` is the
    unweighted mean of per-domain accuracies. They differ whenever target
    test sets have unequal sizes.
    """

    per_domain_accuracy: dict[str, float]
    overall: float
    average: float
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_domain_accuracy": self.per_domain_accuracy,
                "overall": self.overall,
                "average": self.average,
                "metadata": self.metadata,
            },
            sort_keys=True, indent=2,
        )


def _as_batch_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(images.transpose(0, 3, 1, 2)).float().contiguous()


@torch.no_grad()
def extract_features(backbone: torch.nn.Module, samples: list[DomainSample],
                     batch_size: int = 128) -> np.ndarray:
    """Frozen-backbone features for a list of samples (eval mode, no grad)."""
    was_training = backbone.training
    backbone.eval()
    chunks = []
    for lo in range(0, len(samples), batch_size):
        block = samples[lo : lo + batch_size]
        images = np.stack([s.as_float() for s in block])
        feats = backbone(_as_batch_tensor(images))
        chunks.append(feats.cpu().numpy().astype(np.float32))
    if was_training:
        backbone.train()
    return np.concatenate(chunks, axis=0)


def build_index(backbone: torch.nn.Module, samples: list[DomainSample],
                batch_size: int = 128) -> EmbeddingIndex:
    feats = extract_features(backbone, samples, batch_size)
    labels = np.array(
        [s.class_id if s.class_id is not None else -1 for s in samples], dtype=np.int64
    )
    domains = np.array([s.domain_id for s in samples], dtype=np.int64)
    return EmbeddingIndex(feats, labels, domains, [s.sample_id for s in samples])


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def knn_classify(index: EmbeddingIndex, query: np.ndarray, k: int = 5,
                 exclude_sample_id: str | None = None) -> int:
    """Cosine-similarity k-nearest-neighbor majority vote.

    Vote ties break toward the class with the smaller summed cosine
    distance among its voting neighbors, then toward the lower class
    index. `exclude_sample_id` drops a row (leave-one-out queries).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise ValueError("empty index")
    feats = index.features
    labels = index.labels
    ids = index.sample_ids
    keep = np.ones(len(index), dtype=bool)
    if exclude_sample_id is not None:
        keep = np.array([sid != exclude_sample_id for sid in ids], dtype=bool)
        if not keep.any():
            raise ValueError("exclusion removed every index row")
    feats = feats[keep]
    labels = labels[keep]

    m = feats.shape[0]
    if k > m:
        warnings.warn(f"k={k} exceeds index size {m}; clamping to {m}")
        k = m
    sims = _unit_rows(feats) @ _unit_rows(query.astype(np.float64).reshape(1, -1))[0]
    # stable ordering: by descending similarity, index as tiebreak
    order = np.lexsort((np.arange(m), -sims))[:k]
    top_labels = labels[order]
    top_sims = sims[order]

    votes: dict[int, int] = {}
    dist_sums: dict[int, float] = {}
    for lab, sim in zip(top_labels, top_sims):
        lab = int(lab)
        votes[lab] = votes.get(lab, 0) + 1
        dist_sums[lab] = dist_sums.get(lab, 0.0) + (1.0 - float(sim))
    best_votes = max(votes.values())
    tied = [lab for lab, v in votes.items() if v == best_votes]
    tied.sort(key=lambda lab: (dist_sums[lab], lab))
    return tied[0]


def knn_classify_many(index: EmbeddingIndex, queries: np.ndarray, k: int = 5,
                      exclude_sample_ids: list[str] | None = None) -> np.ndarray:
    out = np.empty(queries.shape[0], dtype=np.int64)
    for i in range(queries.shape[0]):
        excl = exclude_sample_ids[i] if exclude_sample_ids else None
        out[i] = knn_classify(index, queries[i], k, exclude_sample_id=excl)
    return out


def linear_probe(train_feats: np.ndarray, train_labels: np.ndarray,
                 test_feats: np.ndarray, test_labels: np.ndarray,
                 max_epochs: int = 500, grad_tol: float = 1e-5,
                 lr: float = 0.5) -> float:
    """Multinomial logistic regression on frozen features; returns test accuracy.

    Full-batch optimization from a zero-initialized classifier for at most
    `max_epochs` iterations, stopping early once the gradient norm falls
    below `grad_tol`.
    """
    classes = np.unique(train_labels)
    if classes.size < 2:
        raise ValueError("linear probe needs at least 2 classes in the training set")
    remap = {int(c): i for i, c in enumerate(classes)}
    y = torch.tensor([remap[int(c)] for c in train_labels], dtype=torch.long)
    x = torch.from_numpy(train_feats.astype(np.float64))
    w = torch.zeros(classes.size, x.shape[1], dtype=torch.float64, requires_grad=True)
    b = torch.zeros(classes.size, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([w, b], lr=lr)
    for _ in range(max_epochs):
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(x @ w.T + b, y)
        loss.backward()
        gnorm = math.sqrt(float(w.grad.norm()) ** 2 + float(b.grad.norm()) ** 2)
        if gnorm < grad_tol:
            break
        opt.step()
    with torch.no_grad():
        logits = torch.from_numpy(test_feats.astype(np.float64)) @ w.T + b
        pred = logits.argmax(dim=1).numpy()
    pred_original = classes[pred]
    return float((pred_original == test_labels).mean())


def stratified_label_choice(labels: np.ndarray, fraction: float,
                            seed: int) -> np.ndarray:
    """Indices of a stratified labeled subset: ceil(fraction*M) total with
    at least one pick per class, proportional quotas, largest-remainder
    rounding. Deterministic given the seed."""
    if not 0 < fraction <= 1:
        raise ValueError(f"label fraction must lie in (0, 1], got {fraction}")
    classes, counts = np.unique(labels, return_counts=True)
    if (counts == 0).any():
        raise ValueError("class with zero source images")
    total_target = math.ceil(fraction * labels.size)
    raw = fraction * counts
    quotas = np.maximum(1, np.floor(raw).astype(int))
    quotas = np.minimum(quotas, counts)
    remainder = raw - np.floor(raw)
    # distribute what's missing by largest fractional remainder
    order = np.lexsort((classes, -remainder))
    i = 0
    while quotas.sum() < total_target and i < 10 * classes.size:
        c = order[i % classes.size]
        if quotas[c] < counts[c]:
            quotas[c] += 1
        i += 1
    rng = np.random.default_rng(seed)
    chosen = []
    for c, quota in zip(classes, quotas):
        pool = np.nonzero(labels == c)[0]
        pick = rng.permutation(pool)[:quota]
        chosen.append(pick)
    return np.sort(np.concatenate(chosen))


def eval_udg(backbone: torch.nn.Module, dataset: MultiDomainDataset,
             source_domains: list[str], target_domains: list[str],
             label_fraction: float, probe: str = "knn", seed: int = 0,
             k: int = 5) -> EvalReport:
    """Label-fraction protocol: reveal labels for a stratified fraction of
    the source-domain pool, fit/index a probe on frozen features, and
    report accuracy on each target domain."""
    if probe not in ("knn", "linear"):
        raise ValueError(f"probe must be 'knn' or 'linear', got '{probe}'")
    name_to_id = {n: i for i, n in enumerate(dataset.catalog.domains)}
    src_ids = [name_to_id[n] for n in source_domains]
    tgt_ids = [name_to_id[n] for n in target_domains]

    source = [s for s in dataset.samples if s.domain_id in src_ids]
    if not source:
        raise ValueError(f"no samples in source domains {source_domains}")
    labels = np.array([s.class_id for s in source], dtype=np.int64)
    chosen = stratified_label_choice(labels, label_fraction, seed)
    labeled = [source[i] for i in chosen]
    labeled_index = build_index(backbone, labeled)

    per_domain: dict[str, float] = {}
    correct_total = 0
    n_total = 0
    for tid in tgt_ids:
        targets = dataset.by_domain(tid)
        queries = build_index(backbone, targets)
        truth = queries.labels
        if probe == "knn":
            pred = knn_classify_many(labeled_index, queries.features, k)
            acc = float((pred == truth).mean())
            n_correct = int((pred == truth).sum())
        else:
            acc = linear_probe(labeled_index.features, labeled_index.labels,
                               queries.features, truth)
            n_correct = int(round(acc * len(targets)))
        per_domain[dataset.domain_name(tid)] = acc
        correct_total += n_correct
        n_total += len(targets)

    return EvalReport(
        per_domain_accuracy=per_domain,
        overall=correct_total / n_total,
        average=float(np.mean(list(per_domain.values()))),
        metadata={
            "protocol": "udg",
            "probe": probe,
            "k": k if probe == "knn" else None,
            "label_fraction": label_fraction,
            "seed": seed,
            "source_domains": list(source_domains),
            "target_domains": list(target_domains),
            "labeled_sample_ids": [s.sample_id for s in labeled],
        },
    )


def sample_shots(source: list[DomainSample], shots: int, seed: int) -> list[DomainSample]:
    """`shots` samples per class, seeded; errors if any class is short."""
    by_class: dict[int, list[DomainSample]] = {}
    for s in source:
        by_class.setdefault(int(s.class_id), []).append(s)
    rng = np.random.default_rng(seed)
    picked: list[DomainSample] = []
    for c in sorted(by_class):
        pool = by_class[c]
        if len(pool) < shots:
            raise ValueError(
                f"class {c} has {len(pool)} source images, fewer than shots={shots}"
            )
        idx = rng.permutation(len(pool))[:shots]
        picked.extend(pool[i] for i in idx)
    return picked


def eval_fuda(backbone: torch.nn.Module, dataset: MultiDomainDataset,
              source_domain: str, target_domain: str, shots: int,
              probe: str = "knn", seed: int = 0, k: int = 1) -> EvalReport:
    """Few-shot protocol: `shots` labeled source images per class form the
    probe; accuracy is measured on the target domain. When a query is
    itself a shot image (target == source), its own row is excluded, so
    1-shot self-evaluation is exactly leave-one-out."""
    if shots not in (1, 3):
        raise ValueError(f"shots must be 1 or 3, got {shots}")
    name_to_id = {n: i for i, n in enumerate(dataset.catalog.domains)}
    source = dataset.by_domain(name_to_id[source_domain])
    targets = dataset.by_domain(name_to_id[target_domain])
    shot_samples = sample_shots(source, shots, seed)
    shot_index = build_index(backbone, shot_samples)
    query_index = build_index(backbone, targets)

    truth = query_index.labels
    if probe == "knn":
        pred = knn_classify_many(shot_index, query_index.features, k,
                                 exclude_sample_ids=query_index.sample_ids)
        acc = float((pred == truth).mean())
    elif probe == "linear":
        acc = linear_probe(shot_index.features, shot_index.labels,
                           query_index.features, truth)
    else:
        raise ValueError(f"probe must be 'knn' or 'linear', got '{probe}'")

    return EvalReport(
        per_domain_accuracy={target_domain: acc},
        overall=acc,
        average=acc,
        metadata={
            "protocol": "fuda",
            "probe": probe,
            "k": k if probe == "knn" else None,
            "shots": shots,
            "seed": seed,
            "source_domain": source_domain,
            "target_domain": target_domain,
            "shot_sample_ids": [s.sample_id for s in shot_samples],
        },
    )


def domain_probe_accuracy(backbone: torch.nn.Module, mappers: dict,
                          dataset: MultiDomainDataset, seed: int = 0,
                          holdout_fraction: float = 0.3) -> float:
    """How well a freshly fitted linear probe can tell domains apart from
    bridge-projected features; lower means better cross-domain alignment."""
    from .bridge import bridge_to_encoder_input, map_to_bridge

    feats = []
    domains = []
    was_training = backbone.training
    backbone.eval()
    with torch.no_grad():
        for d, mapper in mappers.items():
            samples = dataset.by_domain(d)
            for lo in range(0, len(samples), 128):
                block = samples[lo : lo + 128]
                images = np.stack([s.as_float() for s in block])
                views = _as_batch_tensor(images)
                bridge = bridge_to_encoder_input(map_to_bridge(mapper, views, d))
                feats.append(backbone(bridge).cpu().numpy())
                domains.extend([d] * len(block))
    if was_training:
        backbone.train()
    feats = np.concatenate(feats, axis=0).astype(np.float32)
    domains = np.array(domains, dtype=np.int64)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(domains))
    n_hold = max(1, int(holdout_fraction * len(domains)))
    test_idx, train_idx = order[:n_hold], order[n_hold:]
    return linear_probe(feats[train_idx], domains[train_idx],
                        feats[test_idx], domains[test_idx])


def retrieval_grid(backbone: torch.nn.Module, query: DomainSample,
                   index: EmbeddingIndex, dataset: MultiDomainDataset,
                   top_k: int, out_path) -> np.ndarray:
    """Render per-domain nearest neighbors of a query as a PNG image grid.

    One row per domain in the index, query image leftmost, then the top_k
    most cosine-similar images of that domain, separated by thin borders.
    """
    images_by_id = {s.sample_id: s.image for s in dataset.samples}
    qfeat = extract_features(backbone, [query])[0]
    rows = []
    for d in sorted(set(int(x) for x in index.domains)):
        sub = index.select(index.domains == d)
        sims = _unit_rows(sub.features) @ _unit_rows(qfeat.reshape(1, -1))[0]
        order = np.lexsort((np.arange(len(sub)), -sims))[:top_k]
        row_imgs = [query.image] + [images_by_id[sub.sample_ids[i]] for i in order]
        rows.append(row_imgs)

    h, w = query.image.shape[:2]
    pad = 2
    grid_h = len(rows) * (h + pad) + pad
    grid_w = (top_k + 1) * (w + pad) + pad
    canvas = np.full((grid_h, grid_w, 3), 255, dtype=np.uint8)
    for r, row_imgs in enumerate(rows):
        for c, img in enumerate(row_imgs):
            y = pad + r * (h + pad)
            x = pad + c * (w + pad)
            canvas[y : y + h, x : x + w] = img
    Image.fromarray(canvas).save(out_path)
    return canvas
