"""Multi-domain image corpora: ingestion, synthetic generation, augmentation.

Dataset layout on disk is ``root/<domain>/<class>/*.png`` plus a
``manifest.jsonl`` with one ``{sample_id, domain, class, path}`` record per
image. The synthetic generator draws simple geometric shapes in four
rendering styles whose edge structure is shared while color and texture
differ, so cross-style alignment is learnable from shape alone.

Every stochastic step is a pure function of explicit integer seeds: the
same (root, seed, config) always produces the same stream of batches,
regardless of worker count.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw, UnidentifiedImageError

from .edges import gaussian_blur

STYLE_NAMES = ["photo", "clipart", "sketch", "noisy_gray"]

SHAPE_NAMES = [
    "circle", "square", "triangle", "star", "cross",
    "ring", "diamond", "hexagon", "crescent", "bolt",
]


@dataclass
class DomainSample:
    """One image tagged with its domain and (optionally hidden) class."""

    image: np.ndarray  # H*W*3 uint8
    domain_id: int
    class_id: int | None
    sample_id: str

    def as_float(self) -> np.ndarray:
        return self.image.astype(np.float32) / 255.0


@dataclass
class DomainCatalog:
    domains: list[str]
    per_domain_counts: list[int]
    class_names: list[str] | None = None

    def __post_init__(self):
        if len(self.domains) != len(self.per_domain_counts):
            raise ValueError("domains and per_domain_counts length mismatch")
        for name, count in zip(self.domains, self.per_domain_counts):
            if count <= 0:
                raise ValueError(f"empty domain '{name}'")

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    @property
    def total(self) -> int:
        return int(sum(self.per_domain_counts))


@dataclass
class MultiDomainDataset:
    """In-memory dataset: an ordered sample list plus its catalog."""

    catalog: DomainCatalog
    samples: list[DomainSample]

    def __len__(self) -> int:
        return len(self.samples)

    def by_domain(self, domain_id: int) -> list[DomainSample]:
        return [s for s in self.samples if s.domain_id == domain_id]

    def domain_name(self, domain_id: int) -> str:
        return self.catalog.domains[domain_id]

    def subset(self, domain_names: list[str]) -> "MultiDomainDataset":
        """Restrict to the given domains, renumbering domain ids to 0..K-1."""
        keep = [d for d in self.catalog.domains if d in domain_names]
        missing = set(domain_names) - set(keep)
        if missing:
            raise ValueError(f"unknown domains: {sorted(missing)}")
        remap = {self.catalog.domains.index(d): i for i, d in enumerate(keep)}
        samples = [
            DomainSample(s.image, remap[s.domain_id], s.class_id, s.sample_id)
            for s in self.samples
            if s.domain_id in remap
        ]
        counts = [sum(1 for s in samples if s.domain_id == i) for i in range(len(keep))]
        return MultiDomainDataset(
            DomainCatalog(keep, counts, self.catalog.class_names), samples
        )


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def _decode_image(path: Path, image_size: int) -> np.ndarray | None:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        warnings.warn(f"skipping undecodable file {path}: {exc}")
        return None


def ingest_directory(root, image_size: int) -> MultiDomainDataset:
    """Load a root/<domain>/<class>/<images> tree into memory.

    Domains and classes are ordered alphabetically so two ingestions of the
    same tree produce identical sample orderings. Undecodable files are
    skipped with a warning; a domain with no decodable images is an error.
    """
    if image_size <= 0:
        raise ValueError("image_size must be positive")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not domain_dirs:
        raise ValueError(f"no domain directories under {root}")

    class_names = sorted(
        {c.name for d in domain_dirs for c in d.iterdir() if c.is_dir()}
    )
    class_index = {c: i for i, c in enumerate(class_names)}

    samples: list[DomainSample] = []
    counts: list[int] = []
    for domain_id, domain_dir in enumerate(domain_dirs):
        n_before = len(samples)
        for class_dir in sorted(p for p in domain_dir.iterdir() if p.is_dir()):
            for file in sorted(class_dir.iterdir()):
                if not file.is_file():
                    continue
                image = _decode_image(file, image_size)
                if image is None:
                    continue
                sample_id = f"{domain_dir.name}/{class_dir.name}/{file.name}"
                samples.append(
                    DomainSample(image, domain_id, class_index[class_dir.name], sample_id)
                )
        count = len(samples) - n_before
        if count == 0:
            raise ValueError(f"empty domain '{domain_dir.name}' under {root}")
        counts.append(count)

    catalog = DomainCatalog([d.name for d in domain_dirs], counts, class_names)
    return MultiDomainDataset(catalog, samples)


def write_manifest(dataset_root, records: list[dict]) -> Path:
    path = Path(dataset_root) / "manifest.jsonl"
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

def _regular_polygon(n: int, phase: float = 0.0) -> np.ndarray:
    ang = 2 * np.pi * np.arange(n) / n + phase
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _star_points(n: int = 5, inner: float = 0.45) -> np.ndarray:
    ang = np.pi * np.arange(2 * n) / n - np.pi / 2
    radius = np.where(np.arange(2 * n) % 2 == 0, 1.0, inner)
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


def _cross_points(arm: float = 0.35) -> np.ndarray:
    a = arm
    return np.array([
        (-a, -1), (a, -1), (a, -a), (1, -a), (1, a), (a, a),
        (a, 1), (-a, 1), (-a, a), (-1, a), (-1, -a), (-a, -a),
    ], dtype=np.float64)


def _bolt_points() -> np.ndarray:
    return np.array([
        (-0.25, -1.0), (0.45, -1.0), (0.05, -0.15), (0.55, -0.15),
        (-0.35, 1.0), (-0.05, 0.2), (-0.55, 0.2),
    ], dtype=np.float64)


def _shape_mask(shape: str, size: int, center: np.ndarray, scale: float,
                angle: float) -> np.ndarray:
    """Binary mask of the shape, rendered 4x supersampled for smooth edges."""
    ss = 4
    big = size * ss
    img = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(img)

    def to_px(points: np.ndarray) -> list[tuple[float, float]]:
        c, s = math.cos(angle), math.sin(angle)
        rot = points @ np.array([[c, -s], [s, c]])
        px = (center[None, :] + scale * rot) * ss
        return [tuple(p) for p in px]

    def ellipse(cx, cy, r):
        draw.ellipse(
            [(cx - r) * ss, (cy - r) * ss, (cx + r) * ss, (cy + r) * ss], fill=255
        )

    def ellipse_erase(cx, cy, r):
        draw.ellipse(
            [(cx - r) * ss, (cy - r) * ss, (cx + r) * ss, (cy + r) * ss], fill=0
        )

    cx, cy = center
    if shape == "circle":
        ellipse(cx, cy, scale)
    elif shape == "square":
        draw.polygon(to_px(_regular_polygon(4, np.pi / 4)), fill=255)
    elif shape == "triangle":
        draw.polygon(to_px(_regular_polygon(3, -np.pi / 2)), fill=255)
    elif shape == "star":
        draw.polygon(to_px(_star_points()), fill=255)
    elif shape == "cross":
        draw.polygon(to_px(_cross_points()), fill=255)
    elif shape == "ring":
        ellipse(cx, cy, scale)
        hole = 0.55 * scale
        ox = hole * math.cos(angle) * 0.0
        ellipse_erase(cx + ox, cy, hole)
    elif shape == "diamond":
        pts = _regular_polygon(4, 0.0) * np.array([1.0, 0.62])
        draw.polygon(to_px(pts), fill=255)
    elif shape == "hexagon":
        draw.polygon(to_px(_regular_polygon(6, 0.0)), fill=255)
    elif shape == "crescent":
        ellipse(cx, cy, scale)
        off = 0.45 * scale
        ellipse_erase(cx + off * math.cos(angle), cy + off * math.sin(angle),
                      0.82 * scale)
    elif shape == "bolt":
        draw.polygon(to_px(_bolt_points()), fill=255)
    else:
        raise ValueError(f"unknown shape '{shape}'")

    small = img.resize((size, size), Image.BILINEAR)
    return np.asarray(small, dtype=np.float64) / 255.0


def _low_freq_noise(rng: np.random.Generator, size: int, cells: int = 6) -> np.ndarray:
    coarse = rng.random((cells, cells))
    t = torch.from_numpy(coarse)[None, None]
    up = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return up[0, 0].numpy()


def _hsv_to_rgb_scalar(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb, dtype=np.float64)


def _render_style(style: str, mask: np.ndarray, rng: np.random.Generator,
                  size: int) -> np.ndarray:
    """Composite the shape mask into a style-specific RGB image in [0,1]."""
    hue = rng.random()
    inside = mask[..., None]

    if style == "photo":
        bg_color = _hsv_to_rgb_scalar(rng.random(), 0.35 + 0.3 * rng.random(), 0.55)
        texture = _low_freq_noise(rng, size)[..., None] * 0.35
        background = np.clip(bg_color[None, None, :] * (0.7 + texture), 0, 1)
        fill = _hsv_to_rgb_scalar(hue, 0.8, 0.85)
        fill_tex = _low_freq_noise(rng, size, cells=8)[..., None] * 0.25
        shape_px = np.clip(fill[None, None, :] * (0.8 + fill_tex), 0, 1)
        img = background * (1 - inside) + shape_px * inside
        img = img + rng.normal(0, 0.02, img.shape)
    elif style == "clipart":
        bg = _hsv_to_rgb_scalar(rng.random(), 0.15, 0.92 + 0.06 * rng.random())
        fill = _hsv_to_rgb_scalar(hue, 0.95, 0.95)
        img = bg[None, None, :] * (1 - inside) + fill[None, None, :] * inside
        edge = _mask_boundary(mask, thickness=2)[..., None]
        img = img * (1 - edge) + 0.08 * edge
    elif style == "sketch":
        paper = 0.96 + 0.03 * rng.random()
        img = np.full((size, size, 3), paper, dtype=np.float64)
        edge = _mask_boundary(mask, thickness=1)
        stroke = gaussian_blur(edge, 3, 0.7)
        stroke = np.clip(stroke / max(stroke.max(), 1e-8), 0, 1)[..., None]
        ink = 0.15 + 0.1 * rng.random()
        img = img * (1 - stroke) + ink * stroke
    elif style == "noisy_gray":
        bg_level = 0.72 + 0.1 * rng.random()
        fg_level = 0.30 + 0.15 * rng.random()
        gray = bg_level * (1 - mask) + fg_level * mask
        gray = gray + rng.normal(0, 0.05, gray.shape)
        salt = rng.random(gray.shape)
        gray = np.where(salt < 0.01, 1.0, np.where(salt > 0.99, 0.0, gray))
        img = np.repeat(gray[..., None], 3, axis=2)
    else:
        raise ValueError(f"unknown style '{style}'")

    return np.clip(img, 0.0, 1.0)


def _mask_boundary(mask: np.ndarray, thickness: int = 1) -> np.ndarray:
    """Inner boundary band of a soft mask, `thickness` erosion steps wide."""
    hard = mask > 0.5
    eroded = hard.copy()
    for _ in range(thickness):
        interior = (
            eroded
            & np.roll(eroded, 1, 0) & np.roll(eroded, -1, 0)
            & np.roll(eroded, 1, 1) & np.roll(eroded, -1, 1)
        )
        eroded = interior
    return (hard & ~eroded).astype(np.float64)


def make_synthetic(out_dir, n_domains: int, n_classes: int, per_class: int,
                   image_size: int, seed: int) -> Path:
    """Write a deterministic synthetic multi-domain dataset to disk.

    Each (domain, class) cell holds exactly `per_class` PNGs that vary in
    position, scale, rotation and color. Images for domain n depend only on
    (seed, n, class, index), so regenerating with a different n_domains
    leaves the shared domains byte-identical.
    """
    if not 2 <= n_domains <= 4:
        raise ValueError(f"n_domains must be in 2..4, got {n_domains}")
    if n_classes > len(SHAPE_NAMES):
        raise ValueError(
            f"n_classes={n_classes} exceeds available shape classes ({len(SHAPE_NAMES)})"
        )
    if n_classes < 1 or per_class < 1 or image_size < 16:
        raise ValueError("need n_classes >= 1, per_class >= 1, image_size >= 16")

    out_dir = Path(out_dir)
    records = []
    for d in range(n_domains):
        style = STYLE_NAMES[d]
        for c in range(n_classes):
            shape = SHAPE_NAMES[c]
            cell_dir = out_dir / style / shape
            cell_dir.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                rng = np.random.default_rng([seed, d, c, i])
                center = image_size * (0.5 + 0.12 * (rng.random(2) * 2 - 1))
                scale = image_size * (0.22 + 0.13 * rng.random())
                angle = rng.random() * 2 * np.pi
                mask = _shape_mask(shape, image_size, center, scale, angle)
                img = _render_style(style, mask, rng, image_size)
                pixels = (img * 255.0 + 0.5).astype(np.uint8)
                name = f"{shape}_{i:04d}.png"
                Image.fromarray(pixels).save(cell_dir / name)
                records.append({
                    "sample_id": f"{style}/{shape}/{name}",
                    "domain": style,
                    "class": shape,
                    "path": f"{style}/{shape}/{name}",
                })
    return write_manifest(out_dir, records)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    """MoCo-v2-style augmentation recipe; every probability is a knob."""

    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    jitter_strength: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    gray_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)


@dataclass
class AugmentedPair:
    a1: np.ndarray  # H*W*3 float32 in [0,1]
    a2: np.ndarray
    source: DomainSample
    seeds: tuple[int, int]


def _resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
    out = F.interpolate(t.float(), size=(size, size), mode="bilinear",
                        align_corners=False)
    return out[0].numpy().transpose(1, 2, 0)


def _random_resized_crop(image: np.ndarray, rng: np.random.Generator,
                         cfg: AugmentConfig) -> np.ndarray:
    h, w = image.shape[:2]
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        log_ratio = (math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
        ratio = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            if ch == h and cw == w:
                return image.copy()
            crop = image[top : top + ch, left : left + cw]
            return _resize_bilinear(crop, h)
    return image.copy()


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    safe = np.maximum(delta, 1e-12)
    h = np.where(
        maxc == r, (g - b) / safe,
        np.where(maxc == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe),
    )
    h = np.where(delta == 0, 0.0, h / 6.0 % 1.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    choices = np.stack([
        np.stack([v, t, p], axis=-1), np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1), np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1), np.stack([v, p, q], axis=-1),
    ], axis=0)
    return np.take_along_axis(choices, i[None, ..., None], axis=0)[0]


def _luma(image: np.ndarray) -> np.ndarray:
    return image @ np.array([0.299, 0.587, 0.114], dtype=image.dtype)


def _color_jitter(image: np.ndarray, rng: np.random.Generator,
                  strength: tuple[float, float, float, float]) -> np.ndarray:
    sb, sc, ss, sh = strength
    order = rng.permutation(4)
    out = image
    for op in order:
        if op == 0 and sb > 0:
            out = out * rng.uniform(1 - sb, 1 + sb)
        elif op == 1 and sc > 0:
            mean = _luma(np.clip(out, 0, 1)).mean()
            out = mean + (out - mean) * rng.uniform(1 - sc, 1 + sc)
        elif op == 2 and ss > 0:
            gray = _luma(np.clip(out, 0, 1))[..., None]
            out = gray + (out - gray) * rng.uniform(1 - ss, 1 + ss)
        elif op == 3 and sh > 0:
            hsv = _rgb_to_hsv(np.clip(out, 0, 1))
            hsv[..., 0] = (hsv[..., 0] + rng.uniform(-sh, sh)) % 1.0
            out = _hsv_to_rgb(hsv)
        out = np.clip(out, 0.0, 1.0)
    return out


def augment(sample: DomainSample, seed: int,
            cfg: AugmentConfig | None = None) -> np.ndarray:
    """One stochastic view of a sample, fully determined by `seed`."""
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    img = sample.as_float().astype(np.float64)

    img = _random_resized_crop(img, rng, cfg)
    if rng.random() < cfg.flip_p:
        img = img[:, ::-1, :].copy()
    if rng.random() < cfg.jitter_p:
        img = _color_jitter(img, rng, cfg.jitter_strength)
    if rng.random() < cfg.gray_p:
        img = np.repeat(_luma(img)[..., None], 3, axis=2)
    if rng.random() < cfg.blur_p:
        sigma = rng.uniform(*cfg.blur_sigma)
        kernel = max(3, (img.shape[0] // 10) | 1)
        img = np.stack(
            [gaussian_blur(img[..., c], kernel, sigma) for c in range(3)], axis=-1
        )
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment_pair(sample: DomainSample, seed1: int, seed2: int,
                 cfg: AugmentConfig | None = None) -> AugmentedPair:
    return AugmentedPair(
        a1=augment(sample, seed1, cfg),
        a2=augment(sample, seed2, cfg),
        source=sample,
        seeds=(seed1, seed2),
    )


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    a1: np.ndarray  # B*H*W*3 float32
    a2: np.ndarray
    domain_ids: np.ndarray  # B int64
    class_ids: np.ndarray  # B int64, -1 where hidden/unknown
    sample_ids: list[str]
    domain_counts: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.sample_ids)


def _view_seed(master_seed: int, step: int, position: int, view: int) -> int:
    ss = np.random.SeedSequence([master_seed, step, position, view])
    return int(ss.generate_state(1)[0])


class PairBatchSampler:
    """Seeded stream of augmented-pair batches over the domain union.

    Each epoch is a fresh permutation of all samples; batch `k` of the run
    is a pure function of (seed, k), which makes resumption and concurrent
    prefetching trivially consistent with single-worker execution.
    """

    def __init__(self, dataset: MultiDomainDataset, batch_size: int, seed: int,
                 aug_cfg: AugmentConfig | None = None, workers: int = 0,
                 drop_last: bool = False):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.aug_cfg = aug_cfg or AugmentConfig()
        self.workers = workers
        self.drop_last = drop_last

    @property
    def batches_per_epoch(self) -> int:
        n = len(self.dataset)
        if self.drop_last:
            return n // self.batch_size
        return math.ceil(n / self.batch_size)

    def _epoch_permutation(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, epoch])
        return rng.permutation(len(self.dataset))

    def batch_at(self, step: int) -> Batch:
        """The step-th batch of the run (epochs are consumed in order)."""
        bpe = self.batches_per_epoch
        epoch, idx = divmod(step, bpe)
        perm = self._epoch_permutation(epoch)
        lo = idx * self.batch_size
        indices = perm[lo : lo + self.batch_size]
        samples = [self.dataset.samples[i] for i in indices]

        def build(args):
            pos, sample = args
            v1 = augment(sample, _view_seed(self.seed, step, pos, 1), self.aug_cfg)
            v2 = augment(sample, _view_seed(self.seed, step, pos, 2), self.aug_cfg)
            return v1, v2

        jobs = list(enumerate(samples))
        if self.workers and self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                views = list(pool.map(build, jobs))
        else:
            views = [build(j) for j in jobs]

        a1 = np.stack([v[0] for v in views])
        a2 = np.stack([v[1] for v in views])
        domain_ids = np.array([s.domain_id for s in samples], dtype=np.int64)
        class_ids = np.array(
            [s.class_id if s.class_id is not None else -1 for s in samples],
            dtype=np.int64,
        )
        counts: dict[int, int] = {}
        for d in domain_ids:
            counts[int(d)] = counts.get(int(d), 0) + 1
        return Batch(a1, a2, domain_ids, class_ids,
                     [s.sample_id for s in samples], counts)

    def epoch(self, epoch: int):
        bpe = self.batches_per_epoch
        for idx in range(bpe):
            yield self.batch_at(epoch * bpe + idx)
