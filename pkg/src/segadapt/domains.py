"""Procedural multi-domain segmentation benchmark.

Every domain shares the same scene-geometry distribution (a horizon splitting
backdrop from ground, with blocks, blobs, boxes, posts and figures layered on
top).  Domains differ only in how a label map is rendered: class palette,
tone curve, blur and sensor noise.  For a fixed geometry seed the label map is
therefore identical across domains and only the image changes.
"""

from __future__ import annotations

import colorsys
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np
from scipy import ndimage

from .errors import ConfigError, IsolationError

CLASS_NAMES = ("ground", "block", "post", "blob", "backdrop", "figure", "box")
NUM_CLASSES = len(CLASS_NAMES)
GROUND, BLOCK, POST, BLOB, BACKDROP, FIGURE, BOX = range(NUM_CLASSES)

# Offsets that keep the geometry seeds of every (domain, split) pair disjoint.
_DOMAIN_STRIDE = 1_000_000
_EVAL_OFFSET = 500_000


@dataclass(frozen=True)
class DomainSpec:
    name: str
    palette: tuple[tuple[float, float, float], ...]
    noise_sigma: float = 0.0
    gamma: float = 1.0
    blur_radius: int = 0
    texture_seed: int = 0

    def __post_init__(self):
        pal = np.asarray(self.palette, dtype=np.float64)
        if pal.shape != (NUM_CLASSES, 3):
            raise ConfigError(
                f"domain {self.name!r}: palette must have {NUM_CLASSES} RGB entries, got shape {pal.shape}"
            )
        if not np.all((pal >= 0.0) & (pal <= 1.0)):
            raise ConfigError(f"domain {self.name!r}: palette components must lie in [0, 1]")
        if not self.noise_sigma >= 0:
            raise ConfigError(f"domain {self.name!r}: noise_sigma must be >= 0")
        if not self.gamma > 0:
            raise ConfigError(f"domain {self.name!r}: gamma must be > 0")
        if int(self.blur_radius) != self.blur_radius or self.blur_radius < 0:
            raise ConfigError(f"domain {self.name!r}: blur_radius must be a non-negative integer")
        object.__setattr__(self, "palette", tuple(tuple(float(c) for c in rgb) for rgb in pal))
        object.__setattr__(self, "blur_radius", int(self.blur_radius))

    def style_key(self):
        """Everything that affects rendering, excluding the name."""
        return (self.palette, float(self.noise_sigma), float(self.gamma), self.blur_radius, self.texture_seed)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["palette"] = [list(c) for c in self.palette]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class Scene:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    label: np.ndarray  # H x W, int64 in [0, C)


def restyle_palette(palette, hue_shift=0.0, saturation=1.0, value=1.0, value_offset=0.0):
    """Apply one global HSV transform to every palette entry."""
    out = []
    for r, g, b in palette:
        h, s, v = colorsys.rgb_to_hsv(r, g, b)
        h = (h + hue_shift) % 1.0
        s = min(max(s * saturation, 0.0), 1.0)
        v = min(max(v * value + value_offset, 0.0), 1.0)
        out.append(tuple(round(c, 4) for c in colorsys.hsv_to_rgb(h, s, v)))
    return tuple(out)


SOURCE_PALETTE = (
    (0.50, 0.42, 0.36),  # ground
    (0.72, 0.30, 0.24),  # block
    (0.93, 0.85, 0.20),  # post
    (0.20, 0.58, 0.22),  # blob
    (0.45, 0.68, 0.92),  # backdrop
    (0.86, 0.32, 0.72),  # figure
    (0.18, 0.26, 0.62),  # box
)


def default_domains():
    """Source, two training targets and the held-out unseen domain."""
    source = DomainSpec("synth", SOURCE_PALETTE, noise_sigma=0.0, gamma=1.0, blur_radius=0, texture_seed=11)
    # Targets differ from the source in sensor effects (brightness, gamma,
    # noise, blur) rather than hue, so a source-trained model is uncertain on
    # them instead of confidently wrong.
    hazy = DomainSpec(
        "hazy",
        restyle_palette(SOURCE_PALETTE, saturation=0.8, value=0.85, value_offset=0.1),
        noise_sigma=0.15, gamma=0.9, blur_radius=1, texture_seed=23,
    )
    dusk = DomainSpec("dusk", restyle_palette(SOURCE_PALETTE), noise_sigma=0.35, gamma=1.0, blur_radius=0, texture_seed=37)
    grain = DomainSpec(
        "grain",
        restyle_palette(SOURCE_PALETTE, saturation=0.9, value=0.9, value_offset=0.05),
        noise_sigma=0.30, gamma=1.1, blur_radius=1, texture_seed=41,
    )
    return source, [hazy, dusk], grain


# -- geometry -----------------------------------------------------------------


def _fill_rect(label, cls, top, left, height, width):
    H, W = label.shape
    t, l = max(int(top), 0), max(int(left), 0)
    b, r = min(int(top + height), H), min(int(left + width), W)
    if b > t and r > l:
        label[t:b, l:r] = cls


def _fill_ellipse(label, cls, cy, cx, ry, rx, yy, xx):
    mask = ((yy - cy) / max(ry, 0.5)) ** 2 + ((xx - cx) / max(rx, 0.5)) ** 2 <= 1.0
    label[mask] = cls


def scene_geometry(seed, size):
    """Label map of one scene.  Later layers overwrite earlier ones (z-order)."""
    H, W = size
    rng = np.random.default_rng(seed)
    s = min(H, W) / 64.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    label = np.empty((H, W), dtype=np.int64)

    horizon = rng.uniform(0.38, 0.58) * H
    tilt = rng.uniform(-0.08, 0.08)
    label[:] = BACKDROP
    label[yy >= horizon + tilt * (xx - W / 2)] = GROUND

    def ground_at(x):
        return horizon + tilt * (x - W / 2)

    if rng.random() < 0.8:  # buildings standing on the horizon
        for _ in range(rng.integers(1, 4)):
            w = rng.uniform(8, 20) * s
            x0 = rng.uniform(-0.1 * W, W - 0.5 * w)
            h = rng.uniform(10, 26) * s
            base = ground_at(x0 + w / 2) + rng.uniform(1, 4) * s
            _fill_rect(label, BLOCK, base - h, x0, h, w)

    if rng.random() < 0.75:  # canopies: a few overlapping ellipses
        for _ in range(rng.integers(1, 3)):
            cx = rng.uniform(0, W)
            cy = ground_at(cx) - rng.uniform(4, 12) * s
            for _ in range(rng.integers(2, 4)):
                _fill_ellipse(
                    label, BLOB, cy + rng.uniform(-3, 3) * s, cx + rng.uniform(-4, 4) * s,
                    rng.uniform(3, 7) * s, rng.uniform(3, 8) * s, yy, xx,
                )

    if rng.random() < 0.75:  # vehicles on the ground plane
        for _ in range(rng.integers(1, 3)):
            w = rng.uniform(9, 16) * s
            h = rng.uniform(5, 8) * s
            x0 = rng.uniform(0, W - w)
            bottom = rng.uniform(ground_at(x0) + h * 0.6, H + 1)
            _fill_rect(label, BOX, bottom - h, x0, h, w)

    if rng.random() < 0.7:  # poles
        for _ in range(rng.integers(1, 4)):
            w = max(1.0, round(rng.uniform(1, 2.5) * s))
            h = rng.uniform(12, 24) * s
            x0 = rng.uniform(0, W - w)
            bottom = rng.uniform(ground_at(x0) + 1, ground_at(x0) + 10 * s)
            _fill_rect(label, POST, bottom - h, x0, h, w)

    if rng.random() < 0.65:  # pedestrians: head + torso
        for _ in range(rng.integers(1, 3)):
            h = rng.uniform(7, 12) * s
            w = max(2.0, h * 0.35)
            x0 = rng.uniform(0, W - w)
            bottom = rng.uniform(ground_at(x0) + 2, H)
            _fill_rect(label, FIGURE, bottom - 0.75 * h, x0, 0.75 * h, w)
            r = max(1.0, 0.16 * h)
            _fill_ellipse(label, FIGURE, bottom - 0.75 * h - r, x0 + w / 2, r, r, yy, xx)
    return label


def render(label, spec: DomainSpec, seed):
    """Render a label map in a domain's style."""
    palette = np.asarray(spec.palette, dtype=np.float64)
    img = palette[label]
    if spec.gamma != 1.0:
        img = img ** spec.gamma
    if spec.blur_radius > 0:
        k = 2 * spec.blur_radius + 1
        img = ndimage.uniform_filter(img, size=(k, k, 1), mode="nearest")
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.texture_seed, seed])
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_scene(spec: DomainSpec, seed: int, size=(64, 64)) -> Scene:
    if not isinstance(spec, DomainSpec):
        raise ConfigError("generate_scene expects a DomainSpec")
    try:
        H, W = (int(v) for v in size)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid size {size!r}") from None
    if H < 16 or W < 16:
        raise ConfigError(f"scene size must be at least 16x16, got {H}x{W}")
    label = scene_geometry(seed, (H, W))
    return Scene(render(label, spec, seed), label)


# -- datasets -----------------------------------------------------------------


class ReadRegistry:
    """Records every dataset read and optionally restricts which keys may be read."""

    def __init__(self):
        self.counts: dict[str, int] = {}
        self._allowed: frozenset[str] | None = None

    def record(self, key, n=1):
        if self._allowed is not None and key not in self._allowed:
            raise IsolationError(f"read of dataset {key!r} outside the allowed set {sorted(self._allowed)}")
        self.counts[key] = self.counts.get(key, 0) + n

    def reset(self):
        self.counts = {}

    def restrict(self, allowed):
        return _Restriction(self, frozenset(allowed))

    def read_set(self):
        return {k for k, v in self.counts.items() if v > 0}


class _Restriction:
    def __init__(self, registry, allowed):
        self.registry, self.allowed = registry, allowed

    def __enter__(self):
        self._saved = self.registry._allowed
        self.registry._allowed = self.allowed
        return self.registry

    def __exit__(self, *exc):
        self.registry._allowed = self._saved
        return False


class SceneDataset:
    """An immutable set of rendered scenes from one domain split.

    Labels of unlabeled datasets are kept for the evaluator only: ``labels``
    raises for them, while ``eval_labels`` is always available.
    """

    def __init__(self, spec, split, seeds, size, labeled, registry=None):
        self.spec = spec
        self.split = split
        self.seeds = tuple(int(s) for s in seeds)
        self.size = tuple(size)
        self.labeled = labeled
        self.registry = registry
        scenes = [generate_scene(spec, s, size) for s in self.seeds]
        self._images = np.stack([sc.image for sc in scenes])
        self._labels = np.stack([sc.label for sc in scenes])
        self._images.flags.writeable = False
        self._labels.flags.writeable = False

    @property
    def key(self):
        return f"{self.spec.name}/{self.split}"

    @property
    def name(self):
        return self.spec.name

    def __len__(self):
        return len(self.seeds)

    def _touch(self, n):
        if self.registry is not None:
            self.registry.record(self.key, n)

    def images(self, idx=None):
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        self._touch(int(idx.size))
        return self._images[idx]

    def labels(self, idx=None):
        if not self.labeled:
            raise IsolationError(f"labels of {self.key} are reserved for evaluation")
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        self._touch(int(idx.size))
        return self._labels[idx]

    def eval_labels(self):
        return self._labels

    def eval_images(self):
        return self._images

    def order(self, seed, epoch=0):
        """Shuffled iteration order, a pure function of (seed, epoch)."""
        rng = np.random.default_rng([int(seed), int(epoch), _stable_hash(self.key)])
        return rng.permutation(len(self))


def _stable_hash(text):
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


class IndexStream:
    """Endless minibatch index stream over a dataset, reshuffled every epoch."""

    def __init__(self, n, seed, key):
        self.n, self.seed, self.key = n, seed, key
        self.epoch, self.pos = 0, 0
        self._perm = self._make()

    def _make(self):
        return np.random.default_rng([int(self.seed), self.epoch, _stable_hash(self.key)]).permutation(self.n)

    def take(self, k):
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.epoch += 1
                self.pos = 0
                self._perm = self._make()
            out.append(int(self._perm[self.pos]))
            self.pos += 1
        return np.asarray(out)


@dataclass
class DomainData:
    spec: DomainSpec
    train: SceneDataset
    eval: SceneDataset


@dataclass
class Benchmark:
    source: DomainData
    targets: list[DomainData]
    unseen: DomainData
    class_count: int = NUM_CLASSES
    registry: ReadRegistry = field(default_factory=ReadRegistry)

    def domain(self, name):
        for d in [self.source, *self.targets, self.unseen]:
            if d.spec.name == name:
                return d
        raise ConfigError(f"unknown domain {name!r}")

    @property
    def domain_names(self):
        return [self.source.spec.name] + [t.spec.name for t in self.targets] + [self.unseen.spec.name]


@dataclass
class BenchmarkConfig:
    source: DomainSpec
    targets: list[DomainSpec]
    unseen: DomainSpec
    image_size: tuple[int, int] = (64, 64)
    train_size: int = 500
    eval_size: int = 100
    seed: int = 0

    def to_dict(self):
        return {
            "image_size": list(self.image_size),
            "train_size": self.train_size,
            "eval_size": self.eval_size,
            "seed": self.seed,
            "source": self.source.to_dict(),
            "targets": [t.to_dict() for t in self.targets],
            "unseen": self.unseen.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            source=DomainSpec.from_dict(d["source"]),
            targets=[DomainSpec.from_dict(t) for t in d["targets"]],
            unseen=DomainSpec.from_dict(d["unseen"]),
            image_size=tuple(d.get("image_size", (64, 64))),
            train_size=int(d.get("train_size", 500)),
            eval_size=int(d.get("eval_size", 100)),
            seed=int(d.get("seed", 0)),
        )


def default_benchmark_config(**overrides):
    source, targets, unseen = default_domains()
    cfg = BenchmarkConfig(source=source, targets=targets, unseen=unseen)
    return dataclasses.replace(cfg, **overrides)


def split_seeds(base_seed, domain_index, split, n):
    start = base_seed * 7_919 + domain_index * _DOMAIN_STRIDE + (_EVAL_OFFSET if split == "eval" else 0)
    return list(range(start, start + n))


def build_benchmark(config: BenchmarkConfig) -> Benchmark:
    if not config.targets:
        raise ConfigError("benchmark needs at least one target domain")
    specs = [config.source, *config.targets, config.unseen]
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"domain names must be unique, got {names}")
    for s in [config.source, *config.targets]:
        if s.style_key() == config.unseen.style_key():
            raise ConfigError(f"unseen domain {config.unseen.name!r} duplicates training domain {s.name!r}")
    if config.train_size < 1 or config.eval_size < 1:
        raise ConfigError("split sizes must be positive")
    size = tuple(config.image_size)
    if len(size) != 2 or min(size) < 16:
        raise ConfigError(f"invalid image_size {size}")

    registry = ReadRegistry()

    def make(spec, index, labeled):
        tr = SceneDataset(spec, "train", split_seeds(config.seed, index, "train", config.train_size), size, labeled, registry)
        ev = SceneDataset(spec, "eval", split_seeds(config.seed, index, "eval", config.eval_size), size, labeled, registry)
        return DomainData(spec, tr, ev)

    source = make(config.source, 0, True)
    targets = [make(t, i + 1, False) for i, t in enumerate(config.targets)]
    unseen = make(config.unseen, len(config.targets) + 1, False)
    return Benchmark(source, targets, unseen, NUM_CLASSES, registry)


def export_scenes(dataset: SceneDataset, out_dir, limit=16):
    """Write scenes as 8-bit RGB PNGs plus single-channel label PNGs."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(min(limit, len(dataset))):
        img = (dataset.eval_images()[i] * 255).round().astype(np.uint8)
        lab = dataset.eval_labels()[i].astype(np.uint8)
        p_img = out / f"{dataset.spec.name}_{dataset.split}_{i:04d}.png"
        p_lab = out / f"{dataset.spec.name}_{dataset.split}_{i:04d}_label.png"
        Image.fromarray(img, "RGB").save(p_img)
        Image.fromarray(lab, "L").save(p_lab)
        paths += [p_img, p_lab]
    return paths


def class_presence(seeds, size=(64, 64)):
    """How many of the given scenes contain each class."""
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for s in seeds:
        counts[np.unique(scene_geometry(s, size))] += 1
    return counts
