"""Seeded synthetic scenes with blob-shaped "birds" of controllable difficulty.

A bird is an axis-aligned anisotropic Gaussian whose peak amplitude is its
contrast over a textured background. Its ground-truth box is the tight box
around the 20%-of-peak contour. Difficulty is

    clamp(1 - contrast * min(1, area / A_REF), 0, 1)

with ``area = pi * sigma_x * sigma_y`` (the one-sigma ellipse) and
``A_REF = 64`` px^2.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

A_REF = 64.0
CONTOUR_LEVEL = 0.2
# half-extent of the 20% contour in units of sigma
CONTOUR_SCALE = math.sqrt(2.0 * math.log(1.0 / CONTOUR_LEVEL))
MAX_JITTER = 0.4
PLACEMENT_ATTEMPTS = 100
HARD_DIFFICULTY = 0.7

IMG_MAGIC = b"CPLIMG1\0"
SPLIT_STREAMS = {"train": 0, "test": 1}


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple = (64, 64)
    bird_count_range: tuple = (0, 3)
    contrast_range: tuple = (0.1, 1.0)
    radius_range: tuple = (2.0, 8.0)
    clutter_blob_count: int = 3
    label_noise_prob: float = 0.0
    # probability that a bird is drawn hard: half faint (difficulty > 0.7), half mislabeled
    hard_fraction: float = 0.0
    # appearance ranges for birds that are not drawn hard (defaults: the full ranges)
    easy_contrast_range: Optional[tuple] = None
    easy_radius_range: Optional[tuple] = None
    stack_frames: bool = False
    seed: int = 0
    preset: str = "default"

    def __post_init__(self):
        H, W = self.image_size
        if H <= 0 or W <= 0 or H % 2 or W % 2:
            raise ValueError(f"image_size must be positive and even, got {self.image_size}")
        for name in ("bird_count_range", "contrast_range", "radius_range",
                     "easy_contrast_range", "easy_radius_range"):
            rng = getattr(self, name)
            if rng is None:
                continue
            lo, hi = rng
            if lo > hi:
                raise ValueError(f"{name} is empty: {rng}")
        if self.bird_count_range[0] < 0:
            raise ValueError("bird_count_range must be non-negative")
        if self.radius_range[0] <= 0:
            raise ValueError("radius_range must be positive")
        if not 0.0 <= self.contrast_range[0]:
            raise ValueError("contrast must be non-negative")
        for name in ("label_noise_prob", "hard_fraction"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.clutter_blob_count < 0:
            raise ValueError("clutter_blob_count must be >= 0")

    @property
    def channels(self) -> int:
        return 3 if self.stack_frames else 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


PRESETS = {
    "default": {},
    "easy": dict(
        easy_contrast_range=(0.6, 1.0),
        easy_radius_range=(4.6, 8.0),
        label_noise_prob=0.0,
        hard_fraction=0.0,
    ),
    "hard-mix": dict(
        easy_contrast_range=(0.6, 1.0),
        easy_radius_range=(4.6, 8.0),
        label_noise_prob=0.0,
        hard_fraction=0.2,
    ),
}


def preset_config(name: str, **overrides) -> SceneConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    kw["preset"] = name
    return SceneConfig(**kw)


@dataclass
class Scene:
    image: np.ndarray  # float32 [C, H, W] in [0, 1]
    gt_boxes: list  # (x_min, y_min, x_max, y_max) in pixels
    difficulty: list
    noisy_flags: list
    seed: int = 0

    @property
    def n_objects(self) -> int:
        return len(self.gt_boxes)

    def boxes_array(self) -> np.ndarray:
        return np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)


@dataclass
class Dataset:
    scenes: list
    split: str = "train"
    config: dict = field(default_factory=dict)
    base_seed: int = 0

    def __len__(self):
        return len(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]

    def __iter__(self):
        return iter(self.scenes)

    @property
    def n_objects(self) -> int:
        return sum(s.n_objects for s in self.scenes)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.scenes]).astype(np.float32)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for s in self.scenes:
            h.update(s.image.tobytes())
            h.update(json.dumps([s.gt_boxes, s.difficulty, s.noisy_flags]).encode())
        return h.hexdigest()


def scene_seed(base_seed: int, index: int, split: str = "train") -> int:
    """Derive a 64-bit per-scene seed; the split picks a disjoint stream."""
    stream = SPLIT_STREAMS[split]
    ss = np.random.SeedSequence([int(base_seed) & (2**64 - 1), stream, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def difficulty_of(contrast: float, sigma_x: float, sigma_y: float) -> float:
    area = math.pi * sigma_x * sigma_y
    return min(max(1.0 - contrast * min(1.0, area / A_REF), 0.0), 1.0)


def _gauss(xs, ys, cx, cy, sx, sy):
    return np.exp(-(((xs - cx) ** 2) / (2 * sx * sx) + ((ys - cy) ** 2) / (2 * sy * sy)))


def _background(rng, H, W):
    low = gaussian_filter(rng.normal(size=(H, W)), sigma=6.0, mode="wrap")
    low = low / (np.abs(low).max() + 1e-9)
    return 0.25 + 0.08 * low


def _clutter(rng, H, W, count, ys, xs):
    img = np.zeros((H, W))
    for _ in range(count):
        cx, cy = rng.uniform(0, W), rng.uniform(0, H)
        amp = rng.uniform(0.1, 0.35)
        if rng.random() < 0.5:
            s = rng.uniform(6.0, 12.0)
            img += amp * _gauss(xs, ys, cx, cy, s, s)
        else:
            # thin streak; horizontal or vertical
            long_, short = rng.uniform(8.0, 20.0), rng.uniform(0.8, 1.5)
            sx, sy = (long_, short) if rng.random() < 0.5 else (short, long_)
            img += amp * _gauss(xs, ys, cx, cy, sx, sy)
    return img


def _draw_appearance(rng, cfg: SceneConfig, kind: str):
    """Return (contrast, sigma_x, sigma_y) for a bird of the given kind."""
    aspect = rng.uniform(0.75, 1.0 / 0.75)
    if kind == "faint":
        for _ in range(PLACEMENT_ATTEMPTS):
            c = rng.uniform(*cfg.contrast_range)
            r = rng.uniform(*cfg.radius_range)
            sx, sy = r * math.sqrt(aspect), r / math.sqrt(aspect)
            if difficulty_of(c, sx, sy) > HARD_DIFFICULTY:
                return c, sx, sy
        c = cfg.contrast_range[0]
        r = cfg.radius_range[0]
        return c, r * math.sqrt(aspect), r / math.sqrt(aspect)
    crange = cfg.easy_contrast_range or cfg.contrast_range
    rrange = cfg.easy_radius_range or cfg.radius_range
    c = rng.uniform(*crange)
    r = rng.uniform(*rrange)
    return c, r * math.sqrt(aspect), r / math.sqrt(aspect)


def jitter_box(rng, box, W, H):
    """Move each side by up to 40% of the box size; the result stays inside the image."""
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    d = rng.uniform(-MAX_JITTER, MAX_JITTER, size=4)
    nx0, nx1 = x0 + d[0] * w, x1 + d[2] * w
    ny0, ny1 = y0 + d[1] * h, y1 + d[3] * h
    nx0, nx1 = sorted((nx0, nx1))
    ny0, ny1 = sorted((ny0, ny1))
    nx0, nx1 = min(max(nx0, 0.0), W - 1.0), min(max(nx1, 1.0), float(W))
    ny0, ny1 = min(max(ny0, 0.0), H - 1.0), min(max(ny1, 1.0), float(H))
    if nx1 - nx0 < 1.0:
        nx1 = min(nx0 + 1.0, float(W))
        nx0 = nx1 - 1.0
    if ny1 - ny0 < 1.0:
        ny1 = min(ny0 + 1.0, float(H))
        ny0 = ny1 - 1.0
    return (float(nx0), float(ny0), float(nx1), float(ny1))


def _overlaps(box, others, margin=1.0):
    for o in others:
        if (box[0] < o[2] + margin and o[0] < box[2] + margin
                and box[1] < o[3] + margin and o[1] < box[3] + margin):
            return True
    return False


def generate_scene(config: SceneConfig, scene_seed: int, clean_labels: bool = False) -> Scene:
    """Render one scene. ``clean_labels`` stores true boxes even for mislabeled birds."""
    rng = np.random.default_rng(int(scene_seed))
    H, W = config.image_size
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5

    base = _background(rng, H, W) + _clutter(rng, H, W, config.clutter_blob_count, ys, xs)

    lo, hi = config.bird_count_range
    n_birds = int(rng.integers(lo, hi + 1))
    birds = []  # (cx, cy, sx, sy, contrast, true_box)
    boxes, diffs, noisy = [], [], []
    for _ in range(n_birds):
        kind = "easy"
        if rng.random() < config.hard_fraction:
            kind = "faint" if rng.random() < 0.5 else "mislabeled"
        c, sx, sy = _draw_appearance(rng, config, kind)
        hx, hy = CONTOUR_SCALE * sx, CONTOUR_SCALE * sy
        if 2 * hx >= W or 2 * hy >= H:
            continue
        placed = None
        for _ in range(PLACEMENT_ATTEMPTS):
            cx = rng.uniform(hx, W - hx)
            cy = rng.uniform(hy, H - hy)
            box = (cx - hx, cy - hy, cx + hx, cy + hy)
            if not _overlaps(box, [b[5] for b in birds]):
                placed = (cx, cy, sx, sy, c, box)
                break
        if placed is None:
            continue
        birds.append(placed)
        label_noise = kind == "mislabeled" or rng.random() < config.label_noise_prob
        stored = placed[5]
        if label_noise:
            jittered = jitter_box(rng, stored, W, H)
            if not clean_labels:
                stored = jittered
        boxes.append(tuple(float(v) for v in stored))
        diffs.append(difficulty_of(c, sx, sy))
        noisy.append(bool(label_noise and not clean_labels))

    frames = []
    offsets = [(0, 0)] if not config.stack_frames else [(-1, -1), (0, 0), (1, 1)]
    for k, (ox, oy) in enumerate(offsets):
        img = base.copy()
        for cx, cy, sx, sy, c, _ in birds:
            img += c * _gauss(xs, ys, cx + ox, cy + oy, sx, sy)
        img += 0.02 * rng.normal(size=(H, W))
        frames.append(np.clip(img, 0.0, 1.0))
    image = np.stack(frames).astype(np.float32)
    return Scene(image=image, gt_boxes=boxes, difficulty=diffs, noisy_flags=noisy,
                 seed=int(scene_seed))


def generate_dataset(config: SceneConfig, n_scenes: int, base_seed: Optional[int] = None,
                     split: str = "train") -> Dataset:
    """Scene i uses ``scene_seed(base_seed, i, split)``; test scenes carry clean labels."""
    if n_scenes <= 0:
        raise ValueError("n_scenes must be > 0")
    if base_seed is None:
        base_seed = config.seed
    clean = split == "test"
    scenes = [generate_scene(config, scene_seed(base_seed, i, split), clean_labels=clean)
              for i in range(n_scenes)]
    return Dataset(scenes=scenes, split=split, config=config.to_dict(), base_seed=int(base_seed))


def easy_subset(dataset: Dataset, threshold: float = 0.5) -> Dataset:
    """Keep boxes with difficulty < threshold and clean labels; every scene is retained."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    out = []
    for s in dataset.scenes:
        keep = [i for i in range(s.n_objects)
                if s.difficulty[i] < threshold and not s.noisy_flags[i]]
        out.append(Scene(image=s.image,
                         gt_boxes=[s.gt_boxes[i] for i in keep],
                         difficulty=[s.difficulty[i] for i in keep],
                         noisy_flags=[s.noisy_flags[i] for i in keep],
                         seed=s.seed))
    return Dataset(scenes=out, split=dataset.split, config=dict(dataset.config),
                   base_seed=dataset.base_seed)


# -- on-disk format ---------------------------------------------------------------

def write_image(path: Path, image: np.ndarray) -> None:
    """Channels are stacked vertically: the stored height is C * H."""
    C, H, W = image.shape
    flat = np.ascontiguousarray(image.reshape(C * H, W), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC)
        fh.write(struct.pack("<II", C * H, W))
        fh.write(flat.tobytes())


def read_image(path: Path, channels: int = 1) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != IMG_MAGIC:
        raise ValueError(f"{path}: bad magic")
    H, W = struct.unpack("<II", raw[8:16])
    payload = raw[16:]
    if len(payload) != 4 * H * W:
        raise ValueError(f"{path}: truncated image payload")
    if H % channels:
        raise ValueError(f"{path}: height {H} not divisible by {channels} channels")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return arr.reshape(channels, H // channels, W)


def _dump_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_split(root: Path, dataset: Dataset) -> Path:
    d = Path(root) / dataset.split
    d.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(dataset.scenes):
        stem = d / f"scene_{i:05d}"
        write_image(stem.with_suffix(".img"), s.image)
        _dump_json(stem.with_suffix(".json"), {
            "index": i,
            "seed": s.seed,
            "channels": int(s.image.shape[0]),
            "boxes": [list(b) for b in s.gt_boxes],
            "difficulty": list(s.difficulty),
            "noisy_flags": list(s.noisy_flags),
        })
    return d


def save_datasets(root, datasets: list, config: SceneConfig) -> Path:
    """Write each split directory plus a root manifest echoing config and seeds."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "cplbc-dataset",
        "version": 1,
        "config": config.to_dict(),
        "hard_fraction": config.hard_fraction,
        "splits": {},
    }
    for ds in datasets:
        write_split(root, ds)
        manifest["splits"][ds.split] = {
            "n_scenes": len(ds),
            "base_seed": ds.base_seed,
            "seed_stream": SPLIT_STREAMS[ds.split],
            "scene_seeds": [s.seed for s in ds.scenes],
            "n_objects": ds.n_objects,
            "n_noisy": sum(sum(s.noisy_flags) for s in ds.scenes),
        }
    _dump_json(root / "manifest.json", manifest)
    return root / "manifest.json"


def load_dataset(root, split: str = "train") -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{root}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if split not in manifest["splits"]:
        raise KeyError(f"{root}: split {split!r} not in manifest")
    info = manifest["splits"][split]
    d = root / split
    scenes = []
    for i in range(info["n_scenes"]):
        stem = d / f"scene_{i:05d}"
        meta = json.loads(stem.with_suffix(".json").read_text())
        image = read_image(stem.with_suffix(".img"), meta["channels"])
        scenes.append(Scene(image=image,
                            gt_boxes=[tuple(b) for b in meta["boxes"]],
                            difficulty=list(meta["difficulty"]),
                            noisy_flags=list(meta["noisy_flags"]),
                            seed=int(meta["seed"])))
    return Dataset(scenes=scenes, split=split, config=manifest["config"],
                   base_seed=int(info["base_seed"]))
