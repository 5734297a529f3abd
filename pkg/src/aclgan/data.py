"""Unpaired two-domain image folders, augmentation, and the procedural toy domains.

Toy domains: domain S is a coloured disc crossed by a horizontal bar (the
removable object); domain T is the disc alone. Disc colour, bar colour and bar
row are drawn independently, so one disc colour co-occurs with many bars.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .core import ConfigError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DatasetError(RuntimeError):
    pass


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """uint8 HxWxC -> float32 CxHxW in [-1, 1]."""
    return (pixels.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def to_uint8(image) -> np.ndarray:
    """float CxHxW in [-1, 1] -> uint8 HxWxC."""
    if torch.is_tensor(image):
        image = image.detach().cpu().numpy()
    hwc = np.clip((np.asarray(image).transpose(1, 2, 0) + 1.0) * 127.5, 0, 255)
    return np.rint(hwc).astype(np.uint8)


def save_png(image, path: str | Path) -> None:
    arr = to_uint8(image)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return to_unit_range(np.asarray(im.convert("RGB")))


# ---------------------------------------------------------------- toy domains

DISC_PALETTE = [(200, 120, 80), (90, 160, 210), (120, 200, 110), (220, 200, 90), (170, 110, 200), (230, 150, 170)]
BAR_PALETTE = [(15, 15, 15), (245, 245, 245), (120, 0, 0), (0, 0, 110), (0, 80, 0)]
BACKGROUND = (110, 110, 110)


@dataclass(frozen=True)
class ToySpec:
    n_per_domain: int = 200
    image_size: int = 64
    disc_palette: tuple = tuple(DISC_PALETTE)
    bar_palette: tuple = tuple(BAR_PALETTE)
    background: tuple = BACKGROUND

    @property
    def center(self) -> float:
        return (self.image_size - 1) / 2

    @property
    def radius(self) -> float:
        return 0.375 * self.image_size

    @property
    def bar_height(self) -> int:
        return max(2, round(self.image_size / 8))

    @property
    def bar_columns(self) -> slice:
        half = round(0.8 * self.radius)
        mid = self.image_size // 2
        return slice(mid - half, mid + half)

    @property
    def bar_rows_allowed(self) -> tuple[int, int]:
        """Inclusive range of the bar's top row; keeps the bar inside the disc."""
        lo = int(np.ceil(self.center - 0.6 * self.radius))
        hi = int(np.floor(self.center + 0.6 * self.radius)) - self.bar_height + 1
        return lo, hi

    def disc_mask(self, shrink: float = 1.0) -> np.ndarray:
        yy, xx = np.mgrid[: self.image_size, : self.image_size]
        return (yy - self.center) ** 2 + (xx - self.center) ** 2 <= (shrink * self.radius) ** 2


@dataclass
class ToySample:
    pixels: np.ndarray  # uint8 HxWx3
    disc_color: tuple
    bar_color: tuple | None = None
    bar_top: int | None = None


def render_toy(spec: ToySpec, rng: np.random.Generator, with_bar: bool) -> ToySample:
    img = np.empty((spec.image_size, spec.image_size, 3), np.uint8)
    img[:] = spec.background
    disc = tuple(spec.disc_palette[rng.integers(len(spec.disc_palette))])
    img[spec.disc_mask()] = disc
    if not with_bar:
        return ToySample(img, disc)
    bar = tuple(spec.bar_palette[rng.integers(len(spec.bar_palette))])
    lo, hi = spec.bar_rows_allowed
    top = int(rng.integers(lo, hi + 1))
    img[top : top + spec.bar_height, spec.bar_columns] = bar
    return ToySample(img, disc, bar, top)


def toy_batch(spec: ToySpec, n: int, rng: np.random.Generator, with_bar: bool):
    """In-memory toy images as a float tensor (n, 3, H, W) plus their samples."""
    samples = [render_toy(spec, rng, with_bar) for _ in range(n)]
    x = torch.from_numpy(np.stack([to_unit_range(s.pixels) for s in samples]))
    return x, samples


def generate_toy(spec: ToySpec, out_dir: str | Path, seed: int) -> Path:
    """Write domain_S/ and domain_T/ PNG folders plus manifest.json; return the manifest path."""
    if spec.n_per_domain < 1 or spec.image_size < 8:
        raise ValueError("n_per_domain must be >= 1 and image_size >= 8")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    for domain, with_bar in (("domain_S", True), ("domain_T", False)):
        (out / domain).mkdir(parents=True, exist_ok=True)
        for i in range(spec.n_per_domain):
            sample = render_toy(spec, rng, with_bar)
            Image.fromarray(sample.pixels).save(out / domain / f"{i:05d}.png")
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"seed": seed, "spec": asdict(spec)}, indent=2, sort_keys=True) + "\n")
    return manifest


def bar_scores(images, spec: ToySpec) -> np.ndarray:
    """Closed-form bar evidence per image.

    The disc colour is the per-channel median over the disc interior. Each row
    of the permissible bar band is scored by its mean channel-averaged absolute
    deviation from that colour over the bar columns; the score is the largest
    mean over any window of bar-height consecutive rows. Units are [-1, 1]
    pixel values.
    """
    x = images.detach().cpu().numpy() if torch.is_tensor(images) else np.asarray(images)
    x = x.astype(np.float64)
    interior = spec.disc_mask(0.9)
    disc = np.median(x[:, :, interior], axis=2)  # (n, 3)
    lo, hi = spec.bar_rows_allowed
    band = x[:, :, lo : hi + spec.bar_height, spec.bar_columns]
    dev = np.abs(band - disc[:, :, None, None]).mean(axis=(1, 3))  # (n, rows)
    kernel = np.ones(spec.bar_height) / spec.bar_height
    windows = np.stack([np.convolve(row, kernel, mode="valid") for row in dev])
    return windows.max(axis=1)


BAR_THRESHOLD = 0.3


def detect_bar(images, spec: ToySpec, threshold: float = BAR_THRESHOLD) -> np.ndarray:
    return bar_scores(images, spec) > threshold


def disc_color_error(images, disc_colors, spec: ToySpec) -> np.ndarray:
    """Mean absolute deviation of disc-interior pixels from the known disc colour."""
    x = images.detach().cpu().numpy() if torch.is_tensor(images) else np.asarray(images)
    target = np.asarray(disc_colors, np.float64) / 127.5 - 1.0  # (n, 3)
    interior = spec.disc_mask(0.9)
    return np.abs(x[:, :, interior] - target[:, :, None]).mean(axis=(1, 2))


# ---------------------------------------------------------------- folders


@dataclass(frozen=True)
class AugmentOptions:
    load_size: int = 270
    crop_size: int = 256
    flip_prob: float = 0.5
    train: bool = True

    def __post_init__(self):
        if self.crop_size > self.load_size:
            raise ConfigError("crop_size", f"crop_size={self.crop_size} exceeds load_size={self.load_size}")


def resize_shorter(image: torch.Tensor, size: int) -> torch.Tensor:
    h, w = image.shape[-2:]
    if min(h, w) == size:
        return image
    scale = size / min(h, w)
    new = (max(size, round(h * scale)), max(size, round(w * scale)))
    return F.interpolate(image[None], size=new, mode="bilinear", align_corners=False, antialias=True)[0].clamp(-1, 1)


def augment(image, rng: np.random.Generator, options: AugmentOptions = AugmentOptions()) -> torch.Tensor:
    """Resize the shorter side to load_size, crop to crop_size, maybe flip.

    Training mode crops at a random offset and flips with probability
    ``flip_prob``; test mode takes the centre crop and never flips.
    """
    image = torch.as_tensor(image)
    image = resize_shorter(image, options.load_size)
    h, w = image.shape[-2:]
    c = options.crop_size
    if options.train:
        top = int(rng.integers(0, h - c + 1))
        left = int(rng.integers(0, w - c + 1))
    else:
        top, left = (h - c) // 2, (w - c) // 2
    image = image[:, top : top + c, left : left + c]
    if options.train and options.flip_prob > 0 and rng.random() < options.flip_prob:
        image = image.flip(-1)
    return image.contiguous()


def list_images(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"{d} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _decode_all(paths: list[Path], load_size: int, domain: str) -> tuple[list[Path], list[torch.Tensor]]:
    kept, images = [], []
    for p in paths:
        try:
            arr = read_image(p)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping undecodable %s: %s", p, exc)
            continue
        kept.append(p)
        images.append(resize_shorter(torch.from_numpy(arr), load_size))
    if not images:
        raise DatasetError(f"no decodable images in {domain}")
    return kept, images


@dataclass
class UnpairedDataset:
    """Two independently indexed image collections, decoded and resized up front."""

    domain_S: list[Path]
    domain_T: list[Path]
    crop_size: int = 256
    load_size: int = 270
    flip_prob: float = 0.5
    images_S: list[torch.Tensor] = field(default_factory=list, repr=False)
    images_T: list[torch.Tensor] = field(default_factory=list, repr=False)

    def __len__(self):
        return max(len(self.domain_S), len(self.domain_T))

    @property
    def lengths(self) -> tuple[int, int]:
        return len(self.domain_S), len(self.domain_T)

    def options(self, train: bool = True) -> AugmentOptions:
        return AugmentOptions(self.load_size, self.crop_size, self.flip_prob, train)

    def batch(self, domain: str, indices, rng: np.random.Generator, train: bool = True) -> torch.Tensor:
        pool = self.images_S if domain == "S" else self.images_T
        opts = self.options(train)
        return torch.stack([augment(pool[i], rng, opts) for i in indices])


def load_unpaired(dir_S, dir_T, crop_size: int = 256, load_size: int = 270, flip_prob: float = 0.5) -> UnpairedDataset:
    AugmentOptions(load_size, crop_size, flip_prob)
    paths = {}
    for name, d in (("domain_S", dir_S), ("domain_T", dir_T)):
        found = list_images(d)
        if not found:
            raise DatasetError(f"{name} directory {d} contains no images")
        paths[name] = _decode_all(found, load_size, name)
    (ps, xs), (pt, xt) = paths["domain_S"], paths["domain_T"]
    return UnpairedDataset(ps, pt, crop_size, load_size, flip_prob, xs, xt)


def load_root(root, **options) -> UnpairedDataset:
    root = Path(root)
    return load_unpaired(root / "domain_S", root / "domain_T", **options)


class CyclingSampler:
    """Endless shuffled index stream; reshuffles after each pass."""

    def __init__(self, n: int):
        self.n = n
        self.order = np.arange(0)
        self.pos = 0

    def take(self, k: int, rng: np.random.Generator) -> list[int]:
        out = []
        while len(out) < k:
            if self.pos >= len(self.order):
                self.order = rng.permutation(self.n)
                self.pos = 0
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out

    def state_dict(self) -> dict:
        return {"n": self.n, "order": self.order.tolist(), "pos": self.pos}

    def load_state_dict(self, state: dict) -> None:
        self.n = state["n"]
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.pos = state["pos"]
