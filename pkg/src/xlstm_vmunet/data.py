"""Synthetic ellipse-lesion images and on-disk dataset handling."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, DataError
from .io import from_unit, read_pnm, to_unit, write_pnm

MANIFEST = "manifest.json"
# per-channel gain for 3-channel images, a rough skin tint
TINT = (1.0, 0.82, 0.70)


@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 250
    size: int = 64
    channels: int = 1
    ellipses: tuple[int, int] = (1, 3)
    radius: tuple[float, float] = (0.08, 0.30)     # fraction of the side length
    contrast: tuple[float, float] = (0.15, 0.6)
    blur: float = 1.0                              # Gaussian sigma in pixels
    noise: float = 0.05                            # multiplicative speckle amplitude
    seed: int = 7

    def __post_init__(self):
        lo, hi = self.ellipses
        if self.count < 1 or self.size < 8 or self.channels not in (1, 3):
            raise ConfigurationError(f"bad synthetic settings: count {self.count}, size {self.size}, channels {self.channels}")
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"ellipse count range {self.ellipses} invalid")
        if not 0 < self.radius[0] <= self.radius[1] <= 0.5:
            raise ConfigurationError(f"radius range {self.radius} invalid")
        if not 0 < self.contrast[0] <= self.contrast[1] <= 0.65:
            raise ConfigurationError(f"contrast range {self.contrast} invalid")
        if self.blur < 0 or self.noise < 0:
            raise ConfigurationError("blur and noise must be nonnegative")


@dataclass
class Dataset:
    images: np.ndarray      # N×C×H×W in [0, 1]
    masks: np.ndarray       # N×H×W in {0, 1}
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.masks[idx], [self.ids[i] for i in idx])


def sample_id(idx: int) -> str:
    return f"s{idx:05d}"


def _ellipse(size: int, rng: np.random.Generator, radius: tuple[float, float]) -> np.ndarray:
    ry, rx = rng.uniform(radius[0], radius[1], 2) * size
    theta = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(0.2, 0.8, 2) * (size - 1)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def generate_sample(spec: SyntheticSpec, idx: int) -> tuple[np.ndarray, np.ndarray]:
    """(uint8 pixels, uint8 mask 0/1) for sample ``idx``; depends only on (seed, idx)."""
    rng = np.random.default_rng([spec.seed, idx])
    mask = np.zeros((spec.size, spec.size), dtype=bool)
    for _ in range(rng.integers(spec.ellipses[0], spec.ellipses[1] + 1)):
        mask |= _ellipse(spec.size, rng, spec.radius)
    background = rng.uniform(0.65, 0.85)
    contrast = rng.uniform(*spec.contrast)
    image = background - contrast * mask
    if spec.blur > 0:
        image = gaussian_filter(image, spec.blur, mode="nearest")
    if spec.noise > 0:
        image = image * (1.0 + spec.noise * rng.standard_normal(image.shape))
    image = np.clip(image, 0.0, 1.0)
    if spec.channels == 3:
        image = np.stack([image * t for t in TINT])
    else:
        image = image[None]
    return from_unit(image), mask.astype(np.uint8)


def gen_data(spec: SyntheticSpec, out_dir) -> list[str]:
    """Write ``{id}.pgm|.ppm`` and ``{id}_mask.pgm`` per sample plus a manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc.strerror}") from None
    ext = ".pgm" if spec.channels == 1 else ".ppm"
    entries = []
    for idx in range(spec.count):
        sid = sample_id(idx)
        pixels, mask = generate_sample(spec, idx)
        write_pnm(out / f"{sid}{ext}", pixels)
        write_pnm(out / f"{sid}_mask.pgm", mask * np.uint8(255))
        entries.append({"id": sid, "image": f"{sid}{ext}", "mask": f"{sid}_mask.pgm"})
    manifest = {"spec": asdict(spec), "samples": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return [e["id"] for e in entries]


def _pairs_without_manifest(root: Path) -> list[dict]:
    entries = []
    for m in sorted(root.glob("*_mask.pgm")):
        sid = m.name[: -len("_mask.pgm")]
        images = [root / f"{sid}{ext}" for ext in (".pgm", ".ppm") if (root / f"{sid}{ext}").exists()]
        if len(images) != 1:
            raise DataError(f"{root}: mask {m.name} needs exactly one image {sid}.pgm or {sid}.ppm")
        entries.append({"id": sid, "image": images[0].name, "mask": m.name})
    return entries


def load_mask(path) -> np.ndarray:
    px = read_pnm(path)
    if px.ndim != 2:
        raise DataError(f"{path}: mask must be single-channel")
    bad = np.setdiff1d(np.unique(px), [0, 255])
    if bad.size:
        raise DataError(f"{path}: mask values {bad[:5].tolist()} outside {{0, 255}}")
    return (px == 255).astype(np.float64)


def load_dataset(root) -> Dataset:
    """Read a generated directory (via its manifest) or any folder of ``{id}`` / ``{id}_mask.pgm`` pairs."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} not found")
    manifest = root / MANIFEST
    if manifest.exists():
        try:
            entries = json.loads(manifest.read_text(encoding="utf-8"))["samples"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{manifest}: unreadable manifest ({exc})") from None
    else:
        entries = _pairs_without_manifest(root)
    if not entries:
        raise DataError(f"{root}: no samples")
    images, masks = [], []
    for e in entries:
        img = to_unit(read_pnm(root / e["image"]))
        mask = load_mask(root / e["mask"])
        if img.shape[1:] != mask.shape:
            raise DataError(f"{e['id']}: image {img.shape[1:]} and mask {mask.shape} extents differ")
        if images and img.shape != images[0].shape:
            raise DataError(f"{e['id']}: shape {img.shape} differs from {images[0].shape}")
        images.append(img)
        masks.append(mask)
    return Dataset(np.stack(images), np.stack(masks), [e["id"] for e in entries])
