"""Shadow/shadow-free/mask triplets: synthesis, cropping, directory datasets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.draw import polygon as fill_polygon
from skimage.transform import resize

from .imageio import read_mask, read_rgb
from .tensor import Tensor


@dataclass
class ShadowSample:
    shadow: Tensor  # (1, 3, H, W)
    free: Tensor  # (1, 3, H, W)
    mask: Tensor  # (1, 1, H, W), values in {0, 1}
    name: str = ""

    def __post_init__(self):
        h, w = self.shadow.shape[2:]
        if self.free.shape != self.shadow.shape or self.mask.shape != (1, 1, h, w):
            raise ValueError(
                f"misaligned sample: {self.shadow.shape}, {self.free.shape}, {self.mask.shape}")

    @property
    def size(self) -> tuple[int, int]:
        return self.shadow.shape[2], self.shadow.shape[3]


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic shadow generator."""

    size: int = 64
    min_area: float = 0.05
    max_area: float = 0.40
    min_polygons: int = 1
    max_polygons: int = 3
    alpha_low: float = 0.2
    alpha_high: float = 0.7
    jitter: float = 0.05
    feather: float = 2.0


def synth_base(size: int, rng: np.random.Generator) -> np.ndarray:
    """A (3, size, size) texture in [0, 1]: smooth color field plus a few flat shapes."""
    grid = rng.uniform(0.25, 0.95, size=(3, 4, 4))
    img = np.stack([resize(g, (size, size), order=3, mode="edge") for g in grid])
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0.1, 1.0, size=3)
        cy, cx = rng.uniform(0, size, size=2)
        ry, rx = rng.uniform(size / 16, size / 4, size=2)
        if rng.random() < 0.5:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        else:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[:, inside] = color[:, None]
    img += rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _random_convex_polygon(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    cy, cx = rng.uniform(0.1, 0.9, size=2) * (h, w)
    radius = rng.uniform(0.12, 0.45) * min(h, w)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=rng.integers(3, 8)))
    rows = np.clip(cy + radius * np.sin(angles), 0, h - 1)
    cols = np.clip(cx + radius * np.cos(angles), 0, w - 1)
    out = np.zeros((h, w), dtype=bool)
    rr, cc = fill_polygon(rows, cols, shape=out.shape)
    out[rr, cc] = True
    return out


def synth_mask(h: int, w: int, rng: np.random.Generator, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    """Union of convex polygons; resampled until the covered fraction is in range."""
    while True:
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(rng.integers(cfg.min_polygons, cfg.max_polygons + 1)):
            mask |= _random_convex_polygon(h, w, rng)
        frac = mask.mean()
        if cfg.min_area <= frac <= cfg.max_area:
            return mask


def shadow_weight(mask: np.ndarray, feather: float) -> np.ndarray:
    """Attenuation strength in [0, 1]: ramps up over ``feather`` pixels inside the mask."""
    if feather <= 0:
        return mask.astype(np.float64)
    depth = ndimage.distance_transform_edt(mask)
    return np.clip(depth / feather, 0.0, 1.0)


def synth_shadow(base: Tensor, rng: np.random.Generator, cfg: SynthConfig = SynthConfig(),
                 alpha: float | None = None) -> ShadowSample:
    """Cast a synthetic shadow onto ``base``.

    Pixels inside the mask are scaled by a per-channel factor alpha + jitter;
    a forced ``alpha`` disables the jitter. Pixels outside the mask are copied
    unchanged.
    """
    free = base.data[0].astype(np.float32)
    h, w = free.shape[1:]
    mask = synth_mask(h, w, rng, cfg)
    if alpha is None:
        a = rng.uniform(cfg.alpha_low, cfg.alpha_high)
        factors = np.clip(a + rng.uniform(-cfg.jitter, cfg.jitter, size=3), 0.0, 1.0)
    else:
        factors = np.full(3, float(alpha))
    weight = shadow_weight(mask, cfg.feather)
    scale = 1.0 - weight[None] * (1.0 - factors[:, None, None])
    shadow = np.where(mask[None], free * scale, free).astype(np.float32)
    return ShadowSample(Tensor(shadow[None]), Tensor(free[None]),
                        Tensor(mask[None, None].astype(np.float32)))


def make_synthetic_dataset(count: int, rng: np.random.Generator,
                           cfg: SynthConfig = SynthConfig()) -> list[ShadowSample]:
    out = []
    for i in range(count):
        base = Tensor(synth_base(cfg.size, rng)[None])
        sample = synth_shadow(base, rng, cfg)
        sample.name = f"synth_{i:05d}"
        out.append(sample)
    return out


def _upscale(sample: ShadowSample, h: int, w: int) -> ShadowSample:
    def rs(a, order):
        return resize(a[0], (a.shape[1], h, w), order=order, mode="edge", anti_aliasing=False)[None]

    mask = (rs(sample.mask.data, 1) >= 0.5).astype(np.float32)
    return ShadowSample(Tensor(rs(sample.shadow.data, 1)), Tensor(rs(sample.free.data, 1)),
                        Tensor(mask), sample.name)


def random_crop_pair(sample: ShadowSample, crop: int, rng: np.random.Generator,
                     hflip: bool = False) -> ShadowSample:
    """Crop the same window from shadow, free and mask.

    A side shorter than ``crop`` is bilinearly upscaled to ``crop`` first.
    """
    h, w = sample.size
    if h < crop or w < crop:
        sample = _upscale(sample, max(h, crop), max(w, crop))
        h, w = sample.size
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    flip = hflip and rng.random() < 0.5

    def cut(t: Tensor) -> Tensor:
        a = t.data[:, :, top:top + crop, left:left + crop]
        return Tensor(a[..., ::-1] if flip else a)

    return ShadowSample(cut(sample.shadow), cut(sample.free), cut(sample.mask), sample.name)


def load_triplets(root: str | Path) -> list[ShadowSample]:
    """Read ``root/{shadow,free,mask}/<id>.png``; ids come from the shadow folder."""
    root = Path(root)
    shadow_dir = root / "shadow"
    if not shadow_dir.is_dir():
        raise FileNotFoundError(f"missing directory {shadow_dir}")
    names = sorted(p.stem for p in shadow_dir.glob("*.png"))
    if not names:
        raise FileNotFoundError(f"no images in {shadow_dir}")
    out = []
    for name in names:
        free_path, mask_path = root / "free" / f"{name}.png", root / "mask" / f"{name}.png"
        for p in (free_path, mask_path):
            if not p.exists():
                raise FileNotFoundError(f"missing {p}")
        out.append(ShadowSample(read_rgb(shadow_dir / f"{name}.png"), read_rgb(free_path),
                                read_mask(mask_path), name))
    return out
