"""Unpaired two-domain image folders and the synthetic toy benchmark."""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError, InputError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def normalize(arr):
    """uint8 HWC (or NHWC) array -> float32 NCHW tensor in [-1, 1]."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise InputError(f"expected uint8 image data, got {arr.dtype}")
    t = torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0)
    return t.permute(2, 0, 1) if t.dim() == 3 else t.permute(0, 3, 1, 2)


def denormalize(t):
    """Model-space tensor (N,3,H,W)/(3,H,W) -> uint8 NHWC/HWC array (rounded, clipped)."""
    t = t.detach().to("cpu", torch.float64)
    arr = torch.clamp(torch.round((t + 1.0) * 127.5), 0, 255).to(torch.uint8)
    return (arr.permute(1, 2, 0) if arr.dim() == 3 else arr.permute(0, 2, 3, 1)).numpy()


def read_image(path, image_size=None):
    """Decode to RGB uint8, bilinearly resized to ``image_size`` if given."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if image_size is not None and im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


def list_images(root):
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"image directory {root} does not exist")
    return sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


class DomainDataset:
    """Lexicographically indexed image folder for one domain.

    Decoded images are cached, so repeated sampling does not hit the disk.
    Files that fail to decode are dropped from the index with a warning.
    """

    def __init__(self, root, domain_id="X", image_size=256):
        if domain_id not in ("X", "Y"):
            raise InputError(f"domain_id must be 'X' or 'Y', got {domain_id!r}")
        self.root = Path(root)
        self.domain_id = domain_id
        self.image_size = image_size
        self.files = list_images(self.root)
        self._cache = {}
        if not self.files:
            raise DataError(f"no images found in {self.root}")

    def __len__(self):
        return len(self.files)

    def __repr__(self):
        return f"DomainDataset({str(self.root)!r}, {self.domain_id!r}, n={len(self)})"

    def _decode(self, path):
        if path not in self._cache:
            self._cache[path] = read_image(path, self.image_size)
        return self._cache[path]

    def array(self, i):
        """uint8 HWC image at index ``i``; an unreadable file is skipped."""
        while True:
            if not self.files:
                raise DataError(f"every image in {self.root} failed to decode")
            path = self.files[i % len(self.files)]
            try:
                return self._decode(path)
            except (OSError, ValueError) as exc:
                self._drop(path, exc)

    def _drop(self, path, exc):
        log.warning("skipping unreadable image %s: %s", path, exc)
        self.files.remove(path)

    def load_all(self):
        """Every readable image, in index order, as one model-space batch."""
        arrs = []
        for path in list(self.files):
            try:
                arrs.append(self._decode(path))
            except (OSError, ValueError) as exc:
                self._drop(path, exc)
        if not arrs:
            raise DataError(f"every image in {self.root} failed to decode")
        return normalize(np.stack(arrs))

    def names(self):
        return [p.name for p in self.files]


def _as_rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def load_batch(ds, n, seed=None):
    """Sample ``n`` images uniformly with replacement -> (n, 3, S, S) tensor in [-1, 1].

    ``seed`` is an int or a ``numpy.random.Generator``; give each domain its
    own generator so X and Y batches are never index-coupled.
    """
    if n < 1:
        raise InputError(f"batch size must be >= 1, got {n}")
    rng = _as_rng(seed)
    idx = rng.integers(0, len(ds), size=n)
    return normalize(np.stack([ds.array(int(i)) for i in idx]))


@dataclass
class ToySpec:
    """Parameters of the synthetic benchmark.

    Both domains draw backgrounds from the same distribution; the foreground
    is a solid gray fill in X and a two-colour stripe pattern in Y. Backgrounds
    are cool-toned (low red) so the warm stripe colours only occur on objects.
    """

    canvas: int = 64
    count: int = 100
    shape: str = "mixed"  # ellipse | rect | mixed
    coverage: tuple = (0.12, 0.28)
    gray: int = 128
    stripes: bool = True
    stripe_period: float = 8.0
    stripe_angle: float = 0.0  # radians; None draws a random orientation per image
    stripe_colors: tuple = ((230, 60, 40), (250, 210, 60))
    noise_sigma: float = 3.0
    seed: int = 0


def _background(rng, n):
    base = rng.uniform((20, 60, 110), (90, 170, 220))
    img = np.tile(base, (n, n, 1))
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    for _ in range(4):
        cy, cx = rng.uniform(0, n, size=2)
        sigma = rng.uniform(n / 8, n / 3)
        amp = rng.uniform(-30, 30, size=3)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        img += g[..., None] * amp
    return img


def _shape_mask(rng, n, shape, coverage):
    kind = shape if shape != "mixed" else ("ellipse" if rng.random() < 0.5 else "rect")
    frac = rng.uniform(*coverage)
    aspect = rng.uniform(0.7, 1.4)
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    if kind == "ellipse":
        ab = frac * n * n / math.pi
        a, b = math.sqrt(ab * aspect), math.sqrt(ab / aspect)
        cy = rng.uniform(b + 1, n - b - 1)
        cx = rng.uniform(a + 1, n - a - 1)
        return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    if kind == "rect":
        area = frac * n * n
        w, h = math.sqrt(area * aspect), math.sqrt(area / aspect)
        x0 = rng.uniform(1, n - w - 1)
        y0 = rng.uniform(1, n - h - 1)
        return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    raise InputError(f"unknown toy shape family {shape!r}")


def _stripes(rng, n, period, colors, angle=None):
    theta = rng.uniform(0, math.pi) if angle is None else angle
    phase = rng.uniform(0, period)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    u = xx * math.cos(theta) + yy * math.sin(theta) + phase
    on = (u % period) < period / 2
    a, b = (np.asarray(c, dtype=np.float64) for c in colors)
    return np.where(on[..., None], b, a)


def toy_sample(spec, rng, domain):
    """One (image uint8 HxWx3, mask bool HxW) pair for domain 'X' or 'Y'."""
    n = spec.canvas
    img = _background(rng, n)
    mask = _shape_mask(rng, n, spec.shape, spec.coverage)
    if domain == "Y" and spec.stripes:
        fg = _stripes(rng, n, spec.stripe_period, spec.stripe_colors, spec.stripe_angle)
    else:
        fg = np.full((n, n, 3), float(spec.gray))
    img[mask] = fg[mask]
    img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), mask


def gen_toy(spec, out_dir, overwrite=False):
    """Write ``spec.count`` images per domain plus X's foreground masks.

    Layout: ``out_dir/X``, ``out_dir/Y``, ``out_dir/masks`` (1-channel PNG,
    255 = foreground, same filenames as X). Returns ``(ds_x, ds_y, masks_dir)``.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise DataError(f"{out} is not empty; pass overwrite=True to replace it")
    dirs = {d: out / d for d in ("X", "Y", "masks")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
        for old in d.glob("*.png"):
            old.unlink()
    ss = np.random.SeedSequence(spec.seed)
    rng_x, rng_y = (np.random.default_rng(s) for s in ss.spawn(2))
    width = max(4, len(str(spec.count - 1)))
    for i in range(spec.count):
        name = f"{i:0{width}d}.png"
        img, mask = toy_sample(spec, rng_x, "X")
        Image.fromarray(img).save(dirs["X"] / name)
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(dirs["masks"] / name)
        img, _ = toy_sample(spec, rng_y, "Y")
        Image.fromarray(img).save(dirs["Y"] / name)
    ds_x = DomainDataset(dirs["X"], "X", spec.canvas)
    ds_y = DomainDataset(dirs["Y"], "Y", spec.canvas)
    return ds_x, ds_y, dirs["masks"]


def load_masks(mask_dir, names=None):
    """Boolean (N, H, W) array of masks, in filename order or the given order."""
    mask_dir = Path(mask_dir)
    paths = [mask_dir / n for n in names] if names is not None else list_images(mask_dir)
    masks = []
    for p in paths:
        with Image.open(p) as im:
            masks.append(np.asarray(im.convert("L")) >= 128)
    return np.stack(masks)


TOY_SIZE_CLASSES = (("small", (0.10, 0.15)), ("large", (0.24, 0.30)))


def gen_toy_labelled(spec, out_dir, classes=TOY_SIZE_CLASSES, overwrite=False):
    """Two-domain toy set labelled by foreground size, for translate-then-classify.

    Writes ``out_dir/{X,Y}/<class>/NNNN.png`` with ``spec.count`` images per
    class and domain; class ``i`` uses ``spec.seed + i`` and its own coverage
    range. Returns ``out_dir``.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise DataError(f"{out} is not empty; pass overwrite=True to replace it")
    for i, (name, coverage) in enumerate(classes):
        ss = np.random.SeedSequence(spec.seed + i)
        rngs = dict(zip(("X", "Y"), (np.random.default_rng(s) for s in ss.spawn(2))))
        cspec = replace(spec, coverage=tuple(coverage))
        for domain, rng in rngs.items():
            d = out / domain / name
            d.mkdir(parents=True, exist_ok=True)
            for old in d.glob("*.png"):
                old.unlink()
            for j in range(spec.count):
                img, _ = toy_sample(cspec, rng, domain)
                Image.fromarray(img).save(d / f"{j:04d}.png")
    return out
