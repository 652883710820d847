"""Seedable basic augmentations for RGB training patches.

All functions take and return (H, W, 3) uint8 arrays and preserve the
output shape. Random transforms draw from a ``numpy.random.Generator``;
``compose`` consumes a fixed number of draws per transform so a given
seed always yields the same output.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .imagery import LUMA_WEIGHTS, resize_bilinear, to_grayscale

WHITE = (255, 255, 255)
DEFAULT_PROB = 0.5
DEFAULT_ROTATION_DEG = 10.0


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(arr + 0.5), 0, 255).astype(np.uint8)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def vflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[::-1])


def _snap(coords: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    near = np.round(coords)
    return np.where(np.abs(coords - near) < tol, near, coords)


def affine(
    img: np.ndarray,
    rotate_deg: float = 0.0,
    shear_deg: float = 0.0,
    scale: float = 1.0,
    translate_px: tuple[float, float] = (0.0, 0.0),
    fill: Sequence[int] = WHITE,
) -> np.ndarray:
    """Affine warp about the image center with bilinear sampling.

    The forward map is translate . rotate . shear(x) . scale, with positive
    angles rotating counter-clockwise on screen. Each output pixel center is
    pulled back through the inverse map; samples outside the image blend
    toward ``fill``.
    """
    params = [rotate_deg, shear_deg, scale, *translate_px]
    if not all(math.isfinite(v) for v in params):
        raise ValueError("affine parameters must be finite")
    if abs(rotate_deg) > 180:
        raise ValueError("|rotate_deg| must be <= 180")
    if scale <= 0:
        raise ValueError("scale must be positive")
    if rotate_deg == 0 and shear_deg == 0 and scale == 1 and translate_px[0] == 0 and translate_px[1] == 0:
        return img.copy()

    h, w = img.shape[:2]
    theta = math.radians(rotate_deg)
    # image y points down, so a visual CCW rotation uses -theta in pixel coordinates
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, s], [-s, c]])
    shear = np.array([[1.0, math.tan(math.radians(shear_deg))], [0.0, 1.0]])
    fwd = rot @ shear @ (scale * np.eye(2))
    inv = np.linalg.inv(fwd)

    cx, cy = w / 2.0, h / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs + 0.5 - cx - translate_px[0]
    dy = ys + 0.5 - cy - translate_px[1]
    src_x = _snap(inv[0, 0] * dx + inv[0, 1] * dy + cx - 0.5)
    src_y = _snap(inv[1, 0] * dx + inv[1, 1] * dy + cy - 0.5)

    padded = np.empty((h + 2, w + 2, 3), dtype=np.float64)
    padded[:] = np.asarray(fill, dtype=np.float64)
    padded[1:-1, 1:-1] = img[..., :3]
    outside = (src_x <= -1) | (src_x >= w) | (src_y <= -1) | (src_y >= h)
    px = np.clip(src_x + 1, 0, w + 1)
    py = np.clip(src_y + 1, 0, h + 1)
    x0 = np.minimum(np.floor(px).astype(np.intp), w)
    y0 = np.minimum(np.floor(py).astype(np.intp), h)
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    out = (padded[y0, x0] * (1 - fx) * (1 - fy) + padded[y0, x0 + 1] * fx * (1 - fy)
           + padded[y0 + 1, x0] * (1 - fx) * fy + padded[y0 + 1, x0 + 1] * fx * fy)
    out[outside] = np.asarray(fill, dtype=np.float64)
    return _to_uint8(out)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorised RGB -> HSV on floats in [0, 1]; hue in turns."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    hue = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    hue = np.where(delta > 0, (hue / 6.0) % 1.0, 0.0)
    return np.stack([hue, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(np.intp) % 6
    choices_r = np.choose(i, [v, q, p, p, t, v])
    choices_g = np.choose(i, [t, v, v, q, p, p])
    choices_b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([choices_r, choices_g, choices_b], axis=-1)


def color_jitter(
    img: np.ndarray,
    brightness: float = 1.0,
    contrast: float = 1.0,
    saturation: float = 1.0,
    hue: float = 0.0,
) -> np.ndarray:
    """Brightness, contrast, saturation then hue, clamping after each step."""
    if min(brightness, contrast, saturation) < 0:
        raise ValueError("jitter factors must be non-negative")
    if not -0.5 <= hue <= 0.5:
        raise ValueError("hue shift must lie in [-0.5, 0.5] turns")
    x = img[..., :3].astype(np.float64)
    if brightness != 1:
        x = np.clip(x * brightness, 0, 255)
    if contrast != 1:
        mean_luma = (x @ LUMA_WEIGHTS).mean()
        x = np.clip(mean_luma + (x - mean_luma) * contrast, 0, 255)
    if saturation != 1:
        luma = (x @ LUMA_WEIGHTS)[..., None]
        x = np.clip(luma + (x - luma) * saturation, 0, 255)
    if hue != 0:
        hsv = rgb_to_hsv(x / 255.0)
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        x = hsv_to_rgb(hsv) * 255.0
    return _to_uint8(x)


def solarize(img: np.ndarray, threshold: int = 128) -> np.ndarray:
    if not 0 <= threshold <= 255:
        raise ValueError("solarize threshold must lie in [0, 255]")
    return np.where(img >= threshold, 255 - img, img).astype(np.uint8)


def posterize(img: np.ndarray, bits: int = 4) -> np.ndarray:
    if not 1 <= bits <= 8:
        raise ValueError("posterize bits must lie in [1, 8]")
    mask = np.uint8((0xFF << (8 - bits)) & 0xFF)
    return img & mask


def grayscale_aug(img: np.ndarray) -> np.ndarray:
    gray = to_grayscale(img)
    return np.repeat(gray[..., None], 3, axis=-1)


def random_erase(img: np.ndarray, rng: np.random.Generator,
                 area_frac_range: tuple[float, float] = (0.02, 0.33),
                 fill: Sequence[int] = (0, 0, 0)) -> np.ndarray:
    """Replace one axis-aligned rectangle covering a sampled area fraction with ``fill``."""
    lo, hi = area_frac_range
    if not 0 <= lo <= hi <= 1:
        raise ValueError("area fractions must satisfy 0 <= lo <= hi <= 1")
    h, w = img.shape[:2]
    frac = rng.uniform(lo, hi) if hi > lo else lo
    height_frac = rng.uniform(frac, 1.0) if frac < 1 else 1.0
    pos = rng.random(2)
    if frac <= 0:
        return img.copy()
    eh = min(h, max(1, int(round(height_frac * h))))
    ew = min(w, max(1, int(round(frac / height_frac * w))))
    y = int(pos[0] * (h - eh + 1))
    x = int(pos[1] * (w - ew + 1))
    out = img.copy()
    out[y:y + eh, x:x + ew] = np.asarray(fill, dtype=np.uint8)
    return out


def random_crop(img: np.ndarray, rng: np.random.Generator, crop_frac: float = 0.8) -> np.ndarray:
    """Crop a sub-rectangle with sides ``crop_frac`` of the image and resize it back."""
    if not 0 < crop_frac <= 1:
        raise ValueError("crop_frac must lie in (0, 1]")
    h, w = img.shape[:2]
    ch = max(1, int(round(crop_frac * h)))
    cw = max(1, int(round(crop_frac * w)))
    pos = rng.random(2)
    y = int(pos[0] * (h - ch + 1))
    x = int(pos[1] * (w - cw + 1))
    sub = img[y:y + ch, x:x + cw, :3]
    return _to_uint8(resize_bilinear(sub, h, w))


# -- spec parsing and composition --------------------------------------------

# name -> (parameter names, defaults); the trailing optional value is always the probability
TRANSFORMS = {
    "hflip": ((), ()),
    "vflip": ((), ()),
    "rotation": (("max_deg",), (DEFAULT_ROTATION_DEG,)),
    "shear": (("max_deg",), (10.0,)),
    "scale": (("lo", "hi"), (0.9, 1.1)),
    "translate": (("frac",), (0.1,)),
    "color_jitter": (("brightness", "contrast", "saturation", "hue"), (0.2, 0.2, 0.2, 0.05)),
    "grayscale": ((), ()),
    "solarize": (("threshold",), (128,)),
    "posterize": (("bits",), (4,)),
    "erase": (("lo", "hi"), (0.02, 0.33)),
    "crop": (("frac",), (0.8,)),
}


@dataclass
class Transform:
    name: str
    params: dict = field(default_factory=dict)
    p: float = DEFAULT_PROB

    def validate(self) -> None:
        if self.name not in TRANSFORMS:
            raise ConfigurationError(f"unknown augmentation {self.name!r}")
        if not 0 <= self.p <= 1:
            raise ConfigurationError(f"{self.name}: probability {self.p} outside [0, 1]")
        prm = self.params
        if self.name in ("scale", "erase") and prm["lo"] > prm["hi"]:
            raise ConfigurationError(f"{self.name}: range ({prm['lo']}, {prm['hi']}) is not ordered")
        if self.name == "scale" and prm["lo"] <= 0:
            raise ConfigurationError("scale: lower bound must be positive")
        if self.name == "erase" and not 0 <= prm["lo"] <= prm["hi"] <= 1:
            raise ConfigurationError("erase: area fractions must lie in [0, 1]")
        if self.name == "rotation" and not 0 <= prm["max_deg"] <= 180:
            raise ConfigurationError("rotation: max_deg must lie in [0, 180]")
        if self.name == "shear" and not 0 <= prm["max_deg"] < 90:
            raise ConfigurationError("shear: max_deg must lie in [0, 90)")
        if self.name == "translate" and not 0 <= prm["frac"] <= 1:
            raise ConfigurationError("translate: frac must lie in [0, 1]")
        if self.name == "solarize" and not 0 <= prm["threshold"] <= 255:
            raise ConfigurationError("solarize: threshold must lie in [0, 255]")
        if self.name == "posterize" and not 1 <= prm["bits"] <= 8:
            raise ConfigurationError("posterize: bits must lie in [1, 8]")
        if self.name == "crop" and not 0 < prm["frac"] <= 1:
            raise ConfigurationError("crop: frac must lie in (0, 1]")
        if self.name == "color_jitter":
            if min(prm["brightness"], prm["contrast"], prm["saturation"]) < 0 or not 0 <= prm["hue"] <= 0.5:
                raise ConfigurationError("color_jitter: invalid ranges")


_CALL = re.compile(r"^\s*([a-z_]+)\s*(?:\((.*)\))?\s*$")


def parse_transform(text: str) -> Transform:
    """Parse ``name(arg, ...)``.

    Flips and grayscale take only a probability. Other transforms take their
    range parameters followed by an optional probability, e.g.
    ``rotation(10)`` or ``rotation(10, 0.8)``.
    """
    m = _CALL.match(text)
    if not m:
        raise ConfigurationError(f"cannot parse augmentation {text!r}")
    name, argtext = m.group(1), m.group(2)
    if name not in TRANSFORMS:
        raise ConfigurationError(f"unknown augmentation {name!r}")
    try:
        args = [float(a) for a in argtext.split(",")] if argtext and argtext.strip() else []
    except ValueError as exc:
        raise ConfigurationError(f"non-numeric argument in {text!r}") from exc
    names, defaults = TRANSFORMS[name]
    if len(args) > len(names) + 1:
        raise ConfigurationError(f"too many arguments in {text!r}")
    values = list(defaults)
    values[:min(len(args), len(names))] = args[:len(names)]
    p = args[len(names)] if len(args) > len(names) else DEFAULT_PROB
    params = dict(zip(names, values))
    for key in ("bits", "threshold"):
        if key in params:
            params[key] = int(params[key])
    t = Transform(name, params, p)
    t.validate()
    return t


def parse_spec(items: Sequence[str | Transform]) -> list[Transform]:
    spec = [item if isinstance(item, Transform) else parse_transform(item) for item in items]
    for t in spec:
        t.validate()
    return spec


def apply_transform(t: Transform, img: np.ndarray, rng: np.random.Generator, fill=WHITE) -> np.ndarray:
    """Apply ``t`` with probability ``t.p``, drawing its parameters from ``rng``."""
    fire = rng.random() < t.p
    prm = t.params
    h, w = img.shape[:2]
    if t.name == "hflip":
        return hflip(img) if fire else img
    if t.name == "vflip":
        return vflip(img) if fire else img
    if t.name == "grayscale":
        return grayscale_aug(img) if fire else img
    if t.name == "rotation":
        angle = rng.uniform(-prm["max_deg"], prm["max_deg"])
        return affine(img, rotate_deg=angle, fill=fill) if fire else img
    if t.name == "shear":
        angle = rng.uniform(-prm["max_deg"], prm["max_deg"])
        return affine(img, shear_deg=angle, fill=fill) if fire else img
    if t.name == "scale":
        factor = rng.uniform(prm["lo"], prm["hi"])
        return affine(img, scale=factor, fill=fill) if fire else img
    if t.name == "translate":
        shift = rng.uniform(-prm["frac"], prm["frac"], size=2) * (w, h)
        return affine(img, translate_px=(float(np.round(shift[0])), float(np.round(shift[1]))), fill=fill) if fire else img
    if t.name == "color_jitter":
        b, c, s = (rng.uniform(max(0.0, 1 - prm[k]), 1 + prm[k]) for k in ("brightness", "contrast", "saturation"))
        hue = rng.uniform(-prm["hue"], prm["hue"])
        return color_jitter(img, b, c, s, hue) if fire else img
    if t.name == "solarize":
        return solarize(img, prm["threshold"]) if fire else img
    if t.name == "posterize":
        return posterize(img, prm["bits"]) if fire else img
    if t.name == "erase":
        sub = np.random.default_rng(rng.integers(1 << 63))
        return random_erase(img, sub, (prm["lo"], prm["hi"])) if fire else img
    if t.name == "crop":
        sub = np.random.default_rng(rng.integers(1 << 63))
        return random_crop(img, sub, prm["frac"]) if fire else img
    raise ConfigurationError(f"unknown augmentation {t.name!r}")


def compose(spec: Sequence[str | Transform], rng: np.random.Generator, img: np.ndarray, fill=WHITE) -> np.ndarray:
    """Apply every transform of ``spec`` in order."""
    out = img
    for t in parse_spec(spec):
        out = apply_transform(t, out, rng, fill=fill)
    return out if out is not img else img.copy()
