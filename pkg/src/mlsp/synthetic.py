"""Synthetic image corpus with a known quality function.

Images are smooth random colour fields with controllable brightness,
contrast, colourfulness and high-frequency noise.  The score of an image is
a fixed smooth function of statistics measured on the rendered pixels, plus
Gaussian rating noise, mapped onto the 1-10 scale.
"""
import math
import os
from dataclasses import dataclass

import numpy as np

from .backbone import _RGB_TO_OPP, opponent_planes
from .ppm import write_ppm
from .store import write_manifest
from .trainer import LabelTable

_OPP_TO_RGB = np.linalg.inv(_RGB_TO_OPP)
MIN_SIDE = 48
MAX_SIDE = 96
MOS_NOISE = 0.2

# Quality model: u = w . (s - center) / scale, MOS = 1 + 9 sigmoid(u) + noise.
_Q_CENTER = np.array([0.15, 0.14, 0.07, 0.02])
_Q_SCALE = np.array([0.05, 0.08, 0.035, 0.02])
_Q_WEIGHT = np.array([1.0, 0.8, -0.9, -0.7])
_Q_GAIN = 0.55


@dataclass(frozen=True)
class SyntheticImage:
    image_id: int
    pixels: np.ndarray
    mos: float
    latent: float


def _smooth_field(rng, h, w, n_waves=6):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.zeros((h, w))
    for _ in range(n_waves):
        freq = rng.uniform(0.5, 3.0) * 2 * math.pi / max(h, w)
        theta = rng.uniform(0, math.pi)
        phase = rng.uniform(0, 2 * math.pi)
        field += rng.normal() * np.cos(freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    sd = field.std()
    return field / sd if sd > 0 else field


def render_image(rng, height=None, width=None):
    """Draw one ``H x W x 3`` uint8 image."""
    h = int(height or rng.integers(MIN_SIDE, MAX_SIDE + 1))
    w = int(width or rng.integers(MIN_SIDE, MAX_SIDE + 1))
    brightness = rng.uniform(0.25, 0.75)
    contrast = rng.uniform(0.03, 0.25)
    saturation = rng.uniform(0.0, 0.2)
    noise = rng.uniform(0.0, 0.12)
    y = brightness + contrast * _smooth_field(rng, h, w) + noise * rng.normal(size=(h, w))
    rg = saturation * _smooth_field(rng, h, w, 3)
    yb = saturation * _smooth_field(rng, h, w, 3)
    rgb = np.stack([y, rg, yb], axis=2) @ _OPP_TO_RGB.T
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def quality_statistics(image):
    """Contrast, colourfulness, noisiness and brightness deviation of an image."""
    opp = opponent_planes(image)
    y = opp[..., 0]
    contrast = y.std()
    colour = math.hypot(opp[..., 1].std(), opp[..., 2].std())
    noisiness = 0.5 * (np.abs(np.diff(y, axis=0)).mean() + np.abs(np.diff(y, axis=1)).mean())
    bright_dev = (y.mean() - 0.5) ** 2
    return np.array([contrast, colour, noisiness, bright_dev])


def quality_latent(image):
    z = (quality_statistics(image) - _Q_CENTER) / _Q_SCALE
    return float(_Q_GAIN * (_Q_WEIGHT @ z))


def mos_from_latent(latent, noise=0.0):
    return float(np.clip(1.0 + 9.0 / (1.0 + math.exp(-latent)) + noise, 1.0, 10.0))


def generate_corpus(n, seed=0, first_id=1):
    """Yield ``n`` :class:`SyntheticImage` records deterministically from ``seed``."""
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        pixels = render_image(rng)
        latent = quality_latent(pixels)
        yield SyntheticImage(first_id + k, pixels, mos_from_latent(latent, rng.normal(0, MOS_NOISE)),
                             latent)


def write_corpus(directory, n, seed=0):
    """Write PPM images, ``manifest.csv`` and ``labels.csv`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    rows = []
    labels = LabelTable()
    for item in generate_corpus(n, seed):
        name = f"img_{item.image_id:06d}.ppm"
        write_ppm(os.path.join(directory, name), item.pixels)
        rows.append((item.image_id, name))
        labels[item.image_id] = item.mos
    write_manifest(os.path.join(directory, "manifest.csv"), rows)
    labels.to_csv(os.path.join(directory, "labels.csv"))
    return rows, labels
