"""Fixed crop/flip augmentation geometry.

Canonical index ``corner * 2 + flip`` with corners ordered top-left,
top-right, bottom-left, bottom-right:

    0 TL      1 TL+flip  2 TR      3 TR+flip
    4 BL      5 BL+flip  6 BR      7 BR+flip
"""
import math
from dataclasses import dataclass

import numpy as np

CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")
CROP_RATIO = 0.875


@dataclass(frozen=True)
class AugmentationId:
    corner: int
    flip: bool

    def __post_init__(self):
        if not 0 <= self.corner < 4:
            raise ValueError(f"corner index must be 0..3, got {self.corner}")

    @property
    def index(self):
        return self.corner * 2 + int(self.flip)

    @classmethod
    def from_index(cls, index):
        if not 0 <= index < 8:
            raise ValueError(f"augmentation index must be 0..7, got {index}")
        return cls(index // 2, bool(index % 2))

    def __str__(self):
        return f"{CORNERS[self.corner]}{'+flip' if self.flip else ''}"


def enumerate_augmentations():
    return tuple(AugmentationId(c, f) for c in range(4) for f in (False, True))


def crop_rect(width, height, corner, ratio=CROP_RATIO):
    """Return ``(x, y, w, h)`` of the proportional crop anchored at ``corner``.

    ``corner`` is an index 0..3 or one of :data:`CORNERS`.
    """
    if width < 8 or height < 8:
        raise ValueError(f"image must be at least 8x8, got {width}x{height}")
    if isinstance(corner, str):
        corner = CORNERS.index(corner)
    w = math.floor(ratio * width)
    h = math.floor(ratio * height)
    x = 0 if corner in (0, 2) else width - w
    y = 0 if corner in (0, 1) else height - h
    return x, y, w, h


def apply_augmentation(image, aug):
    """Crop (then mirror horizontally if requested) an ``H x W x C`` image.

    ``aug=None`` returns the full, unflipped image (the no-augmentation view).
    Pixels are copied, never resampled.
    """
    image = np.asarray(image)
    if aug is None:
        return image.copy()
    if isinstance(aug, int):
        aug = AugmentationId.from_index(aug)
    height, width = image.shape[:2]
    x, y, w, h = crop_rect(width, height, aug.corner)
    out = image[y:y + h, x:x + w]
    if aug.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def views(n_augs):
    """The augmentation list for a store with ``n_augs`` records per image."""
    if n_augs == 8:
        return list(enumerate_augmentations())
    if n_augs == 1:
        return [None]
    raise ValueError(f"augmentations per image must be 8 or 1, got {n_augs}")
