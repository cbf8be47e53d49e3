"""Multi-level spatial pooling of activation blocks into fixed-size features."""
from dataclasses import dataclass

import numpy as np

from . import kernels

NARROW = "narrow"
WIDE = "wide"
WIDE_SIZE = 5
SPATIAL = {NARROW: 1, WIDE: WIDE_SIZE}


@dataclass(frozen=True, eq=False)
class MlspFeature:
    """A pooled feature of shape ``(spatial, spatial, b)``."""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in SPATIAL:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        s = SPATIAL[self.kind]
        if self.values.ndim != 3 or self.values.shape[:2] != (s, s):
            raise ValueError(f"{self.kind} feature must be ({s}, {s}, b), "
                             f"got {self.values.shape}")

    @property
    def spatial(self):
        return SPATIAL[self.kind]

    @property
    def b(self):
        return self.values.shape[2]

    def model_input(self):
        """The array a head consumes: ``(b,)`` for narrow, ``(5, 5, b)`` for wide."""
        return self.values.reshape(-1) if self.kind == NARROW else self.values


def _blocks(blocks):
    seq = getattr(blocks, "blocks", blocks)
    seq = list(seq)
    if not seq:
        raise ValueError("empty activation block set")
    return seq


def area_resize(block, out_h, out_w):
    """Resize an ``H x W x C`` block by exact area (coverage) averaging.

    Output cell ``(i, j)`` is the mean of the input over the rectangle
    ``[i*H/out_h, (i+1)*H/out_h) x [j*W/out_w, (j+1)*W/out_w)``, each input
    pixel weighted by its fractional overlap.  The same rule serves
    down- and up-scaling.  Accumulation is in float64; the result is float32.
    """
    block = np.asarray(block)
    if block.ndim == 2:
        block = block[:, :, None]
    if block.ndim != 3 or min(block.shape[:2]) < 1:
        raise ValueError(f"block must be H x W x C with H, W >= 1, got {block.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    return kernels.area_resize(block, int(out_h), int(out_w))


def pool_narrow(blocks):
    """Global average pool every block and concatenate along channels."""
    parts = [np.asarray(b, dtype=np.float64).mean(axis=(0, 1)) for b in _blocks(blocks)]
    values = np.concatenate(parts).astype(np.float32)
    return MlspFeature(NARROW, values.reshape(1, 1, -1))


def pool_wide(blocks):
    """Area-resize every block to 5x5 and concatenate along channels."""
    parts = [area_resize(b, WIDE_SIZE, WIDE_SIZE) for b in _blocks(blocks)]
    return MlspFeature(WIDE, np.concatenate(parts, axis=2))


def pool(blocks, kind):
    if kind == NARROW:
        return pool_narrow(blocks)
    if kind == WIDE:
        return pool_wide(blocks)
    raise ValueError(f"unknown feature kind {kind!r}")


def block_ranges(block_channels):
    """Feature index range ``[start, stop)`` of each block, in block order."""
    stops = np.cumsum(block_channels)
    starts = stops - np.asarray(block_channels)
    return [(int(a), int(b)) for a, b in zip(starts, stops)]
