"""Backbone profiles and sources of activation blocks.

Activations come either from files exported by an external network
(``MLSPACT1`` format) or from a deterministic synthetic backbone that
mimics a CNN's shrinking spatial resolution.

MLSPACT1 layout, little-endian: magic ``MLSPACT1``, u16 version (1), u16
profile-name length and bytes, u16 block count, then per block
``u32 H, u32 W, u32 C`` followed by ``H*W*C`` float32 values (row-major).
"""
import functools
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels

ACT_MAGIC = b"MLSPACT1"
ACT_VERSION = 1


class ActivationFormatError(ValueError):
    """A malformed or profile-inconsistent activation file."""

    def __init__(self, message, block=None):
        super().__init__(message if block is None else f"block {block}: {message}")
        self.block = block


@dataclass(frozen=True)
class BackboneProfile:
    name: str
    block_channels: tuple

    def __post_init__(self):
        if not self.block_channels or any(c < 1 for c in self.block_channels):
            raise ValueError(f"profile {self.name!r}: channel counts must be positive")

    @property
    def n_blocks(self):
        return len(self.block_channels)

    @property
    def total(self):
        return int(sum(self.block_channels))

    def downsampling(self, i):
        """Spatial reduction factor of block ``i``: 2 ** (ceil(5 i / N) + 2)."""
        return 2 ** (math.ceil(5 * i / self.n_blocks) + 2)

    def block_size(self, i, height, width):
        f = self.downsampling(i)
        return max(1, -(-height // f)), max(1, -(-width // f))

    def last_blocks_width(self, k):
        if not 1 <= k <= self.n_blocks:
            raise ValueError(f"block subset last:{k} invalid for {self.n_blocks}-block "
                             f"profile {self.name!r}")
        return int(sum(self.block_channels[-k:]))


def _uniform_channels(total, n):
    base, extra = divmod(total, n)
    return tuple(base + 1 if i < extra else base for i in range(n))


INCEPTION_V3 = BackboneProfile(
    "inception-v3", (256, 288, 288, 768, 768, 768, 768, 768, 1280, 2048, 2048))
INCEPTION_RESNET_V2 = BackboneProfile("inceptionresnet-v2", _uniform_channels(16928, 43))

# Published (block count, kernel total) for the built-in profiles.
_PUBLISHED = {INCEPTION_V3.name: (11, 10048), INCEPTION_RESNET_V2.name: (43, 16928)}
_REGISTRY = {p.name: p for p in (INCEPTION_V3, INCEPTION_RESNET_V2)}


def register_profile(profile):
    if profile.name in _PUBLISHED:
        raise ValueError(f"cannot redefine built-in profile {profile.name!r}")
    _REGISTRY[profile.name] = profile
    return profile


def load_profile_file(path):
    """Register profiles from JSON: an object or list of
    ``{"name": ..., "block_channels": [...]}``."""
    with open(path) as fh:
        data = json.load(fh)
    items = data if isinstance(data, list) else [data]
    return [register_profile(BackboneProfile(d["name"], tuple(int(c) for c in d["block_channels"])))
            for d in items]


def profile_lookup(name):
    if isinstance(name, BackboneProfile):
        return name
    try:
        prof = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown backbone profile {name!r}; known: "
                       f"{', '.join(sorted(_REGISTRY))}") from None
    if prof.name in _PUBLISHED and (prof.n_blocks, prof.total) != _PUBLISHED[prof.name]:
        raise AssertionError(f"built-in profile {prof.name!r} is corrupt")
    return prof


def known_profiles():
    return sorted(_REGISTRY)


@dataclass(eq=False)
class ActivationBlockSet:
    profile: str
    blocks: list

    def validate(self, profile=None):
        prof = profile_lookup(profile or self.profile)
        if len(self.blocks) != prof.n_blocks:
            raise ActivationFormatError(
                f"{len(self.blocks)} blocks, profile {prof.name!r} has {prof.n_blocks}")
        for i, (blk, c) in enumerate(zip(self.blocks, prof.block_channels)):
            if blk.ndim != 3 or blk.shape[0] < 1 or blk.shape[1] < 1:
                raise ActivationFormatError(f"bad shape {blk.shape}", block=i)
            if blk.shape[2] != c:
                raise ActivationFormatError(
                    f"has {blk.shape[2]} channels, profile {prof.name!r} expects {c}", block=i)
        return self

    def __len__(self):
        return len(self.blocks)


def write_activations(path, blockset):
    name = blockset.profile.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(ACT_MAGIC)
        fh.write(struct.pack("<HH", ACT_VERSION, len(name)))
        fh.write(name)
        fh.write(struct.pack("<H", len(blockset.blocks)))
        for blk in blockset.blocks:
            blk = np.ascontiguousarray(blk, dtype="<f4")
            fh.write(struct.pack("<III", *blk.shape))
            fh.write(blk.tobytes())


def load_activations(path, profile=None):
    """Read an MLSPACT1 file and validate it against its (or the given) profile."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != ACT_MAGIC:
        raise ActivationFormatError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 12:
        raise ActivationFormatError(f"{path}: truncated header")
    version, n_name = struct.unpack_from("<HH", data, 8)
    if version != ACT_VERSION:
        raise ActivationFormatError(f"{path}: unsupported version {version}")
    pos = 12 + n_name
    name = data[12:pos].decode("utf-8")
    if pos + 2 > len(data):
        raise ActivationFormatError(f"{path}: truncated header")
    (n_blocks,) = struct.unpack_from("<H", data, pos)
    pos += 2
    prof = profile_lookup(profile or name)
    if n_blocks != prof.n_blocks:
        raise ActivationFormatError(
            f"{path}: {n_blocks} blocks, profile {prof.name!r} has {prof.n_blocks}")
    blocks = []
    for i in range(n_blocks):
        if pos + 12 > len(data):
            raise ActivationFormatError(f"{path}: truncated block header", block=i)
        h, w, c = struct.unpack_from("<III", data, pos)
        pos += 12
        if c != prof.block_channels[i]:
            raise ActivationFormatError(
                f"{path}: has {c} channels, profile {prof.name!r} expects "
                f"{prof.block_channels[i]}", block=i)
        if h < 1 or w < 1:
            raise ActivationFormatError(f"{path}: empty spatial size {h}x{w}", block=i)
        size = h * w * c
        if pos + 4 * size > len(data):
            raise ActivationFormatError(
                f"{path}: payload short by {pos + 4 * size - len(data)} bytes", block=i)
        blocks.append(np.frombuffer(data, "<f4", size, pos).reshape(h, w, c).astype(np.float32))
        pos += 4 * size
    return ActivationBlockSet(prof.name, blocks)


# Synthetic backbone -------------------------------------------------------

_RGB_TO_OPP = np.array([[0.299, 0.587, 0.114],   # luminance
                        [1.0, -1.0, 0.0],         # red - green
                        [0.5, 0.5, -1.0]])        # yellow - blue
# Fixed centering/scaling of the seven local statistics.
_STAT_CENTER = np.array([0.5, 0.08, 0.0, 0.0, 0.04, 0.04, 0.08])
_STAT_SCALE = np.array([0.2, 0.06, 0.1, 0.1, 0.04, 0.04, 0.08])
N_STATS = 7


def opponent_planes(image):
    """Luminance and two opponent colour planes of an RGB image in [0, 1]."""
    img = np.asarray(image)
    img = img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)
    return img @ _RGB_TO_OPP.T


def _moment_planes(image):
    opp = opponent_planes(image)
    y = opp[..., 0]
    gx = np.diff(y, axis=1, append=y[:, -1:])
    gy = np.diff(y, axis=0, append=y[-1:, :])
    return np.concatenate([opp, opp * opp, (gx * gx + gy * gy)[..., None]], axis=2)


def _local_stats(cells):
    mean = cells[..., 0:3]
    var = cells[..., 3:6] - mean * mean
    # cancellation residue on flat regions must read as exactly zero
    sd = np.sqrt(np.where(var > 1e-12, var, 0.0))
    grad = np.sqrt(cells[..., 6:7])
    stats = np.concatenate([mean[..., 0:1], sd[..., 0:1], mean[..., 1:3], sd[..., 1:3], grad],
                           axis=2)
    return (stats - _STAT_CENTER) / _STAT_SCALE


@functools.lru_cache(maxsize=64)
def _projection(seed, block, channels):
    rng = np.random.default_rng([seed, block, channels])
    weights = rng.normal(0.0, 1.0 / math.sqrt(N_STATS), size=(N_STATS, channels))
    bias = rng.normal(0.0, 0.5, size=channels)
    return weights, bias


def synth_activations(image, profile, seed=0):
    """Deterministic stand-in for a pretrained CNN's block activations.

    For block ``i`` the image is partitioned into ``f x f`` cells with
    ``f = 2 ** (ceil(5 i / N) + 2)``; each cell contributes seven local
    statistics (luminance mean and deviation, opponent-colour means and
    deviations, gradient energy), which a seeded random projection and a
    ``tanh`` map to the block's channel count.
    """
    prof = profile_lookup(profile)
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {img.shape}")
    height, width = img.shape[:2]
    if height < 32 or width < 32:
        raise ValueError(f"image must be at least 32x32, got {width}x{height}")
    planes = _moment_planes(img)
    blocks = []
    cache = {}
    for i, channels in enumerate(prof.block_channels):
        f = prof.downsampling(i)
        if f not in cache:
            cache[f] = _local_stats(kernels.cell_means(planes, f))
        stats = cache[f]
        weights, bias = _projection(int(seed), i, channels)
        blocks.append(np.tanh(stats @ weights + bias).astype(np.float32))
    return ActivationBlockSet(prof.name, blocks)
