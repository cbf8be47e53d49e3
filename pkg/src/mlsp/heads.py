"""Regression heads on MLSP features, plus the image-resolution baseline.

Hidden layers that feed a batch norm carry no bias (the norm's offset
replaces it); everything else uses ReLU except the final linear score and
the baseline's softmax.
"""
from dataclasses import asdict, dataclass

import numpy as np

from .backbone import BackboneProfile, profile_lookup
from .nn import (BatchNorm, Concat, Conv2D, Dense, Dropout, GlobalAvgPool,
                 ModelGraph, ReLU, Slice, Softmax, SpatialAvgPool, WeightedSum)
from .pooling import NARROW, WIDE, WIDE_SIZE

ARCHITECTURES = ("single_1fc", "single_3fc", "multi_3fc", "pool_3fc", "resolution_baseline")
FEATURE_KIND = {"single_1fc": NARROW, "single_3fc": NARROW, "multi_3fc": NARROW,
                "pool_3fc": WIDE, "resolution_baseline": None}
DEFAULT_DROPOUT = (0.25, 0.25, 0.5)
INCREASED_DROPOUT = (0.5, 0.5, 0.75)
BASELINE_WIDTHS = (11, 9, 7, 2)


def fc3_widths(x):
    """Hidden widths of the 3FC component: X, X/2, X/8 (at least 1)."""
    return x, max(1, x // 2), max(1, x // 8)


def count_3fc(d, x):
    h1, h2, h3 = fc3_widths(x)
    return d * h1 + 2 * h1 + h1 * h2 + 2 * h2 + h2 * h3 + 2 * h3 + h3 + 1


def count_single_1fc(b):
    return b + 1


def count_multi_3fc(block_channels):
    return sum(count_3fc(c, c) for c in block_channels) + len(block_channels) + 1


def count_pool_3fc(b, kernels, x=None):
    x = 3 * kernels if x is None else x
    return 11 * b * kernels + 6 * kernels + count_3fc(3 * kernels, x)


def count_resolution_baseline():
    widths = (2,) + BASELINE_WIDTHS
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def _check_dropout(dropout):
    dropout = tuple(float(d) for d in dropout)
    if len(dropout) != 3 or not all(0.0 <= d < 1.0 for d in dropout):
        raise ValueError(f"dropout must be three rates in [0, 1), got {dropout}")
    return dropout


def _resolve(b_or_profile, blocks):
    """Return ``(input width, (start, stop) of the selected slice or None)``."""
    if isinstance(b_or_profile, (BackboneProfile, str)):
        prof = profile_lookup(b_or_profile)
        total = prof.total
        if blocks is None:
            return total, None
        width = prof.last_blocks_width(blocks)
        return total, (total - width, total)
    if blocks is not None:
        raise ValueError("a block subset needs a backbone profile, not a bare width")
    b = int(b_or_profile)
    if b < 1:
        raise ValueError(f"feature width must be positive, got {b}")
    return b, None


def add_3fc(graph, x, dropout, source=None, prefix="fc"):
    """Append the 3FC component (ending in a linear 1-unit score) to ``graph``."""
    out = source or graph.output
    for k, (width, rate) in enumerate(zip(fc3_widths(x), dropout), start=1):
        out = graph.add(Dense(width, use_bias=False), out, name=f"{prefix}{k}")
        out = graph.add(BatchNorm(), out, name=f"{prefix}{k}_bn")
        out = graph.add(ReLU(), out, name=f"{prefix}{k}_relu")
        out = graph.add(Dropout(rate), out, name=f"{prefix}{k}_drop")
    return graph.add(Dense(1), out, name=f"{prefix}_score")


def build_single_1fc(b_or_profile, blocks=None, seed=0):
    total, sl = _resolve(b_or_profile, blocks)
    g = ModelGraph((total,), seed=seed, name="single_1fc")
    if sl:
        g.add(Slice(*sl), name="blocks")
    g.add(Dense(1), name="score")
    return g


def build_single_3fc(b_or_profile, x=2048, dropout=DEFAULT_DROPOUT, blocks=None, seed=0):
    dropout = _check_dropout(dropout)
    total, sl = _resolve(b_or_profile, blocks)
    g = ModelGraph((total,), seed=seed, name="single_3fc")
    if sl:
        g.add(Slice(*sl), name="blocks")
    add_3fc(g, int(x), dropout)
    return g


def build_multi_3fc(profile, blocks=None, dropout=DEFAULT_DROPOUT, seed=0):
    """One 3FC head (X = block width) per block GAP slice, joined by a
    trainable weighted sum."""
    dropout = _check_dropout(dropout)
    prof = profile_lookup(profile)
    first = 0 if blocks is None else prof.n_blocks - blocks
    if blocks is not None:
        prof.last_blocks_width(blocks)
    g = ModelGraph((prof.total,), seed=seed, name="multi_3fc")
    start = sum(prof.block_channels[:first])
    scores = []
    for i in range(first, prof.n_blocks):
        c = prof.block_channels[i]
        s = g.add(Slice(start, start + c), "input", name=f"block{i}")
        scores.append(add_3fc(g, c, dropout, source=s, prefix=f"b{i}_fc"))
        start += c
    g.add(WeightedSum(), *scores, name="joint")
    return g


def build_pool_3fc(b_or_profile, kernels=1024, x=None, dropout=DEFAULT_DROPOUT,
                   blocks=None, seed=0, spatial=WIDE_SIZE):
    """Reduced Inception-type module on 5x5 wide features followed by 3FC.

    Three columns of ``kernels`` filters each: 1x1 conv, 3x3 conv, and 3x3
    average pool then 1x1 conv, each with batch norm and ReLU; their concat
    is globally pooled and fed to a 3FC with ``X = 3 * kernels`` by default.
    """
    if spatial != WIDE_SIZE:
        raise ValueError(f"pool_3fc needs {WIDE_SIZE}x{WIDE_SIZE} wide features, "
                         f"got spatial size {spatial}")
    dropout = _check_dropout(dropout)
    total, sl = _resolve(b_or_profile, blocks)
    x = 3 * kernels if x is None else int(x)
    g = ModelGraph((WIDE_SIZE, WIDE_SIZE, total), seed=seed, name="pool_3fc")
    src = g.add(Slice(*sl), name="blocks") if sl else "input"
    cols = []
    for col, ksize in (("c1x1", 1), ("c3x3", 3)):
        h = g.add(Conv2D(kernels, ksize, use_bias=False), src, name=col)
        h = g.add(BatchNorm(), h, name=f"{col}_bn")
        cols.append(g.add(ReLU(), h, name=f"{col}_relu"))
    h = g.add(SpatialAvgPool(), src, name="cpool")
    h = g.add(Conv2D(kernels, 1, use_bias=False), h, name="cpool_1x1")
    h = g.add(BatchNorm(), h, name="cpool_bn")
    cols.append(g.add(ReLU(), h, name="cpool_relu"))
    g.add(Concat(), *cols, name="concat")
    g.add(GlobalAvgPool(), name="gap")
    add_3fc(g, x, dropout)
    return g


def build_resolution_baseline(max_width, max_height, seed=0):
    """2 -> 11 -> 9 -> 7 -> 2 classifier on normalized (width, height).

    ``graph.logits`` names the pre-softmax tensor used for cross-entropy.
    """
    if max_width <= 0 or max_height <= 0:
        raise ValueError("maximum width and height must be positive")
    g = ModelGraph((2,), seed=seed, name="resolution_baseline")
    for k, units in enumerate(BASELINE_WIDTHS[:-1]):
        g.add(Dense(units), name=f"fc{k + 1}")
        g.add(ReLU(), name=f"fc{k + 1}_relu")
    g.logits = g.add(Dense(BASELINE_WIDTHS[-1]), name="logits")
    g.add(Softmax(), name="prob")
    g.input_scale = (float(max_width), float(max_height))
    return g


def resolution_inputs(widths, heights, max_width, max_height):
    return np.stack([np.asarray(widths, float) / max_width,
                     np.asarray(heights, float) / max_height], axis=1).astype(np.float32)


@dataclass
class HeadSpec:
    """Serializable description of a head; ``build_head`` realizes it."""

    architecture: str
    profile: str = "inception-v3"
    b: int = None
    x: int = None
    dropout: tuple = DEFAULT_DROPOUT
    blocks: int = None
    kernels: int = 1024
    max_width: float = 1.0
    max_height: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; "
                             f"choose from {', '.join(ARCHITECTURES)}")
        self.dropout = _check_dropout(self.dropout)
        if self.blocks is not None:
            profile_lookup(self.profile).last_blocks_width(self.blocks)

    @property
    def feature_kind(self):
        return FEATURE_KIND[self.architecture]

    def to_dict(self):
        d = asdict(self)
        d["dropout"] = list(self.dropout)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["dropout"] = tuple(d.get("dropout", DEFAULT_DROPOUT))
        return cls(**d)


def build_head(spec):
    a = spec.architecture
    source = spec.b if spec.b is not None else spec.profile
    if a == "single_1fc":
        return build_single_1fc(source, blocks=spec.blocks, seed=spec.seed)
    if a == "single_3fc":
        return build_single_3fc(source, x=spec.x or 2048, dropout=spec.dropout, blocks=spec.blocks,
                                seed=spec.seed)
    if a == "multi_3fc":
        return build_multi_3fc(spec.profile, blocks=spec.blocks, dropout=spec.dropout,
                               seed=spec.seed)
    if a == "pool_3fc":
        return build_pool_3fc(source, kernels=spec.kernels, x=spec.x, dropout=spec.dropout,
                              blocks=spec.blocks, seed=spec.seed)
    return build_resolution_baseline(spec.max_width, spec.max_height, seed=spec.seed)
