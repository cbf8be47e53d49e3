"""Feature extraction: image -> augmented views -> activations -> MLSP -> store."""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .augment import apply_augmentation, views
from .backbone import ActivationFormatError, load_activations, profile_lookup, synth_activations
from .pooling import pool
from .ppm import read_ppm
from .store import StoreError, StoreWriter

log = logging.getLogger(__name__)


class SyntheticBackbone:
    """Deterministic stand-in network; consumes decoded images."""

    needs_pixels = True

    def __init__(self, profile="inception-v3", seed=0):
        self.profile = profile_lookup(profile)
        self.seed = int(seed)

    def activations(self, image, aug):
        return synth_activations(apply_augmentation(image, aug), self.profile, self.seed)

    @classmethod
    def parse(cls, text):
        """``synthetic:<profile>:<seed>`` (profile and seed optional)."""
        parts = text.split(":")
        if parts[0] != "synthetic" or len(parts) > 3:
            raise ValueError(f"backbone spec must be synthetic[:profile[:seed]], got {text!r}")
        profile = parts[1] if len(parts) > 1 and parts[1] else "inception-v3"
        seed = int(parts[2]) if len(parts) > 2 else 0
        return cls(profile, seed)


class FilesBackbone:
    """Activations precomputed by an external network, one MLSPACT1 file per
    view.  A manifest filename containing ``{aug}`` expands to the augmentation
    index (0-7); without it only single-view extraction is possible."""

    needs_pixels = False

    def __init__(self, profile, root="."):
        self.profile = profile_lookup(profile)
        self.root = root

    def path(self, filename, aug):
        if "{aug}" in filename:
            return os.path.join(self.root, filename.format(aug=0 if aug is None else aug.index))
        if aug is not None:
            raise ValueError(f"{filename}: 8-view extraction from files needs an '{{aug}}' "
                             f"placeholder in the manifest filename")
        return os.path.join(self.root, filename)

    def activations(self, filename, aug):
        return load_activations(self.path(filename, aug), self.profile)


@dataclass
class ExtractResult:
    records: int = 0
    images: int = 0
    failures: list = field(default_factory=list)
    overflow: int = 0


def _image_features(backbone, image_id, source, kind, aug_views, root):
    """``(image_id, features, None)`` or ``(image_id, None, reason)``."""
    try:
        if backbone.needs_pixels and isinstance(source, str):
            source = read_ppm(os.path.join(root, source))
        return image_id, [pool(backbone.activations(source, v), kind).values
                          for v in aug_views], None
    except (OSError, ValueError, ActivationFormatError) as exc:
        return image_id, None, str(exc)


def extract_features(items, backbone, kind, augs, out_path, root=".", workers=1):
    """Write a feature store from ``items`` = iterable of ``(image_id, source)``.

    ``source`` is an image array, a PPM path relative to ``root`` (synthetic
    backbone) or an activation filename (files backbone).  Images that fail
    are skipped and listed in ``failures`` as ``(image_id, reason)``.  With
    ``workers > 1`` images are processed in a process pool; records are
    still appended by one writer in input order, so the store is identical.
    """
    aug_views = views(augs)
    result = ExtractResult()
    writer = StoreWriter(out_path, kind, backbone.profile.total, augs, backbone.profile.name)
    pool_ = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        items = list(items)
        args = ([backbone] * len(items), [i for i, _ in items], [s for _, s in items],
                [kind] * len(items), [aug_views] * len(items), [root] * len(items))
        results = (pool_.map(_image_features, *args, chunksize=8) if pool_
                   else map(_image_features, *args))
        for image_id, feats, reason in results:
            if feats is not None:
                try:
                    writer.append(image_id, feats)
                except StoreError as exc:
                    reason = str(exc)
            if reason is not None:
                log.warning("image %s skipped: %s", image_id, reason)
                result.failures.append((image_id, reason))
                continue
            result.images += 1
            result.records += len(aug_views)
            if result.images % 100 == 0:
                log.info("extracted %d images", result.images)
        if result.images == 0:
            raise StoreError("no image could be extracted; store not written")
        result.overflow = writer.overflow_count
        writer.finalize()
    except BaseException:
        writer.abort()
        raise
    finally:
        if pool_:
            pool_.shutdown(cancel_futures=True)
    return result
