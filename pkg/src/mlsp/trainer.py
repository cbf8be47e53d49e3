"""Training protocol for heads on stored features.

Learning rate starts at 1e-4 and is divided by 10 after 20 epochs at the
same rate or after 5 epochs without a new best validation loss, whichever
happens first; every drop reloads the best weights seen so far.  At the
1e-6 floor a further stagnation ends training.
"""
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .nn import AdamState, adam_step, backward, cross_entropy_loss, forward, mse_loss
from .nn.layers import Dense

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    """Inputs that make training impossible (detected before epoch 1)."""


class NumericError(FloatingPointError):
    """Loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_divisor: float = 10.0
    lr_period: int = 20
    patience: int = 5
    min_lr: float = 1e-6
    batch_size: int = 128
    max_epochs: int = 100
    seed: int = 0
    loss: str = "mse"
    val_fraction: float = 0.05
    threshold: float = 5.0
    init_output_bias: bool = True

    def __post_init__(self):
        if not 0 < self.min_lr <= self.lr:
            raise ValueError(f"need 0 < min_lr <= lr, got {self.min_lr}, {self.lr}")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("patience, batch_size and max_epochs must be >= 1")
        if self.loss not in ("mse", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")


class LabelTable(dict):
    """``image_id -> MOS`` on the 1-10 scale."""

    def __init__(self, items=()):
        super().__init__()
        for k, v in dict(items).items():
            self[k] = v

    def __setitem__(self, key, value):
        value = float(value)
        if not 1.0 <= value <= 10.0:
            raise ValueError(f"MOS {value} for image {key} outside [1, 10]")
        super().__setitem__(int(key), value)

    def values_for(self, ids):
        return np.array([self[int(i)] for i in ids], dtype=np.float64)

    @classmethod
    def from_csv(cls, path):
        table = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or reader.fieldnames[:2] != ["image_id", "mos"]:
                raise ValueError(f"{path}: labels header must be 'image_id,mos'")
            for row in reader:
                ident = int(row["image_id"])
                if ident in table:
                    raise ValueError(f"{path}: duplicate image id {ident}")
                table[ident] = float(row["mos"])
        return table

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "mos"])
            for k in sorted(self):
                w.writerow([k, repr(self[k])])


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def append(self, epoch, train_loss, val_loss, lr):
        self.rows.append({"epoch": epoch, "train_loss": train_loss,
                          "val_loss": val_loss, "lr": lr})

    @property
    def best_val_loss(self):
        return min(r["val_loss"] for r in self.rows)

    @property
    def learning_rates(self):
        return [r["lr"] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), repr(r["lr"])])


def split_dataset(ids, val_fraction=0.05, seed=0):
    """Seeded shuffle, then ``ceil((1 - f) n)`` train ids and the rest for
    validation."""
    ids = np.asarray(list(ids))
    n = len(ids)
    if n < 2:
        raise ValueError(f"need at least 2 ids to split, got {n}")
    frac = Fraction(val_fraction).limit_denominator(10 ** 6)
    n_train = min(n - 1, max(1, math.ceil((1 - frac) * n)))
    perm = np.random.default_rng(seed).permutation(n)
    return ids[perm[:n_train]], ids[perm[n_train:]]


_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def select_epoch_augmentation(image_id, epoch, seed, n_augs=8):
    """Uniform augmentation index from a counter-based hash of
    ``(seed, epoch, image_id)``; accepts scalars or arrays of ids."""
    if n_augs == 1:
        return np.zeros(np.shape(image_id), dtype=np.int64) if np.ndim(image_id) else 0
    ids = np.atleast_1d(np.asarray(image_id)).astype(np.uint64)
    with np.errstate(over="ignore"):
        key = _mix64(np.array([seed], dtype=np.uint64) + _GOLDEN)
        key = _mix64(key ^ np.uint64(epoch))
        h = _mix64(key ^ (ids * _GOLDEN))
    aug = ((h >> np.uint64(32)) * np.uint64(n_augs)) >> np.uint64(32)
    aug = aug.astype(np.int64)
    return aug if np.ndim(image_id) else int(aug[0])


@dataclass(frozen=True)
class ScheduleState:
    lr: float
    drops: int = 0
    epochs_at_lr: int = 0
    best_loss: float = math.inf
    best_epoch: int = 0
    since_best: int = 0
    improved: bool = False
    dropped: bool = False
    reload: bool = False
    stop: bool = False


def lr_schedule_step(state, epoch, val_loss, config):
    """Advance the schedule after ``epoch`` finished with ``val_loss``.

    The returned state's ``lr`` applies to the next epoch.  ``reload`` asks
    the caller to restore the best weights; ``stop`` ends training.
    """
    s = replace(state, improved=False, dropped=False, reload=False)
    if val_loss < s.best_loss:
        s = replace(s, best_loss=val_loss, best_epoch=epoch, since_best=0, improved=True)
    else:
        s = replace(s, since_best=s.since_best + 1)
    s = replace(s, epochs_at_lr=s.epochs_at_lr + 1)
    stagnated = s.since_best >= config.patience
    if stagnated or s.epochs_at_lr >= config.lr_period:
        new_lr = config.lr / config.lr_divisor ** (s.drops + 1)
        if new_lr < config.min_lr * (1 - 1e-9):
            s = replace(s, stop=True) if stagnated else replace(s, epochs_at_lr=0)
        else:
            s = replace(s, lr=new_lr, drops=s.drops + 1, epochs_at_lr=0, since_best=0,
                        dropped=True, reload=True)
    if epoch >= config.max_epochs:
        s = replace(s, stop=True)
    return s


def _batches(n, size):
    bounds = list(range(0, n, size)) + [n]
    spans = [(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    if len(spans) > 1 and spans[-1][1] - spans[-1][0] == 1:
        spans[-2:] = [(spans[-2][0], n)]
    return spans


def _step_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _score_layers(model):
    return [lay for lay in model.layers
            if isinstance(lay, Dense) and lay.units == 1 and lay.use_bias]


def predict(model, source, ids, aug=0, batch_size=256, until=None):
    out = []
    for a, b in _batches(len(ids), batch_size):
        x = source.read_batch(ids[a:b], np.full(b - a, aug))
        out.append(forward(model, x, training=False, until=until))
    return np.concatenate(out) if out else np.zeros((0,) + model.output_shape)


def _targets(labels, ids, config):
    mos = labels.values_for(ids)
    if config.loss == "cross_entropy":
        return (mos > config.threshold).astype(np.int64)
    return mos


def _loss(config, out, target):
    if config.loss == "cross_entropy":
        return cross_entropy_loss(out, target)
    return mse_loss(out, target)


def train(model, store, labels, config=None, ids=None, callback=None):
    """Train ``model`` on features from ``store`` (any object with
    ``read_batch(ids, augs)``, ``augs``, ``feature_shape``).

    ``ids`` defaults to every stored id; they are split
    into train/validation with ``config.val_fraction``.  Returns
    ``(best_weights, history)``; the model is left holding the best weights.
    """
    config = config or TrainConfig()
    if ids is None:
        ids = store.ids
    ids = [int(i) for i in ids]
    missing = [i for i in ids if i not in labels]
    if missing:
        raise TrainingError(f"{len(missing)} ids have no label, e.g. {missing[:10]}")
    absent = [i for i in ids if i not in store]
    if absent:
        raise TrainingError(f"{len(absent)} ids are not in the feature store, e.g. {absent[:10]}")
    if tuple(store.feature_shape) != model.input_shape:
        raise TrainingError(f"store feature shape {tuple(store.feature_shape)} does not match "
                            f"model input {model.input_shape}")
    until = getattr(model, "logits", None) if config.loss == "cross_entropy" else None
    if config.loss == "cross_entropy" and until is None:
        raise TrainingError("cross-entropy training needs a model with a logits tensor")

    train_ids, val_ids = split_dataset(ids, config.val_fraction, config.seed)
    y_train = _targets(labels, train_ids, config)
    y_val = _targets(labels, val_ids, config)
    if config.init_output_bias and config.loss == "mse":
        for lay in _score_layers(model):
            lay.params["bias"][...] = np.mean(y_train)

    params = model.parameters(trainable_only=True)
    adam = AdamState()
    sched = ScheduleState(lr=config.lr)
    best = model.get_weights()
    history = TrainHistory()
    n = len(train_ids)
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        epoch_ids = train_ids[order]
        epoch_y = y_train[order]
        augs = select_epoch_augmentation(epoch_ids, epoch, config.seed, store.augs)
        total = 0.0
        for bi, (a, b) in enumerate(_batches(n, config.batch_size)):
            x = store.read_batch(epoch_ids[a:b], augs[a:b])
            # overflow surfaces as a non-finite loss or gradient, raised below
            with np.errstate(over="ignore", invalid="ignore"):
                out = forward(model, x, training=True, seed=_step_seed(config.seed, epoch, bi),
                              until=until)
                loss, grad = _loss(config, out, epoch_y[a:b])
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite training loss at epoch {epoch}, batch {bi}")
                adam_step(params, backward(model, grad), adam, sched.lr)
            total += loss * (b - a)
        train_loss = total / n
        with np.errstate(over="ignore", invalid="ignore"):
            val_out = predict(model, store, val_ids, aug=0, until=until)
            val_loss = _loss(config, val_out, y_val)[0]
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        history.append(epoch, train_loss, val_loss, sched.lr)
        sched = lr_schedule_step(sched, epoch, val_loss, config)
        if sched.improved:
            best = model.get_weights()
            history.best_epoch = epoch
        log.info("epoch %d train %.5f val %.5f lr %.0e%s", epoch, train_loss, val_loss,
                 history.rows[-1]["lr"], " *" if sched.improved else "")
        if callback is not None:
            callback(epoch, history, sched)
        if sched.reload:
            model.set_weights(best)
        if sched.stop:
            history.stopped_early = epoch < config.max_epochs
            break
    model.set_weights(best)
    return best, history
