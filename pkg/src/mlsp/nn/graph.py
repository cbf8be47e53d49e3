"""Layer graphs and their forward/backward execution."""
import copy

import numpy as np

from .layers import Dropout, Layer, ShapeError

INPUT = "input"


class GraphStateError(RuntimeError):
    """Raised when backward is called without a matching training forward."""


class ModelGraph:
    """An ordered, acyclic graph of layers with a single input tensor.

    Layers may only consume tensors defined before them, so insertion order
    is a valid topological order.  Parameter initialization draws from a
    generator seeded by ``seed``; two graphs built by the same sequence of
    ``add`` calls with the same seed are identical.

    Parameters
    ----------
    input_shape : tuple of int
        Shape of one sample (batch axis excluded).
    seed : int
        Seed for parameter initialization.
    dtype : numpy dtype
        Parameter dtype; training uses float32, gradient checks float64.
    """

    def __init__(self, input_shape, seed=0, dtype=np.float32, name="model"):
        self.name = name
        self.input_shape = tuple(int(d) for d in input_shape)
        if any(d < 1 for d in self.input_shape):
            raise ShapeError(f"input dimensions must be positive, got {self.input_shape}")
        self.dtype = np.dtype(dtype)
        self.layers = []
        self.shapes = {INPUT: self.input_shape}
        self.output = INPUT
        self.logits = None
        self._rng = np.random.default_rng(seed)
        self._tape = None

    def add(self, layer, *inputs, name=None):
        """Append ``layer`` fed by ``inputs`` (default: the current output).

        Returns the new layer's name, which is also the name of its output
        tensor.
        """
        if not isinstance(layer, Layer):
            raise TypeError(f"expected a Layer, got {type(layer).__name__}")
        inputs = list(inputs) or [self.output]
        for src in inputs:
            if src not in self.shapes:
                raise KeyError(f"unknown input tensor {src!r}")
        if layer.n_inputs is not None and len(inputs) != layer.n_inputs:
            raise ValueError(f"{layer.kind} takes {layer.n_inputs} input(s), got {len(inputs)}")
        if name is None:
            n = sum(1 for lay in self.layers if lay.kind == layer.kind)
            name = f"{layer.kind}_{n}"
        if name in self.shapes:
            raise ValueError(f"duplicate tensor name {name!r}")
        layer.name = name
        layer.inputs = inputs
        self.shapes[name] = layer.build([self.shapes[s] for s in inputs], self._rng, self.dtype)
        self.layers.append(layer)
        self.output = name
        return name

    def layer(self, name):
        for lay in self.layers:
            if lay.name == name:
                return lay
        raise KeyError(name)

    @property
    def output_shape(self):
        return self.shapes[self.output]

    def parameters(self, trainable_only=False):
        """Map ``"layer/param"`` to the live parameter arrays."""
        out = {}
        for lay in self.layers:
            if trainable_only and not lay.trainable:
                continue
            for key, arr in lay.params.items():
                out[f"{lay.name}/{key}"] = arr
        return out

    def state_arrays(self):
        """Non-trainable buffers such as batch-norm running statistics."""
        return {f"{lay.name}/{key}": arr
                for lay in self.layers for key, arr in lay.state.items()}

    def param_count(self, trainable_only=True):
        return int(sum(a.size for a in self.parameters(trainable_only).values()))

    def freeze(self, *names):
        for name in names:
            self.layer(name).trainable = False

    def set_dropout(self, enabled):
        for lay in self.layers:
            if isinstance(lay, Dropout):
                lay.enabled = enabled

    def has_active_dropout(self):
        return any(isinstance(lay, Dropout) and lay.active for lay in self.layers)

    def get_weights(self):
        """Deep copy of all parameters and buffers."""
        snap = {k: v.copy() for k, v in self.parameters().items()}
        snap.update({k: v.copy() for k, v in self.state_arrays().items()})
        return snap

    def set_weights(self, weights, strict=True):
        live = dict(self.parameters())
        live.update(self.state_arrays())
        if strict:
            missing = sorted(set(live) - set(weights))
            if missing:
                raise KeyError(f"weights missing for {missing[:5]}")
        for key, arr in live.items():
            if key not in weights:
                continue
            src = np.asarray(weights[key])
            if src.shape != arr.shape:
                raise ShapeError(f"{key}: expected {arr.shape}, got {src.shape}")
            arr[...] = src

    def astype(self, dtype):
        """Return a deep copy whose parameters and buffers use ``dtype``."""
        clone = copy.deepcopy(self)
        clone.dtype = np.dtype(dtype)
        clone._tape = None
        for lay in clone.layers:
            for store in (lay.params, lay.state):
                for key in store:
                    store[key] = store[key].astype(dtype)
        return clone

    def summary(self):
        lines = [f"{self.name}: input {self.input_shape}"]
        for lay in self.layers:
            n = sum(a.size for a in lay.params.values())
            lines.append(f"  {lay.name:<24} {lay.kind:<17} <- {','.join(lay.inputs):<24} "
                         f"{str(self.shapes[lay.name]):<16} {n}")
        lines.append(f"  trainable parameters: {self.param_count()}")
        return "\n".join(lines)


def forward(model, batch, training=False, seed=None, until=None, update_stats=True):
    """Run ``model`` on ``batch`` and return the output tensor.

    In training mode intermediates are cached for :func:`backward`, batch
    norm uses batch statistics, and dropout masks are drawn from
    ``numpy.random.default_rng(seed)``.  ``until`` stops at (and returns)
    the named tensor instead of the graph output.
    """
    x = np.asarray(batch)
    if x.ndim != len(model.input_shape) + 1 or x.shape[1:] != model.input_shape:
        raise ShapeError(f"model input: expected (batch,) + {model.input_shape}, "
                         f"got {x.shape}")
    if x.dtype != model.dtype:
        x = x.astype(model.dtype)
    stop = until or model.output
    if stop != INPUT and stop not in model.shapes:
        raise KeyError(f"unknown tensor {stop!r}")
    rng = np.random.default_rng(seed) if training else None
    values = {INPUT: x}
    tape = []
    for lay in model.layers:
        y, cache = lay.forward([values[s] for s in lay.inputs], training, rng, update_stats)
        values[lay.name] = y
        if training:
            tape.append((lay, cache))
        if lay.name == stop:
            break
    model._tape = (tape, stop, x.shape) if training else None
    return values[stop]


def backward(model, loss_gradient, input_grad=False):
    """Back-propagate ``loss_gradient`` through the cached training pass.

    Returns ``{"layer/param": gradient}`` for every trainable parameter; if
    ``input_grad`` is set, returns ``(grads, d_input)`` instead.  The tape is
    consumed, so a second call without a new forward raises.
    """
    if model._tape is None:
        raise GraphStateError("backward() requires a preceding forward(..., training=True)")
    tape, stop, in_shape = model._tape
    model._tape = None
    grads_t = {stop: np.asarray(loss_gradient, dtype=model.dtype)}
    # a tensor needs a gradient only if a trainable parameter (or the input,
    # when asked for) lies upstream of it
    upstream = {INPUT: input_grad}
    for lay, _ in tape:
        upstream[lay.name] = (lay.trainable and bool(lay.params)) or any(
            upstream[s] for s in lay.inputs)
    out = {}
    for lay, cache in reversed(tape):
        dy = grads_t.pop(lay.name, None)
        if dy is None:
            if lay.trainable:
                for key, arr in lay.params.items():
                    out[f"{lay.name}/{key}"] = np.zeros_like(arr)
            continue
        need = [upstream[s] for s in lay.inputs]
        dxs, dparams = lay.backward(dy, cache, need)
        if lay.trainable:
            for key, g in dparams.items():
                out[f"{lay.name}/{key}"] = g
        for src, dx, wanted in zip(lay.inputs, dxs, need):
            if not wanted or dx is None:
                continue
            if src in grads_t:
                grads_t[src] = grads_t[src] + dx
            else:
                grads_t[src] = dx
    if input_grad:
        d_in = grads_t.get(INPUT)
        if d_in is None:
            d_in = np.zeros(in_shape, dtype=model.dtype)
        return out, d_in
    return out
