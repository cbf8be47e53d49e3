"""Layer catalog for the head networks.

Every layer works on batched numpy arrays with the batch on axis 0 and
channels on the last axis (NHWC for spatial tensors).  ``forward`` returns
the output plus an opaque cache; ``backward`` consumes that cache and
returns ``(input_grads, param_grads)``.
"""
import numpy as np


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape a layer expects."""


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "layer"
    n_inputs = 1

    def __init__(self):
        self.name = None
        self.inputs = []
        self.params = {}
        self.state = {}
        self.trainable = True

    def build(self, input_shapes, rng, dtype):
        """Create parameters and return the output shape (batch excluded)."""
        raise NotImplementedError

    def forward(self, xs, training, rng, update_stats=True):
        raise NotImplementedError

    def backward(self, dy, cache, need):
        raise NotImplementedError

    def config(self):
        return {}

    def _expect(self, cond, expected, actual):
        if not cond:
            raise ShapeError(
                f"layer {self.name!r} ({self.kind}): expected input shape "
                f"{expected}, got {tuple(actual)}"
            )

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, units, use_bias=True):
        super().__init__()
        if units < 1:
            raise ValueError(f"dense units must be >= 1, got {units}")
        self.units = int(units)
        self.use_bias = use_bias

    def config(self):
        return {"units": self.units, "use_bias": self.use_bias}

    def build(self, input_shapes, rng, dtype):
        (shape,) = input_shapes
        self._expect(len(shape) == 1, "(features,)", shape)
        d = shape[0]
        self.params["kernel"] = glorot_uniform(rng, (d, self.units), d, self.units, dtype)
        if self.use_bias:
            self.params["bias"] = np.zeros(self.units, dtype=dtype)
        return (self.units,)

    def forward(self, xs, training, rng, update_stats=True):
        (x,) = xs
        y = x @ self.params["kernel"]
        if self.use_bias:
            y += self.params["bias"]
        return y, x

    def backward(self, dy, x, need):
        grads = {"kernel": x.T @ dy}
        if self.use_bias:
            grads["bias"] = dy.sum(axis=0)
        dx = dy @ self.params["kernel"].T if need[0] else None
        return [dx], grads


class Conv2D(Layer):
    """Stride-1 convolution with same padding; kernel size 1 or 3.

    The 3x3 case multiplies the input once against all nine taps
    (``C x 9F``) and then shifts the small per-tap outputs, so no
    im2col copy of the (possibly very wide) input is ever made.
    """

    kind = "conv2d"

    def __init__(self, filters, kernel_size=1, use_bias=True):
        super().__init__()
        if kernel_size not in (1, 3):
            raise ValueError(f"conv kernel size must be 1 or 3, got {kernel_size}")
        if filters < 1:
            raise ValueError(f"conv filters must be >= 1, got {filters}")
        self.filters = int(filters)
        self.kernel_size = int(kernel_size)
        self.use_bias = use_bias

    def config(self):
        return {"filters": self.filters, "kernel_size": self.kernel_size,
                "use_bias": self.use_bias}

    def build(self, input_shapes, rng, dtype):
        (shape,) = input_shapes
        self._expect(len(shape) == 3, "(height, width, channels)", shape)
        h, w, c = shape
        k = self.kernel_size
        self.params["kernel"] = glorot_uniform(
            rng, (k, k, c, self.filters), k * k * c, k * k * self.filters, dtype)
        if self.use_bias:
            self.params["bias"] = np.zeros(self.filters, dtype=dtype)
        return (h, w, self.filters)

    def _taps(self):
        kern = self.params["kernel"]
        k, _, c, f = kern.shape
        return kern.transpose(2, 0, 1, 3).reshape(c, k * k * f)

    def forward(self, xs, training, rng, update_stats=True):
        (x,) = xs
        b, h, w, c = x.shape
        f = self.filters
        x2 = x.reshape(-1, c)
        if self.kernel_size == 1:
            y = (x2 @ self.params["kernel"][0, 0]).reshape(b, h, w, f)
        else:
            z = (x2 @ self._taps()).reshape(b, h, w, 3, 3, f)
            y = np.zeros((b, h, w, f), dtype=z.dtype)
            for dy in range(3):
                h0, h1 = max(0, 1 - dy), min(h, h + 1 - dy)
                for dx in range(3):
                    w0, w1 = max(0, 1 - dx), min(w, w + 1 - dx)
                    y[:, h0:h1, w0:w1] += z[:, h0 + dy - 1:h1 + dy - 1,
                                            w0 + dx - 1:w1 + dx - 1, dy, dx]
        if self.use_bias:
            y += self.params["bias"]
        return y, x

    def backward(self, g, x, need):
        b, h, w, c = x.shape
        f = self.filters
        x2 = x.reshape(-1, c)
        grads = {}
        if self.kernel_size == 1:
            g2 = g.reshape(-1, f)
            grads["kernel"] = (x2.T @ g2).reshape(1, 1, c, f)
            dx = (g2 @ self.params["kernel"][0, 0].T).reshape(x.shape) if need[0] else None
        else:
            dz = np.zeros((b, h, w, 3, 3, f), dtype=g.dtype)
            for dy in range(3):
                h0, h1 = max(0, 1 - dy), min(h, h + 1 - dy)
                for dx_ in range(3):
                    w0, w1 = max(0, 1 - dx_), min(w, w + 1 - dx_)
                    dz[:, h0 + dy - 1:h1 + dy - 1, w0 + dx_ - 1:w1 + dx_ - 1, dy, dx_] = \
                        g[:, h0:h1, w0:w1]
            dz2 = dz.reshape(-1, 9 * f)
            grads["kernel"] = (x2.T @ dz2).reshape(c, 3, 3, f).transpose(1, 2, 0, 3)
            dx = (dz2 @ self._taps().T).reshape(x.shape) if need[0] else None
        if self.use_bias:
            grads["bias"] = g.sum(axis=(0, 1, 2))
        return [dx], grads


class BatchNorm(Layer):
    """Per-channel normalization over every axis except the last."""

    kind = "batch_norm"

    def __init__(self, momentum=0.99, epsilon=1e-3):
        super().__init__()
        self.momentum = momentum
        self.epsilon = epsilon

    def config(self):
        return {"momentum": self.momentum, "epsilon": self.epsilon}

    def build(self, input_shapes, rng, dtype):
        (shape,) = input_shapes
        c = shape[-1]
        self.params["gamma"] = np.ones(c, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        self.state["running_mean"] = np.zeros(c, dtype=dtype)
        self.state["running_var"] = np.ones(c, dtype=dtype)
        return tuple(shape)

    def forward(self, xs, training, rng, update_stats=True):
        (x,) = xs
        axes = tuple(range(x.ndim - 1))
        gamma, beta = self.params["gamma"], self.params["beta"]
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if update_stats:
                m = self.momentum
                rm, rv = self.state["running_mean"], self.state["running_var"]
                rm *= m
                rm += (1 - m) * mean
                rv *= m
                rv += (1 - m) * var
        else:
            mean, var = self.state["running_mean"], self.state["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean) * inv_std
        return gamma * xhat + beta, (xhat, inv_std, training)

    def backward(self, dy, cache, need):
        xhat, inv_std, training = cache
        axes = tuple(range(dy.ndim - 1))
        grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        dx = None
        if need[0]:
            dxhat = dy * self.params["gamma"]
            if training:
                m = dy.size // dy.shape[-1]
                dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes)
                                      - xhat * (dxhat * xhat).sum(axis=axes))
            else:
                dx = dxhat * inv_std
        return [dx], grads


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)``."""

    kind = "dropout"

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = float(rate)
        self.enabled = True

    def config(self):
        return {"rate": self.rate}

    @property
    def active(self):
        return self.enabled and self.rate > 0.0

    def build(self, input_shapes, rng, dtype):
        return tuple(input_shapes[0])

    def forward(self, xs, training, rng, update_stats=True):
        (x,) = xs
        if not (training and self.active):
            return x, None
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / x.dtype.type(keep)
        return x * mask, mask

    def backward(self, dy, mask, need):
        return [dy if mask is None else dy * mask], {}


class ReLU(Layer):
    kind = "relu"

    def build(self, input_shapes, rng, dtype):
        return tuple(input_shapes[0])

    def forward(self, xs, training, rng, update_stats=True):
        (x,) = xs
        pos = x > 0
        return x * pos, pos

    def backward(self, dy, pos, need):
        return [dy * pos], {}


class Softmax(Layer):
    kind = "softmax"

    def build(self, input_shapes, rng, dtype):
        return tuple(input_shapes[0])

    def forward(self, xs, training, rng, update_stats=True):
        (x,) = xs
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    def backward(self, dy, y, need):
        return [y * (dy - (dy * y).sum(axis=-1, keepdims=True))], {}


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def build(self, input_shapes, rng, dtype):
        (shape,) = input_shapes
        self._expect(len(shape) == 3, "(height, width, channels)", shape)
        return (shape[-1],)

    def forward(self, xs, training, rng, update_stats=True):
        (x,) = xs
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, dy, shape, need):
        b, h, w, c = shape
        dx = np.broadcast_to((dy / (h * w))[:, None, None, :], shape).copy()
        return [dx], {}


def _box3(x):
    """3x3 box sum with zero padding over axes 1 and 2 (separable, in place)."""
    rows = x.copy()
    rows[:, 1:] += x[:, :-1]
    rows[:, :-1] += x[:, 1:]
    out = rows.copy()
    out[:, :, 1:] += rows[:, :, :-1]
    out[:, :, :-1] += rows[:, :, 1:]
    return out


class SpatialAvgPool(Layer):
    """3x3, stride-1 average pooling; padded cells are excluded from the mean."""

    kind = "spatial_avg_pool"

    def build(self, input_shapes, rng, dtype):
        (shape,) = input_shapes
        self._expect(len(shape) == 3, "(height, width, channels)", shape)
        h, w, _ = shape
        ones = np.ones((1, h, w, 1))
        self._counts = _box3(ones)[0, :, :, 0]
        return tuple(shape)

    def forward(self, xs, training, rng, update_stats=True):
        (x,) = xs
        counts = self._counts.astype(x.dtype)[None, :, :, None]
        return _box3(x) / counts, counts

    def backward(self, dy, counts, need):
        return [_box3(dy / counts) if need[0] else None], {}


class Concat(Layer):
    """Concatenate any number of inputs along the channel axis."""

    kind = "concat"
    n_inputs = None

    def build(self, input_shapes, rng, dtype):
        first = input_shapes[0]
        for shape in input_shapes[1:]:
            self._expect(tuple(shape[:-1]) == tuple(first[:-1]),
                         f"{tuple(first[:-1])} + (channels,)", shape)
        self._sizes = [s[-1] for s in input_shapes]
        return tuple(first[:-1]) + (sum(self._sizes),)

    def forward(self, xs, training, rng, update_stats=True):
        return np.concatenate(xs, axis=-1), None

    def backward(self, dy, cache, need):
        bounds = np.cumsum(self._sizes)[:-1]
        return list(np.split(dy, bounds, axis=-1)), {}


class Slice(Layer):
    """Select channels ``[start, stop)`` of the last axis."""

    kind = "slice"

    def __init__(self, start, stop):
        super().__init__()
        self.start, self.stop = int(start), int(stop)

    def config(self):
        return {"start": self.start, "stop": self.stop}

    def build(self, input_shapes, rng, dtype):
        (shape,) = input_shapes
        if not 0 <= self.start < self.stop <= shape[-1]:
            raise ShapeError(f"layer {self.name!r} (slice): channel range "
                             f"[{self.start}, {self.stop}) outside input width {shape[-1]}")
        return tuple(shape[:-1]) + (self.stop - self.start,)

    def forward(self, xs, training, rng, update_stats=True):
        (x,) = xs
        return x[..., self.start:self.stop], x.shape

    def backward(self, dy, shape, need):
        if not need[0]:
            return [None], {}
        dx = np.zeros(shape, dtype=dy.dtype)
        dx[..., self.start:self.stop] = dy
        return [dx], {}


class WeightedSum(Layer):
    """Trainable linear combination of N scalar predictions.

    Weights start at ``1/N`` and the bias at 0, so the initial output is the
    plain average of the inputs.
    """

    kind = "weighted_sum"
    n_inputs = None

    def build(self, input_shapes, rng, dtype):
        for shape in input_shapes:
            self._expect(tuple(shape) == (1,), "(1,)", shape)
        n = len(input_shapes)
        self.params["weights"] = np.full(n, 1.0 / n, dtype=dtype)
        self.params["bias"] = np.zeros(1, dtype=dtype)
        return (1,)

    def forward(self, xs, training, rng, update_stats=True):
        stacked = np.concatenate(xs, axis=-1)
        return stacked @ self.params["weights"][:, None] + self.params["bias"], stacked

    def backward(self, dy, stacked, need):
        grads = {"weights": stacked.T @ dy[:, 0], "bias": dy.sum(axis=0)}
        dxs = [dy * w for w in self.params["weights"]]
        return dxs, grads


LAYER_KINDS = {cls.kind: cls for cls in (
    Dense, Conv2D, BatchNorm, Dropout, ReLU, Softmax, GlobalAvgPool,
    SpatialAvgPool, Concat, Slice, WeightedSum)}
