"""Finite-difference verification of analytic gradients."""
import numpy as np

from .graph import backward, forward
from .losses import mse_loss


class NonDeterministicLayerError(RuntimeError):
    pass


def _relerr(a, n):
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / scale)


def gradient_errors(model, inputs, loss_fn=None, epsilon=1e-5, seed=None,
                    check_input=False):
    """Relative error between analytic and central-difference gradients.

    The model is copied to float64 and evaluated in training mode without
    touching batch-norm running statistics.  Errors are measured per
    parameter tensor as ``|a - n| / max(|a|, |n|, 1e-8)`` with Euclidean
    norms.  Dropout is allowed only when ``seed`` pins its masks.

    Returns a dict keyed by parameter name (plus ``"input"`` when
    ``check_input`` is set).
    """
    if seed is None and model.has_active_dropout():
        raise NonDeterministicLayerError(
            "active dropout without a fixed seed; pass seed= or disable dropout")
    m64 = model.astype(np.float64)
    x = np.array(inputs, dtype=np.float64)
    if loss_fn is None:
        target = np.random.default_rng(12345).normal(size=(x.shape[0],) + m64.output_shape)
        loss_fn = lambda out: mse_loss(out, target)  # noqa: E731

    def loss_at(batch):
        out = forward(m64, batch, training=True, seed=seed, update_stats=False)
        return loss_fn(out)[0]

    out = forward(m64, x, training=True, seed=seed, update_stats=False)
    _, dout = loss_fn(out)
    grads, dx = backward(m64, dout, input_grad=True)
    m64._tape = None

    params = m64.parameters(trainable_only=True)
    errors = {}
    for name, p in params.items():
        numeric = np.zeros_like(p)
        flat, nflat = p.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_at(x)
            flat[i] = orig - epsilon
            down = loss_at(x)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * epsilon)
        errors[name] = _relerr(grads[name], numeric)
    if check_input:
        numeric = np.zeros_like(x)
        flat, nflat = x.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_at(x)
            flat[i] = orig - epsilon
            down = loss_at(x)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * epsilon)
        errors["input"] = _relerr(dx, numeric)
    return errors


def grad_check(model, inputs, epsilon=1e-5, loss_fn=None, seed=None, check_input=False):
    """Maximum relative gradient error over all parameter tensors."""
    errors = gradient_errors(model, inputs, loss_fn=loss_fn, epsilon=epsilon,
                             seed=seed, check_input=check_input)
    return max(errors.values()) if errors else 0.0


def relu_margin(model, inputs, seed=None):
    """Smallest ``|z|`` over every ReLU input on a training-mode forward pass.

    A central difference with step ``epsilon`` is only meaningful when this
    margin is well above ``epsilon``; closer inputs straddle the kink.
    Returns ``inf`` for a model without ReLUs.
    """
    m64 = model.astype(np.float64)
    x = np.array(inputs, dtype=np.float64)
    margin = np.inf
    for lay in m64.layers:
        if lay.kind == "relu":
            z = forward(m64, x, training=True, seed=seed, update_stats=False, until=lay.inputs[0])
            margin = min(margin, float(np.min(np.abs(z))))
    m64._tape = None
    return margin
