"""Training losses.  Each returns ``(loss, d_loss/d_input)``."""
import numpy as np


def mse_loss(pred, target):
    """Mean squared error over every element of the batch."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    if pred.size == 0:
        raise ValueError("mse_loss on an empty batch")
    diff = pred.astype(np.float64) - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 * diff / diff.size).astype(pred.dtype)


def cross_entropy_loss(logits, class_index):
    """Softmax cross-entropy averaged over the batch.

    ``logits`` has shape ``(batch, classes)`` and ``class_index`` one integer
    per row.  The log-sum-exp is shifted by the row maximum and evaluated
    with ``log1p`` so confident rows keep full relative precision.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError(f"logits must be (batch, classes), got {z.shape}")
    idx = np.asarray(class_index).reshape(-1)
    if idx.shape[0] != z.shape[0]:
        raise ValueError(f"{idx.shape[0]} class indices for {z.shape[0]} rows")
    if not np.issubdtype(idx.dtype, np.integer) or idx.min() < 0 or idx.max() >= z.shape[1]:
        raise ValueError(f"class indices must be integers in [0, {z.shape[1]})")
    rows = np.arange(z.shape[0])
    top = z.argmax(axis=1)
    z = z - z[rows, top][:, None]
    e = np.exp(z)
    rest = e.copy()
    rest[rows, top] = 0.0
    lse = np.log1p(rest.sum(axis=1))
    loss = float(np.mean(lse - z[rows, idx]))
    prob = e / e.sum(axis=1, keepdims=True)
    prob[rows, idx] -= 1.0
    return loss, (prob / z.shape[0]).astype(np.asarray(logits).dtype)
