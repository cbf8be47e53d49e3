"""Numpy implementations of the hot kernels.

These are the reference fallbacks used when the compiled ``_ckernels``
extension is unavailable (or disabled with ``MLSP_PURE_PYTHON=1``).  Both
backends share signatures and must agree to float32 rounding.
"""
import numpy as np

HALF_MAX = 65504.0


def coverage_matrix(n_in, n_out):
    """Integer overlap lengths between output cells and input pixels.

    Lengths are measured in units of ``1 / (n_in * n_out)`` of the axis, so
    output cell ``i`` spans ``[i*n_in, (i+1)*n_in)`` and input pixel ``p``
    spans ``[p*n_out, (p+1)*n_out)``.  Every row sums to ``n_in`` and every
    column to ``n_out``.
    """
    cell = np.arange(n_out)[:, None]
    pix = np.arange(n_in)[None, :]
    lo = np.maximum(cell * n_in, pix * n_out)
    hi = np.minimum((cell + 1) * n_in, (pix + 1) * n_out)
    return np.maximum(hi - lo, 0).astype(np.float64)


def area_resize(block, out_h, out_w):
    block = np.asarray(block)
    h, w, c = block.shape
    wh = coverage_matrix(h, out_h)
    ww = coverage_matrix(w, out_w)
    acc = np.einsum("ip,pqc->iqc", wh, block.astype(np.float64, copy=False))
    acc = np.einsum("jq,iqc->ijc", ww, acc)
    acc /= float(h * w)
    return acc.astype(np.float32)


def fp16_encode(values):
    x = np.ascontiguousarray(values, dtype=np.float32)
    with np.errstate(over="ignore"):
        half = x.astype(np.float16)
    over = np.isinf(half) & ~np.isnan(x)
    n_over = int(np.count_nonzero(over))
    if n_over:
        half[over] = np.copysign(np.float16(HALF_MAX), half[over])
    return half.view(np.uint16), n_over


def fp16_decode(bits):
    bits = np.ascontiguousarray(bits, dtype=np.uint16)
    return bits.view(np.float16).astype(np.float32)


def cell_means(planes, factor):
    """Mean of each ``factor x factor`` cell; ragged edge cells average only
    the pixels they contain."""
    planes = np.asarray(planes, dtype=np.float64)
    h, w, k = planes.shape
    oh = -(-h // factor)
    ow = -(-w // factor)
    padded = np.zeros((oh * factor, ow * factor, k))
    padded[:h, :w] = planes
    sums = padded.reshape(oh, factor, ow, factor, k).sum(axis=(1, 3))
    rows = np.minimum(factor, h - np.arange(oh) * factor)
    cols = np.minimum(factor, w - np.arange(ow) * factor)
    return sums / (rows[:, None] * cols[None, :])[..., None]
