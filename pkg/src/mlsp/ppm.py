"""Binary PPM (P6, 8-bit RGB) reading and writing."""
import numpy as np


def _tokens(data):
    pos = 0
    while True:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        yield data[start:pos], pos


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tok = _tokens(data)
    try:
        magic, _ = next(tok)
        width, _ = next(tok)
        height, _ = next(tok)
        maxval, end = next(tok)
    except StopIteration:
        raise ValueError(f"{path}: truncated PPM header") from None
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
    w, h, mx = int(width), int(height), int(maxval)
    if mx > 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported (maxval {mx})")
    start = end + 1
    need = w * h * 3
    if len(data) - start < need:
        raise ValueError(f"{path}: pixel data short by {need - (len(data) - start)} bytes")
    return np.frombuffer(data, np.uint8, need, start).reshape(h, w, 3).copy()


def write_ppm(path, image):
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected uint8 H x W x 3 image, got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())
