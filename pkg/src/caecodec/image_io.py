"""Binary PPM (P6) image I/O, 8-bit RGB, bit-exact round-trip."""

import numpy as np
import os


class ImageFormatError(ValueError):
    pass


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM into a (h, w, 3) uint8 array."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    # header tokens: magic, width, height, maxval; comments start with '#'
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i:i + 1].isspace():
            i += 1
        if start == i:
            raise ImageFormatError(f"{path}: truncated PPM header")
        tokens.append(raw[start:i])
    i += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h * 3
    pixels = raw[i:i + need]
    if len(pixels) != need:
        raise ImageFormatError(f"{path}: expected {need} pixel bytes, "
                               f"got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError("write_ppm expects (h, w, 3) uint8")
    h, w, _ = img.shape
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())
    os.replace(tmp, path)


def to_signal(img: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float64 [-1, 1]."""
    return img.astype(np.float64) / 127.5 - 1.0


def from_signal(x: np.ndarray) -> np.ndarray:
    """float [-1, 1] (unclipped ok) -> uint8, clipping then rounding."""
    return np.clip((x + 1.0) * 127.5, 0.0, 255.0).round().astype(np.uint8)
