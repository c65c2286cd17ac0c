"""Training data: an in-repo synthetic image generator plus directory-of-PPM
ingestion, so the test suite needs no external corpus.

Synthetic images mix smooth gradients, oriented stripes, band-limited noise,
and flat geometric shapes; all have strong spatial redundancy, which is what
the context model is supposed to exploit.
"""

import numpy as np
from pathlib import Path

from .image_io import read_ppm


def _gradient(rng, h, w):
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    ang = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(ang) * gx / w + np.sin(ang) * gy / h)
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-9)
    lo, hi = np.sort(rng.uniform(0, 255, size=(2, 3)), axis=0)
    return ramp[..., None] * (hi - lo) + lo


def _stripes(rng, h, w):
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    ang = rng.uniform(0, np.pi)
    freq = rng.uniform(2, 12)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (np.cos(ang) * gx / w + np.sin(ang) * gy / h)
                  + phase)
    c0, c1 = rng.uniform(0, 255, size=(2, 3))
    return (wave[..., None] * 0.5 + 0.5) * (c1 - c0) + c0


def _band_noise(rng, h, w):
    # low-pass white noise: keep only a small centered frequency disc
    keep = rng.uniform(0.05, 0.25)
    out = np.empty((h, w, 3))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    mask = (fy * fy + fx * fx) <= keep * keep * 0.25
    for c in range(3):
        spec = np.fft.fft2(rng.normal(size=(h, w))) * mask
        img = np.real(np.fft.ifft2(spec))
        img = (img - img.min()) / (np.ptp(img) + 1e-9)
        out[..., c] = img * 255
    return out


def _shapes(rng, h, w):
    img = np.ones((h, w, 3)) * rng.uniform(0, 255, size=3)
    gy, gx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(min(h, w) * 0.08, min(h, w) * 0.35)
        color = rng.uniform(0, 255, size=3)
        if rng.random() < 0.5:
            m = (gy - cy) ** 2 + (gx - cx) ** 2 <= r * r
        else:
            m = (np.abs(gy - cy) <= r) & (np.abs(gx - cx) <= r)
        img[m] = color
    return img

_MAKERS = (_gradient, _stripes, _band_noise, _shapes)


def synth_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """One random synthetic RGB image, uint8 (h, w, 3)."""
    base = _MAKERS[rng.integers(len(_MAKERS))](rng, h, w)
    if rng.random() < 0.5:  # mild texture on top keeps rates off zero
        base = base + rng.normal(0, rng.uniform(1, 6), size=base.shape)
    return np.clip(base, 0, 255).round().astype(np.uint8)


def synth_corpus(seed: int, count: int, h: int, w: int):
    rng = np.random.default_rng(seed)
    return [synth_image(rng, h, w) for _ in range(count)]


def load_ppm_dir(path):
    """All PPM images under `path`, sorted by name; skips unreadable files.

    Returns ([(name, image), ...], skipped_names).
    """
    items, skipped = [], []
    for p in sorted(Path(path).glob("*.ppm")):
        try:
            items.append((p.name, read_ppm(p)))
        except Exception:
            skipped.append(p.name)
    return items, skipped


def random_crop(rng: np.random.Generator, img: np.ndarray, size: int):
    h, w, _ = img.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return img[y:y + size, x:x + size, :]
