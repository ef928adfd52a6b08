"""Procedural desk-scale corpus.

Images combine a 1/f-spectrum texture (the amplitude falloff of natural
photographs), a few hard-edged shapes, a fine sensor-like grain and one
elliptical "face" whose bounding box and identity are recorded as labels.
Everything is a pure function of the seed.
"""

from __future__ import annotations

import numpy as np

from .degrade import LabeledImage
from .imageio import Raster


def pink_texture(rng: np.random.Generator, size: int, exponent: float = 1.0) -> np.ndarray:
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    f[0, 0] = 1.0
    spectrum = (rng.normal(size=(size, size)) + 1j * rng.normal(size=(size, size))) / f ** exponent
    spectrum[0, 0] = 0.0
    tex = np.real(np.fft.ifft2(spectrum))
    return tex / (tex.std() + 1e-12)


def _face(img, rng, box, identity, n_identities):
    x, y, w, h = box
    yy, xx = np.mgrid[0:img.shape[0], 0:img.shape[1]]
    cx, cy = x + w / 2.0, y + h / 2.0
    inside = ((xx - cx) / (w / 2.0)) ** 2 + ((yy - cy) / (h / 2.0)) ** 2 <= 1.0
    img[inside] = 0.55 * img[inside] + 0.45 * 190.0
    # identity sets eye spacing and mouth width
    spread = 0.18 + 0.14 * (identity % n_identities) / max(1, n_identities - 1)
    for sx in (-1, 1):
        ex, ey = cx + sx * spread * w, cy - 0.12 * h
        eye = (xx - ex) ** 2 + (yy - ey) ** 2 <= (0.07 * w) ** 2
        img[eye] = 40.0
    mouth = (np.abs(yy - (cy + 0.22 * h)) <= max(1.0, 0.04 * h)) & (np.abs(xx - cx) <= (0.1 + 0.2 * (1 - spread)) * w)
    img[mouth] = 70.0


def synth_image(seed: int, size: int = 96, n_identities: int = 10, index: int = 0) -> LabeledImage:
    rng = np.random.default_rng([seed, index])
    img = 128.0 + 38.0 * pink_texture(rng, size, exponent=rng.uniform(0.8, 1.2))
    for _ in range(rng.integers(2, 5)):
        x0, y0 = rng.integers(0, size, 2)
        w, h = rng.integers(size // 8, size // 2, 2)
        img[y0:y0 + h, x0:x0 + w] += rng.uniform(-60, 60)
    fw = int(rng.integers(size // 4, size // 2))
    fh = int(round(fw * rng.uniform(1.1, 1.3)))
    fh = min(fh, size - 2)
    fx = int(rng.integers(1, size - fw - 1))
    fy = int(rng.integers(1, size - fh - 1))
    identity = int(rng.integers(0, n_identities))
    _face(img, rng, (fx, fy, fw, fh), identity, n_identities)
    img += rng.normal(0.0, 6.0, size=img.shape)
    px = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return LabeledImage(
        name=f"img{index:05d}",
        raster=Raster(px),
        boxes=[[float(fx), float(fy), float(fw), float(fh)]],
        identity=identity,
    )


def desk_corpus(n: int, seed: int = 0, size: int = 96, n_identities: int = 10) -> list[LabeledImage]:
    return [synth_image(seed, size, n_identities, i) for i in range(n)]
