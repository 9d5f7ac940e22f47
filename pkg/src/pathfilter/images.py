"""Binary PPM output with the documented gamma-2.2 tone map.

All internal math stays in linear radiance; the tone map applies only when
encoding: clamp to [0, 1], raise to 1/2.2, scale to 8 bits (round half up).
"""

from __future__ import annotations

import numpy as np

GAMMA = 2.2


def tonemap(image: np.ndarray) -> np.ndarray:
    """Linear radiance -> 8-bit sRGB-ish bytes."""
    clipped = np.clip(np.asarray(image, np.float64), 0.0, 1.0)
    enc = clipped ** (1.0 / GAMMA)
    return np.floor(enc * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, image: np.ndarray):
    """P6, 8-bit, binary; image is (H, W, 3) linear radiance."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    h, w = image.shape[:2]
    data = tonemap(image)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """8-bit P6 bytes as written by write_ppm (no tone map inversion)."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError("not a binary PPM file")
        dims = fh.readline().split()
        while dims and dims[0].startswith(b"#"):
            dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError("only 8-bit PPMs are supported")
        data = np.frombuffer(fh.read(w * h * 3), np.uint8)
    return data.reshape(h, w, 3)
