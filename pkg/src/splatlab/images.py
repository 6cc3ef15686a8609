"""Image file I/O: binary PPM (P6, 8-bit) always, PNG via Pillow."""

from __future__ import annotations

import numpy as np


def to_uint8(rgb):
    """Quantize a float [0,1] image to uint8 (round-half-even)."""
    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    return np.rint(arr * 255.0).astype(np.uint8)


def save_ppm(path, rgb):
    arr = to_uint8(rgb)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes(order="C"))


def load_ppm(path):
    """Read a binary P6 file into a float64 [0,1] (H,W,3) array."""
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM: {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1  # single whitespace after maxval
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return arr.reshape(h, w, 3).astype(np.float64) / maxval


def save_png(path, rgb):
    from PIL import Image

    Image.fromarray(to_uint8(rgb), mode="RGB").save(path)


def load_png(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, rgb):
    """Dispatch on extension: .ppm or .png."""
    p = str(path)
    if p.endswith(".png"):
        save_png(p, rgb)
    else:
        save_ppm(p, rgb)


def load_image(path):
    p = str(path)
    if p.endswith(".png"):
        return load_png(p)
    return load_ppm(p)
