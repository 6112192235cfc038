"""Image file IO: binary PPM (P6, 8-bit) always, PNG when Pillow is present."""

from __future__ import annotations

import numpy as np

__all__ = ["write_image", "read_image", "write_ppm", "read_ppm", "ImageIOError"]


class ImageIOError(Exception):
    pass


def _to_u8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageIOError(f"expected (H, W, 3) image, got {img.shape}")
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray):
    """Write a float image in [0, 1] as binary P6 with maxval 255."""
    u8 = _to_u8(img)
    h, w, _ = u8.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(u8.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file back to float64 in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P6"):
        raise ImageIOError(f"{path}: not a P6 file")
    # header: magic, width, height, maxval as whitespace-separated tokens
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":  # comment until newline
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ImageIOError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_image(path, img: np.ndarray):
    """Dispatch on extension: .ppm built in, .png via Pillow."""
    path = str(path)
    if path.endswith(".ppm"):
        write_ppm(path, img)
    elif path.endswith(".png"):
        try:
            from PIL import Image
        except ImportError as exc:
            raise ImageIOError("PNG output needs Pillow installed") from exc
        Image.fromarray(_to_u8(img), mode="RGB").save(path)
    else:
        raise ImageIOError(f"unsupported image extension: {path}")


def read_image(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".ppm"):
        return read_ppm(path)
    if path.endswith(".png"):
        try:
            from PIL import Image
        except ImportError as exc:
            raise ImageIOError("PNG input needs Pillow installed") from exc
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
        return arr / 255.0
    raise ImageIOError(f"unsupported image extension: {path}")
