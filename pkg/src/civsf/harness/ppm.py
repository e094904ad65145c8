"""Binary PPM (P6) emission of band composites with percentile stretch."""

from __future__ import annotations

import numpy as np

from civsf.errors import DataFormatError, DomainError

# B4, B3, B2 band positions in the stored channel order (B2,B3,B4,B8,B9,B12)
DEFAULT_BANDS = (2, 1, 0)


def stretch(channel: np.ndarray, lo_pct: float = 2.0, hi_pct: float = 98.0) -> np.ndarray:
    """Percentile-stretch one channel to uint8; constant input maps to
    mid-gray."""
    x = np.asarray(channel, dtype=np.float64)
    lo, hi = np.percentile(x, [lo_pct, hi_pct])
    if hi > lo:
        y = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    else:
        y = np.full_like(x, 0.5)
    return np.round(y * 255.0).astype(np.uint8)


def compose(image: np.ndarray, bands: tuple[int, int, int] = DEFAULT_BANDS) -> np.ndarray:
    """(6, H, W) image -> stretched (H, W, 3) uint8 composite."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 6:
        raise DomainError(f"expected a (6, H, W) image, got {image.shape}")
    for b in bands:
        if not 0 <= int(b) < 6:
            raise DomainError(f"band index {b} outside [0, 6)")
    return np.stack([stretch(image[int(b)]) for b in bands], axis=-1)


def write_ppm(path: str, image: np.ndarray, bands: tuple[int, int, int] = DEFAULT_BANDS,
              config_hash: str = "", seed: int | None = None) -> None:
    rgb = compose(image, bands)
    h, w, _ = rgb.shape
    note = f"# config: {config_hash} seed: {seed}\n" if config_hash else ""
    with open(path, "wb") as fh:
        fh.write(f"P6\n{note}{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Parse a binary P6 file back to (H, W, 3) uint8."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise DataFormatError(f"{path} is not a binary PPM", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(blob):
            raise DataFormatError("truncated PPM header", offset=pos)
        ch = blob[pos:pos + 1]
        if ch == b"#":
            pos = blob.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            fields.append(int(blob[pos:end]))
            pos = end
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DataFormatError(f"unsupported maxval {maxval}", offset=pos)
    need = w * h * 3
    data = blob[pos:pos + need]
    if len(data) != need:
        raise DataFormatError(f"PPM payload has {len(data)} of {need} bytes", offset=pos)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
