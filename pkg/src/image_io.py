from pathlib import Path

import numpy as np
from loguru import logger

from errors import AsmError
from file_utils import PathLike, atomic_write_bytes

_LUMA = np.array([0.299, 0.587, 0.114])


def _tokens(data: bytes, count: int):
    """Reads `count` whitespace separated header tokens, skipping comments; returns tokens and body offset."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_image(path: PathLike) -> np.ndarray:
    """
    Loads a PGM (P2/P5) or PPM (P3/P6) image as a float64 grayscale grid in [0, 1].
    Colour images are converted with Rec. 601 luma weights.
    """
    data = Path(path).read_bytes()
    magic = data[:2].decode("ascii", errors="replace")
    if magic not in ("P2", "P3", "P5", "P6"):
        raise AsmError(f"{path}: unsupported image format '{magic}' (PGM/PPM only)")
    (_, width, height, maxval), offset = _tokens(data, 4)
    width, height, maxval = int(width), int(height), int(maxval)
    channels = 3 if magic in ("P3", "P6") else 1
    count = width * height * channels
    if magic in ("P2", "P3"):
        values = np.array(data[offset:].split()[:count], dtype=np.float64)
    else:
        dtype = ">u2" if maxval > 255 else "u1"
        values = np.frombuffer(data, dtype=dtype, count=count, offset=offset).astype(np.float64)
    if values.size != count:
        raise AsmError(f"{path}: truncated image data ({values.size} of {count} samples)")
    image = values.reshape(height, width, channels) / maxval
    if channels == 3:
        image = image @ _LUMA
    else:
        image = image[:, :, 0]
    logger.debug(f"Read {width}x{height} image from {path}")
    return image


def write_pgm(path: PathLike, image: np.ndarray) -> Path:
    """Writes a [0, 1] grid as 8-bit binary PGM."""
    image = np.asarray(image, dtype=np.float64)
    pixels = np.round(np.clip(np.nan_to_num(image), 0.0, 1.0) * 255).astype(np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    return atomic_write_bytes(path, header + pixels.tobytes())
