"""PFM / PPM / PGM readers and writers.

Scalar fields travel as single-channel PFM, vector fields as 3-channel PFM
(both little-endian, scale header -1.0, bottom-to-top row order). Boolean
masks travel as binary PGM (P5, maxval 255, 255 = true). RGB images travel
as binary PPM (P6, maxval 255) mapped to [0, 1] floats in memory.
"""

from __future__ import annotations

import numpy as np


class FileFormatError(ValueError):
    pass


def _read_token(f) -> bytes:
    # Tokens are separated by whitespace; '#' starts a comment to end of line.
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            if tok:
                return tok
            raise FileFormatError("unexpected end of file in header")
        if c == b"#":
            while c and c != b"\n":
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise FileFormatError(f"cannot write PFM with shape {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = _read_token(f)
        if tag == b"Pf":
            channels = 1
        elif tag == b"PF":
            channels = 3
        else:
            raise FileFormatError(f"not a PFM file: magic {tag!r}")
        w = int(_read_token(f))
        h = int(_read_token(f))
        scale = float(_read_token(f))
        dtype = "<f4" if scale < 0 else ">f4"
        buf = f.read(w * h * channels * 4)
    if len(buf) != w * h * channels * 4:
        raise FileFormatError("truncated PFM payload")
    data = np.frombuffer(buf, dtype=dtype).astype(np.float64)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FileFormatError(f"PPM needs an (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(quantized.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if _read_token(f) != b"P6":
            raise FileFormatError("not a binary PPM (P6) file")
        w = int(_read_token(f))
        h = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise FileFormatError(f"unsupported PPM maxval {maxval}")
        buf = f.read(w * h * 3)
    if len(buf) != w * h * 3:
        raise FileFormatError("truncated PPM payload")
    return np.frombuffer(buf, dtype=np.uint8).reshape(h, w, 3) / 255.0


def write_pgm_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise FileFormatError(f"mask must be 2D, got shape {mask.shape}")
    h, w = mask.shape
    data = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_pgm_mask(path) -> np.ndarray:
    with open(path, "rb") as f:
        if _read_token(f) != b"P5":
            raise FileFormatError("not a binary PGM (P5) file")
        w = int(_read_token(f))
        h = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise FileFormatError(f"unsupported PGM maxval {maxval}")
        buf = f.read(w * h)
    if len(buf) != w * h:
        raise FileFormatError("truncated PGM payload")
    return np.frombuffer(buf, dtype=np.uint8).reshape(h, w) == 255
