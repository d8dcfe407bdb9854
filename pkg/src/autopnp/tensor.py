"""Array helpers shared by every other module.

Images are numpy arrays whose last two axes are (H, W); any leading axes are
treated as a batch. Pixel values live in [0, 1].
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

PSNR_CAP = 100.0
SIGMA_MAX = 50.0 / 255.0

_TFT_MAGIC = b"TFT1"
_TFT_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<c16"), 2: np.dtype("u1")}
_TFT_CODES = {"f": 0, "c": 1, "u": 2, "b": 2, "i": 0}


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))


def dft2(img: np.ndarray) -> np.ndarray:
    """Unitary 2-D DFT over the last two axes."""
    return np.fft.fft2(img, norm="ortho")


def idft2(spec: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(spec, norm="ortho")


def mse(a: np.ndarray, b: np.ndarray) -> np.ndarray | float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    err = np.mean((a - b) ** 2, axis=(-2, -1))
    return float(err) if np.ndim(err) == 0 else err


def psnr(a: np.ndarray, b: np.ndarray) -> np.ndarray | float:
    """PSNR in dB for unit peak, capped at 100 dB (batched over leading axes)."""
    err = np.asarray(mse(a, b))
    with np.errstate(divide="ignore"):
        val = np.where(err < 1e-10, PSNR_CAP, 10.0 * np.log10(1.0 / np.maximum(err, 1e-300)))
    return float(val) if val.ndim == 0 else val


def gaussian_noise(rng: np.random.Generator, dims, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"negative noise level {sigma}")
    if sigma == 0:
        return np.zeros(dims)
    return sigma * rng.standard_normal(dims)


def bcast(v, ndim: int = 2) -> np.ndarray:
    """Reshape a scalar or per-sample vector so it broadcasts against images."""
    return np.asarray(v, dtype=float).reshape(np.shape(v) + (1,) * ndim)


# -- TFT1 binary tensors ---------------------------------------------------

def write_tft(path_or_file, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _TFT_CODES.get(arr.dtype.kind)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    data = np.asarray(arr, dtype=_TFT_DTYPES[code], order="C")
    header = _TFT_MAGIC + struct.pack("<BB", code, data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    if hasattr(path_or_file, "write"):
        path_or_file.write(header + data.tobytes())
    else:
        Path(path_or_file).write_bytes(header + data.tobytes())


def read_tft(path_or_file) -> np.ndarray:
    if hasattr(path_or_file, "read"):
        arr, _ = _parse_tft(path_or_file.read(), 0)
        return arr
    arr, _ = _parse_tft(Path(path_or_file).read_bytes(), 0)
    return arr


def _parse_tft(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    if buf[offset:offset + 4] != _TFT_MAGIC:
        raise ValueError("bad TFT1 magic")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _TFT_DTYPES:
        raise ValueError(f"bad TFT1 dtype code {code}")
    offset += 6
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    dtype = _TFT_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    nbytes = count * dtype.itemsize
    if offset + nbytes > len(buf):
        raise ValueError("truncated TFT1 payload")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims).copy()
    return arr, offset + nbytes


def write_tft_bundle(path, tensors: dict[str, np.ndarray], header: str = "") -> None:
    """Named tensors concatenated after a plain-text header.

    Layout: header text, then one line per tensor name, then a blank line,
    then the TFT1 records in the same order.
    """
    names = list(tensors)
    text = header.rstrip("\n") + "\n" if header else ""
    text += "".join(f"tensor {n}\n" for n in names) + "\n"
    with open(path, "wb") as fh:
        fh.write(f"BUNDLE {len(text.encode())}\n".encode())
        fh.write(text.encode())
        for n in names:
            write_tft(fh, tensors[n])


def read_tft_bundle(path) -> tuple[str, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    first, rest = buf.split(b"\n", 1)
    tag, size = first.split()
    if tag != b"BUNDLE":
        raise ValueError("not a tensor bundle")
    text = rest[: int(size)].decode()
    offset = len(first) + 1 + int(size)
    lines = text.split("\n")
    names = [ln[len("tensor "):] for ln in lines if ln.startswith("tensor ")]
    header = "\n".join(ln for ln in lines if ln and not ln.startswith("tensor "))
    out = {}
    for n in names:
        out[n], offset = _parse_tft(buf, offset)
    return header, out


# -- PGM (P5) --------------------------------------------------------------

def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("only binary P5 PGM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    pos += 1
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return data.astype(float) / maxval
