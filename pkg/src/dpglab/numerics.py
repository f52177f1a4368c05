"""Array helpers, deterministic random streams, convolution and file formats.

Tensors are plain ``float64`` numpy arrays in C order. A "grid" is either a
flat vector ``[d]`` or an image ``[C, H, W]``; most routines also accept
leading batch axes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "RandomStream",
    "as_grid",
    "add",
    "sub",
    "scale",
    "hadamard",
    "dot",
    "norm2",
    "conv2d",
    "dft2_magnitude",
    "draw_normal",
    "draw_poisson",
    "write_dpgt",
    "read_dpgt",
    "write_pgm",
    "write_ppm",
]

DPGT_MAGIC = b"DPGT"


def as_grid(x, *, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} contains non-finite entries")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a, b) -> np.ndarray:
    a, b = np.asarray(a, float), np.asarray(b, float)
    _check_same_shape(a, b)
    return a + b


def sub(a, b) -> np.ndarray:
    a, b = np.asarray(a, float), np.asarray(b, float)
    _check_same_shape(a, b)
    return a - b


def scale(a, c: float) -> np.ndarray:
    return float(c) * np.asarray(a, float)


def hadamard(a, b) -> np.ndarray:
    a, b = np.asarray(a, float), np.asarray(b, float)
    _check_same_shape(a, b)
    return a * b


def dot(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    _check_same_shape(a, b)
    return float(np.dot(a.ravel(), b.ravel()))


def norm2(a) -> float:
    return float(np.linalg.norm(np.asarray(a, float).ravel()))


# -- random streams ---------------------------------------------------------


@dataclass(frozen=True)
class RandomStream:
    """Counter-style random stream addressed by ``(seed, path)``.

    Every distinct path names an independent Philox stream; drawing from a
    stream never mutates it, so the same path always replays the same numbers.
    """

    seed: int
    path: tuple[tuple[str, int], ...] = ()

    def child(self, label: str, index: int = 0) -> "RandomStream":
        if index < 0:
            raise ValueError("stream index must be non-negative")
        return RandomStream(self.seed, self.path + ((label, int(index)),))

    def _entropy(self) -> list[int]:
        seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        words = [seed & 0xFFFFFFFF, seed >> 32]
        for label, index in self.path:
            words.append(zlib.crc32(label.encode("utf-8")))
            words.append(index)
        return words

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(self._entropy())))


def draw_normal(stream: RandomStream, shape) -> np.ndarray:
    if isinstance(shape, int):
        shape = (shape,)
    return stream.generator().standard_normal(tuple(shape))


def draw_poisson(stream: RandomStream, rates) -> np.ndarray:
    rates = np.asarray(rates, dtype=np.float64)
    if np.any(rates < 0):
        raise ValueError("Poisson rates must be non-negative")
    return stream.generator().poisson(rates).astype(np.float64)


# -- convolution / spectra --------------------------------------------------


def _pad_matrix(n: int, r: int, mode: str) -> np.ndarray:
    """One-hot (n + 2r, n) matrix realising 1-D padding of a length-n signal."""
    src = np.arange(n)
    if mode == "reflect":
        if r >= n:
            raise ValueError(f"kernel radius {r} too large for reflect padding of size {n}")
        idx = np.pad(src, r, mode="reflect")
    elif mode == "periodic":
        idx = np.pad(src, r, mode="wrap")
    elif mode == "zero":
        idx = np.concatenate([np.full(r, -1), src, np.full(r, -1)])
    else:
        raise ValueError(f"unknown boundary mode {mode!r}")
    mat = np.zeros((n + 2 * r, n))
    rows = np.nonzero(idx >= 0)[0]
    mat[rows, idx[rows]] = 1.0
    return mat


def _check_kernel(kernel: np.ndarray) -> int:
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError("kernel must be square")
    if kernel.shape[0] % 2 == 0:
        raise ValueError("kernel size must be odd")
    return kernel.shape[0] // 2


def conv2d(x, kernel, boundary: str = "reflect") -> np.ndarray:
    """Per-channel 2-D correlation over the last two axes, same-size output.

    ``out[h, w] = sum_{a,b} kernel[a, b] * pad(x)[h + a, w + b]``.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    r = _check_kernel(kernel)
    H, W = x.shape[-2:]
    ph, pw = _pad_matrix(H, r, boundary), _pad_matrix(W, r, boundary)
    padded = np.einsum("ph,...hw,qw->...pq", ph, x, pw)
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel.shape, axis=(-2, -1))
    return np.einsum("...hwab,ab->...hw", windows, kernel)


def conv2d_adjoint(v, kernel, boundary: str = "reflect") -> np.ndarray:
    """Exact transpose of :func:`conv2d` for the same kernel and boundary."""
    v = np.asarray(v, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    r = _check_kernel(kernel)
    H, W = v.shape[-2:]
    k = kernel.shape[0]
    grad = np.zeros(v.shape[:-2] + (H + 2 * r, W + 2 * r))
    for a in range(k):
        for b in range(k):
            if kernel[a, b] != 0.0:
                grad[..., a : a + H, b : b + W] += kernel[a, b] * v
    ph, pw = _pad_matrix(H, r, boundary), _pad_matrix(W, r, boundary)
    return np.einsum("ph,...pq,qw->...hw", ph, grad, pw)


def dft2_magnitude(x) -> np.ndarray:
    """Modulus of the unnormalised 2-D DFT over the last two axes."""
    return np.abs(np.fft.fft2(np.asarray(x, dtype=np.float64), axes=(-2, -1)))


# -- file formats -----------------------------------------------------------


def write_dpgt(path, x) -> None:
    x = np.array(x, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
    header = DPGT_MAGIC + struct.pack("<I", x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    Path(path).write_bytes(header + x.tobytes())


def read_dpgt(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DPGT_MAGIC:
        raise ValueError(f"{path}: not a DPGT file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - offset != 8 * count:
        raise ValueError(f"{path}: payload size does not match header")
    return np.frombuffer(raw, dtype="<f8", offset=offset).astype(np.float64).reshape(dims)


def _to_bytes(x: np.ndarray) -> bytes:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8).tobytes()


def write_pgm(path, img) -> None:
    """8-bit binary PGM; values in [0, 1] map linearly to [0, 255]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError("PGM export needs a single channel")
        img = img[0]
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + _to_bytes(img))


def write_ppm(path, img) -> None:
    """8-bit binary PPM from a [3, H, W] array with values in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError("PPM export needs a [3, H, W] image")
    _, h, w = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + _to_bytes(np.transpose(img, (1, 2, 0))))
