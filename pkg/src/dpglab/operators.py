"""Degradation operators, noise models and observation synthesis.

Operators act on arrays whose trailing axes equal ``op.in_shape`` and keep
any leading batch axes. Image operators treat the last two axes as space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .numerics import (
    RandomStream,
    conv2d,
    conv2d_adjoint,
    dft2_magnitude,
    draw_normal,
    draw_poisson,
)

__all__ = [
    "DegradationOperator",
    "Identity",
    "Inpaint",
    "AvgPool",
    "Blur",
    "NonlinearBlur",
    "PhaseRetrieval",
    "gaussian_kernel",
    "motion_kernel",
    "build_operator",
    "NoiseModel",
    "InverseProblem",
    "synthesize_observation",
    "recon_loss",
]


class DegradationOperator:
    """Forward map ``A`` of an inverse problem."""

    kind: str = "base"
    linear: bool = True

    def __init__(self, in_shape):
        self.in_shape = tuple(int(s) for s in in_shape)

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.in_shape

    def _batch(self, x: np.ndarray, shape) -> tuple[int, ...]:
        n = len(shape)
        if x.shape[x.ndim - n :] != tuple(shape):
            raise ValueError(f"{self.kind}: expected trailing shape {tuple(shape)}, got {x.shape}")
        return x.shape[: x.ndim - n]

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._batch(x, self.in_shape)
        return self._apply(x)

    def adjoint(self, v) -> np.ndarray:
        if not self.linear:
            raise TypeError(f"{self.kind} is nonlinear and has no adjoint")
        v = np.asarray(v, dtype=np.float64)
        self._batch(v, self.out_shape)
        return self._adjoint(v)

    def vjp(self, x, v) -> np.ndarray:
        """``v^T dA/dx`` at ``x``."""
        if self.linear:
            x = np.asarray(x, dtype=np.float64)
            v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape[: x.ndim - len(self.in_shape)] + self.out_shape)
            return self.adjoint(v)
        return self._vjp(np.asarray(x, dtype=np.float64), np.asarray(v, dtype=np.float64))

    def _vjp(self, x, v):
        return self.fd_vjp(x, v)

    def fd_vjp(self, x, v, h: float | None = None) -> np.ndarray:
        """Central finite-difference VJP; batch axes are handled column-wise."""
        x = np.asarray(x, dtype=np.float64)
        batch = self._batch(x, self.in_shape)
        d = int(np.prod(self.in_shape))
        xf = x.reshape(batch + (d,))
        if h is None:
            h = 1e-4 * (1.0 + float(np.max(np.abs(x))))
        out = np.empty_like(xf)
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            fp = self.apply((xf + e).reshape(x.shape))
            fm = self.apply((xf - e).reshape(x.shape))
            diff = (fp - fm) * v
            out[..., j] = diff.reshape(batch + (-1,)).sum(axis=-1) / (2 * h)
        return out.reshape(x.shape)

    def matrix(self) -> np.ndarray:
        """Dense matrix of a linear operator (rows: outputs, cols: inputs)."""
        if not self.linear:
            raise TypeError(f"{self.kind} is nonlinear")
        d = int(np.prod(self.in_shape))
        basis = np.eye(d).reshape((d,) + self.in_shape)
        return self.apply(basis).reshape(d, -1).T

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "in_shape": list(self.in_shape)}


class Identity(DegradationOperator):
    kind = "identity"

    def _apply(self, x):
        return x.copy()

    def _adjoint(self, v):
        return v.copy()


class Inpaint(DegradationOperator):
    """Keeps the entries where ``mask`` is true; output is their flat list."""

    kind = "inpaint"

    def __init__(self, mask):
        mask = np.asarray(mask, dtype=bool)
        super().__init__(mask.shape)
        self.mask = mask
        self._idx = np.flatnonzero(mask.ravel())

    @classmethod
    def keep_fraction(cls, in_shape, fraction: float, stream: RandomStream) -> "Inpaint":
        d = int(np.prod(in_shape))
        n_keep = int(round(fraction * d))
        order = stream.generator().permutation(d)
        mask = np.zeros(d, dtype=bool)
        mask[order[:n_keep]] = True
        return cls(mask.reshape(in_shape))

    @property
    def out_shape(self):
        return (len(self._idx),)

    def _apply(self, x):
        batch = x.shape[: x.ndim - len(self.in_shape)]
        return x.reshape(batch + (-1,))[..., self._idx]

    def _adjoint(self, v):
        batch = v.shape[:-1]
        out = np.zeros(batch + (self.mask.size,))
        out[..., self._idx] = v
        return out.reshape(batch + self.in_shape)

    def to_dict(self):
        return {"kind": self.kind, "in_shape": list(self.in_shape), "keep": self._idx.tolist()}


class AvgPool(DegradationOperator):
    """Non-overlapping ``factor x factor`` average pooling of the last two axes."""

    kind = "avgpool"

    def __init__(self, in_shape, factor: int):
        super().__init__(in_shape)
        H, W = self.in_shape[-2:]
        if H % factor or W % factor:
            raise ValueError("image size must be divisible by the pooling factor")
        self.factor = int(factor)

    @property
    def out_shape(self):
        f = self.factor
        return self.in_shape[:-2] + (self.in_shape[-2] // f, self.in_shape[-1] // f)

    def _apply(self, x):
        f = self.factor
        H, W = x.shape[-2:]
        return x.reshape(x.shape[:-2] + (H // f, f, W // f, f)).mean(axis=(-3, -1))

    def _adjoint(self, v):
        f = self.factor
        return np.repeat(np.repeat(v, f, axis=-2), f, axis=-1) / (f * f)

    def to_dict(self):
        return {"kind": self.kind, "in_shape": list(self.in_shape), "factor": self.factor}


def gaussian_kernel(size: int, std: float) -> np.ndarray:
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    r = size // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(t**2) / (2 * std * std))
    k = np.outer(g, g)
    return k / k.sum()


def motion_kernel(length: int, angle: float, supersample: int = 16) -> np.ndarray:
    """Straight line of ``length`` pixels at ``angle`` radians.

    Anti-aliased by area: the segment is supersampled at cell midpoints and
    each sample lands in its nearest pixel.
    """
    if length < 1:
        raise ValueError("length must be positive")
    size = length if length % 2 else length + 1
    r = size // 2
    n = supersample * length
    t = (np.arange(n) + 0.5) * (length / n) - length / 2
    rows = np.clip(np.round(r - t * math.sin(angle)).astype(int), 0, size - 1)
    cols = np.clip(np.round(r + t * math.cos(angle)).astype(int), 0, size - 1)
    k = np.zeros((size, size))
    np.add.at(k, (rows, cols), 1.0)
    return k / k.sum()


class Blur(DegradationOperator):
    """Convolution with a fixed normalised kernel (Gaussian or motion)."""

    def __init__(self, in_shape, kernel, kind: str = "gaussian_blur", boundary: str = "reflect", params=None):
        super().__init__(in_shape)
        self.kernel = np.asarray(kernel, dtype=np.float64)
        self.kind = kind
        self.boundary = boundary
        self.params = dict(params or {})

    def _apply(self, x):
        return conv2d(x, self.kernel, self.boundary)

    def _adjoint(self, v):
        return conv2d_adjoint(v, self.kernel, self.boundary)

    def to_dict(self):
        return {"kind": self.kind, "in_shape": list(self.in_shape), "boundary": self.boundary, **self.params}


class NonlinearBlur(DegradationOperator):
    """Surrogate nonlinear blur ``N(x) = B(x) + gain * B(x)**2`` with Gaussian ``B``."""

    kind = "nonlinear_blur"
    linear = False

    def __init__(self, in_shape, size: int = 7, std: float = 1.5, gain: float = 0.5):
        super().__init__(in_shape)
        self.blur = Blur(in_shape, gaussian_kernel(size, std), params={"size": size, "std": std})
        self.size, self.std, self.gain = size, std, gain

    def _apply(self, x):
        b = self.blur.apply(x)
        return b + self.gain * b * b

    def _vjp(self, x, v):
        b = self.blur.apply(x)
        return self.blur.adjoint(v * (1.0 + 2.0 * self.gain * b))

    def to_dict(self):
        return {"kind": self.kind, "in_shape": list(self.in_shape), "size": self.size, "std": self.std, "gain": self.gain}


class PhaseRetrieval(DegradationOperator):
    """Fourier magnitude of a single-channel image."""

    kind = "phase_retrieval"
    linear = False

    def __init__(self, in_shape):
        super().__init__(in_shape)
        if len(self.in_shape) == 3 and self.in_shape[0] != 1:
            raise ValueError("phase retrieval needs a single channel")

    def _apply(self, x):
        return dft2_magnitude(x)

    def _vjp(self, x, v):
        F = np.fft.fft2(x, axes=(-2, -1))
        mag = np.abs(F)
        safe = np.where(mag > 0, mag, 1.0)
        u = np.where(mag > 0, v * np.conj(F) / safe, 0.0)
        return np.real(np.fft.fft2(u, axes=(-2, -1)))


def build_operator(spec: dict, in_shape, stream: RandomStream | None = None) -> DegradationOperator:
    """Construct an operator from a config dict (see ``harness.config.OperatorSpec``)."""
    spec = dict(spec)
    kind = spec.pop("kind")
    in_shape = tuple(in_shape)
    if kind == "identity":
        return Identity(in_shape)
    if kind == "inpaint":
        if "keep" in spec and spec["keep"] is not None:
            mask = np.zeros(int(np.prod(in_shape)), dtype=bool)
            mask[np.asarray(spec["keep"], dtype=int)] = True
            return Inpaint(mask.reshape(in_shape))
        if stream is None:
            raise ValueError("random inpainting mask needs a random stream")
        return Inpaint.keep_fraction(in_shape, spec.get("keep_fraction", 0.5), stream)
    if kind == "avgpool":
        return AvgPool(in_shape, spec.get("factor", 2))
    if kind == "gaussian_blur":
        size, std = spec.get("size", 7), spec.get("std", 1.5)
        return Blur(in_shape, gaussian_kernel(size, std), "gaussian_blur", params={"size": size, "std": std})
    if kind == "motion_blur":
        length = spec.get("length", 9)
        angle = spec.get("angle")
        if angle is None:
            if stream is None:
                raise ValueError("random motion angle needs a random stream")
            angle = float(stream.generator().uniform(0.0, math.pi))
        return Blur(in_shape, motion_kernel(length, angle), "motion_blur", params={"length": length, "angle": angle})
    if kind == "nonlinear_blur":
        return NonlinearBlur(in_shape, spec.get("size", 7), spec.get("std", 1.5), spec.get("gain", 0.5))
    if kind == "phase_retrieval":
        return PhaseRetrieval(in_shape)
    raise ValueError(f"unknown operator kind {kind!r}")


# -- noise ------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    """Observation noise: ``gaussian`` (std ``sigma_y``) or ``poisson`` (rate ``lam``, intensity ``scale``)."""

    kind: str = "gaussian"
    sigma_y: float = 0.05
    lam: float = 1.0
    scale: float = 255.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "poisson"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma_y > 0:
            raise ValueError("sigma_y must be positive")
        if self.kind == "poisson" and not (self.lam > 0 and self.scale > 0):
            raise ValueError("poisson rate and scale must be positive")

    def loss(self, y, ax) -> np.ndarray:
        """Reconstruction loss, reduced over the trailing ``y.ndim`` axes."""
        y = np.asarray(y, dtype=np.float64)
        res = y - np.asarray(ax, dtype=np.float64)
        axes = tuple(range(res.ndim - y.ndim, res.ndim))
        if self.kind == "gaussian":
            return np.sum(res * res, axis=axes)
        return np.sum(np.abs(res), axis=axes)

    def loss_grad(self, y, ax) -> np.ndarray:
        """Gradient of :meth:`loss` w.r.t. ``ax`` (L1 uses the sign subgradient)."""
        res = np.asarray(y, dtype=np.float64) - np.asarray(ax, dtype=np.float64)
        if self.kind == "gaussian":
            return -2.0 * res
        return -np.sign(res)


def recon_loss(noise: NoiseModel, y, ax) -> float:
    y, ax = np.asarray(y, float), np.asarray(ax, float)
    if y.shape != ax.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {ax.shape}")
    return float(noise.loss(y, ax))


@dataclass
class InverseProblem:
    operator: DegradationOperator
    noise: NoiseModel
    y: np.ndarray
    x_shape: tuple[int, ...] = field(default=())
    n_clipped: int = 0

    def __post_init__(self):
        if not self.x_shape:
            self.x_shape = self.operator.in_shape
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.shape != self.operator.out_shape:
            raise ValueError(f"observation shape {self.y.shape} != operator output {self.operator.out_shape}")

    @property
    def dim(self) -> int:
        return int(np.prod(self.x_shape))

    def forward(self, x) -> np.ndarray:
        return self.operator.apply(x)

    def loss(self, x) -> np.ndarray:
        """``l_y(A(x))`` for (possibly batched) clean signals ``x``."""
        return self.noise.loss(self.y, self.operator.apply(x))

    def residual_l2(self, x) -> np.ndarray:
        res = self.y - self.operator.apply(x)
        return np.sqrt(np.sum(res.reshape(res.shape[: res.ndim - self.y.ndim] + (-1,)) ** 2, axis=-1))


def synthesize_observation(op: DegradationOperator, noise: NoiseModel, x0_true, stream: RandomStream) -> InverseProblem:
    clean = op.apply(np.asarray(x0_true, dtype=np.float64))
    if noise.kind == "gaussian":
        y = clean + noise.sigma_y * draw_normal(stream, clean.shape)
        return InverseProblem(op, noise, y)
    n_clipped = int(np.sum(clean < 0))
    intensity = noise.lam * noise.scale
    counts = draw_poisson(stream, intensity * np.clip(clean, 0.0, None))
    return InverseProblem(op, noise, counts / intensity, n_clipped=n_clipped)
