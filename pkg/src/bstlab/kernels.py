"""Morse kernels: smooth maps from latent distance to certainty in [0, 1].

Two kinds are supported. The radial-basis kernel

    K(z1, z2) = exp(-(scale^2 / 2) * ||z1 - z2||^2)

vanishes rapidly away from its center; the rational-quadratic kernel

    K(z1, z2) = (1 + (scale^2 / (2 * mixture)) * ||z1 - z2||^2)^(-mixture)

decays polynomially and is the default. Both equal 1 exactly when
z1 == z2 and decrease strictly with distance. Log-domain evaluation and
analytic gradients are provided because the training loss needs them at
distances where the raw kernel underflows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

__all__ = [
    "KernelSpec",
    "kernel_value",
    "kernel_log",
    "kernel_log_grad",
    "kernel_grad",
]

KERNEL_KINDS = ("rbf", "rq")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus shape parameters.

    ``scale`` sharpens the kernel (larger means tighter certainty mass);
    ``mixture`` is the rational-quadratic exponent and is ignored by the
    radial-basis kind.
    """

    kind: str = "rq"
    scale: float = 1.0
    mixture: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ConfigError(
                f"kernel kind must be one of {KERNEL_KINDS}, got {self.kind!r}"
            )
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ConfigError(f"kernel scale must be > 0, got {self.scale}")
        if self.kind == "rq" and not (np.isfinite(self.mixture) and self.mixture > 0):
            raise ConfigError(f"kernel mixture must be > 0, got {self.mixture}")


def _sq_dists(z1, z2):
    """Pairwise squared distances for aligned vectors or batch rows."""
    a = np.asarray(z1, dtype=np.float64)
    b = np.asarray(z2, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"kernel inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim not in (1, 2):
        raise DimensionError("kernel inputs must be vectors or batches of rows")
    diff = a - b
    return diff, np.sum(diff * diff, axis=-1)


def kernel_log(spec: KernelSpec, z1, z2):
    """log K(z1, z2), exact at any distance (no underflow)."""
    _, d2 = _sq_dists(z1, z2)
    s2 = spec.scale * spec.scale
    if spec.kind == "rbf":
        return -0.5 * s2 * d2
    return -spec.mixture * np.log1p(s2 / (2.0 * spec.mixture) * d2)


def kernel_value(spec: KernelSpec, z1, z2):
    """K(z1, z2) in [0, 1]; exactly 1 when the inputs coincide."""
    return np.exp(kernel_log(spec, z1, z2))


def kernel_log_grad(spec: KernelSpec, z1, z2):
    """d(log K)/d(z1), shaped like z1. The z2 gradient is its negation."""
    diff, d2 = _sq_dists(z1, z2)
    s2 = spec.scale * spec.scale
    if spec.kind == "rbf":
        return -s2 * diff
    denom = 1.0 + s2 / (2.0 * spec.mixture) * d2
    return -s2 * diff / denom[..., np.newaxis] if diff.ndim == 2 else -s2 * diff / denom


def kernel_grad(spec: KernelSpec, z1, z2):
    """dK/d(z1) = K * d(log K)/d(z1), shaped like z1."""
    logk = kernel_log(spec, z1, z2)
    k = np.exp(logk)
    g = kernel_log_grad(spec, z1, z2)
    return g * k[..., np.newaxis] if g.ndim == 2 else g * k
