"""Bound-preserving sigmoid map from latent fields to conductivity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

CLAMP_MARGIN = 1e-3
SCALE_RULES = ("paper", "voltage_ls")


@dataclass(frozen=True)
class BoundMap:
    """``sigma = lower + (upper - lower) * sigmoid(c + shift)``.

    The shift is chosen so that ``map(0) == sigma0``; ``scale`` records the
    global factor used to build ``sigma0`` (1 for warm starts).
    """

    lower: float
    upper: float
    sigma0: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        lo, hi = float(self.lower), float(self.upper)
        if not lo < hi:
            raise ValueError(f"lower bound {lo} must be below upper bound {hi}")
        s0 = np.array(self.sigma0, dtype=float, copy=True)
        if not np.all(np.isfinite(s0)) or np.any(s0 <= lo) or np.any(s0 >= hi):
            bad = int(np.argmax(~np.isfinite(s0) | (s0 <= lo) | (s0 >= hi)))
            raise ValueError(
                f"initial conductivity {s0[bad]!r} at node {bad} is outside ({lo}, {hi})"
            )
        s0.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "sigma0", s0)
        shift = np.log((s0 - lo) / (hi - s0))
        shift.flags.writeable = False
        object.__setattr__(self, "shift", shift)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def map(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        if not np.all(np.isfinite(c)):
            raise ValueError("latent field contains non-finite values")
        z = c + self.shift
        # evaluate from the nearer bound to keep relative accuracy near u
        sigma = np.where(
            z <= 0,
            self.lower + self.width * expit(z),
            self.upper - self.width * expit(-z),
        )
        # H(0) = sigma0 must hold bit-for-bit (warm-start fixed point)
        sigma = np.where(c == 0, self.sigma0, sigma)
        # saturated sigmoids would land on the bound itself; stay in the open interval
        return np.clip(
            sigma, np.nextafter(self.lower, self.upper), np.nextafter(self.upper, self.lower)
        )

    __call__ = map

    def derivative(self, sigma) -> np.ndarray:
        """Diagonal of ``dH/dc`` expressed in sigma: ``(s-l)(u-s)/(u-l)``."""
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma <= self.lower) or np.any(sigma >= self.upper):
            raise ValueError("conductivity outside the open bound interval")
        return (sigma - self.lower) * (self.upper - sigma) / self.width

    def derivative_latent(self, c) -> np.ndarray:
        """``(u - l) * f'(c + shift)`` evaluated through the sigmoid."""
        f = expit(np.asarray(c, dtype=float) + self.shift)
        return self.width * f * (1.0 - f)

    def inverse(self, sigma) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=float)
        return np.log((sigma - self.lower) / (self.upper - sigma)) - self.shift


def global_scale(V, U_homo, rule: str = "paper") -> float:
    """Global conductivity scale from measured and homogeneous-model voltages.

    ``paper``: ``sum V^2 / sum U V``; ``voltage_ls``: ``sum U^2 / sum U V``.
    """
    V = np.asarray(V, dtype=float)
    U = np.asarray(U_homo, dtype=float)
    if V.shape != U.shape:
        raise ValueError("measurement vectors differ in shape")
    denom = float(np.dot(U, V))
    if denom == 0.0 or not np.isfinite(denom):
        raise ValueError("sum U*V is zero: measurements are orthogonal to the model")
    if rule == "paper":
        return float(np.dot(V, V)) / denom
    if rule == "voltage_ls":
        return float(np.dot(U, U)) / denom
    raise ValueError(f"unknown scale rule {rule!r}; expected one of {SCALE_RULES}")


def calibrate_sigma0(
    V, U_homo, sigma_homo, lower: float, upper: float, rule: str = "paper"
) -> tuple[float, BoundMap]:
    """Scale ``sigma_homo`` globally and build the matching :class:`BoundMap`.

    The scaled field is projected into ``[l + m(u-l), u - m(u-l)]`` with
    ``m = CLAMP_MARGIN`` so that the shift stays finite.
    """
    s = global_scale(V, U_homo, rule)
    sigma_homo = np.asarray(sigma_homo, dtype=float)
    target = s * sigma_homo
    if not np.all(np.isfinite(target)) or np.any(target <= 0):
        raise ValueError(f"scale factor {s:.4g} gives a non-physical initial conductivity")
    margin = CLAMP_MARGIN * (upper - lower)
    sigma0 = np.clip(target, lower + margin, upper - margin)
    return s, BoundMap(lower, upper, sigma0, s)


def warm_start(sigma_baseline, lower: float, upper: float) -> BoundMap:
    """Bound map whose zero latent reproduces ``sigma_baseline`` exactly."""
    return BoundMap(lower, upper, sigma_baseline, 1.0)
