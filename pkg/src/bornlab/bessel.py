"""Self-contained Hankel functions of the first kind for orders 0 and 1/2.

Order 0 uses the ascending series for ``z <= 12`` and the Hankel asymptotic
expansion beyond; order 1/2 has the closed form
``sqrt(2/(pi z)) (-i) exp(i z)``.
"""

from __future__ import annotations

import numpy as np

EULER_GAMMA = 0.57721566490153286061
SERIES_LIMIT = 12.0
_SERIES_TERMS = 60
_ASYMPTOTIC_TERMS = 30


def _j0_y0_series(z: np.ndarray):
    x = 0.25 * z * z
    term = np.ones_like(z)
    j0 = np.ones_like(z)
    harmonic = 0.0
    ysum = np.zeros_like(z)
    for k in range(1, _SERIES_TERMS):
        term = term * (-x) / (k * k)
        harmonic += 1.0 / k
        j0 = j0 + term
        ysum = ysum - harmonic * term
    y0 = (2.0 / np.pi) * ((np.log(0.5 * z) + EULER_GAMMA) * j0 + ysum)
    return j0, y0


def _h0_asymptotic(z: np.ndarray):
    # H0(z) ~ sqrt(2/(pi z)) exp(i(z - pi/4)) sum_k a_k (i/(8 z))^k ... expressed via the
    # (mu - (2m-1)^2) recursion with mu = 0
    total = np.ones_like(z, dtype=complex)
    term = np.ones_like(z, dtype=complex)
    for m in range(1, _ASYMPTOTIC_TERMS):
        term = term * (-(2 * m - 1) ** 2) / (m * 8.0 * z) * 1j
        total = total + term
        if np.all(np.abs(term) < 1e-17):
            break
    return np.sqrt(2.0 / (np.pi * z)) * np.exp(1j * (z - 0.25 * np.pi)) * total


def bessel_h1(order: float, z) -> np.ndarray:
    """H^(1)_order(z) for ``order`` in {0, 1/2} and real ``z > 0``."""
    z = np.asarray(z, dtype=float)
    if np.any(~(z > 0)):
        raise ValueError("bessel_h1 needs z > 0")
    if order == 0.5:
        return np.sqrt(2.0 / (np.pi * z)) * (-1j) * np.exp(1j * z)
    if order != 0:
        raise ValueError(f"unsupported Hankel order {order}; only 0 and 1/2")
    out = np.empty(z.shape, dtype=complex)
    small = z <= SERIES_LIMIT
    if np.any(small):
        j0, y0 = _j0_y0_series(z[small])
        out[small] = j0 + 1j * y0
    if np.any(~small):
        out[~small] = _h0_asymptotic(z[~small])
    return out


def bessel_j0_y0(z):
    """(J0, Y0) from the same evaluation path as :func:`bessel_h1`."""
    h = bessel_h1(0, z)
    return h.real, h.imag
