"""Compactly supported polynomial smoothing kernels and their derivatives.

Two families are provided, both supported on [-1, 1] and twice continuously
differentiable there (values and first two derivatives vanish at the
endpoints):

* order 2: the triweight kernel ``(35/32) (1 - v^2)^3``;
* order 4: a triweight-damped polynomial ``(a + b v^2) (1 - v^2)^3`` whose
  coefficients solve the moment system ``int K = 1``, ``int v^2 K = 0``,
  giving ``a = 945/512`` and ``b = -3465/512``.

Derivatives are evaluated from the exact polynomial coefficients, not by
numeric differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["KernelSpec", "kernel_eval", "scaled_kernel", "product_kernel"]


def _poly_table(coeffs: np.ndarray) -> list[np.ndarray]:
    """Ascending-power coefficients for a polynomial and its first two derivatives."""
    table = [coeffs]
    for _ in range(2):
        c = table[-1]
        table.append(c[1:] * np.arange(1, len(c)))
    return table


# (1 - v^2)^3 expanded, scaled per family.
_COEFFS = {
    2: np.array([1.0, 0.0, -3.0, 0.0, 3.0, 0.0, -1.0]) * (35.0 / 32.0),
    4: np.array([945.0, 0.0, -6300.0, 0.0, 13230.0, 0.0, -11340.0, 0.0, 3465.0]) / 512.0,
}
_TABLES = {order: _poly_table(c) for order, c in _COEFFS.items()}


@dataclass(frozen=True)
class KernelSpec:
    """Kernel of order ``order`` (vanishing moments 1..order-1).

    Both orders use the triweight-damped polynomial family; ``family`` is
    derived and kept only for reporting.
    """

    order: int = 2
    family: str = field(init=False, default="")

    def __post_init__(self):
        if self.order not in (2, 4):
            raise ValueError(f"kernel order must be 2 or 4, got {self.order}")
        object.__setattr__(self, "family", f"Triweight{self.order}")

    @property
    def at_zero(self) -> float:
        """Peak value K(0), used for denominator-underflow floors."""
        return float(_COEFFS[self.order][0])


def kernel_eval(spec: KernelSpec, m: int, v):
    """Evaluate the m-th derivative of the kernel, m in {0, 1, 2}.

    Returns exactly 0 outside the open support (-1, 1) for every
    derivative order; the polynomial pieces vanish there continuously.
    """
    if m not in (0, 1, 2):
        raise ValueError(f"derivative order must be 0, 1 or 2, got {m}")
    v = np.asarray(v, dtype=float)
    coeffs = _TABLES[spec.order][m]
    inside = np.abs(v) < 1.0
    out = np.zeros_like(v)
    if np.any(inside):
        vi = v[inside]
        acc = np.zeros_like(vi)
        for c in coeffs[::-1]:
            acc = acc * vi + c
        out[inside] = acc
    return out if out.ndim else float(out)


def scaled_kernel(spec: KernelSpec, h: float, m: int, v):
    """m-th derivative of the bandwidth-scaled kernel K(v/h)/h.

    Each differentiation brings down another factor 1/h, so the value is
    ``K^(m)(v/h) / h^(m+1)``.
    """
    if h <= 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    return kernel_eval(spec, m, np.asarray(v, dtype=float) / h) / h ** (m + 1)


def product_kernel(spec: KernelSpec, h_d: float, u) -> float:
    """Product of scaled kernels over the coordinates of ``u``.

    The caller is responsible for pairing the kernel order with the
    dimension of ``u`` (higher dimensions need a higher-order kernel).
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.size == 0:
        raise ValueError("product kernel needs at least one coordinate")
    return float(np.prod(scaled_kernel(spec, h_d, 0, u)))
