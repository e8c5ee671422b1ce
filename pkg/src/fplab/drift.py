"""Drift nonlinearities f^i(x, t) and audits of the growth/coercivity bounds.

The full drift is ``b^i(x, t) = -alpha_i^2 x_i + f^i(x, t)``; the models here
only supply ``f``.  Coefficient arrays carry batch axes in front.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import AliasingError
from .spectrum import Spectrum, TorusBasis, e_norm, h_norm, v_norm_sq


class DriftModel:
    """Base contract: ``f(x, t, n)`` returns the first ``n`` components of f."""

    p0: float = 1.0
    k0: float = 2.0
    name = "drift"

    def f(self, x, t, n: int):
        raise NotImplementedError

    def coercivity_constants(self):
        """(eta, C) for which the cancellation inequality holds analytically."""
        raise NotImplementedError

    def describe(self) -> dict:
        return {"name": self.name, "p0": self.p0, "k0": self.k0}


class ZeroDrift(DriftModel):
    name = "zero"

    def f(self, x, t, n):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (n,))

    def coercivity_constants(self):
        return 0.5, 0.0


class LinearGrowthDrift(DriftModel):
    """User map with ||f(x, t)||_H <= C (1 + ||x||_H).

    ``func(x, t)`` takes coefficient arrays ``(..., n_x)`` and returns an
    array of the same shape.
    """

    p0 = 1.0
    k0 = 2.0
    name = "linear-growth"

    def __init__(self, func, C: float, label: str = "custom"):
        if C < 0:
            raise ValueError("C must be non-negative")
        self.func = func
        self.C = float(C)
        self.label = label

    @classmethod
    def tanh(cls, C: float, shift: float = 0.0):
        """f_i(x) = C tanh(x_i - shift) / sqrt(1 + shift**2) style saturating drift.

        With ``shift = 0`` this is ``C tanh(x)`` coordinate-wise, so
        ``||f(x)|| <= C ||x||``.
        """
        if shift == 0.0:
            return cls(lambda x, t: C * np.tanh(x), C, "tanh")
        # |tanh(u - s)| <= |u| + |s| gives ||f|| <= C(|x| + |s| sqrt(n)); keep to bounded case
        raise ValueError("only shift=0 is supported")

    @classmethod
    def rotation(cls, C: float):
        """Saturating rotation of neighbouring coordinate pairs: f = C tanh(R x)."""

        def func(x, t):
            x = np.asarray(x, dtype=float)
            rx = np.empty_like(x)
            rx[..., 0::2] = -x[..., 1::2] if x.shape[-1] % 2 == 0 else np.concatenate(
                [-x[..., 1::2], np.zeros(x.shape[:-1] + (1,))], axis=-1)
            rx[..., 1::2] = x[..., 0:x.shape[-1] - x.shape[-1] % 2:2]
            return C * np.tanh(rx)

        return cls(func, C, "rotation")

    def f(self, x, t, n):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.func(x, t), dtype=float)[..., :n]

    def coercivity_constants(self):
        # <f(v+z), v> <= C(1+|v|+|z|)|v| <= 2C|v|^2 + (C/2)|z|^2 + C/2
        return 0.5, 2.0 * self.C

    def describe(self):
        return {**super().describe(), "C": self.C, "label": self.label}


class NavierStokesDrift(DriftModel):
    """f^i(x) = int ((x . grad) e_i) . x over the torus, by exact grid quadrature.

    Parameters
    ----------
    basis : TorusBasis
    n_x : number of leading modes the argument ``x`` may carry (n_z).
    n_out : number of output components available (n_v).
    grid : points per axis; defaults to the smallest exact grid
        ``2 * K_x + K_out + 1``.
    """

    p0 = 2.0
    k0 = 4.0
    name = "navier-stokes"

    def __init__(self, basis: TorusBasis, n_x: int | None = None, n_out: int | None = None,
                 grid: int | None = None, chunk: int = 4096):
        self.basis = basis
        self.n_x = basis.n_modes if n_x is None else n_x
        self.n_out = self.n_x if n_out is None else n_out
        if self.n_out > self.n_x:
            raise ValueError("n_out cannot exceed n_x")
        need = self.required_grid(self.n_x, self.n_out)
        self.grid = need if grid is None else int(grid)
        if self.grid < need:
            raise AliasingError(f"grid {self.grid} below the exact-quadrature size {need}")
        pts = basis.grid_points(self.grid)
        self.weight = (2.0 * math.pi / self.grid) ** basis.d
        self._phi = basis.values(pts, self.n_x).reshape(self.n_x, -1)  # (n, G*d)
        D = basis.gradients(pts, self.n_out)  # (n_out, G, d, d)
        self._dphi = D.reshape(self.n_out, -1)
        self._G = pts.shape[0]
        self.chunk = chunk

    def required_grid(self, n_x, n_out):
        return 2 * self.basis.max_frequency(n_x) + self.basis.max_frequency(n_out) + 1

    def _field(self, c):
        n = c.shape[-1]
        if n > self.n_x:
            raise AliasingError(f"argument has {n} modes, evaluator built for {self.n_x}")
        return (c @ self._phi[:n]).reshape(c.shape[0], self._G, self.basis.d)

    def _contract(self, x, y, n):
        if n > self.n_out:
            raise AliasingError(f"requested {n} components, evaluator built for {self.n_out}")
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        xf = np.broadcast_to(x, batch + x.shape[-1:]).reshape(-1, x.shape[-1])
        yf = np.broadcast_to(y, batch + y.shape[-1:]).reshape(-1, y.shape[-1])
        out = np.empty((xf.shape[0], n))
        D = self._dphi[:n]
        for lo in range(0, xf.shape[0], self.chunk):
            u = self._field(xf[lo : lo + self.chunk])
            w = u if y is x else self._field(yf[lo : lo + self.chunk])
            uw = (u[:, :, :, None] * w[:, :, None, :]).reshape(u.shape[0], -1)
            out[lo : lo + self.chunk] = self.weight * (uw @ D.T)
        return out.reshape(batch + (n,))

    def f(self, x, t, n):
        return self._contract(x, x, n)

    def bilinear(self, x, y, n: int | None = None):
        """Coefficients <B(x, y), e_i> = int ((x . grad) e_i) . y, i < n."""
        return self._contract(x, y, self.n_out if n is None else n)

    def coercivity_constants(self):
        eta = 0.5
        return eta, self.basis.volume / (2.0 * eta * self.basis.nu)

    def describe(self):
        return {**super().describe(), "d": self.basis.d, "kmax": self.basis.kmax, "nu": self.basis.nu,
                "n_x": self.n_x, "n_out": self.n_out, "grid": self.grid}


def trilinear(basis: TorusBasis, phi, psi, theta, grid: int | None = None) -> np.ndarray:
    """-int ((phi . grad) psi) . theta, with grad psi taken on the grid."""
    phi, psi, theta = (np.asarray(a, dtype=float) for a in (phi, psi, theta))
    n = max(phi.shape[-1], psi.shape[-1], theta.shape[-1])
    K = basis.max_frequency(n)
    N = 3 * K + 1 if grid is None else grid
    if N < 3 * K + 1:
        raise AliasingError("grid too coarse for a cubic trigonometric product")
    pts = basis.grid_points(N)
    V = basis.values(pts, n)
    D = basis.gradients(pts, psi.shape[-1])
    u = np.einsum("...i,igd->...gd", phi, V[: phi.shape[-1]])
    th = np.einsum("...i,igd->...gd", theta, V[: theta.shape[-1]])
    gpsi = np.einsum("...i,igab->...gab", psi, D)
    adv = np.einsum("...ga,...gab->...gb", u, gpsi)
    return -(2.0 * math.pi / N) ** basis.d * np.einsum("...gb,...gb->...", adv, th)


def eval_f(model: DriftModel, x, t, n: int):
    return model.f(x, t, n)


def ns_energy_null_check(model: NavierStokesDrift, x) -> np.ndarray:
    """|sum_i f^i(x) x_i|, which vanishes for divergence-free x."""
    x = np.asarray(x, dtype=float)
    n = min(x.shape[-1], model.n_out)
    return np.abs(np.sum(model.f(x, 0.0, n) * x[..., :n], axis=-1))


def _pad(v, n):
    v = np.asarray(v, dtype=float)
    if v.shape[-1] >= n:
        return v
    return np.concatenate([v, np.zeros(v.shape[:-1] + (n - v.shape[-1],))], axis=-1)


def coercivity_terms(model: DriftModel, v, z, t, s: Spectrum, e_grid: int | None = None):
    """Ingredients of the cancellation inequality for pairs (v, z)."""
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    n_v = v.shape[-1]
    x = _pad(v, z.shape[-1]) + _pad(z, v.shape[-1])
    lhs = np.sum(model.f(x, t, n_v) * v, axis=-1)
    return {
        "lhs": lhs,
        "v_V2": v_norm_sq(v, s),
        "v_H2": h_norm(v) ** 2,
        "z_E": np.asarray(e_norm(z, s, e_grid)),
    }


def coercivity_margin(model: DriftModel, v, z, t, eta: float, C: float, s: Spectrum,
                      e_grid: int | None = None):
    """eta ||v||_V^2 + C ||v||_H^2 (||z||_E^2 + 1) + C ||z||_E^k0 + C - <f(v+z,t), v>."""
    q = coercivity_terms(model, v, z, t, s, e_grid)
    zE = q["z_E"]
    rhs = eta * q["v_V2"] + C * q["v_H2"] * (zE**2 + 1.0) + C * zE**model.k0 + C
    return rhs - q["lhs"]


def fit_coercivity_constant(model: DriftModel, v, z, t, eta: float, s: Spectrum,
                            safety: float = 2.0, e_grid: int | None = None) -> float:
    """Smallest C making every calibration margin non-negative, times ``safety``."""
    q = coercivity_terms(model, v, z, t, s, e_grid)
    zE = q["z_E"]
    need = q["lhs"] - eta * q["v_V2"]
    den = q["v_H2"] * (zE**2 + 1.0) + zE**model.k0 + 1.0
    return safety * float(max(0.0, np.max(need / den)))


def growth_bound_check(model: DriftModel, samples, t=0.0, n: int | None = None) -> dict:
    """Per-component max of |f^i(x,t)| / (1 + ||x||_H^p0) over the samples."""
    x = np.asarray(samples, dtype=float)
    n = x.shape[-1] if n is None else n
    if isinstance(model, NavierStokesDrift):
        n = min(n, model.n_out)
    ratio = np.abs(model.f(x, t, n)) / (1.0 + h_norm(x)[..., None] ** model.p0)
    return {"p0": model.p0, "C_i": ratio.reshape(-1, n).max(axis=0),
            "max_norm": float(h_norm(x).max())}


def random_fields(n: int, count: int, radius: float, seed: int = 0, decay: float = 0.0, alphas_sq=None):
    """Random coefficient vectors with H norm ``radius``; optional spectral decay."""
    g = np.random.default_rng(seed)
    x = g.normal(size=(count, n))
    if decay and alphas_sq is not None:
        x = x * np.asarray(alphas_sq[:n]) ** (-decay / 2.0)
    return radius * x / np.linalg.norm(x, axis=-1, keepdims=True)
