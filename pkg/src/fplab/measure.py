"""Cylindrical test functions, Kolmogorov operators and weak-form residuals
evaluated on empirical product measures.

Diffusion convention: ``Z_i`` has quadratic variation ``a_i t``, so the
second-order part of both generators is ``(1/2) a_i d^2/dz_i^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from . import rng
from .drift import DriftModel
from .ou import mode_variance, trapezoid
from .spectrum import GammaWeights, Spectrum, gamma_apply, h_norm, v_norm_sq

BLOCKS = ("x", "v", "z", "sum")


@dataclass(frozen=True)
class Factor:
    """One-dimensional factor ``g(y)`` acting on coordinate ``index`` of ``block``.

    ``kind="bell"``: ``exp(-(y - p1)^2 / (2 p2^2))`` (centre, width).
    ``kind="trig"``: ``cos(p1 y + p2)`` (frequency, phase).
    ``block="sum"`` reads ``v_i + z_i``.
    """

    kind: str
    block: str
    index: int
    p1: float
    p2: float

    def __post_init__(self):
        if self.kind not in ("bell", "trig"):
            raise ValueError(f"unknown factor kind {self.kind!r}")
        if self.block not in BLOCKS:
            raise ValueError(f"unknown block {self.block!r}")
        if self.index < 0:
            raise ValueError("index must be non-negative")
        if self.kind == "bell" and self.p2 <= 0:
            raise ValueError("bell width must be positive")

    def derivs(self, y):
        if self.kind == "bell":
            r = (y - self.p1) / self.p2
            g = np.exp(-0.5 * r * r)
            return g, -r / self.p2 * g, (r * r - 1.0) / self.p2**2 * g
        arg = self.p1 * y + self.p2
        c = np.cos(arg)
        return c, -self.p1 * np.sin(arg), -self.p1**2 * c

    def sup_bounds(self):
        if self.kind == "bell":
            return 1.0, 1.0 / (self.p2 * math.sqrt(math.e)), 1.0 / self.p2**2
        w = abs(self.p1)
        return 1.0, w, w * w


@dataclass(frozen=True)
class CylindricalTestFn:
    """u(., t) = phi(t) prod_k g_k(y_k) with phi(T) = 0.

    ``time="cos"`` uses cos(pi t / (2T)); ``time="quad"`` uses (1 - t/T)^2.
    Every coordinate is read by at most one factor.
    """

    factors: tuple
    T: float
    time: str = "cos"
    name: str = "u"

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if self.time not in ("cos", "quad"):
            raise ValueError("time factor must be 'cos' or 'quad'")
        if self.T <= 0:
            raise ValueError("T must be positive")
        seen = set()
        for f in self.factors:
            touched = {("v", f.index), ("z", f.index)} if f.block == "sum" else {(f.block, f.index)}
            if seen & touched:
                raise ValueError(f"coordinate {f.block}[{f.index}] is read by two factors")
            seen |= touched
        kinds = {f.block == "x" for f in self.factors}
        if len(kinds) > 1:
            raise ValueError("cannot mix x factors with (v, z) factors")

    @property
    def is_x(self) -> bool:
        return bool(self.factors) and self.factors[0].block == "x"

    @property
    def is_shift_lift(self) -> bool:
        return bool(self.factors) and all(f.block == "sum" for f in self.factors)

    def max_index(self, *blocks) -> int:
        idx = [f.index for f in self.factors if f.block in blocks]
        return max(idx) + 1 if idx else 0

    def phi(self, t):
        t = np.asarray(t, dtype=float)
        if self.time == "cos":
            # sin form makes phi(T) = 0 and phi(0) = 1 exactly
            w = math.pi / (2.0 * self.T)
            return np.sin(w * (self.T - t)), -w * np.cos(w * (self.T - t))
        r = 1.0 - t / self.T
        return r * r, -2.0 * r / self.T

    def _coords(self, v, z=None):
        cols = []
        for f in self.factors:
            if f.block in ("x", "v"):
                cols.append(v[..., f.index])
            elif f.block == "z":
                cols.append(z[..., f.index])
            else:
                cols.append(v[..., f.index] + z[..., f.index])
        return np.stack(cols, axis=-1) if cols else np.zeros(np.shape(v)[:-1] + (0,))

    def _tables(self, Y):
        G = np.empty_like(Y)
        G1 = np.empty_like(Y)
        G2 = np.empty_like(Y)
        for k, f in enumerate(self.factors):
            G[..., k], G1[..., k], G2[..., k] = f.derivs(Y[..., k])
        return G, G1, G2

    def spatial(self, v, z=None):
        Y = self._coords(np.asarray(v, dtype=float), None if z is None else np.asarray(z, dtype=float))
        G, _, _ = self._tables(Y)
        return np.prod(G, axis=-1)

    def __call__(self, v, z=None, t=0.0):
        return self.phi(t)[0] * self.spatial(v, z)

    def lift(self) -> "CylindricalTestFn":
        """Shift lift u(v + z, t) of an x-function."""
        if self.factors and not self.is_x:
            raise ValueError("only x test functions can be lifted")
        fs = tuple(Factor(f.kind, "sum", f.index, f.p1, f.p2) for f in self.factors)
        return CylindricalTestFn(fs, self.T, self.time, self.name + "~")

    def bounds(self):
        w = math.pi / (2.0 * self.T) if self.time == "cos" else 2.0 / self.T
        return {"dt": w, "d1": [f.sup_bounds()[1] for f in self.factors],
                "d2": [f.sup_bounds()[2] for f in self.factors]}

    def describe(self) -> dict:
        return {"name": self.name, "T": self.T, "time": self.time,
                "factors": [f.__dict__.copy() for f in self.factors]}


def shift_lift(u: CylindricalTestFn) -> CylindricalTestFn:
    return u.lift()


def _others(G):
    """prod_{l != k} G_l for every k, without division."""
    F = G.shape[-1]
    out = np.ones_like(G)
    for k in range(F):
        for l in range(F):
            if l != k:
                out[..., k] *= G[..., l]
    return out


def _generator(u: CylindricalTestFn, Y, t, drift, diff):
    """d_t u + sum_k (diff_k g_k'' + drift_k g_k') prod_{l != k} g_l."""
    phi, dphi = u.phi(t)
    if not u.factors:
        return np.broadcast_to(dphi, Y.shape[:-1]).astype(float)
    G, G1, G2 = u._tables(Y)
    P = _others(G)
    return dphi * np.prod(G, axis=-1) + phi * np.sum((diff * G2 + drift * G1) * P, axis=-1)


def _f_needed(model, x, t, n):
    if n == 0:
        return np.zeros(x.shape[:-1] + (0,))
    return model.f(x, t, n)


def apply_L(u: CylindricalTestFn, x, t, model: DriftModel, s: Spectrum):
    """(Lu)(x, t) = d_t u + sum (1/2) a_i d_i^2 u + sum b^i d_i u."""
    x = np.asarray(x, dtype=float)
    if u.factors and not u.is_x:
        raise ValueError("apply_L needs an x test function")
    Y = u._coords(x)
    idx = np.array([f.index for f in u.factors], dtype=int)
    F = _f_needed(model, x, t, u.max_index("x"))
    drift = -s.alphas_sq[idx] * Y + F[..., idx]
    diff = 0.5 * s.a[idx]
    return _generator(u, Y, t, drift, diff)


def _pad_v(v, n):
    x = np.zeros(v.shape[:-1] + (n,))
    x[..., : v.shape[-1]] = v
    return x


def _sum_field(v, z):
    x = z.copy()
    x[..., : v.shape[-1]] += v
    return x


def apply_Ltilde(u: CylindricalTestFn, v, z, t, model: DriftModel, s: Spectrum,
                 combine_shift: bool = False):
    """Auxiliary operator on product space.

    z part: (1/2) a_i d^2_{z_i} - (alpha_i^2 + lam) z_i d_{z_i};
    v part: (-alpha_i^2 v_i + f^i(v + z, t) + lam z_i) d_{v_i}.

    With ``combine_shift`` the two first-order coefficients acting on a
    ``sum`` coordinate are merged algebraically into -alpha^2 (v+z) + f,
    which reproduces the arithmetic of :func:`apply_L` on ``v + z``.
    """
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    if u.factors and u.is_x:
        raise ValueError("apply_Ltilde needs a (v, z) test function")
    if u.max_index("v", "sum") > v.shape[-1] or u.max_index("z", "sum") > z.shape[-1]:
        raise ValueError("test function reads coordinates beyond the truncation")
    x = _sum_field(v, z)
    Y = u._coords(v, z)
    F = _f_needed(model, x, t, u.max_index("v", "sum"))
    lam = s.lam
    drift = np.zeros(Y.shape)
    diff = np.zeros(len(u.factors))
    for k, f in enumerate(u.factors):
        i = f.index
        al = s.alphas_sq[i]
        if f.block == "z":
            drift[..., k] = -(al + lam) * z[..., i]
            diff[k] = 0.5 * s.a[i]
        elif f.block == "v":
            drift[..., k] = -al * v[..., i] + F[..., i] + lam * z[..., i]
        elif combine_shift:
            drift[..., k] = -al * Y[..., k] + F[..., i]
            diff[k] = 0.5 * s.a[i]
        else:
            drift[..., k] = (-(al + lam) * z[..., i]) + (-al * v[..., i] + F[..., i] + lam * z[..., i])
            diff[k] = 0.5 * s.a[i]
    return _generator(u, Y, t, drift, diff)


def shift_identity_check(u: CylindricalTestFn, v, z, t, model: DriftModel, s: Spectrum):
    """Max of |Lu(v+z,t) - L~u~(v,z,t)| / (1 + |Lu|) over the given points."""
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    lhs = apply_L(u, _sum_field(v, z), t, model, s)
    rhs = apply_Ltilde(u.lift(), v, z, t, model, s)
    return float(np.max(np.abs(lhs - rhs) / (1.0 + np.abs(lhs))))


# -- empirical measures --------------------------------------------------------

@dataclass(eq=False)
class EmpiricalProductMeasure:
    """Samples of (V_n(t_j), Z_t_j) with uniform weights 1/M."""

    grid: np.ndarray
    V: np.ndarray  # (M, J+1, n_v)
    Z: np.ndarray  # (M, J+1, n_z)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.V.shape[:2] != self.Z.shape[:2] or self.V.shape[1] != len(self.grid):
            raise ValueError("V and Z blocks must share the time grid")
        if self.V.shape[-1] > self.Z.shape[-1]:
            raise ValueError("n_v cannot exceed n_z")

    @property
    def M(self) -> int:
        return self.V.shape[0]

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0]) if len(self.grid) > 1 else 0.0

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.M, 1.0 / self.M)

    def subset(self, idx) -> "EmpiricalProductMeasure":
        return EmpiricalProductMeasure(self.grid, self.V[idx], self.Z[idx], dict(self.provenance))

    @classmethod
    def from_run(cls, traj, ens, **prov):
        ok = traj.ok
        return cls(traj.grid, traj.V[ok], ens.values[ok], {"seed": ens.params.seed, **prov})


@dataclass(eq=False)
class EmpiricalMeasure:
    """x-samples ``X[m, j]`` (full n_z length) with the active count ``n_v``."""

    grid: np.ndarray
    X: np.ndarray
    n_v: int

    @property
    def M(self) -> int:
        return self.X.shape[0]


def pushforward_sum(mu: EmpiricalProductMeasure) -> EmpiricalMeasure:
    """Samples of v + z; coordinates beyond n_v carry the z tail."""
    return EmpiricalMeasure(mu.grid, _sum_field(mu.V, mu.Z), mu.V.shape[-1])


@dataclass
class ResidualReport:
    test_fn_id: str
    M: int
    dt: float
    residual: float
    std_error: float
    bias_estimate: float
    integrability_ratio: float = float("nan")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _residual(init, LT, grid, name, ratio):
    dt = float(grid[1] - grid[0])
    per = init + trapezoid(LT, dt)
    M = per.shape[0]
    mean_series = LT.mean(axis=0)
    simp = integrate.simpson(mean_series, x=grid) if len(grid) >= 3 else trapezoid(mean_series, dt)
    bias = abs(trapezoid(mean_series, dt) - simp)
    se = float(per.std(ddof=1) / math.sqrt(M)) if M > 1 else float("nan")
    return ResidualReport(name, int(M), dt, float(per.mean()), se, float(bias), ratio)


def fpe_tilde_residual(mu: EmpiricalProductMeasure, u: CylindricalTestFn, model: DriftModel,
                       s: Spectrum, initial=None, p0: float | None = None) -> ResidualReport:
    """int int L~u~ dmu_t dt + int u~(., 0) dmu_0 with its Monte-Carlo error.

    ``initial`` is an optional ``(v0, z0)`` sample of the lifted initial
    measure; by default the ensemble's own t = 0 slice is used.
    """
    if abs(mu.grid[-1] - u.T) > 1e-9 * max(1.0, u.T):
        raise ValueError(f"test function horizon {u.T} does not match grid end {mu.grid[-1]}")
    combine = u.is_shift_lift
    LT = np.empty(mu.V.shape[:2])
    for j, t in enumerate(mu.grid):
        LT[:, j] = apply_Ltilde(u, mu.V[:, j], mu.Z[:, j], t, model, s, combine_shift=combine)
    v0, z0 = (mu.V[:, 0], mu.Z[:, 0]) if initial is None else initial
    init = u(v0, z0, 0.0)
    p0 = model.p0 if p0 is None else p0
    scale = 1.0 + h_norm(mu.V) ** p0 + h_norm(mu.Z) ** p0
    ratio = float(np.max(np.abs(LT) / scale)) if LT.size else 0.0
    if initial is not None:
        rep = _residual(np.zeros(mu.M), LT, mu.grid, u.name, ratio)
        rep.residual += float(np.mean(init))
        rep.std_error = math.hypot(rep.std_error, float(np.std(init, ddof=1) / math.sqrt(len(init))))
        return rep
    return _residual(init, LT, mu.grid, u.name, ratio)


def fpe_residual(mu: EmpiricalMeasure, u: CylindricalTestFn, model: DriftModel, s: Spectrum,
                 initial=None) -> ResidualReport:
    """int int Lu dmu_t dt + int u(., 0) dmu_0 on x-samples."""
    if abs(mu.grid[-1] - u.T) > 1e-9 * max(1.0, u.T):
        raise ValueError(f"test function horizon {u.T} does not match grid end {mu.grid[-1]}")
    L = np.empty(mu.X.shape[:2])
    for j, t in enumerate(mu.grid):
        L[:, j] = apply_L(u, mu.X[:, j], t, model, s)
    x0 = mu.X[:, 0] if initial is None else initial
    init = u(x0, None, 0.0)
    if initial is not None:
        rep = _residual(np.zeros(mu.M), L, mu.grid, u.name, float("nan"))
        rep.residual += float(np.mean(init))
        rep.std_error = math.hypot(rep.std_error, float(np.std(init, ddof=1) / math.sqrt(len(init))))
        return rep
    return _residual(init, L, mu.grid, u.name, float("nan"))


def ltilde_growth_constant(u: CylindricalTestFn, s: Spectrum, C_i, p0: float) -> float:
    """K with |L~u~(v,z,t)| <= K (1 + ||v||^p0 + ||z||^p0), from sup bounds of u
    and per-component drift constants ``C_i`` (|f^i| <= C_i (1 + ||x||^p0))."""
    b = u.bounds()
    K = b["dt"]
    lift = max(1.0, 2.0 ** (p0 - 1.0))
    for f, d1, d2 in zip(u.factors, b["d1"], b["d2"]):
        i = f.index
        al = s.alphas_sq[i]
        K += 0.5 * s.a[i] * d2 * (f.block != "v")
        K += d1 * (2.0 * al + 2.0 * s.lam + C_i[i] * lift)
    return float(K)


# -- initial measures ------------------------------------------------------------

def point_mass(x0):
    x0 = np.asarray(x0, dtype=float)

    def sample(M, seed=0):
        return np.broadcast_to(x0, (M, x0.size)).copy()

    return sample


def gaussian_product(sigmas):
    """Centred Gaussian with independent coordinates of standard deviation ``sigmas``."""
    sig = np.asarray(sigmas, dtype=float)

    def sample(M, seed=0):
        g = rng.keyed_normals(seed, np.arange(M), 1, sig.size, rng.STREAM_INITIAL)[:, 0, :]
        return sig * g

    return sample


def empirical_sampler(rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))

    def sample(M, seed=0):
        return rows[np.arange(M) % rows.shape[0]]

    return sample


def lift_initial(sampler, mode: str = "product-first", theta: float = 0.5):
    """Sampler of (v, z) pairs whose sum has the law of ``sampler``.

    ``dirac-second``: (0, x); ``product-first``: (x, 0); ``convex``: the
    first with probability ``theta``, else the second.
    """
    if mode not in ("dirac-second", "product-first", "convex"):
        raise ValueError(f"unknown lift mode {mode!r}")
    if mode == "convex" and not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")

    def sample(M, seed=0):
        x = sampler(M, seed)
        zero = np.zeros_like(x)
        if mode == "dirac-second":
            return zero, x
        if mode == "product-first":
            return x, zero
        g = rng.keyed_normals(seed, np.arange(M), 1, 1, rng.STREAM_AUDIT)[:, 0, 0]
        second = stats.norm.cdf(g) < theta
        return np.where(second[:, None], zero, x), np.where(second[:, None], x, zero)

    return sample


# -- diagnostics -------------------------------------------------------------------

def marginal_gaussian_check(mu: EmpiricalProductMeasure, s: Spectrum, j: int, bands: float = 5.0) -> dict:
    """Per-mode moments of Z at grid index ``j`` against N(0, mode_variance)."""
    t = float(mu.grid[j])
    z = mu.Z[:, j, :]
    M, n = z.shape
    var = mode_variance(np.arange(n), t, s)
    if not np.any(var > 0):
        ok = bool(np.all(z == 0))
        return {"t": t, "pass": ok, "modes": []}
    mean = z.mean(axis=0)
    svar = z.var(axis=0, ddof=1)
    sd = np.sqrt(svar)
    cen = z - mean
    with np.errstate(invalid="ignore", divide="ignore"):
        skew = np.mean(cen**3, axis=0) / sd**3
        kurt = np.mean(cen**4, axis=0) / sd**4 - 3.0
    z_mean = mean / np.sqrt(var / M)
    z_var = (svar - var) / (var * math.sqrt(2.0 / (M - 1)))
    z_skew = skew / math.sqrt(6.0 / M)
    z_kurt = kurt / math.sqrt(24.0 / M)
    rows = []
    for i in range(n):
        rows.append({"mode": i, "mean": float(mean[i]), "var": float(svar[i]), "var_exact": float(var[i]),
                     "skew": float(skew[i]), "kurt": float(kurt[i]), "z_mean": float(z_mean[i]),
                     "z_var": float(z_var[i]), "z_skew": float(z_skew[i]), "z_kurt": float(z_kurt[i])})
    zs = np.abs(np.stack([z_mean, z_var, z_skew, z_kurt]))
    return {"t": t, "pass": bool(np.all(zs <= bands)), "max_z": float(zs.max()), "modes": rows}


def tightness_functional(mu: EmpiricalProductMeasure, g: GammaWeights, s: Spectrum) -> dict:
    """Ensemble-time average of ||v||_V^2 + ||Gamma z||_H^2, its z part, and
    the closed-form bound T C_gamma for the z part."""
    n_z = mu.Z.shape[-1]
    if g.gammas.size < n_z:
        raise ValueError("gamma weights shorter than the z truncation")
    dt = mu.dt
    vpart = trapezoid(v_norm_sq(mu.V, s), dt)
    zpart = trapezoid(h_norm(gamma_apply(mu.Z, GammaWeights(g.gammas[:n_z]))) ** 2, dt)
    tot = vpart + zpart
    M = mu.M
    C_gamma = 0.5 * float(np.sum(g.gammas[:n_z] * s.a[:n_z] / s.alphas_sq[:n_z]))
    T = float(mu.grid[-1])

    def se(x):
        return float(x.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0

    return {"value": float(tot.mean()), "std_error": se(tot), "z_part": float(zpart.mean()),
            "z_std_error": se(zpart), "v_part": float(vpart.mean()), "C_gamma": C_gamma,
            "z_bound": T * C_gamma}


def time_series(mu: EmpiricalProductMeasure, u: CylindricalTestFn) -> np.ndarray:
    """mu_t(u) for the spatial part of ``u`` at every grid time."""
    if u.is_x:
        x = _sum_field(mu.V, mu.Z)
        return u.spatial(x).mean(axis=0)
    return u.spatial(mu.V, mu.Z).mean(axis=0)


def equicontinuity_probe(mus, phis, delta: float) -> dict:
    """max over measures and test functions of |mu_t(phi) - mu_s(phi)|, |t - s| <= delta."""
    per = []
    for mu in mus:
        lag = int(math.floor(delta / mu.dt + 1e-9)) if mu.dt > 0 else 0
        worst = 0.0
        for u in phis:
            m = time_series(mu, u)
            for k in range(1, min(lag, len(m) - 1) + 1):
                worst = max(worst, float(np.max(np.abs(m[k:] - m[:-k]))))
        per.append(worst)
    return {"delta": float(delta), "per_measure": per, "modulus": max(per) if per else 0.0}


# -- closed-form oracle for the pure OU system ------------------------------------

def _gauss_expect(f: Factor, w):
    """E g(Y) and dE/dw for Y ~ N(0, w)."""
    if f.kind == "bell":
        S = f.p2**2 + w
        E = f.p2 / np.sqrt(S) * np.exp(-(f.p1**2) / (2.0 * S))
        return E, E * (-0.5 / S + f.p1**2 / (2.0 * S * S))
    E = math.cos(f.p2) * np.exp(-0.5 * f.p1**2 * w)
    return E, -0.5 * f.p1**2 * E


def ou_oracle(u: CylindricalTestFn, s: Spectrum, grid):
    """Expected value of the residual estimator for the drift-free system.

    Valid for z-only factors, or ``sum`` factors when V starts at 0 (then
    V + Z is an OU process with rate alpha^2).  Returns ``(m, dm, oracle)``
    where ``m(t) = E u(Y_t, t)``, ``dm`` its time derivative and ``oracle``
    equals ``m(0) + trapezoid(dm)``, i.e. the time-quadrature bias.
    """
    grid = np.asarray(grid, dtype=float)
    idx = [f.index for f in u.factors]
    if len(set(idx)) != len(idx):
        raise ValueError("oracle needs distinct mode indices")
    if any(f.block not in ("z", "sum") for f in u.factors):
        raise ValueError("oracle supports z and sum factors only")
    phi, dphi = u.phi(grid)
    Es, dEs = [], []
    for f in u.factors:
        sp = s if f.block == "z" else s.with_lambda(0.0)
        w = mode_variance(f.index, grid, sp)
        b = sp.alphas_sq[f.index] + sp.lam
        dw = s.a[f.index] * np.exp(-2.0 * b * grid)
        E, dE = _gauss_expect(f, w)
        Es.append(E)
        dEs.append(dE * dw)
    Es = np.array(Es).reshape(len(Es), -1)
    dEs = np.array(dEs).reshape(len(dEs), -1)
    prod = np.prod(Es, axis=0) if len(Es) else np.ones_like(grid)
    m = phi * prod
    dm = dphi * prod
    for k in range(len(Es)):
        others = np.prod(np.delete(Es, k, axis=0), axis=0) if len(Es) > 1 else np.ones_like(grid)
        dm = dm + phi * dEs[k] * others
    oracle = float(m[0] + trapezoid(dm, float(grid[1] - grid[0])))
    return m, dm, oracle
