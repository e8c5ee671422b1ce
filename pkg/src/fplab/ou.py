"""Exact sampling and statistics of the shifted Ornstein-Uhlenbeck noise.

Each mode obeys ``dZ_i = -(alpha_i^2 + lam) Z_i dt + sqrt(a_i) dbeta_i`` with
``Z_i(0) = 0`` and is advanced with its exact Gaussian transition, so the
ensemble has no time-discretization bias at grid points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats
from scipy.special import logsumexp

from . import rng
from .errors import CalibrationError, DivergentMomentError
from .spectrum import Spectrum, TorusBasis, e_norm

FERNIQUE_BOUND = math.exp(0.25) + math.e**2 / (math.e**2 - 1.0)
CALIBRATION_THRESHOLD = 1.0 / (math.exp(-1.5) + 1.0)


@dataclass(frozen=True)
class OUParams:
    spectrum: Spectrum
    T: float
    dt: float
    seed: int = 0
    M: int = 1

    def __post_init__(self):
        if self.T <= 0 or self.dt <= 0:
            raise ValueError("T and dt must be positive")
        if self.M < 1:
            raise ValueError("M must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.T / self.dt + 1e-9))

    @property
    def grid(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def replace(self, **kw) -> "OUParams":
        d = dict(spectrum=self.spectrum, T=self.T, dt=self.dt, seed=self.seed, M=self.M)
        d.update(kw)
        return OUParams(**d)


@dataclass(frozen=True, eq=False)
class OUPathEnsemble:
    """Sampled paths ``values[m, j, i]``; ``conv`` holds the exact
    stochastic-convolution increments used by the Galerkin solver (see
    :func:`convolution_moments`)."""

    grid: np.ndarray
    values: np.ndarray
    params: OUParams
    paths: np.ndarray
    conv: np.ndarray | None = field(default=None)

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def spectrum(self) -> Spectrum:
        return self.params.spectrum


def _rate(i, s: Spectrum):
    return s.alphas_sq[i] + s.lam


def ou_exact_step(z_i, i, dt, s: Spectrum, noise):
    """One exact transition of mode ``i`` over ``dt``."""
    if np.any(np.asarray(dt) <= 0):
        raise ValueError("dt must be positive")
    b = _rate(i, s)
    decay = np.exp(-b * dt)
    var = s.a[i] * -np.expm1(-2.0 * b * dt) / (2.0 * b)
    return decay * z_i + np.sqrt(var) * noise


def mode_variance(i, t, s: Spectrum):
    """Variance of Z_i(t): a_i (1 - exp(-2 t b_i)) / (2 b_i), b_i = alpha_i^2 + lam."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    b = _rate(i, s)
    return s.a[i] * -np.expm1(-2.0 * b * t) / (2.0 * b)


def truncation_tail(s: Spectrum) -> float:
    """Stationary H-variance carried by the modes dropped beyond ``n_z``."""
    al, a = s.alphas_sq[s.n_z :], s.a[s.n_z :]
    return float(np.sum(a / (2.0 * (al + s.lam))))


def convolution_moments(s: Spectrum, h: float, n: int | None = None):
    """Joint step covariance of the OU increment and the V-forcing convolution.

    Over one step of length ``h`` the Galerkin forcing ``lam * Z`` enters
    ``V`` through ``int_0^h exp(-alpha^2 (h - r)) lam Z_r dr``.  Given the
    left value ``Z_0`` this equals ``Z_0 exp(-alpha^2 h)(1 - exp(-lam h))``
    plus a Gaussian ``eta = sqrt(a) int (exp(-alpha^2 u) - exp(-b u)) dbeta``
    that is correlated with the OU increment ``xi = sqrt(a) int exp(-b u) dbeta``.

    Returns ``(var_xi, cov_xi_eta, var_eta)`` for the first ``n`` modes.
    """
    n = s.n_z if n is None else n
    al = s.alphas_sq[:n]
    a = s.a[:n]
    b = al + s.lam

    def kint(r):
        # int_0^h exp(-r u) du
        return -np.expm1(-r * h) / r

    lam = s.lam
    vxx = a * kint(2.0 * b)
    cxe = a * (kint(al + b) - kint(2.0 * b))
    vee = a * (kint(2.0 * al) - 2.0 * kint(al + b) + kint(2.0 * b))
    # the differences cancel when lam is small against 1/h or alpha^2; integrate
    # the cancellation-free forms directly there
    ref = a * kint(2.0 * al)
    for i in np.flatnonzero((lam > 0) & (a > 0) & (np.abs(vee) < 1e-4 * ref)):
        ai, bi = al[i], b[i]
        cxe[i] = a[i] * _quad(lambda u: math.exp(-2.0 * bi * u) * math.expm1(lam * u), h, bi)
        vee[i] = a[i] * _quad(lambda u: math.exp(-2.0 * ai * u) * math.expm1(-lam * u) ** 2, h, ai)
    return vxx, cxe, np.maximum(vee, 0.0)


def _quad(f, h, rate):
    # split at the decay scale so quad resolves the boundary layer
    cut = min(h, 10.0 / max(rate, 1e-300))
    val = integrate.quad(f, 0.0, cut, epsabs=0.0, epsrel=1e-12, limit=200)[0]
    if cut < h:
        val += integrate.quad(f, cut, h, epsabs=0.0, epsrel=1e-12, limit=200)[0]
    return val


def sample_ensemble(p: OUParams, paths=None, with_convolution: bool = False, z0=None) -> OUPathEnsemble:
    """Draw ``M`` independent exact paths (or the given global path indices).

    ``z0`` optionally starts the paths away from zero (shape ``(M, n_z)``);
    the process itself is always ``Z_0 = 0``.
    """
    s = p.spectrum
    paths = np.arange(p.M) if paths is None else np.asarray(paths)
    J, n = p.n_steps, s.n_z
    try:
        xi = rng.keyed_normals(p.seed, paths, J, n, rng.STREAM_OU)
        vals = np.empty((paths.size, J + 1, n))
    except MemoryError as exc:  # pragma: no cover - environment dependent
        raise MemoryError(f"ensemble of {paths.size}x{J + 1}x{n} does not fit in memory") from exc
    vals[:, 0, :] = 0.0 if z0 is None else np.broadcast_to(z0, (paths.size, n))
    idx = np.arange(n)
    for j in range(J):
        vals[:, j + 1, :] = ou_exact_step(vals[:, j, :], idx, p.dt, s, xi[:, j, :])
    conv = None
    if with_convolution:
        vxx, cxe, vee = convolution_moments(s, p.dt)
        sd = np.sqrt(vxx)
        with np.errstate(divide="ignore", invalid="ignore"):
            beta = np.where(sd > 0, cxe / sd, 0.0)
        resid = np.sqrt(np.maximum(vee - beta**2, 0.0))
        zeta = rng.keyed_normals(p.seed, paths, J, n, rng.STREAM_CONVOLUTION)
        conv = beta * xi + resid * zeta
    return OUPathEnsemble(p.grid, vals, p, paths, conv)


def trapezoid(y, dt, axis=-1):
    y = np.moveaxis(np.asarray(y, dtype=float), axis, -1)
    if y.shape[-1] < 2:
        return np.zeros(y.shape[:-1])
    return dt * (y.sum(axis=-1) - 0.5 * (y[..., 0] + y[..., -1]))


def l2E_norm_path(path, space, dt: float, grid: int | None = None, power: float = 2.0):
    """Trapezoid value of int_0^T ||Z_t||_E^power dt; ``path`` is (..., J+1, n)."""
    en = e_norm(path, space, grid)
    return trapezoid(np.asarray(en) ** power, dt)


def l2E_integrals(ens: OUPathEnsemble, power: float = 2.0, grid: int | None = None):
    return l2E_norm_path(ens.values, ens.spectrum, ens.params.dt, grid, power)


def wilson_interval(k, n, conf: float = 0.95):
    z = stats.norm.ppf(0.5 + conf / 2.0)
    k = np.asarray(k, dtype=float)
    ph = k / n
    den = 1.0 + z * z / n
    centre = (ph + z * z / (2 * n)) / den
    half = z * np.sqrt(ph * (1 - ph) / n + z * z / (4 * n * n)) / den
    return np.clip(centre - half, 0.0, 1.0), np.clip(centre + half, 0.0, 1.0)


def chebyshev_bound(s: Spectrum, T: float, r: float) -> float | None:
    """Markov bound r^-2 (T/2) sum a_i/(alpha_i^2+lam); valid when E = H."""
    if s.basis is not None:
        return None
    return float(0.5 * T * np.sum(s.a[: s.n_z] / (s.alphas_sq[: s.n_z] + s.lam)) / r**2)


def small_noise_probe(lambdas, r: float, p: OUParams, conf: float = 0.95, tol: float | None = None):
    """Monte-Carlo estimates of P(int_0^T ||Z^lam||_E^2 dt > r^2), one row per lambda."""
    if tol is not None:
        width = stats.norm.ppf(0.5 + conf / 2.0) / math.sqrt(p.M)
        if width > tol:
            raise ValueError(f"M={p.M} gives Wilson width up to {width:.3g} > tol={tol}")
    rows = []
    for lam in lambdas:
        q = p.replace(spectrum=p.spectrum.with_lambda(float(lam)))
        ens = sample_ensemble(q)
        I = l2E_integrals(ens)
        k = int(np.sum(I > r * r))
        lo, hi = wilson_interval(k, p.M, conf)
        rows.append({"lam": float(lam), "p_hat": k / p.M, "ci_low": float(lo), "ci_high": float(hi),
                     "chebyshev_bound": chebyshev_bound(q.spectrum, p.T, r)})
    return rows


@dataclass(frozen=True)
class FerniqueEstimate:
    K: float
    lam: float
    estimate: float
    std_error: float
    log_estimate: float
    max_share: float
    converged: bool
    bound: float = FERNIQUE_BOUND

    @property
    def within_bound(self) -> bool:
        return self.estimate - 1.96 * self.std_error <= self.bound


def exp_moment(X, dominance: float = 0.5):
    """Log-sum-exp estimate of E[exp(X)] with standard error and dominance share."""
    X = np.asarray(X, dtype=float)
    M = X.size
    with np.errstate(over="raise"):
        try:
            lse = logsumexp(X)
        except FloatingPointError as exc:  # pragma: no cover - logsumexp is stable
            raise DivergentMomentError("exponential moment numerically divergent") from exc
    if not np.isfinite(lse):
        raise DivergentMomentError("exponential moment numerically divergent")
    log_mean = lse - math.log(M)
    if log_mean > 700:
        raise DivergentMomentError("exponential moment numerically divergent")
    w = np.exp(X - X.max())
    mean = math.exp(log_mean)
    rel = w / w.mean()
    se = mean * float(np.std(rel, ddof=1)) / math.sqrt(M) if M > 1 else 0.0
    share = float(w.max() / w.sum())
    return mean, se, log_mean, share, share <= dominance


def fernique_estimate(K: float, lam: float, p: OUParams, dominance: float = 0.5) -> FerniqueEstimate:
    """Estimate E[exp(K int_0^T ||Z^lam||_E^2 dt)]."""
    if K < 0:
        raise ValueError("K must be non-negative")
    q = p.replace(spectrum=p.spectrum.with_lambda(float(lam)))
    if K == 0 or not np.any(q.spectrum.a[: q.spectrum.n_z] > 0):
        return FerniqueEstimate(K, lam, 1.0, 0.0, 0.0, 1.0 / p.M, True)
    I = l2E_integrals(sample_ensemble(q))
    mean, se, lm, share, ok = exp_moment(K * I, dominance)
    return FerniqueEstimate(K, float(lam), mean, se, lm, share, ok)


@dataclass(frozen=True)
class Calibration:
    K: float
    lam0: float
    r: float
    table: list


def calibration_radius(K: float) -> float:
    return 1.0 / (8.0 * math.sqrt(K))


def calibrate_lambda(K: float, p: OUParams, lam_grid, conf: float = 0.95, event: str = "norm") -> Calibration:
    """Smallest grid lambda whose lower Wilson bound on P(small noise) clears
    1/(exp(-3/2)+1).

    ``event="norm"`` uses {||Z||_{L2(0,T;E)} <= r}; ``event="integral"`` uses
    the literal {int ||Z||_E^2 dt <= r}.
    """
    lam_grid = [float(x) for x in lam_grid]
    if any(b <= a for a, b in zip(lam_grid, lam_grid[1:])):
        raise ValueError("lambda grid must be increasing")
    if K <= 0:
        raise ValueError("K must be positive")
    r = calibration_radius(K)
    level = r * r if event == "norm" else r
    table = []
    for lam in lam_grid:
        q = p.replace(spectrum=p.spectrum.with_lambda(lam))
        if not np.any(q.spectrum.a[: q.spectrum.n_z] > 0):
            table.append({"lam": lam, "p_hat": 1.0, "ci_low": 1.0, "ci_high": 1.0})
            return Calibration(K, lam, r, table)
        I = l2E_integrals(sample_ensemble(q))
        k = int(np.sum(I <= level))
        lo, hi = wilson_interval(k, p.M, conf)
        table.append({"lam": lam, "p_hat": k / p.M, "ci_low": float(lo), "ci_high": float(hi)})
        if lo >= CALIBRATION_THRESHOLD:
            return Calibration(K, lam, r, table)
    raise CalibrationError(f"calibration failed on grid (K={K}, max lambda {lam_grid[-1]:g})")


# -- Z^lam written through Z^0 ------------------------------------------------

def coupled_paths(lam: float, p: OUParams, refine: int = 1, finest: int | None = None, paths=None):
    """Z^0 and Z^lam on the grid of ``p`` refined ``refine`` times, driven by
    one Brownian path per (path, mode).

    Brownian increments are drawn on the grid refined ``finest`` times and
    summed in blocks, so every refinement level sees the same Brownian path.
    Each process uses the exponential midpoint rule
    ``Z_{j+1} = exp(-b h) Z_j + exp(-b h / 2) sqrt(a) dW_j``.
    """
    s = p.spectrum
    finest = refine if finest is None else finest
    if finest % refine:
        raise ValueError("finest must be a multiple of refine")
    paths = np.arange(p.M) if paths is None else np.asarray(paths)
    J = p.n_steps * refine
    h = p.dt / refine
    dWf = rng.keyed_normals(p.seed, paths, p.n_steps * finest, s.n_z, rng.STREAM_BROWNIAN)
    dW = dWf.reshape(paths.size, J, finest // refine, s.n_z).sum(axis=2) * math.sqrt(p.dt / finest)
    al = s.alphas_sq[: s.n_z]
    sa = np.sqrt(s.a[: s.n_z])

    def run(b):
        z = np.zeros((paths.size, J + 1, s.n_z))
        dec, half = np.exp(-b * h), np.exp(-0.5 * b * h)
        for j in range(J):
            z[:, j + 1] = dec * z[:, j] + half * sa * dW[:, j]
        return z

    return h * np.arange(J + 1), run(al), run(al + lam)


def r0_identity_rhs(z0, lam: float, alphas_sq, h: float):
    """Z^0_t - lam int_0^t exp(-(alpha^2+lam)(t-s)) Z^0_s ds, trapezoid in s."""
    J1 = z0.shape[-2]
    b = alphas_sq + lam
    out = np.empty_like(z0)
    out[..., 0, :] = z0[..., 0, :]
    # recursive trapezoid: C_{j+1} = e^{-bh} C_j + h/2 (e^{-bh} Z_j + Z_{j+1})
    conv = np.zeros(z0.shape[:-2] + (z0.shape[-1],))
    dec = np.exp(-b * h)
    for j in range(J1 - 1):
        conv = dec * conv + 0.5 * h * (dec * z0[..., j, :] + z0[..., j + 1, :])
        out[..., j + 1, :] = z0[..., j + 1, :] - lam * conv
    return out


def r0_identity_residual(lam: float, p: OUParams, refine: int = 1, finest: int | None = None) -> float:
    """Mean over paths of sup_t ||Z^lam_t - (Z^0_t - lam conv)||_H."""
    _, z0, zl = coupled_paths(lam, p, refine, finest)
    rhs = r0_identity_rhs(z0, lam, p.spectrum.alphas_sq[: p.spectrum.n_z], p.dt / refine)
    err = np.sqrt(np.sum((zl - rhs) ** 2, axis=-1)).max(axis=-1)
    return float(err.mean())


def observed_order(hs, errs) -> float:
    """Least-squares slope of log(err) against log(h)."""
    x, y = np.log(np.asarray(hs)), np.log(np.asarray(errs))
    return float(np.polyfit(x, y, 1)[0])


# -- spatial regularity of the torus noise ----------------------------------

def holder_pairs(d: int, deltas, n_dir: int = 8, seed: int = 0):
    """Point pairs with prescribed separations, keyed deterministically."""
    g = np.random.default_rng(seed)
    pairs = []
    for dl in deltas:
        for _ in range(n_dir):
            x = g.uniform(0, 2 * np.pi, d)
            u = g.normal(size=d)
            u /= np.linalg.norm(u)
            pairs.append((x, x + dl * u))
    return pairs


def holder_constant(basis: TorusBasis, eps: float) -> float:
    """C with |e_i(x)-e_i(y)|^2 <= C alpha_i^(eps/4) |x-y|^(eps/4).

    From |e(x)-e(y)| <= norm * min(2, |k||x-y|) and min(2, u) <= 2^(1-th) u^th
    with th = eps/8; the nu factor converts |k| into alpha.
    """
    th = eps / 8.0
    return basis.norm_const**2 * 2.0 ** (2 - 2 * th) * basis.nu ** (-eps / 8.0)


def holder_c1(s: Spectrum, eps: float, lam: float | None = None) -> float:
    """Closed-form C_1(lam) = (C/2) sum a_i alpha_i^(eps/4) / (alpha_i^2 + lam)."""
    lam = s.lam if lam is None else lam
    n = s.n_z
    al = s.alphas_sq[:n]
    C = holder_constant(s.basis, eps)
    return float(0.5 * C * np.sum(s.a[:n] * al ** (eps / 8.0) / (al + lam)))


def holder_probe(basis: TorusBasis, lam: float, t: float, pairs, p: OUParams, eps: float, conf: float = 0.95):
    """Monte-Carlo increment law E|Z_t(x) - Z_t(y)|^2 against |x - y|.

    Returns the per-pair estimates, the log-log regression exponent with its
    confidence interval, and the comparison with C_1(lam) |x-y|^(eps/4).
    """
    s = p.spectrum.with_lambda(lam)
    q = p.replace(spectrum=s, T=max(t, p.dt))
    ens = sample_ensemble(q)
    j = int(round(t / p.dt))
    z = ens.values[:, j, :]
    n = s.n_z
    x = np.array([a for a, _ in pairs])
    y = np.array([b for _, b in pairs])
    dist = np.linalg.norm(x - y, axis=1)
    diff = basis.values(x, n) - basis.values(y, n)  # (n, P, d)
    incr = np.einsum("mi,ipd->mpd", z, diff)
    sq = np.sum(incr**2, axis=-1)  # (M, P)
    est = sq.mean(axis=0)
    se = sq.std(axis=0, ddof=1) / math.sqrt(sq.shape[0])
    var_modes = mode_variance(np.arange(n), j * p.dt, s)
    exact = np.einsum("i,ipd->p", var_modes, diff**2)
    c1 = holder_c1(s, eps, lam)
    bound = c1 * dist ** (eps / 4.0)
    keep = (dist > 0) & (est > 0)
    res = {"dist": dist, "estimate": est, "std_error": se, "exact": exact, "C1": c1, "bound": bound,
           "bound_ok": bool(np.all(est - 3 * se <= bound))}
    if keep.sum() >= 3:
        lr = stats.linregress(np.log(dist[keep]), np.log(est[keep]))
        tq = stats.t.ppf(0.5 + conf / 2.0, keep.sum() - 2)
        res.update(exponent=float(lr.slope), exponent_ci=(float(lr.slope - tq * lr.stderr),
                                                          float(lr.slope + tq * lr.stderr)))
        res["exponent_ok"] = res["exponent_ci"][1] >= eps / 4.0
    return res
