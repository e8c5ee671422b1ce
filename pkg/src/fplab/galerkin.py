"""Galerkin random ODE for V_n driven by sampled OU paths, plus the a-priori
estimate monitors (energy inequality, Gronwall envelope, moment scan,
V-norm budget).

The equation is ``V' = -alpha^2 V + f_n(V + Z, t) + lam pi_n Z`` per path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .drift import DriftModel
from .errors import NumericalBlowUp
from .ou import OUParams, OUPathEnsemble, sample_ensemble, trapezoid
from .spectrum import Spectrum, e_norm, h_norm, v_norm_sq


def phi1(x):
    """(exp(x) - 1) / x, with the removable singularity at 0."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    nz = x != 0
    out[nz] = np.expm1(x[nz]) / x[nz]
    return out


@dataclass(frozen=True)
class SolverConfig:
    """``refine`` substeps per noise step (``dt_solver = dt_noise / refine``).

    ``forcing="exact"`` integrates the linear ``lam Z`` term with the exact
    joint convolution stored on the ensemble; ``"hold"`` freezes Z at the
    left grid value for that term too.  The nonlinearity always sees the
    left value of Z.
    """

    n_v: int
    lam: float | None = None
    refine: int = 1
    method: str = "expeuler"
    forcing: str = "exact"
    adaptive: bool = False
    tol: float = 1e-6
    max_halvings: int = 8
    ceiling: float = 1e8
    on_blowup: str = "raise"

    def __post_init__(self):
        if self.method not in ("expeuler", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.forcing not in ("exact", "hold"):
            raise ValueError(f"unknown forcing {self.forcing!r}")
        if self.on_blowup not in ("raise", "mask"):
            raise ValueError("on_blowup must be 'raise' or 'mask'")
        if self.refine < 1 or self.n_v < 1:
            raise ValueError("refine and n_v must be positive")


@dataclass(eq=False)
class Trajectory:
    grid: np.ndarray
    V: np.ndarray  # (M, J+1, n_v)
    lam: float
    diagnostics: dict = field(default_factory=dict)
    failed: np.ndarray | None = None
    fail_time: np.ndarray | None = None

    @property
    def M(self) -> int:
        return self.V.shape[0]

    @property
    def ok(self) -> np.ndarray:
        return ~self.failed


def _pad(v, n):
    if v.shape[-1] == n:
        return v
    out = np.zeros(v.shape[:-1] + (n,))
    out[..., : v.shape[-1]] = v
    return out


class _Stepper:
    def __init__(self, model, s, cfg, n_v):
        self.model, self.s, self.cfg, self.n = model, s, cfg, n_v
        self.al = s.alphas_sq[:n_v]
        self.lam = s.lam

    def g(self, V, Z, t):
        x = Z.copy()
        x[..., : self.n] += V
        out = self.model.f(x, t, self.n)
        if self.cfg.forcing == "hold":
            out = out + self.lam * Z[..., : self.n]
        return out

    def advance(self, V, Z, t, h, nsub):
        tau = h / nsub
        e1 = np.exp(-self.al * tau)
        if self.cfg.method == "expeuler":
            w = tau * phi1(-self.al * tau)
            for r in range(nsub):
                V = e1 * V + w * self.g(V, Z, t + r * tau)
            return V
        eh = np.exp(-0.5 * self.al * tau)
        for r in range(nsub):
            tr = t + r * tau
            k1 = self.g(V, Z, tr)
            k2 = self.g(eh * (V + 0.5 * tau * k1), Z, tr + 0.5 * tau)
            k3 = self.g(eh * V + 0.5 * tau * k2, Z, tr + 0.5 * tau)
            k4 = self.g(e1 * V + tau * eh * k3, Z, tr + tau)
            V = e1 * V + tau / 6.0 * (e1 * k1 + 2.0 * eh * (k2 + k3) + k4)
        return V


def integrate_v(v0, ens: OUPathEnsemble, model: DriftModel, cfg: SolverConfig) -> Trajectory:
    """Integrate every path of ``ens`` from ``v0`` (shape ``(n_v,)`` or ``(M, n_v)``).

    A single path may be passed as an ensemble with ``M = 1``.
    """
    s = ens.spectrum
    if cfg.lam is not None and not math.isclose(cfg.lam, s.lam, rel_tol=0, abs_tol=1e-12):
        raise ValueError(f"solver lambda {cfg.lam} does not match noise lambda {s.lam}")
    n = cfg.n_v
    if n > s.n_z:
        raise ValueError(f"n_v={n} exceeds the noise truncation n_z={s.n_z}")
    if cfg.forcing == "exact" and ens.conv is None and s.lam != 0:
        raise ValueError("exact forcing needs an ensemble sampled with_convolution=True")
    Zs = ens.values
    M, J1, _ = Zs.shape
    h = ens.params.dt
    grid = ens.grid
    V = np.empty((M, J1, n))
    V[:, 0] = np.broadcast_to(np.asarray(v0, dtype=float)[..., :n], (M, n))
    st = _Stepper(model, s, cfg, n)
    al = s.alphas_sq[:n]
    lam = s.lam
    exact_lin = cfg.forcing == "exact" and lam != 0
    if exact_lin:
        lin_z = np.exp(-al * h) * -np.expm1(-lam * h)
    failed = np.zeros(M, dtype=bool)
    fail_time = np.full(M, np.nan)
    cur = V[:, 0].copy()
    for j in range(J1 - 1):
        Z = Zs[:, j]
        t = grid[j]
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = st.advance(cur, Z, t, h, cfg.refine)
            if cfg.adaptive:
                nsub = cfg.refine
                for _ in range(cfg.max_halvings):
                    fine = st.advance(cur, Z, t, h, 2 * nsub)
                    err = np.max(np.abs(fine - nxt), axis=-1)
                    scale = 1.0 + np.max(np.abs(fine), axis=-1)
                    nxt, nsub = fine, 2 * nsub
                    if np.all((err <= cfg.tol * scale) | ~np.isfinite(err)):
                        break
            if exact_lin:
                nxt = nxt + lin_z * Z[:, :n] + ens.conv[:, j, :n]
        bad = ~np.all(np.isfinite(nxt), axis=-1) | (h_norm(np.nan_to_num(nxt, nan=np.inf)) > cfg.ceiling)
        new = bad & ~failed
        if np.any(new):
            if cfg.on_blowup == "raise":
                raise NumericalBlowUp(
                    f"numerical blow-up at t={grid[j + 1]:.6g} on {int(new.sum())} path(s)",
                    time=float(grid[j + 1]), paths=np.flatnonzero(new))
            failed |= new
            fail_time[new] = grid[j + 1]
        nxt[failed] = 0.0
        V[:, j + 1] = nxt
        cur = nxt
    V[failed] = np.nan
    traj = Trajectory(grid, V, lam, failed=failed, fail_time=fail_time)
    traj.diagnostics = trajectory_diagnostics(traj, ens, model)
    return traj


def trajectory_diagnostics(traj: Trajectory, ens: OUPathEnsemble, model: DriftModel) -> dict:
    """Per-grid-point ||V||_H, ||V||_V^2 and <f_n(V+Z), V>."""
    s = ens.spectrum
    V = np.nan_to_num(traj.V)
    n = V.shape[-1]
    x = ens.values.copy()
    x[..., :n] += V
    fv = np.empty(V.shape[:2])
    for j, t in enumerate(traj.grid):
        fv[:, j] = np.sum(model.f(x[:, j], t, n) * V[:, j], axis=-1)
    out = {"h_norm": h_norm(V), "v_norm_sq": v_norm_sq(V, s), "f_dot_v": fv}
    for k in out:
        out[k][traj.failed] = np.nan
    return out


def noise_norms(ens: OUPathEnsemble, grid: int | None = None) -> np.ndarray:
    """||Z_t||_E at every grid point, shape (M, J+1)."""
    return np.asarray(e_norm(ens.values, ens.spectrum, grid)).reshape(ens.values.shape[:2])


def h_over_e(s: Spectrum) -> float:
    """kappa with ||z||_H <= kappa ||z||_E."""
    return math.sqrt(s.basis.volume) if s.basis is not None else 1.0


def energy_constant(eta: float, C: float) -> float:
    """Constant of the per-path energy inequality implied by coercivity (eta <= 1/2)."""
    if not 0 <= eta <= 0.5:
        raise ValueError("eta must lie in [0, 1/2]")
    return 2.0 * C + 1.0


def _energy_pieces(traj, ens, k0, zE=None):
    zE = noise_norms(ens) if zE is None else zE
    h2 = traj.diagnostics["h_norm"] ** 2
    return zE, h2


def energy_inequality_monitor(traj: Trajectory, ens: OUPathEnsemble, model: DriftModel, C: float,
                              zE=None) -> np.ndarray:
    """Step-integrated margin of

        d/dt ||V||^2 + ||V||_V^2 <= C ||V||^2 (||Z||_E^2 + 1)
                                     + (C + kappa^2 lam^2)(||Z||_E^k0 + 1)

    over every step ``[t_j, t_{j+1}]``.  The left side uses the exact
    change in ``||V||^2`` plus the integral of ``||V||_V^2`` along the linear
    interpolant; the right side is a trapezoid.  Shape ``(M, J)``.
    """
    s = ens.spectrum
    h = ens.params.dt
    zE, h2 = _energy_pieces(traj, ens, model.k0, zE)
    V = traj.V
    al = s.alphas_sq[: V.shape[-1]]
    lin = h / 3.0 * np.sum(al * (V[:, :-1] ** 2 + V[:, :-1] * V[:, 1:] + V[:, 1:] ** 2), axis=-1)
    lhs = h2[:, 1:] - h2[:, :-1] + lin
    g = C * h2 * (zE**2 + 1.0) + (C + h_over_e(s) ** 2 * s.lam**2) * (zE**model.k0 + 1.0)
    rhs = 0.5 * h * (g[:, 1:] + g[:, :-1])
    return rhs - lhs


def fit_energy_constant(traj, ens, model, safety: float = 2.0, zE=None) -> float:
    """Smallest C making every step margin of the energy monitor non-negative."""
    s = ens.spectrum
    h = ens.params.dt
    zE, h2 = _energy_pieces(traj, ens, model.k0, zE)
    m0 = energy_inequality_monitor(traj, ens, model, 0.0, zE)  # rhs part with C=0 minus lhs
    unit = h2 * (zE**2 + 1.0) + zE**model.k0 + 1.0
    per = 0.5 * h * (unit[:, 1:] + unit[:, :-1])
    need = np.nanmax(-m0 / per)
    return safety * max(0.0, float(need))


def gronwall_envelope(traj: Trajectory, ens: OUPathEnsemble, Cbar: float, C: float, k0: float,
                      zE=None) -> dict:
    """Envelope exp(I/2) [||V_0|| + (int (C + kappa^2 lam^2)(||Z||^k0 + 1))^(1/2)],
    I(0, t) = Cbar int_0^t (||Z||_E^2 + 1); evaluated in log form.
    """
    s = ens.spectrum
    h = ens.params.dt
    zE = noise_norms(ens) if zE is None else zE
    I = Cbar * _cumtrapz(zE**2 + 1.0, h)
    src = _cumtrapz((C + h_over_e(s) ** 2 * s.lam**2) * (zE**k0 + 1.0), h)
    v0 = traj.diagnostics["h_norm"][:, :1]
    log_env = 0.5 * I + np.log(v0 + np.sqrt(src) + 1e-300)
    vn = traj.diagnostics["h_norm"]
    with np.errstate(divide="ignore"):
        ok = np.log(vn) <= log_env + 1e-12
    ok = ok | ~np.isfinite(vn)
    return {"log_envelope": log_env, "dominated": np.all(ok, axis=-1), "dominated_all": bool(np.all(ok))}


def _cumtrapz(y, h):
    out = np.zeros_like(y)
    out[..., 1:] = np.cumsum(0.5 * h * (y[..., 1:] + y[..., :-1]), axis=-1)
    return out


def vnorm_budget_check(traj: Trajectory, ens: OUPathEnsemble, C: float, k0: float, zE=None) -> np.ndarray:
    """C sup ||V||^4 + (int ||Z||_E^max(k0,2))^2 + C - int ||V||_V^2, per path."""
    h = ens.params.dt
    zE = noise_norms(ens) if zE is None else zE
    lhs = trapezoid(traj.diagnostics["v_norm_sq"], h)
    sup4 = np.max(traj.diagnostics["h_norm"], axis=-1) ** 4
    zint = trapezoid(zE ** max(k0, 2.0), h)
    return C * sup4 + zint**2 + C - lhs


def fit_budget_constant(traj, ens, k0, safety: float = 2.0, zE=None) -> float:
    h = ens.params.dt
    zE = noise_norms(ens) if zE is None else zE
    lhs = trapezoid(traj.diagnostics["v_norm_sq"], h)
    sup4 = np.max(traj.diagnostics["h_norm"], axis=-1) ** 4
    zint = trapezoid(zE ** max(k0, 2.0), h)
    return safety * max(0.0, float(np.nanmax((lhs - zint**2) / (sup4 + 1.0))))


@dataclass
class MomentRow:
    n: int
    estimate: float
    ci_low: float
    ci_high: float
    norm_p: float
    blowups: int
    M: int


def moment_estimate(sup_norms, p: float, conf: float = 0.95):
    """Mean of sup||V||^p with a t-interval."""
    x = np.asarray(sup_norms, dtype=float) ** p
    m = float(x.mean())
    if x.size < 2:
        return m, m, m
    half = stats.t.ppf(0.5 + conf / 2.0, x.size - 1) * x.std(ddof=1) / math.sqrt(x.size)
    return m, m - half, m + half


def moment_scan(n_list, p: float, noise: OUParams, model_factory, v0_factory, cfg: SolverConfig,
                conf: float = 0.95, ens: OUPathEnsemble | None = None) -> list[MomentRow]:
    """E[sup_t ||V_n(t)||^p] for each n, all n sharing one noise ensemble.

    ``model_factory(n)`` returns the drift for truncation ``n`` and
    ``v0_factory(n)`` the initial coefficients (shape ``(M, n)`` or ``(n,)``).
    """
    if ens is None:
        ens = sample_ensemble(noise, with_convolution=True)
    rows = []
    for n in n_list:
        c = SolverConfig(n, cfg.lam, cfg.refine, cfg.method, cfg.forcing, cfg.adaptive, cfg.tol,
                         cfg.max_halvings, cfg.ceiling, "mask")
        tr = integrate_v(v0_factory(n), ens, model_factory(n), c)
        sup = np.max(tr.diagnostics["h_norm"][tr.ok], axis=-1)
        est, lo, hi = moment_estimate(sup, p, conf)
        rows.append(MomentRow(int(n), est, lo, hi, est ** (1.0 / p) if est > 0 else 0.0,
                              int(tr.failed.sum()), int(tr.M)))
    return rows


def overlapping(rows) -> bool:
    """True when all confidence intervals share a common point."""
    return max(r.ci_low for r in rows) <= min(r.ci_high for r in rows)
