"""Experiment configuration, the noise -> solver -> measure pipeline, and
run manifests."""

from __future__ import annotations

import copy
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, io
from .drift import LinearGrowthDrift, NavierStokesDrift, fit_coercivity_constant, growth_bound_check, random_fields
from .errors import ConfigError
from .galerkin import (SolverConfig, energy_inequality_monitor, fit_budget_constant, fit_energy_constant,
                       gronwall_envelope, integrate_v, noise_norms, Trajectory, trajectory_diagnostics,
                       vnorm_budget_check)
from .measure import (CylindricalTestFn, EmpiricalProductMeasure, Factor, fpe_residual, fpe_tilde_residual,
                      gaussian_product, empirical_sampler, lift_initial, marginal_gaussian_check, point_mass,
                      pushforward_sum, tightness_functional, time_series)
from .ou import OUParams, OUPathEnsemble, calibrate_lambda, sample_ensemble, truncation_tail
from .spectrum import GammaWeights, Spectrum, build_torus_basis, trace_tail_report

BLOCK = 256  # paths per work unit; fixed so thread count never changes results
CAL_SEED_SALT = 0x5BD1E995

_factor = {
    "type": "object",
    "required": ["kind", "block", "index", "p1", "p2"],
    "properties": {
        "kind": {"enum": ["bell", "trig"]},
        "block": {"enum": ["x", "v", "z", "sum"]},
        "index": {"type": "integer", "minimum": 0},
        "p1": {"type": "number"},
        "p2": {"type": "number"},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "fplab experiment configuration",
    "type": "object",
    "required": ["example", "T", "dt_noise", "M", "seed"],
    "properties": {
        "example": {"enum": ["linear-growth", "navier-stokes"]},
        "d": {"enum": [2, 3]},
        "kmax": {"type": "number", "minimum": 1},
        "eps": {"type": "number"},
        "nu": {"type": "number", "exclusiveMinimum": 0},
        "modes": {"type": "integer", "minimum": 1},
        "alphas_sq": {"type": "array", "items": {"type": "number"}},
        "noise": {"type": "array", "items": {"type": "number"}},
        "drift": {
            "type": "object",
            "properties": {"kind": {"enum": ["tanh", "rotation"]}, "C": {"type": "number", "minimum": 0}},
            "additionalProperties": False,
        },
        "T": {"type": "number"},
        "dt_noise": {"type": "number"},
        "dt_solver": {"type": "number"},
        "n_v": {"type": "integer"},
        "n_z": {"type": "integer"},
        "M": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "lambda": {
            "type": "object",
            "required": ["policy"],
            "properties": {
                "policy": {"enum": ["fixed", "calibrate"]},
                "value": {"type": "number"},
                "K": {"type": "number"},
                "grid": {"type": "array", "items": {"type": "number"}},
                "M": {"type": "integer", "minimum": 10},
                "event": {"enum": ["norm", "integral"]},
            },
            "additionalProperties": False,
        },
        "initial": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["point", "gaussian", "empirical"]},
                "x0": {"type": "array", "items": {"type": "number"}},
                "sigma": {"oneOf": [{"type": "number"}, {"type": "array", "items": {"type": "number"}}]},
                "modes": {"type": "integer", "minimum": 1},
                "path": {"type": "string"},
                "p1": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "lift": {
            "type": "object",
            "properties": {"mode": {"enum": ["dirac-second", "product-first", "convex"]},
                           "theta": {"type": "number"}},
            "additionalProperties": False,
        },
        "tests": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["factors"],
                "properties": {"name": {"type": "string"}, "time": {"enum": ["cos", "quad"]},
                               "factors": {"type": "array", "items": _factor}},
                "additionalProperties": False,
            },
        },
        "moment_p": {"type": "number"},
        "gamma_theta": {"type": "number", "minimum": 0},
        "pilot_M": {"type": "integer", "minimum": 2},
        "solver": {
            "type": "object",
            "properties": {
                "method": {"enum": ["expeuler", "rk4"]},
                "forcing": {"enum": ["exact", "hold"]},
                "adaptive": {"type": "boolean"},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "ceiling": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


@dataclass
class ExperimentConfig:
    raw: dict
    example: str
    T: float
    dt_noise: float
    refine: int
    M: int
    seed: int
    n_v: int
    n_z: int
    spectrum: Spectrum
    lam_policy: dict
    initial: dict
    lift: dict
    moment_p: float
    p1: float
    gamma_theta: float
    pilot_M: int
    solver: dict
    tests: list = field(default_factory=list)

    def resolved(self) -> dict:
        """Config dict with every default filled in."""
        out = copy.deepcopy(self.raw)
        out.update(n_v=self.n_v, n_z=self.n_z, dt_solver=self.dt_noise / self.refine, moment_p=self.moment_p,
                   gamma_theta=self.gamma_theta, pilot_M=self.pilot_M, solver=dict(self.solver),
                   lift=dict(self.lift), initial=dict(self.initial), **{"lambda": dict(self.lam_policy)})
        return out


def _lg_spectrum(raw, problems):
    m = raw.get("modes", len(raw["alphas_sq"]) if "alphas_sq" in raw else 2)
    al = np.asarray(raw.get("alphas_sq", [(i + 1.0) ** 2 for i in range(m)]), dtype=float)
    a = np.asarray(raw.get("noise", [1.0] * al.size), dtype=float)
    if al.size != a.size:
        problems.append("alphas_sq and noise must have equal length")
        return None
    n_z = raw.get("n_z", al.size)
    n_v = raw.get("n_v", n_z)
    try:
        return Spectrum(al, a, 0.0, n_v, n_z)
    except ValueError as exc:
        problems.append(f"[spectrum] {exc}")
        return None


def _ns_spectrum(raw, problems):
    d = raw.get("d", 2)
    eps = raw.get("eps")
    if eps is None:
        problems.append("[noise regularity] eps is required for navier-stokes")
        return None
    if d == 2 and eps <= 0:
        problems.append(f"[noise regularity] a_i = alpha_i^-eps needs eps > 0 when d = 2 (got {eps})")
    if d == 3 and eps <= 1:
        problems.append(f"[noise regularity] a_i = alpha_i^-eps needs eps > 1 when d = 3 (got {eps})")
    basis = build_torus_basis(d, raw.get("kmax", 2), raw.get("nu", 1.0))
    n_z = raw.get("n_z", basis.n_modes)
    n_v = raw.get("n_v", n_z)
    if n_z > basis.n_modes:
        problems.append(f"[truncation order] n_z={n_z} exceeds the {basis.n_modes} modes with |k| <= kmax")
        return None
    try:
        return Spectrum.torus(basis, eps, 0.0, n_v, n_z)
    except ValueError as exc:
        problems.append(f"[spectrum] {exc}")
        return None


def validate_config(raw) -> ExperimentConfig:
    """Schema plus hypothesis checks; raises ConfigError listing every problem."""
    if isinstance(raw, (str, Path)):
        raw = json.loads(Path(raw).read_text())
    v = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    problems = [f"[schema] {'/'.join(map(str, e.path)) or '<root>'}: {e.message}"
                for e in sorted(v.iter_errors(raw), key=lambda e: list(map(str, e.path)))]
    if problems:
        raise ConfigError(problems)
    raw = copy.deepcopy(raw)
    T, dt = raw["T"], raw["dt_noise"]
    if T <= 0:
        problems.append(f"[time grid] T must be positive (got {T})")
    if dt <= 0:
        problems.append(f"[time grid] dt_noise must be positive (got {dt})")
    refine = 1
    if T > 0 and dt > 0:
        J = T / dt
        if abs(J - round(J)) > 1e-9 * max(1.0, J):
            problems.append(f"[time grid] dt_noise={dt} does not divide T={T}")
        ds = raw.get("dt_solver", dt)
        if ds <= 0:
            problems.append(f"[time grid] dt_solver must be positive (got {ds})")
        elif ds > dt * (1 + 1e-12):
            problems.append("[time grid] dt_solver must not exceed dt_noise")
        else:
            r = dt / ds
            refine = int(round(r))
            if abs(r - refine) > 1e-9 * r:
                problems.append("[time grid] dt_noise must be an integer multiple of dt_solver")
    if raw.get("n_z") is not None and raw.get("n_v") is not None and raw["n_z"] < raw["n_v"]:
        problems.append(f"[truncation order] n_z={raw['n_z']} must be >= n_v={raw['n_v']}")
    for k in ("n_v", "n_z"):
        if k in raw and raw[k] < 1:
            problems.append(f"[truncation order] {k} must be positive")
    if problems:
        raise ConfigError(problems)
    example = raw["example"]
    s = _ns_spectrum(raw, problems) if example == "navier-stokes" else _lg_spectrum(raw, problems)
    if s is not None and example == "linear-growth":
        rep = trace_tail_report(s)
        share = max(1, round(0.1 * rep["n"])) / rep["n"]
        if rep["relative_tail"] >= share:
            problems.append(f"[trace condition] terms a_i / alpha_i^2 are not decaying: the last tenth of the "
                            f"modes carries {rep['relative_tail']:.2f} of the partial sum")
    p0 = 2.0 if example == "navier-stokes" else 1.0
    init = dict(raw.get("initial", {"kind": "point", "x0": []}))
    p1 = float(init.get("p1", math.inf if init["kind"] in ("point", "gaussian") else 2.0 * p0 + 1))
    if math.isfinite(p1):
        init["p1"] = p1
    mp = float(raw.get("moment_p", p0 + 0.5))
    if not p0 < mp < p1:
        problems.append(f"[moment window] moment_p={mp} must lie in (p0, p1) = ({p0}, {p1})")
    if init["kind"] == "empirical" and "path" not in init:
        problems.append("[initial measure] empirical initial measure needs 'path'")
    lift = {"mode": "product-first", "theta": 0.5, **raw.get("lift", {})}
    if not 0 <= lift["theta"] <= 1:
        problems.append("[initial lift] theta must lie in [0, 1]")
    lam = {"policy": "fixed", "value": 0.0, **raw.get("lambda", {})}
    if lam["policy"] == "fixed" and lam.get("value", 0.0) < 0:
        problems.append("[shift] lambda must be non-negative")
    if lam["policy"] == "calibrate":
        grid = lam.setdefault("grid", [0, 0.5, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000])
        if any(b <= a for a, b in zip(grid, grid[1:])):
            problems.append("[shift] calibration grid must be increasing")
        if "K" in lam and lam["K"] <= 0:
            problems.append("[shift] K must be positive")
        lam.setdefault("M", 1000)
        lam.setdefault("event", "norm")
    solver = {"method": "expeuler", "forcing": "exact", "adaptive": False, "tol": 1e-6, "ceiling": 1e8,
              **raw.get("solver", {})}
    tests = []
    for i, t in enumerate(raw.get("tests", [])):
        try:
            tests.append(CylindricalTestFn(tuple(Factor(**f) for f in t["factors"]), T, t.get("time", "cos"),
                                           t.get("name", f"u{i}")))
        except ValueError as exc:
            problems.append(f"[test function {i}] {exc}")
    if s is not None:
        for u in tests:
            if u.max_index("v", "sum", "x") > s.n_v or u.max_index("z") > s.n_z:
                problems.append(f"[test function {u.name}] reads coordinates beyond the truncation")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(raw, example, float(T), float(dt), refine, int(raw["M"]), int(raw["seed"]),
                            s.n_v, s.n_z, s, lam, init, lift, mp, p1, float(raw.get("gamma_theta", 0.5)),
                            int(raw.get("pilot_M", 64)), solver, tests)


# -- pipeline ----------------------------------------------------------------------

def build_drift(cfg: ExperimentConfig, n_out: int | None = None):
    s = cfg.spectrum
    if cfg.example == "navier-stokes":
        return NavierStokesDrift(s.basis, s.n_z, s.n_v if n_out is None else n_out)
    d = cfg.raw.get("drift", {})
    C = float(d.get("C", 1.0))
    return LinearGrowthDrift.rotation(C) if d.get("kind") == "rotation" else LinearGrowthDrift.tanh(C)


def initial_sampler(cfg: ExperimentConfig):
    init = cfg.initial
    n = cfg.n_v
    if init["kind"] == "point":
        x0 = np.zeros(n)
        given = np.asarray(init.get("x0", []), dtype=float)[:n]
        x0[: given.size] = given
        return point_mass(x0)
    if init["kind"] == "gaussian":
        sig = init.get("sigma", 1.0)
        sig = np.full(init.get("modes", n), float(sig)) if np.isscalar(sig) else np.asarray(sig, dtype=float)
        full = np.zeros(n)
        full[: min(n, sig.size)] = sig[:n]
        return gaussian_product(full)
    rows = np.atleast_2d(np.loadtxt(init["path"], delimiter=",", ndmin=2))
    full = np.zeros((rows.shape[0], n))
    full[:, : min(n, rows.shape[1])] = rows[:, :n]
    return empirical_sampler(full)


def default_tests(cfg: ExperimentConfig, lam: float) -> list:
    """Six test functions with widths matched to the stationary scales."""
    s = cfg.spectrum
    n = cfg.n_v
    al, a = s.alphas_sq, s.a
    sig0 = np.zeros(n)
    if cfg.initial["kind"] == "gaussian":
        g = cfg.initial.get("sigma", 1.0)
        g = np.full(cfg.initial.get("modes", n), float(g)) if np.isscalar(g) else np.asarray(g, dtype=float)
        sig0[: min(n, g.size)] = g[:n]

    def sx(i):
        return math.sqrt(a[i] / (2.0 * al[i]) + sig0[i] ** 2)

    def sz(i):
        return math.sqrt(a[i] / (2.0 * (al[i] + lam)))

    T = cfg.T
    i = [k % n for k in range(6)]
    F = Factor
    specs = [
        ("bell-v", "cos", [F("bell", "v", i[0], 0.0, max(sx(i[0]), 1e-3))]),
        ("bell-zv", "cos", [F("bell", "z", i[0], 0.0, max(5 * sz(i[0]), 1e-3)),
                            F("bell", "v", i[1], 0.2 * sx(i[1]), max(sx(i[1]), 1e-3))]),
        ("trig-z", "cos", [F("trig", "z", i[2], 0.2 / max(sz(i[2]), 1e-9), 0.3)]),
        ("bell-sum", "cos", [F("bell", "sum", i[0], 0.0, max(sx(i[0]), 1e-3)),
                             F("bell", "sum", i[1], 0.3 * sx(i[1]), max(sx(i[1]), 1e-3))]),
        ("trig-sum", "cos", [F("trig", "sum", i[3], 1.0 / max(sx(i[3]), 1e-9), 0.2)]),
        ("bell-v-trig-z", "quad", [F("bell", "v", i[4], 0.1 * sx(i[4]), max(sx(i[4]), 1e-3)),
                                   F("trig", "z", i[5], 0.2 / max(sz(i[5]), 1e-9), 0.0)]),
    ]
    out = []
    for name, time, fs in specs:
        seen, keep = set(), []
        for f in fs:
            key = {("v", f.index), ("z", f.index)} if f.block == "sum" else {(f.block, f.index)}
            if not (seen & key):
                keep.append(f)
                seen |= key
        out.append(CylindricalTestFn(tuple(keep), T, time, name))
    return out


def _blocks(M, offset=0):
    return [np.arange(lo, min(M, lo + BLOCK)) + offset for lo in range(0, M, BLOCK)]


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def simulate(cfg: ExperimentConfig, lam: float, paths, threads: int = 1, seed: int | None = None):
    """Noise ensemble and trajectories for the given global path indices."""
    s = cfg.spectrum.with_lambda(lam)
    seed = cfg.seed if seed is None else seed
    p = OUParams(s, cfg.T, cfg.dt_noise, seed, max(1, len(paths)))
    model = build_drift(cfg)
    sampler = lift_initial(initial_sampler(cfg), cfg.lift["mode"], cfg.lift["theta"])
    sv = SolverConfig(cfg.n_v, lam, cfg.refine, cfg.solver["method"], cfg.solver["forcing"],
                      cfg.solver["adaptive"], cfg.solver["tol"], ceiling=cfg.solver["ceiling"])
    paths = np.asarray(paths)
    v0_all, z0_all = sampler(int(paths.max()) + 1 if paths.size else 0, seed)

    def job(block):
        v0, z0 = v0_all[block], z0_all[block]
        zz = np.zeros((block.size, s.n_z))
        zz[:, : z0.shape[1]] = z0
        ens = sample_ensemble(p, paths=block, with_convolution=True, z0=None if not np.any(zz) else zz)
        return ens, integrate_v(v0, ens, model, sv)

    start = paths.min() if paths.size else 0
    blocks = [paths[(paths >= b0) & (paths < b0 + BLOCK)] for b0 in range(start, start + paths.size, BLOCK)]
    parts = _map(job, [b for b in blocks if b.size], threads)
    vals = np.concatenate([e.values for e, _ in parts])
    conv = np.concatenate([e.conv for e, _ in parts])
    ens = OUPathEnsemble(p.grid, vals, p.replace(M=vals.shape[0]), paths, conv)
    V = np.concatenate([t.V for _, t in parts])
    failed = np.concatenate([t.failed for _, t in parts])
    ft = np.concatenate([t.fail_time for _, t in parts])
    traj = Trajectory(p.grid, V, lam, failed=failed, fail_time=ft)
    traj.diagnostics = {k: np.concatenate([t.diagnostics[k] for _, t in parts]) for k in parts[0][1].diagnostics}
    return ens, traj, model


def pilot_constants(cfg: ExperimentConfig, lam: float, threads: int = 1) -> dict:
    """Audit constants fitted on independent pilot paths (global indices M..M+pilot_M)."""
    ens, traj, model = simulate(cfg, lam, np.arange(cfg.M, cfg.M + cfg.pilot_M), threads)
    s = ens.spectrum
    n = cfg.n_v
    step = max(1, (len(ens.grid) - 1) // 10)
    V = traj.V[:, ::step].reshape(-1, n)
    Z = ens.values[:, ::step].reshape(-1, s.n_z)
    eta = 0.5
    Cc = fit_coercivity_constant(model, V, Z, 0.0, eta, s)
    zE = noise_norms(ens)
    return {"eta": eta, "coercivity_C": Cc, "energy_C": fit_energy_constant(traj, ens, model, zE=zE),
            "budget_C": fit_budget_constant(traj, ens, model.k0, zE=zE), "pilot_M": cfg.pilot_M, "lambda": lam}


def gronwall_K(cfg: ExperimentConfig, Cc: float, young: float = 0.1) -> float:
    """K = p q Cbar / 2 with Cbar = 2 C + young and q the conjugate of p1 / p."""
    p = cfg.moment_p
    p1 = cfg.p1
    q = 1.0 if not math.isfinite(p1) else p1 / (p1 - p)
    if not math.isfinite(p1):
        q = 1.25  # any q > 1 is admissible for Gaussian or point initial data
    return p * q * (2.0 * Cc + young) / 2.0


def resolve_lambda(cfg: ExperimentConfig, threads: int = 1):
    """(lambda, calibration record or None)."""
    pol = cfg.lam_policy
    if pol["policy"] == "fixed":
        return float(pol.get("value", 0.0)), None
    K = pol.get("K")
    pilot = None
    if K is None:
        pilot = pilot_constants(cfg, 0.0, threads)
        K = gronwall_K(cfg, pilot["coercivity_C"])
    s = cfg.spectrum
    p = OUParams(s, cfg.T, cfg.dt_noise, cfg.seed ^ CAL_SEED_SALT, int(pol["M"]))
    cal = calibrate_lambda(float(K), p, pol["grid"], event=pol["event"])
    return cal.lam0, {"K": float(K), "lam0": cal.lam0, "r": cal.r, "table": cal.table, "pilot": pilot}


@dataclass
class RunManifest:
    config: dict
    version: str
    seeds: dict
    files: dict
    summary: dict

    def to_dict(self) -> dict:
        return {"config": self.config, "version": self.version, "seeds": self.seeds, "files": self.files,
                "summary": self.summary}

    @classmethod
    def load(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        return cls(d["config"], d["version"], d["seeds"], d["files"], d.get("summary", {}))

    def verify(self, root) -> dict:
        root = Path(root)
        return {name: (root / name).exists() and io.sha256(root / name) == digest
                for name, digest in self.files.items()}


def run_experiment(cfg: ExperimentConfig, out, threads: int = 1) -> RunManifest:
    """Full pipeline; writes artifacts and ``manifest.json`` into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lam, cal = resolve_lambda(cfg, threads)
    files = []
    if cal is not None:
        files.append(io.dump_json(cal, out / "calibration.json"))
    ens, traj, model = simulate(cfg, lam, np.arange(cfg.M), threads)
    s = ens.spectrum
    consts = pilot_constants(cfg, lam, threads)
    zE = noise_norms(ens)
    ok = traj.ok
    files.append(io.write_ensemble(out / "ensemble.bin", ens))
    files.extend(io.write_trajectory(out / "trajectory.bin", traj, {"lambda": lam}))
    # noise diagnostics
    J = len(ens.grid) - 1
    mu = EmpiricalProductMeasure(traj.grid, traj.V[ok], ens.values[ok], {"seed": cfg.seed, "lambda": lam})
    z_started = cfg.lift["mode"] == "product-first"
    checks = [marginal_gaussian_check(mu, s, j) for j in sorted({0, J // 4, J // 2, 3 * J // 4, J})] \
        if z_started else []
    files.append(io.write_moments_csv(out / "ou_moments.csv", checks))
    # monitors with frozen pilot constants
    Cbar = consts["energy_C"]
    energy = energy_inequality_monitor(traj, ens, model, Cbar, zE)
    gw = gronwall_envelope(traj, ens, Cbar, Cbar, model.k0, zE)
    budget = vnorm_budget_check(traj, ens, consts["budget_C"], model.k0, zE)
    growth = growth_bound_check(model, random_fields(s.n_z, 64, 2.0, cfg.seed), 0.0, cfg.n_v)
    monitors = {
        "constants": consts,
        "energy_min_margin": float(np.nanmin(energy)) if energy.size else 0.0,
        "energy_violations": int(np.sum(energy < -1e-9)),
        "gronwall_dominated": bool(gw["dominated_all"]),
        "budget_min_margin": float(np.nanmin(budget)) if budget.size else 0.0,
        "blowups": int(traj.failed.sum()),
        "trace_tail": trace_tail_report(s),
        "truncation_tail": truncation_tail(s),
        "growth_C_i": growth["C_i"],
    }
    files.append(io.dump_json(monitors, out / "monitors.json"))
    # weak-form residuals
    tests = cfg.tests or default_tests(cfg, lam)
    reports, equal = [], []
    pushed = pushforward_sum(mu)
    for u in tests:
        ut = u.lift() if u.is_x else u
        rt = fpe_tilde_residual(mu, ut, model, s)
        reports.append(rt)
        if ut.is_shift_lift:
            base = u if u.is_x else CylindricalTestFn(
                tuple(Factor(f.kind, "x", f.index, f.p1, f.p2) for f in u.factors), u.T, u.time, u.name)
            r = fpe_residual(pushed, base, model, s)
            equal.append({"test_fn_id": rt.test_fn_id, "bitwise_equal": r.residual == rt.residual})
    files.append(io.write_residuals(out / "residuals.json", reports))
    files.append(io.write_time_series(out / "time_series.csv", mu.grid,
                                      {u.name: time_series(mu, u.lift() if u.is_x else u) for u in tests}))
    tight = tightness_functional(mu, GammaWeights.power(s, cfg.gamma_theta), s)
    files.append(io.dump_json({"marginals": [{"t": c["t"], "pass": c["pass"]} for c in checks],
                               "tightness": tight, "pushforward": equal}, out / "measures.json"))
    summary = {
        "lambda": lam,
        "marginals_pass": all(c["pass"] for c in checks),
        "gronwall_dominated": monitors["gronwall_dominated"],
        "blowups": monitors["blowups"],
        "max_abs_residual_z": max((abs(r.residual) / r.std_error for r in reports if r.std_error > 0), default=0.0),
        "pushforward_equal": all(e["bitwise_equal"] for e in equal),
    }
    names = {p.name: io.sha256(p) for p in files}
    man = RunManifest(cfg.resolved(), __version__,
                      {"seed": cfg.seed, "calibration_seed": cfg.seed ^ CAL_SEED_SALT,
                       "pilot_paths": [cfg.M, cfg.M + cfg.pilot_M]}, names, summary)
    io.dump_json(man.to_dict(), out / "manifest.json")
    return man


def load_config(path) -> ExperimentConfig:
    """Accepts a config file or a run manifest (whose resolved config is reused)."""
    raw = json.loads(Path(path).read_text())
    if "config" in raw and "files" in raw:
        raw = raw["config"]
    return validate_config(raw)
