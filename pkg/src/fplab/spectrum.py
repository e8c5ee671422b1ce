"""Spectra, the ordered eigenbasis, projections and norms.

Coefficient vectors are plain numpy arrays whose last axis indexes the
ordered basis; leading axes are batch axes (paths, times).  The
:class:`FieldCoefficients` wrapper only adds a basis tag so that mixing
coefficients from different bases is caught.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AliasingError, BasisMismatchError

COS, SIN = 0, 1


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TorusBasis:
    """Real divergence-free Fourier basis on the torus [0, 2*pi]^d.

    Mode ``i`` is ``c_i * norm * cos(k_i . xi)`` or ``c_i * norm * sin(k_i . xi)``
    with ``norm = sqrt(2) / (2*pi)**(d/2)``, so each field has unit L2 norm.
    """

    d: int
    kmax: float
    nu: float
    ks: np.ndarray
    parity: np.ndarray
    pol: np.ndarray
    c: np.ndarray
    eigenvalues: np.ndarray

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    @property
    def tag(self) -> str:
        return f"torus-d{self.d}-kmax{self.kmax:g}-nu{self.nu:g}"

    @property
    def norm_const(self) -> float:
        return math.sqrt(2.0) / (2.0 * math.pi) ** (self.d / 2.0)

    @property
    def volume(self) -> float:
        return (2.0 * math.pi) ** self.d

    def max_frequency(self, n: int | None = None) -> int:
        """Largest per-axis |k_j| among the first ``n`` modes."""
        n = self.n_modes if n is None else n
        if n == 0:
            return 0
        return int(np.abs(self.ks[:n]).max())

    def min_grid(self, n: int | None = None) -> int:
        """Smallest grid with more than 2 * max frequency points per axis."""
        return 2 * self.max_frequency(n) + 1

    def grid_points(self, N: int) -> np.ndarray:
        """Uniform grid, shape (N**d, d), 'ij' ordering."""
        axis = 2.0 * np.pi * np.arange(N) / N
        mesh = np.meshgrid(*([axis] * self.d), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def _phase(self, points, n):
        return points @ self.ks[:n].T.astype(float)  # (G, n)

    def values(self, points, n: int | None = None) -> np.ndarray:
        """Basis fields at ``points``: shape (n, G, d)."""
        n = self.n_modes if n is None else n
        th = self._phase(np.atleast_2d(points), n)
        par = self.parity[:n]
        s = np.where(par == COS, np.cos(th), np.sin(th))  # (G, n)
        return self.norm_const * s.T[:, :, None] * self.c[:n, None, :]

    def gradients(self, points, n: int | None = None) -> np.ndarray:
        """Derivatives ``D[i, g, a, b] = d/dxi_a of e_i^b`` at ``points``."""
        n = self.n_modes if n is None else n
        th = self._phase(np.atleast_2d(points), n)
        par = self.parity[:n]
        ds = np.where(par == COS, -np.sin(th), np.cos(th)).T  # (n, G)
        k = self.ks[:n].astype(float)
        return self.norm_const * ds[:, :, None, None] * k[:, None, :, None] * self.c[:n, None, None, :]

    def synthesize(self, coeffs, N: int) -> np.ndarray:
        """Field values on the N-grid for coefficient array (..., n): (..., G, d)."""
        coeffs = np.asarray(coeffs, dtype=float)
        n = coeffs.shape[-1]
        if N < self.min_grid(n):
            raise AliasingError(f"grid {N} too coarse for max frequency {self.max_frequency(n)}")
        phi = self.values(self.grid_points(N), n)  # (n, G, d)
        G = phi.shape[1]
        out = coeffs.reshape(-1, n) @ phi.reshape(n, -1)
        return out.reshape(coeffs.shape[:-1] + (G, self.d))


def _polarizations(k: np.ndarray) -> list[np.ndarray]:
    d = len(k)
    kh = k / np.linalg.norm(k)
    if d == 2:
        return [np.array([-kh[1], kh[0]])]
    vecs = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        w = e - (e @ kh) * kh
        for prev in vecs:
            w = w - (w @ prev) * prev
        nrm = np.linalg.norm(w)
        if nrm > 1e-8:
            vecs.append(w / nrm)
        if len(vecs) == d - 1:
            break
    return vecs


def build_torus_basis(d: int, kmax: float, nu: float = 1.0) -> TorusBasis:
    """Ordered divergence-free basis with all ``0 < |k| <= kmax``.

    For each half-lattice representative ``k`` (first nonzero entry positive)
    there are ``d - 1`` polarizations and two parities.  Ordering: ascending
    ``|k|^2``, then ``k`` lexicographically, then parity (cos first), then
    polarization.
    """
    if d not in (2, 3):
        raise ValueError("d must be 2 or 3")
    if kmax < 1:
        raise ValueError("kmax must be >= 1")
    if nu <= 0:
        raise ValueError("nu must be positive")
    K = int(math.floor(kmax))
    rows = []
    for k in itertools.product(range(-K, K + 1), repeat=d):
        k2 = sum(x * x for x in k)
        if k2 == 0 or k2 > kmax * kmax + 1e-9:
            continue
        first = next(x for x in k if x != 0)
        if first < 0:
            continue
        pols = _polarizations(np.array(k, dtype=float))
        for par in (COS, SIN):
            for p, cvec in enumerate(pols):
                rows.append((k2, k, par, p + 1, cvec))
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    return TorusBasis(
        d=d,
        kmax=float(kmax),
        nu=float(nu),
        ks=_frozen([r[1] for r in rows], dtype=np.int64),
        parity=_frozen([r[2] for r in rows], dtype=np.int64),
        pol=_frozen([r[3] for r in rows], dtype=np.int64),
        c=_frozen([r[4] for r in rows]),
        eigenvalues=_frozen([nu * r[0] for r in rows]),
    )


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Diagonal data: eigenvalues of -A, noise weights, shift, truncations.

    ``alphas_sq`` and ``a`` may be longer than ``n_z``; only the first
    ``n_z`` entries are active.  ``basis`` is set for torus spectra and
    switches :func:`e_norm` to the sup norm.
    """

    alphas_sq: np.ndarray
    a: np.ndarray
    lam: float = 0.0
    n_v: int = 1
    n_z: int = 1
    basis: TorusBasis | None = None
    tag: str = "abstract"

    def __post_init__(self):
        object.__setattr__(self, "alphas_sq", _frozen(self.alphas_sq))
        object.__setattr__(self, "a", _frozen(self.a))
        al, a = self.alphas_sq, self.a
        if al.ndim != 1 or al.shape != a.shape:
            raise ValueError("alphas_sq and a must be 1-d of equal length")
        if al.size == 0 or al[0] <= 0:
            raise ValueError("alphas_sq[0] must be positive")
        if np.any(np.diff(al) < 0):
            raise ValueError("alphas_sq must be non-decreasing")
        if np.any(a < 0):
            raise ValueError("noise weights must be non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not (1 <= self.n_v <= self.n_z <= al.size):
            raise ValueError(f"need 1 <= n_v <= n_z <= {al.size}, got n_v={self.n_v}, n_z={self.n_z}")

    @classmethod
    def torus(cls, basis: TorusBasis, eps: float, lam: float = 0.0, n_v=None, n_z=None):
        """Navier-Stokes spectrum with noise weights ``a_i = alpha_i**(-eps)``."""
        al = np.asarray(basis.eigenvalues)
        n_z = basis.n_modes if n_z is None else n_z
        n_v = n_z if n_v is None else n_v
        return cls(al, al ** (-eps / 2.0), lam, n_v, n_z, basis, basis.tag)

    def with_lambda(self, lam: float) -> "Spectrum":
        return Spectrum(self.alphas_sq, self.a, lam, self.n_v, self.n_z, self.basis, self.tag)

    def with_truncation(self, n_v: int, n_z: int | None = None) -> "Spectrum":
        n_z = self.n_z if n_z is None else n_z
        return Spectrum(self.alphas_sq, self.a, self.lam, n_v, n_z, self.basis, self.tag)

    @property
    def rates(self) -> np.ndarray:
        """OU decay rates alpha_i^2 + lambda over the active z modes."""
        return self.alphas_sq[: self.n_z] + self.lam


@dataclass(frozen=True)
class FieldCoefficients:
    coeffs: np.ndarray
    basis_tag: str = "abstract"

    def __post_init__(self):
        object.__setattr__(self, "coeffs", _frozen(self.coeffs))

    def __len__(self):
        return self.coeffs.shape[-1]


@dataclass(frozen=True, eq=False)
class GammaWeights:
    gammas: np.ndarray = field()

    def __post_init__(self):
        g = _frozen(self.gammas)
        if g.ndim != 1 or np.any(g < 1.0):
            raise ValueError("gamma weights must be >= 1")
        if np.any(np.diff(g) < 0):
            raise ValueError("gamma weights must be non-decreasing")
        object.__setattr__(self, "gammas", g)

    @classmethod
    def power(cls, s: Spectrum, theta: float, n: int | None = None):
        """gamma_i = (alpha_i^2 / alpha_1^2)**theta."""
        n = s.n_z if n is None else n
        return cls((s.alphas_sq[:n] / s.alphas_sq[0]) ** theta)


def _unwrap(x, space=None):
    if isinstance(x, FieldCoefficients):
        if space is not None and x.basis_tag != space.tag:
            raise BasisMismatchError(f"coefficients tagged {x.basis_tag!r}, basis is {space.tag!r}")
        return x.coeffs
    return np.asarray(x, dtype=float)


def h_norm(x, space=None):
    """H norm; equals the Euclidean norm of coefficients by orthonormality."""
    c = _unwrap(x, space)
    return np.sqrt(np.sum(c * c, axis=-1))


def v_norm_sq(x, s: Spectrum):
    """sum_i alpha_i^2 x_i^2 over the coefficients present in ``x``."""
    c = _unwrap(x, s)
    n = c.shape[-1]
    if n > s.alphas_sq.size:
        raise ValueError(f"coefficient length {n} exceeds spectrum length {s.alphas_sq.size}")
    return np.sum(s.alphas_sq[:n] * c * c, axis=-1)


def e_norm(x, space, grid: int | None = None, chunk: int = 2048):
    """Norm of the Banach space E.

    For torus spectra/bases this is the maximum over a uniform grid of the
    pointwise Euclidean length of the field; otherwise E = H.
    """
    basis = space if isinstance(space, TorusBasis) else getattr(space, "basis", None)
    c = _unwrap(x, space)
    if basis is None:
        return h_norm(c)
    n = c.shape[-1]
    N = basis.min_grid(n) if grid is None else grid
    if N < basis.min_grid(n):
        raise AliasingError(f"grid {N} below {basis.min_grid(n)} for max frequency {basis.max_frequency(n)}")
    phi = basis.values(basis.grid_points(N), n).reshape(n, -1)
    flat = c.reshape(-1, n)
    out = np.empty(flat.shape[0])
    for lo in range(0, flat.shape[0], chunk):
        u = (flat[lo : lo + chunk] @ phi).reshape(-1, N**basis.d, basis.d)
        out[lo : lo + chunk] = np.sqrt(np.max(np.sum(u * u, axis=-1), axis=-1))
    return out.reshape(c.shape[:-1]) if c.ndim > 1 else float(out[0])


def trace_ratio(s: Spectrum, n: int) -> float:
    """Partial sum of a_i / alpha_i^2 over the first ``n`` modes."""
    if n > s.alphas_sq.size:
        raise ValueError("n exceeds available spectrum length")
    return float(np.sum(s.a[:n] / s.alphas_sq[:n]))


def trace_tail_report(s: Spectrum, n: int | None = None, frac: float = 0.1) -> dict:
    """Cauchy-tail surrogate: share of the partial sum carried by the last ``frac`` of modes."""
    n = s.n_z if n is None else n
    terms = s.a[:n] / s.alphas_sq[:n]
    total = float(terms.sum())
    m = max(1, int(round(frac * n)))
    tail = float(terms[n - m :].sum())
    out = {"n": n, "partial_sum": total, "tail_increment": tail,
           "relative_tail": tail / total if total > 0 else 0.0}
    return out


def ns_lattice_tail(d: int, eps: float, kmax: float) -> float:
    """Integral estimate of sum over |k| > kmax of (d-1) |k|^(-2-eps)."""
    if d == 2:
        return (d - 1) * 2.0 * math.pi * kmax ** (-eps) / eps
    if eps <= 1:
        return math.inf
    return (d - 1) * 4.0 * math.pi * kmax ** (1.0 - eps) / (eps - 1.0)


def gamma_apply(x, g: GammaWeights):
    c = _unwrap(x)
    if c.shape[-1] != g.gammas.size:
        raise ValueError(f"length mismatch: {c.shape[-1]} vs {g.gammas.size}")
    out = c * np.sqrt(g.gammas)
    if isinstance(x, FieldCoefficients):
        return FieldCoefficients(out, x.basis_tag)
    return out


def project_pi_n(x, n: int):
    """Keep the first ``n`` coefficients."""
    c = _unwrap(x)
    if n < 1 or n > c.shape[-1]:
        raise ValueError(f"projection size {n} outside [1, {c.shape[-1]}]")
    out = c[..., :n]
    if isinstance(x, FieldCoefficients):
        return FieldCoefficients(out, x.basis_tag)
    return out


# -- JSON round trips -------------------------------------------------------

def basis_to_dict(b: TorusBasis) -> dict:
    return {
        "kind": "torus_basis",
        "d": b.d,
        "kmax": b.kmax,
        "nu": b.nu,
        "modes": [
            {"k": [int(v) for v in b.ks[i]], "parity": "cos" if b.parity[i] == COS else "sin",
             "pol": int(b.pol[i]), "c": [float(v) for v in b.c[i]], "eigenvalue": float(b.eigenvalues[i])}
            for i in range(b.n_modes)
        ],
    }


def basis_from_dict(doc: dict) -> TorusBasis:
    modes = doc["modes"]
    return TorusBasis(
        d=int(doc["d"]), kmax=float(doc["kmax"]), nu=float(doc["nu"]),
        ks=_frozen([m["k"] for m in modes], dtype=np.int64).reshape(len(modes), int(doc["d"])),
        parity=_frozen([COS if m["parity"] == "cos" else SIN for m in modes], dtype=np.int64),
        pol=_frozen([m["pol"] for m in modes], dtype=np.int64),
        c=_frozen([m["c"] for m in modes]).reshape(len(modes), int(doc["d"])),
        eigenvalues=_frozen([m["eigenvalue"] for m in modes]),
    )


def spectrum_to_dict(s: Spectrum) -> dict:
    doc = {"kind": "spectrum", "tag": s.tag, "alphas_sq": s.alphas_sq.tolist(), "a": s.a.tolist(),
           "lambda": s.lam, "n_v": s.n_v, "n_z": s.n_z}
    if s.basis is not None:
        doc["basis"] = basis_to_dict(s.basis)
    return doc


def spectrum_from_dict(doc: dict) -> Spectrum:
    basis = basis_from_dict(doc["basis"]) if "basis" in doc else None
    return Spectrum(np.array(doc["alphas_sq"]), np.array(doc["a"]), float(doc["lambda"]),
                    int(doc["n_v"]), int(doc["n_z"]), basis, doc.get("tag", "abstract"))


def dumps(obj) -> str:
    if isinstance(obj, TorusBasis):
        return json.dumps(basis_to_dict(obj))
    return json.dumps(spectrum_to_dict(obj))


def loads(text: str):
    doc = json.loads(text)
    return basis_from_dict(doc) if doc["kind"] == "torus_basis" else spectrum_from_dict(doc)
