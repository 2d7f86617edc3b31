"""Probabilistically shaped QAM and its Fock-basis quantum-state picture.

Quadrature convention: a symbol ``x = p + iq`` (SNU) is sent as the coherent
state ``|alpha>`` with ``alpha = x / 2``, so the per-quadrature variance of the
symbols is ``V_A = 2 <n>``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln
from scipy.stats import poisson

from .errors import (
    ConstellationShapeError,
    DomainError,
    OptimizationError,
    TruncationError,
    ValidityError,
)

TAIL_TOL = 1e-10
NMAX_CAP = 256


@dataclass(frozen=True, eq=False)
class ConstellationSpec:
    """Square QAM lattice with a Maxwell-Boltzmann pmf.

    ``points`` holds complex symbols ``p + iq`` in SNU; the unit lattice
    ``{±1, ±3, ...}^2`` is multiplied by ``scale``.
    """

    order: int
    nu: float
    scale: float
    points: np.ndarray
    pmf: np.ndarray

    @property
    def alphas(self) -> np.ndarray:
        return self.points / 2

    @property
    def key(self) -> tuple:
        return (self.order, float(self.nu), float(self.scale))

    def to_dict(self) -> dict:
        return {
            "order": int(self.order),
            "nu": float(self.nu),
            "scale": float(self.scale),
            "points": [[float(z.real), float(z.imag)] for z in self.points],
            "pmf": [float(p) for p in self.pmf],
        }

    def to_json(self) -> str:
        # float repr is the shortest string that round-trips bit-exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ConstellationSpec":
        pts = np.asarray(d["points"], dtype=float)
        spec = cls(
            order=int(d["order"]),
            nu=float(d["nu"]),
            scale=float(d["scale"]),
            points=pts[:, 0] + 1j * pts[:, 1],
            pmf=np.asarray(d["pmf"], dtype=float),
        )
        validate_spec(spec)
        return spec

    @classmethod
    def from_json(cls, text: str) -> "ConstellationSpec":
        return cls.from_dict(json.loads(text))


class ModulationStats(NamedTuple):
    V_A: float
    n_mean: float


@dataclass(frozen=True, eq=False)
class FockVector:
    amplitudes: np.ndarray

    @property
    def nmax(self) -> int:
        return len(self.amplitudes) - 1

    def norm_deficit(self) -> float:
        return 1.0 - float(np.sum(np.abs(self.amplitudes) ** 2))


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    entries: np.ndarray

    @property
    def nmax(self) -> int:
        return self.entries.shape[0] - 1

    @classmethod
    def from_pure(cls, psi: FockVector) -> "DensityMatrix":
        a = psi.amplitudes
        return cls(np.outer(a, a.conj()))

    def trace(self) -> float:
        return float(np.trace(self.entries).real)

    def mean_photon_number(self) -> float:
        n = np.arange(self.nmax + 1)
        return float(np.real(np.diag(self.entries)) @ n)

    def validate(self, tail_tol: float = TAIL_TOL) -> None:
        m = self.entries
        if np.max(np.abs(m - m.conj().T)) > 1e-12:
            raise ValidityError("density matrix is not Hermitian")
        w = np.linalg.eigvalsh(m)
        if w[0] < -1e-10:
            raise ValidityError(f"negative eigenvalue {w[0]:.3e}")
        tr = self.trace()
        if not (1 - tail_tol - 1e-12 <= tr <= 1 + 1e-12):
            raise ValidityError(f"trace {tr!r} outside [1 - {tail_tol}, 1]")


def _side(order: int) -> int:
    if not isinstance(order, (int, np.integer)) or order < 4:
        raise ConstellationShapeError(f"invalid QAM order {order!r}")
    k = int(order).bit_length() - 1
    if 1 << k != order or k % 2:
        raise ConstellationShapeError(f"QAM order {order} is not a square of a power of two")
    return 1 << (k // 2)


def unit_lattice(order: int) -> np.ndarray:
    """Complex points of the unit square lattice {±1, ±3, ...}^2."""
    m = _side(order)
    axis = np.arange(-(m - 1), m, 2, dtype=float)
    re, im = np.meshgrid(axis, axis, indexing="ij")
    return (re + 1j * im).ravel()


def validate_spec(c: ConstellationSpec) -> None:
    """Check the pmf and lattice invariants of a spec."""
    lattice = unit_lattice(c.order)
    if c.points.shape != lattice.shape or c.pmf.shape != lattice.shape:
        raise ConstellationShapeError("points/pmf do not match the lattice size")
    if not np.allclose(c.points, c.scale * lattice, rtol=1e-12, atol=1e-12):
        raise ConstellationShapeError("points are not the scaled square lattice")
    # strong shaping on large lattices underflows the outer points to zero
    if abs(float(np.sum(c.pmf)) - 1.0) > 1e-12 or np.any(c.pmf < 0):
        raise DomainError("pmf must be nonnegative and sum to 1")


def build_pcs_qam(order: int, nu: float, target_VA: float | None = None) -> ConstellationSpec:
    """Square QAM with pmf proportional to ``exp(-nu (x^2 + y^2))`` on the unit lattice.

    If ``target_VA`` is given the lattice is scaled so the per-quadrature
    variance equals it; otherwise ``scale = 1``.
    """
    lattice = unit_lattice(order)
    if not nu >= 0:
        raise DomainError(f"nu must be nonnegative, got {nu!r}")
    if target_VA is not None and not target_VA > 0:
        raise DomainError(f"target_VA must be positive, got {target_VA!r}")
    r2 = np.abs(lattice) ** 2
    w = np.exp(-nu * (r2 - r2.min()))
    pmf = w / w.sum()
    pmf /= pmf.sum()
    if target_VA is None:
        scale = 1.0
    else:
        unit_var = float(pmf @ lattice.real**2)
        scale = math.sqrt(target_VA / unit_var)
    return ConstellationSpec(order=int(order), nu=float(nu), scale=scale, points=scale * lattice, pmf=pmf)


def modulation_stats(c: ConstellationSpec) -> ModulationStats:
    va = float(c.pmf @ c.points.real**2)
    return ModulationStats(V_A=va, n_mean=va / 2)


def sample_symbols(c: ConstellationSpec, n: int, seed) -> np.ndarray:
    """Draw ``n`` i.i.d. symbols from the constellation pmf."""
    if n < 1:
        raise DomainError("n must be at least 1")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(c.pmf), size=int(n), p=c.pmf)
    return c.points[idx]


def _fock_rows(alphas: np.ndarray, nmax: int) -> np.ndarray:
    # log-domain <n|alpha> to stay finite for |alpha|^2 up to a few hundred
    alphas = np.atleast_1d(np.asarray(alphas, dtype=complex))
    n = np.arange(nmax + 1)
    mag = np.abs(alphas)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        logamp = -(mag**2) / 2 + n * np.log(mag) - 0.5 * gammaln(n + 1)
    logamp = np.where((mag == 0) & (n == 0), 0.0, logamp)
    rows = np.exp(logamp) * np.exp(1j * n * np.angle(alphas)[:, None])
    return np.where(np.isfinite(rows), rows, 0.0)


def coherent_state_fock(alpha: complex, nmax: int) -> FockVector:
    if nmax < 0:
        raise DomainError("nmax must be nonnegative")
    return FockVector(_fock_rows(np.array([alpha]), nmax)[0])


def truncation_tail(c: ConstellationSpec, nmax: int) -> float:
    """Probability mass of the mixture above photon number ``nmax``."""
    mu = np.abs(c.alphas) ** 2
    return float(c.pmf @ poisson.sf(nmax, mu))


def thermal_tail(n_bar: float, nmax: int) -> float:
    if n_bar == 0:
        return 0.0
    return (n_bar / (n_bar + 1)) ** (nmax + 1)


def select_nmax(c: ConstellationSpec, tol: float = TAIL_TOL, cap: int = NMAX_CAP) -> int:
    """Smallest truncation whose neglected tail mass is below ``tol``."""
    mu = np.abs(c.alphas) ** 2
    ks = np.arange(cap + 1)
    tails = poisson.sf(ks[:, None], mu[None, :]) @ c.pmf
    ok = np.nonzero(tails < tol)[0]
    if len(ok) == 0:
        raise TruncationError(f"tail mass {tails[-1]:.3e} at cap nmax={cap}", tail_mass=float(tails[-1]))
    return int(ks[ok[0]])


def select_nmax_thermal(n_bar: float, tol: float = TAIL_TOL, cap: int = NMAX_CAP) -> int:
    if n_bar == 0:
        return 0
    nmax = math.ceil(math.log(tol) / math.log(n_bar / (n_bar + 1))) - 1
    nmax = max(nmax, 0)
    if nmax > cap:
        raise TruncationError(f"thermal state n_bar={n_bar} needs nmax={nmax} > {cap}",
                              tail_mass=thermal_tail(n_bar, cap))
    return nmax


def modulated_density_matrix(c: ConstellationSpec, nmax: int | None = None) -> DensityMatrix:
    """Average state ``sum_k p_k |alpha_k><alpha_k|`` in the truncated Fock basis."""
    if nmax is None:
        nmax = select_nmax(c)
    tail = truncation_tail(c, nmax)
    if tail >= TAIL_TOL:
        raise TruncationError(f"nmax={nmax} leaves tail mass {tail:.3e}", tail_mass=tail)
    rows = _fock_rows(c.alphas, nmax)
    rho = (rows.T * c.pmf) @ rows.conj()
    rho = 0.5 * (rho + rho.conj().T)
    return DensityMatrix(rho)


def thermal_state(n_bar: float, nmax: int) -> DensityMatrix:
    if n_bar < 0:
        raise DomainError("n_bar must be nonnegative")
    tail = thermal_tail(n_bar, nmax)
    if tail >= TAIL_TOL:
        raise TruncationError(f"nmax={nmax} leaves thermal tail {tail:.3e}", tail_mass=tail)
    n = np.arange(nmax + 1)
    if n_bar == 0:
        diag = (n == 0).astype(float)
    else:
        diag = np.exp(n * math.log(n_bar) - (n + 1) * math.log1p(n_bar))
    return DensityMatrix(np.diag(diag).astype(complex))


def trace_distance(rho: DensityMatrix, sigma: DensityMatrix, check: bool = True) -> float:
    """Half the trace norm of ``rho - sigma``."""
    if rho.entries.shape != sigma.entries.shape:
        raise DomainError(f"dimension mismatch {rho.entries.shape} vs {sigma.entries.shape}")
    if check:
        rho.validate()
        sigma.validate()
    w = np.linalg.eigvalsh(rho.entries - sigma.entries)
    return float(min(1.0, 0.5 * np.sum(np.abs(w))))


def shaping_objective(order: int, nu: float, target_VA: float, nmax: int | None = None) -> float:
    """Trace distance between the shaped-QAM state and the matched thermal state."""
    c = build_pcs_qam(order, nu, target_VA)
    n_bar = target_VA / 2
    if nmax is None:
        nmax = max(select_nmax(c), select_nmax_thermal(n_bar))
    return trace_distance(modulated_density_matrix(c, nmax), thermal_state(n_bar, nmax))


def nu_grid(points: int = 40, upper: float = 2.0) -> np.ndarray:
    """Coarse scan grid: zero followed by log-spaced values up to ``upper``."""
    return np.concatenate([[0.0], np.geomspace(1e-3, upper, points - 1)])


class ShapingResult(NamedTuple):
    nu_star: float
    min_distance: float


def optimize_nu(order: int, target_VA: float, tol: float = 1e-5, max_iter: int = 200,
                upper: float = 2.0) -> ShapingResult:
    """Shaping exponent minimising the trace distance to Gaussian modulation.

    A 40-point scan brackets the minimum, golden-section search refines it.
    """
    if not target_VA > 0:
        raise DomainError("target_VA must be positive")
    n_bar = target_VA / 2
    nmax_th = select_nmax_thermal(n_bar)
    cache: dict[float, float] = {}

    def f(nu: float) -> float:
        if nu not in cache:
            c = build_pcs_qam(order, nu, target_VA)
            nmax = max(select_nmax(c), nmax_th)
            cache[nu] = trace_distance(modulated_density_matrix(c, nmax), thermal_state(n_bar, nmax),
                                       check=False)
        return cache[nu]

    grid = nu_grid(upper=upper)
    vals = np.array([f(nu) for nu in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]

    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = f(x2)
    else:
        best = min(cache, key=cache.get)
        raise OptimizationError(f"golden section did not converge in {max_iter} iterations",
                                best=ShapingResult(best, cache[best]))

    best = min(cache, key=cache.get)
    return ShapingResult(float(best), float(cache[best]))
