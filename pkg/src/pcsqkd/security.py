"""Secret key rates for shaped-QAM CV-QKD with a trusted heterodyne receiver.

All variances are in shot-noise units (SNU) per quadrature. ``xi_B`` is the
excess noise referred to Bob's detector output, ``xi_A`` the same noise
referred to the channel input.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import NamedTuple, Union

import numpy as np
from scipy.stats import norm

from .constellation import (
    ConstellationSpec,
    build_pcs_qam,
    modulated_density_matrix,
    modulation_stats,
)
from .errors import DomainError, ModelError, UnphysicalStateError

GAUSSIAN = "gaussian"
N0 = 1.0
PHYS_TOL = 1e-9

Modulation = Union[ConstellationSpec, str]


@dataclass(frozen=True)
class LinkBudget:
    T: float
    eta: float = 0.6
    V_el: float = 0.1
    xi_B: float = 0.0
    N0: float = N0

    def __post_init__(self):
        if not (0 < self.T <= 1 and 0 < self.eta <= 1):
            raise DomainError("T and eta must lie in (0, 1]")
        if self.V_el < 0 or self.xi_B < 0:
            raise DomainError("noise variances must be nonnegative")

    @property
    def xi_A(self) -> float:
        return xi_at_entrance(self.xi_B, self.eta, self.T)

    @classmethod
    def from_xi_A(cls, xi_A, T, eta=0.6, V_el=0.1) -> "LinkBudget":
        return cls(T=T, eta=eta, V_el=V_el, xi_B=xi_A * eta * T / 2)


@dataclass(frozen=True)
class SecurityConfig:
    beta: float = 0.95
    epsilon: float = 1e-8
    N: float = 2.8e6
    finite_size: bool = True

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise DomainError("beta must lie in (0, 1]")
        if not 0 < self.epsilon < 1:
            raise DomainError("epsilon must lie in (0, 1)")
        if self.N < 2:
            raise DomainError("N must be at least 2")


@dataclass(frozen=True)
class CovarianceModel:
    """Alice-Bob covariance ``[[V I, Z sz], [Z sz, W I]]`` before Bob's detector."""

    V: float
    W: float
    Z: float
    eta: float
    V_el: float

    def matrix(self) -> np.ndarray:
        eye, sz = np.eye(2), np.diag([1.0, -1.0])
        return np.block([[self.V * eye, self.Z * sz], [self.Z * sz, self.W * eye]])


@dataclass
class RateReport:
    I_AB: float
    chi_EB: float
    secret_fraction: float
    skr: float
    skr_raw: float
    xi_used: float
    mode: str
    inputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class KeyFraction(NamedTuple):
    value: float
    I_AB: float
    chi_EB: float
    xi_used: float
    mode: str


def vb_predict(V_A, T, eta, V_el, xi_B) -> float:
    """Bob's per-quadrature variance after heterodyne detection."""
    return eta * T / 2 * V_A + N0 + V_el + xi_B


def xi_at_entrance(xi_B, eta, T) -> float:
    if not eta * T > 0:
        raise DomainError("eta*T must be positive")
    return 2 * xi_B / (eta * T)


def snr(V_A, T, eta, V_el, xi_B) -> float:
    return (eta * T * V_A / 2) / (N0 + V_el + xi_B)


def mutual_information(V_A, T, eta, V_el, xi_B) -> float:
    """Gaussian-input heterodyne mutual information, bits per symbol."""
    return math.log2(1 + snr(V_A, T, eta, V_el, xi_B))


def g_function(n_bar: float) -> float:
    """Von Neumann entropy (bits) of a thermal state with mean photon number ``n_bar``."""
    if n_bar <= 0:
        return 0.0
    return (n_bar + 1) * math.log2(n_bar + 1) - n_bar * math.log2(n_bar)


def _omega(modes: int) -> np.ndarray:
    return np.kron(np.eye(modes), np.array([[0.0, 1.0], [-1.0, 0.0]]))


def check_uncertainty(cov: np.ndarray, tol: float = PHYS_TOL) -> None:
    """Raise unless ``cov + i Omega >= 0``, the bona fide state condition."""
    modes = cov.shape[0] // 2
    scale = max(1.0, float(np.max(np.abs(cov))))
    low = float(np.linalg.eigvalsh(cov + 1j * _omega(modes))[0])
    if low < -tol * scale:
        raise UnphysicalStateError(f"covariance violates the uncertainty relation (min eigenvalue {low:.3e})")


def symplectic_eigenvalues(cov: np.ndarray, tol: float = PHYS_TOL) -> np.ndarray:
    """Symplectic spectrum from the eigenvalues of ``i Omega cov``.

    Ordering is (x_1, p_1, x_2, p_2, ...). Raises if any value is below 1 or
    the matrix is not a valid covariance.
    """
    cov = np.asarray(cov, dtype=float)
    check_uncertainty(cov, tol)
    modes = cov.shape[0] // 2
    ev = np.sort(np.abs(np.linalg.eigvals(1j * _omega(modes) @ cov)))
    nus = ev[1::2]
    if nus[0] < 1 - tol:
        raise UnphysicalStateError(f"symplectic eigenvalue {nus[0]:.12g} < 1")
    return nus


def symplectic_eigenvalues_two_mode(cov: np.ndarray, tol: float = PHYS_TOL) -> np.ndarray:
    """Two-mode spectrum via the Delta invariant ``det A + det B + 2 det C``."""
    cov = np.asarray(cov, dtype=float)
    check_uncertainty(cov, tol)
    A, B, C = cov[:2, :2], cov[2:, 2:], cov[:2, 2:]
    delta = np.linalg.det(A) + np.linalg.det(B) + 2 * np.linalg.det(C)
    det = np.linalg.det(cov)
    disc = max(delta**2 - 4 * det, 0.0)
    nus = np.sqrt(np.array([(delta - math.sqrt(disc)) / 2, (delta + math.sqrt(disc)) / 2]))
    if not nus[0] >= 1 - tol:
        raise UnphysicalStateError(f"symplectic eigenvalue {nus[0]:.12g} < 1")
    return nus


def _entropy(nus) -> float:
    return sum(g_function((nu - 1) / 2) for nu in nus)


@lru_cache(maxsize=512)
def _moments(order: int, nu: float, scale: float) -> tuple[float, float]:
    c = build_pcs_qam(order, nu)
    c = ConstellationSpec(order, nu, scale, c.points * scale, c.pmf)
    tau = modulated_density_matrix(c).entries
    w, U = np.linalg.eigh(tau)
    root = (U * np.sqrt(np.clip(w, 0, None))) @ U.conj().T
    nmax = tau.shape[0] - 1
    a = np.diag(np.sqrt(np.arange(1, nmax + 1)), 1)
    c1 = float(np.real(np.trace(root @ a @ root @ a.conj().T)))
    n = modulation_stats(c).n_mean
    return c1, max(n + 1 - c1**2 / n, 0.0)


def coherent_moments(c: ConstellationSpec) -> tuple[float, float]:
    """``(c1, w)`` for a constellation.

    ``c1 = tr(tau^1/2 a tau^1/2 a^dag)`` is the purification's correlation and
    ``w = <n> + 1 - c1^2 / <n>`` measures the distance from Gaussian
    modulation (``w = 0`` for a thermal average state).
    """
    return _moments(*c.key)


def correlation_bound(c1: float, w: float, T: float, xi_A: float) -> float:
    """Lower bound on the Alice-Bob correlation term for a discrete modulation.

    Cauchy-Schwarz in the purification: the part of Alice's mode operator
    that is not reproduced by the observed symbol correlation can only
    interact with the channel's excess noise, of photon number ``T xi_A / 2``.
    """
    return max(2 * math.sqrt(T) * c1 - 2 * math.sqrt(w * T * xi_A / 2), 0.0)


def covariance_model(modulation: Modulation, V_A, T, eta, V_el, xi_A) -> CovarianceModel:
    V = V_A + 1
    W = 1 + T * V_A + T * xi_A
    if isinstance(modulation, ConstellationSpec):
        va = modulation_stats(modulation).V_A
        if abs(va - V_A) > 1e-6 * max(1.0, V_A):
            raise DomainError(f"V_A={V_A} does not match constellation variance {va}")
        if V_A == 0:
            Z = 0.0
        else:
            c1, w = coherent_moments(modulation)
            Z = correlation_bound(c1, w, T, xi_A)
    elif modulation == GAUSSIAN:
        Z = math.sqrt(T * V_A * (V_A + 2))
    else:
        raise DomainError(f"unknown modulation {modulation!r}")
    cov = CovarianceModel(V=V, W=W, Z=Z, eta=eta, V_el=V_el)
    try:
        symplectic_eigenvalues(cov.matrix())
    except UnphysicalStateError as exc:
        raise ModelError(f"unphysical channel parameters: {exc}") from exc
    return cov


def _beamsplitter(n_modes: int, i: int, j: int, t: float) -> np.ndarray:
    S = np.eye(2 * n_modes)
    ct, st = math.sqrt(t), math.sqrt(1 - t)
    for k in range(2):
        a, b = 2 * i + k, 2 * j + k
        S[a, a], S[a, b], S[b, a], S[b, b] = ct, st, -st, ct
    return S


def conditional_covariance(cov: CovarianceModel) -> np.ndarray:
    """Covariance of (A, F, G) conditioned on Bob's trusted heterodyne outcome.

    Mode layout: A, B, F0 and G (EPR pair modelling the detector's trusted
    noise), V (vacuum entering the heterodyne splitter). B is mixed with F0
    on an ``eta`` beamsplitter, split 50:50 with V, then x and p are measured.
    """
    if cov.eta < 1:
        v = 1 + 2 * cov.V_el / (1 - cov.eta)
    elif cov.V_el == 0:
        v = 1.0
    else:
        raise DomainError("eta = 1 with electronic noise has no beamsplitter model")
    eye, sz = np.eye(2), np.diag([1.0, -1.0])
    full = np.zeros((10, 10))
    full[:4, :4] = cov.matrix()
    zf = math.sqrt(max(v * v - 1, 0.0))
    full[4:8, 4:8] = np.block([[v * eye, zf * sz], [zf * sz, v * eye]])
    full[8:, 8:] = eye
    for S in (_beamsplitter(5, 1, 2, cov.eta), _beamsplitter(5, 1, 4, 0.5)):
        full = S @ full @ S.T
    keep, meas = [0, 1, 4, 5, 6, 7], [2, 9]
    A = full[np.ix_(keep, keep)]
    C = full[np.ix_(keep, meas)]
    B = full[np.ix_(meas, meas)]
    return A - C @ np.linalg.solve(B, C.T)


def holevo_bound(cov: CovarianceModel) -> float:
    """Eve's Holevo information on Bob's heterodyne data, bits per symbol."""
    s_e = _entropy(symplectic_eigenvalues(cov.matrix()))
    s_e_given_b = _entropy(symplectic_eigenvalues(conditional_covariance(cov)))
    return max(s_e - s_e_given_b, 0.0)


def holevo_bound_gaussian_closed_form(V_A, T, eta, V_el, xi_A) -> float:
    """Textbook heterodyne expression for Gaussian modulation (cross-check only)."""
    V = V_A + 1
    chi_line = 1 / T - 1 + xi_A
    chi_het = (2 - eta + 2 * V_el) / eta
    chi_tot = chi_line + chi_het / T
    A = V**2 * (1 - 2 * T) + 2 * T + T**2 * (V + chi_line) ** 2
    B = T**2 * (V * chi_line + 1) ** 2
    r = math.sqrt(A * A - 4 * B)
    l12 = [math.sqrt((A + r) / 2), math.sqrt((A - r) / 2)]
    C = (A * chi_het**2 + B + 1 + 2 * chi_het * (V * math.sqrt(B) + T * (V + chi_line))
         + 2 * T * (V**2 - 1)) / (T * (V + chi_tot)) ** 2
    D = ((V + math.sqrt(B) * chi_het) / (T * (V + chi_tot))) ** 2
    r = math.sqrt(max(C * C - 4 * D, 0.0))
    l34 = [math.sqrt((C + r) / 2), math.sqrt((C - r) / 2)]
    return _entropy(l12) - _entropy(l34)


def z_quantile(epsilon: float) -> float:
    """Upper standard-normal quantile: P(Z > z) = epsilon."""
    return float(norm.isf(epsilon))


def xi_standard_error(N, V_el, xi) -> float:
    """Standard deviation of the per-quadrature noise-variance estimator."""
    return math.sqrt(2) * (N0 + V_el + xi) / math.sqrt(N)


def worst_case_xi(xi_hat, N, epsilon, total_noise_var=None, V_el=0.0) -> float:
    """Upper confidence bound on the excess noise at failure probability ``epsilon``.

    ``total_noise_var`` defaults to ``1 + V_el + xi_hat``.
    """
    if N < 2:
        raise DomainError("N must be at least 2")
    if not 0 < epsilon < 1:
        raise DomainError("epsilon must lie in (0, 1)")
    if total_noise_var is None:
        total_noise_var = N0 + V_el + xi_hat
    if math.isinf(N):
        return float(xi_hat)
    return xi_hat + z_quantile(epsilon) * math.sqrt(2) * total_noise_var / math.sqrt(N)


def secret_fraction(modulation: Modulation, V_A, link: LinkBudget, sec: SecurityConfig) -> KeyFraction:
    """``beta I_AB - chi_EB`` per symbol and polarization; negative values kept."""
    xi = link.xi_B
    mode = "asymptotic"
    if sec.finite_size:
        xi = worst_case_xi(xi, sec.N, sec.epsilon, V_el=link.V_el)
        mode = "finite-size"
    I_AB = mutual_information(V_A, link.T, link.eta, link.V_el, xi)
    cov = covariance_model(modulation, V_A, link.T, link.eta, link.V_el, xi_at_entrance(xi, link.eta, link.T))
    chi = holevo_bound(cov)
    return KeyFraction(sec.beta * I_AB - chi, I_AB, chi, xi, mode)


def skr(secret_fraction_value, R_S=600e6, R_pilots=0.5) -> tuple[float, float]:
    """Dual-polarization key rate in bit/s as ``(clamped, raw)``."""
    if not R_S > 0:
        raise DomainError("R_S must be positive")
    if not 0 <= R_pilots < 1:
        raise DomainError("R_pilots must lie in [0, 1)")
    raw = 2 * R_S * (1 - R_pilots) * secret_fraction_value
    return max(raw, 0.0), raw


def modulation_label(modulation: Modulation) -> str:
    if isinstance(modulation, ConstellationSpec):
        return f"pcs{modulation.order}"
    return str(modulation)


def rate_report(modulation: Modulation, V_A, link: LinkBudget, sec: SecurityConfig,
                R_S=600e6, R_pilots=0.5) -> RateReport:
    kf = secret_fraction(modulation, V_A, link, sec)
    rate, raw = skr(kf.value, R_S, R_pilots)
    inputs = {
        "modulation": modulation_label(modulation),
        "nu": float(modulation.nu) if isinstance(modulation, ConstellationSpec) else None,
        "V_A": float(V_A),
        "T": link.T,
        "eta": link.eta,
        "V_el": link.V_el,
        "xi_B": link.xi_B,
        "beta": sec.beta,
        "epsilon": sec.epsilon,
        "N": sec.N,
        "R_S": R_S,
        "R_pilots": R_pilots,
        "mutual_information": "gaussian-input heterodyne capacity",
        "epsilon_budget": "parameter estimation only",
    }
    return RateReport(I_AB=kf.I_AB, chi_EB=kf.chi_EB, secret_fraction=kf.value, skr=rate, skr_raw=raw,
                      xi_used=kf.xi_used, mode=kf.mode, inputs=inputs)
