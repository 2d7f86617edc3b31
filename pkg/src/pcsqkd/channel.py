"""Fiber link and coherent receiver front-end.

Two fidelities share one noise model: :func:`symbol_channel` works directly
in SNU at the symbol rate, while :func:`apply_waveform_impairments` acts on
sampled waveforms in raw receiver units. In raw units the heterodyne shot
noise has per-quadrature variance ``2 * lo_level`` at the matched-filter
output, so the calibration factor ``1 / (shot_var - elec_var)`` maps raw
variances to SNU and the signal to ``sqrt(eta T / 2) x``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import fft as sfft

from .errors import CalibrationError, DomainError
from .security import LinkBudget
from .txdsp import FrameConfig
from .waveform import Waveform


CALIBRATION_STREAM = 0xCA1B


@dataclass(frozen=True)
class ImpairmentConfig:
    length_km: float = 9.5
    loss_db: float | None = None
    loss_db_per_km: float = 2.2 / 9.5
    linewidth_tx_hz: float = 1.0e4
    linewidth_lo_hz: float = 1.0e4
    cfo_hz: float = 2.0e7
    pol_theta: float = 0.0
    pol_phi: float = 0.0
    pol_rate: float = 0.0  # rad/s drift of pol_theta
    eta: float = 0.6
    V_el: float = 0.1
    xi_injected: float = 0.0
    scope_bandwidth_hz: float | None = 1.0e9
    lo_level: float = 1.0
    shot_noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.loss < 0:
            raise DomainError("loss must be nonnegative")
        if self.linewidth_tx_hz < 0 or self.linewidth_lo_hz < 0:
            raise DomainError("linewidths must be nonnegative")
        if not 0 < self.eta <= 1:
            raise DomainError("eta must lie in (0, 1]")
        if self.V_el < 0 or self.xi_injected < 0 or self.lo_level < 0:
            raise DomainError("noise levels must be nonnegative")

    @property
    def loss(self) -> float:
        if self.loss_db is not None:
            return self.loss_db
        return self.loss_db_per_km * self.length_km

    def pol_matrix(self, theta=None) -> np.ndarray:
        th = self.pol_theta if theta is None else theta
        c, s = math.cos(th), math.sin(th)
        e = np.exp(1j * self.pol_phi)
        return np.array([[c, -s * np.conj(e)], [s * e, c]])

    def link(self) -> LinkBudget:
        return LinkBudget(T=transmittance(self), eta=self.eta, V_el=self.V_el, xi_B=self.xi_injected)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class CalibrationCapture:
    samples: np.ndarray  # symbol-rate capture with the signal off, raw units
    shot_var: float
    elec_var: float

    def __post_init__(self):
        if not self.shot_var > self.elec_var:
            raise CalibrationError(f"shot variance {self.shot_var} does not exceed electronic {self.elec_var}")

    @property
    def conversion(self) -> float:
        """Raw variance to SNU multiplier."""
        return 1.0 / (self.shot_var - self.elec_var)

    @property
    def V_el(self) -> float:
        return self.elec_var * self.conversion

    def to_json(self) -> str:
        return json.dumps({"shot_var": self.shot_var, "elec_var": self.elec_var,
                           "conversion": self.conversion, "V_el_snu": self.V_el})


def transmittance(cfg: ImpairmentConfig) -> float:
    return 10 ** (-cfg.loss / 10)


def transmittance_at(length_km: float, loss_db_per_km: float = 2.2 / 9.5) -> float:
    return 10 ** (-loss_db_per_km * length_km / 10)


def block_rng(seed, block: int = 0) -> np.random.Generator:
    """Independent, reproducible stream for block ``block`` of run ``seed``."""
    return np.random.default_rng([int(seed), int(block)])


def complex_noise(rng: np.random.Generator, var_per_quadrature: float, shape) -> np.ndarray:
    sd = math.sqrt(var_per_quadrature)
    return sd * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def symbol_channel(symbols: np.ndarray, link: LinkBudget, seed=0, block: int = 0) -> np.ndarray:
    """``y = sqrt(eta T / 2) x + n`` with noise variance ``1 + V_el + xi_B`` per quadrature."""
    x = np.asarray(symbols, dtype=np.complex128)
    rng = block_rng(seed, block)
    gain = math.sqrt(link.eta * link.T / 2)
    return gain * x + complex_noise(rng, link.N0 + link.V_el + link.xi_B, x.shape)


def wiener_phase(n: int, linewidth_hz: float, sample_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Laser phase random walk with increment variance ``2 pi linewidth / sample_rate``."""
    if linewidth_hz == 0:
        return np.zeros(n)
    sd = math.sqrt(2 * np.pi * linewidth_hz / sample_rate)
    return np.cumsum(sd * rng.standard_normal(n))


def lowpass_response(n: int, sample_rate: float, bandwidth_hz: float) -> np.ndarray:
    """First-order low-pass ``1 / (1 + j f / fc)`` on the FFT grid."""
    f = sfft.fftfreq(n, d=1 / sample_rate)
    return 1.0 / (1.0 + 1j * f / bandwidth_hz)


def apply_lowpass(samples: np.ndarray, sample_rate: float, bandwidth_hz: float) -> np.ndarray:
    H = lowpass_response(samples.shape[-1], sample_rate, bandwidth_hz)
    return sfft.ifft(sfft.fft(samples, axis=-1) * H, axis=-1)


def receiver_frontend(w: Waveform, cfg: ImpairmentConfig, rng: np.random.Generator | None = None,
                      signal: bool = True, lo: bool = True) -> Waveform:
    """Trusted detector: efficiency, shot/excess/electronic noise, scope bandwidth.

    ``signal`` and ``lo`` emulate the optical switches used for shot-noise
    calibration.
    """
    if rng is None:
        rng = block_rng(cfg.seed, 1 << 20)
    n = len(w)
    lo_level = cfg.lo_level if lo else 0.0
    out = w.samples * math.sqrt(cfg.eta * lo_level) if signal else np.zeros_like(w.samples)
    noise_var = 0.0
    if cfg.shot_noise:
        noise_var += 2 * lo_level
    if signal:
        noise_var += 2 * cfg.xi_injected * lo_level
    noise_var += 2 * cfg.V_el
    if noise_var > 0:
        out = out + complex_noise(rng, noise_var, (2, n))
    if cfg.scope_bandwidth_hz is not None:
        out = apply_lowpass(out, w.sample_rate, cfg.scope_bandwidth_hz)
    return w.replace(out)


def apply_waveform_impairments(w: Waveform, cfg: ImpairmentConfig, block: int = 0) -> Waveform:
    """Loss, polarization rotation, CFO and laser phase noise, then the front-end."""
    rng = block_rng(cfg.seed, block)
    s = w.samples * math.sqrt(transmittance(cfg))
    if cfg.pol_rate == 0:
        if cfg.pol_theta != 0 or cfg.pol_phi != 0:
            s = cfg.pol_matrix() @ s
    else:
        t = w.time()
        th = cfg.pol_theta + cfg.pol_rate * t
        c, sn = np.cos(th), np.sin(th)
        e = np.exp(1j * cfg.pol_phi)
        s = np.vstack([c * s[0] - sn * np.conj(e) * s[1], sn * e * s[0] + c * s[1]])
    phase = None
    if cfg.cfo_hz != 0:
        n = np.arange(len(w))
        phase = 2 * np.pi * ((cfg.cfo_hz / w.sample_rate * n) % 1.0)
    lw = cfg.linewidth_tx_hz + cfg.linewidth_lo_hz
    if lw > 0:
        pn = wiener_phase(len(w), lw, w.sample_rate, rng)
        phase = pn if phase is None else phase + pn
    if phase is not None:
        s = s * np.exp(1j * phase)
    out = receiver_frontend(w.replace(s), cfg, rng)
    out.meta["impairments"] = cfg.to_dict()
    out.meta["block"] = block
    return out


def calibration_capture(cfg: ImpairmentConfig, duration_symbols: int = 100_000,
                        frame_cfg: FrameConfig = FrameConfig(), block: int = 0) -> CalibrationCapture:
    """Shot-noise calibration: LO on with the signal off, then both off."""
    from .rxdsp import matched_filter_downsample

    if duration_symbols < 10_000:
        raise DomainError("calibration needs at least 1e4 symbols")
    n = sfft.next_fast_len(int(math.ceil(duration_symbols * frame_cfg.up / frame_cfg.down)))
    blank = Waveform(np.zeros((2, n), dtype=np.complex128), frame_cfg.sample_rate)
    variances = []
    for k, lo in enumerate((True, False)):
        # separate key space from the per-block impairment streams
        rng = np.random.default_rng([int(cfg.seed), CALIBRATION_STREAM, int(block), k])
        raw = receiver_frontend(blank, cfg, rng, signal=False, lo=lo)
        sym, _ = matched_filter_downsample(raw, frame_cfg, frontend_bandwidth_hz=cfg.scope_bandwidth_hz,
                                           timing_phase=0)
        edge = frame_cfg.rrc_taps // frame_cfg.up + 2
        sym = sym[:, edge:-edge]
        variances.append((sym, float(np.mean(np.abs(sym) ** 2) / 2)))
    (shot_samples, shot_var), (_, elec_var) = variances
    return CalibrationCapture(shot_samples, shot_var, elec_var)
