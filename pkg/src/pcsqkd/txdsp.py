"""Transmitter DSP: frame assembly, RRC pulse shaping and digital upconversion."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
from scipy.signal import oaconvolve

from .errors import FrameLengthError, ParameterError
from .waveform import Waveform


@dataclass(frozen=True)
class FrameConfig:
    symbol_rate: float = 6.0e8
    sample_rate: float = 5.0e9
    rolloff: float = 0.4
    upconversion_freq: float = 5.0e8
    pilot_ratio: float = 0.5
    pilot_power_gain_db: float = 14.0
    cazac_length: int = 512
    cazac_roots: tuple = (7, 11)
    rrc_taps: int = 1025

    def __post_init__(self):
        if not 0 < self.rolloff <= 1:
            raise ParameterError("rolloff must lie in (0, 1]")
        if not 0 <= self.pilot_ratio < 1:
            raise ParameterError("pilot_ratio must lie in [0, 1)")
        if self.rrc_taps % 2 == 0:
            raise ParameterError("rrc_taps must be odd")
        for r in self.cazac_roots:
            if math.gcd(int(r), int(self.cazac_length)) != 1:
                raise ParameterError(f"CAZAC root {r} not coprime with length {self.cazac_length}")
        ratio = self.resample_ratio
        if Fraction(self.sample_rate) / Fraction(self.symbol_rate) != ratio:
            raise ParameterError("sample_rate / symbol_rate must be an exact small rational")

    @property
    def resample_ratio(self) -> Fraction:
        """Samples per symbol as an exact fraction (25/3 by default)."""
        return (Fraction(self.sample_rate) / Fraction(self.symbol_rate)).limit_denominator(1000)

    @property
    def up(self) -> int:
        return self.resample_ratio.numerator

    @property
    def down(self) -> int:
        return self.resample_ratio.denominator

    @property
    def pilot_fraction(self) -> Fraction:
        return Fraction(self.pilot_ratio).limit_denominator(1000)

    @property
    def pilot_amplitude_gain(self) -> float:
        return 10 ** (self.pilot_power_gain_db / 20)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cazac_roots"] = list(self.cazac_roots)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FrameConfig":
        d = dict(d)
        if "cazac_roots" in d:
            d["cazac_roots"] = tuple(d["cazac_roots"])
        return cls(**d)


@dataclass(eq=False)
class TxFrame:
    symbols: np.ndarray  # (2, preamble + payload)
    pilot_mask: np.ndarray  # payload positions carrying pilots
    pilot_values: np.ndarray  # (2, n_pilots)
    sync_span: tuple  # (start, stop) of the preamble

    @property
    def payload(self) -> np.ndarray:
        return self.symbols[:, self.sync_span[1]:]

    @property
    def data(self) -> np.ndarray:
        return self.payload[:, ~self.pilot_mask]


def zadoff_chu(length: int, root: int) -> np.ndarray:
    """Unit-modulus Zadoff-Chu sequence with ideal periodic autocorrelation."""
    if math.gcd(int(root), int(length)) != 1:
        raise ParameterError(f"root {root} is not coprime with length {length}")
    n = np.arange(length)
    # n(n + c) mod 2L keeps the phase argument small and exact
    c = length % 2
    k = (n * (n + c)) % (2 * length)
    return np.exp(-1j * np.pi * root * k / length)


def pilot_layout(n_payload: int, pilot_ratio: Fraction) -> np.ndarray:
    """Boolean pilot mask; at ratio 1/2 the payload alternates pilot, data, ..."""
    k = np.arange(n_payload, dtype=np.int64)
    num, den = pilot_ratio.numerator, pilot_ratio.denominator
    ceil_next = -((-(k + 1) * num) // den)
    ceil_here = -((-k * num) // den)
    return (ceil_next - ceil_here) == 1


def payload_length(n_data: int, cfg: FrameConfig) -> int:
    n = Fraction(n_data) / (1 - cfg.pilot_fraction)
    if n.denominator != 1:
        raise FrameLengthError(f"{n_data} data symbols do not fill a whole payload at pilot ratio {cfg.pilot_ratio}")
    return int(n)


def qpsk_pilots(n: int, seed) -> np.ndarray:
    """Deterministic unit-modulus QPSK sequences for the two polarizations."""
    rng = np.random.default_rng(seed)
    k = rng.integers(0, 4, size=(2, n))
    return np.exp(1j * (np.pi / 4 + np.pi / 2 * k))


def build_frame(data_symbols: np.ndarray, cfg: FrameConfig = FrameConfig(), seed=0) -> TxFrame:
    """Interleave pilots with data and prepend the CAZAC preamble."""
    data = np.asarray(data_symbols, dtype=np.complex128)
    if data.ndim != 2 or data.shape[0] != 2:
        raise FrameLengthError("data_symbols must have shape (2, n)")
    n_data = data.shape[1]
    n_payload = payload_length(n_data, cfg)
    mask = pilot_layout(n_payload, cfg.pilot_fraction)
    if int((~mask).sum()) != n_data:
        raise FrameLengthError("pilot layout does not match the data length")

    rms = math.sqrt(float(np.mean(np.abs(data) ** 2))) if n_data else 0.0
    amp = cfg.pilot_amplitude_gain * rms
    pilots = amp * qpsk_pilots(int(mask.sum()), seed)
    payload = np.empty((2, n_payload), dtype=np.complex128)
    payload[:, mask] = pilots
    payload[:, ~mask] = data

    L = cfg.cazac_length
    preamble = amp * np.vstack([zadoff_chu(L, r) for r in cfg.cazac_roots])
    return TxFrame(np.hstack([preamble, payload]), mask, pilots, (0, L))


def _rrc_impulse(t: np.ndarray, beta: float) -> np.ndarray:
    t = np.abs(t)
    h = np.empty_like(t)
    at0 = t < 1e-12
    at_sing = np.abs(t - 1 / (4 * beta)) < 1e-9
    rest = ~(at0 | at_sing)
    h[at0] = 1 - beta + 4 * beta / np.pi
    h[at_sing] = beta / math.sqrt(2) * ((1 + 2 / np.pi) * math.sin(np.pi / (4 * beta))
                                         + (1 - 2 / np.pi) * math.cos(np.pi / (4 * beta)))
    tr = t[rest]
    h[rest] = (np.sin(np.pi * tr * (1 - beta)) + 4 * beta * tr * np.cos(np.pi * tr * (1 + beta))) / (
        np.pi * tr * (1 - (4 * beta * tr) ** 2))
    return h


def rrc_taps(cfg: FrameConfig = FrameConfig()) -> np.ndarray:
    """Unit-energy RRC prototype at the polyphase design rate ``up * symbol_rate``.

    The filter spans ``cfg.rrc_taps`` samples at ``sample_rate``, i.e.
    ``down * (rrc_taps - 1) + 1`` taps at the design rate.
    """
    if cfg.rrc_taps % 2 == 0:
        raise ParameterError("rrc_taps must be odd")
    n = cfg.down * (cfg.rrc_taps - 1) + 1
    half = (n - 1) // 2
    right = _rrc_impulse(np.arange(half + 1) / cfg.up, cfg.rolloff)
    h = np.concatenate([right[:0:-1], right])
    return h / math.sqrt(float(np.sum(h**2)))


def resample_fir(h: np.ndarray, x: np.ndarray, up: int, down: int) -> np.ndarray:
    """Same output as ``scipy.signal.upfirdn(h, x, up, down)`` via FFT convolution."""
    x = np.asarray(x)
    stuffed = np.zeros((len(x) - 1) * up + 1, dtype=np.result_type(x, h))
    stuffed[::up] = x
    return oaconvolve(stuffed, h)[::down]


def occupied_bandwidth(cfg: FrameConfig = FrameConfig()) -> float:
    return cfg.symbol_rate * (1 + cfg.rolloff)


def shape_and_upconvert(frame: TxFrame, cfg: FrameConfig = FrameConfig(), seed=None) -> Waveform:
    """Pulse-shape both polarizations and shift them to the digital IF."""
    h = rrc_taps(cfg)
    gain = math.sqrt(cfg.down)
    streams = np.vstack([gain * resample_fir(h, s, cfg.up, cfg.down) for s in frame.symbols])
    n = np.arange(streams.shape[1])
    streams = streams * np.exp(2j * np.pi * cfg.upconversion_freq / cfg.sample_rate * n)
    return Waveform(streams, cfg.sample_rate, seed, {"frame": cfg.to_dict()})
