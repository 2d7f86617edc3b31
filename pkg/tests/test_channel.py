import math

import numpy as np
import pytest

from conftest import T_REF, variance_sigma
from pcsqkd.channel import (
    CalibrationCapture,
    ImpairmentConfig,
    apply_lowpass,
    apply_waveform_impairments,
    block_rng,
    calibration_capture,
    lowpass_response,
    receiver_frontend,
    symbol_channel,
    transmittance,
    transmittance_at,
    wiener_phase,
)
from pcsqkd.constellation import build_pcs_qam, sample_symbols
from pcsqkd.errors import CalibrationError, DomainError
from pcsqkd.rxdsp import matched_filter_downsample, synchronize
from pcsqkd.security import LinkBudget, vb_predict
from pcsqkd.txdsp import FrameConfig, build_frame, shape_and_upconvert
from pcsqkd.waveform import Waveform

FS = 5.0e9

# every impairment off and a noiseless detector
IDENTITY = dict(loss_db=0.0, linewidth_tx_hz=0.0, linewidth_lo_hz=0.0, cfo_hz=0.0, eta=1.0, V_el=0.0,
                scope_bandwidth_hz=None, shot_noise=False)


def random_waveform(n=20000, seed=0):
    rng = np.random.default_rng(seed)
    return Waveform(rng.standard_normal((2, n)) + 1j * rng.standard_normal((2, n)), FS)


# -- loss ------------------------------------------------------------------------------

def test_transmittance_values():
    assert transmittance(ImpairmentConfig(loss_db=0.0)) == 1.0
    assert transmittance(ImpairmentConfig()) == pytest.approx(0.60256, abs=1e-5)
    assert transmittance(ImpairmentConfig()) == pytest.approx(T_REF, rel=1e-12)
    assert transmittance_at(22.0) == pytest.approx(0.309404, abs=1e-6)
    assert transmittance(ImpairmentConfig(length_km=22.0)) == pytest.approx(transmittance_at(22.0), rel=1e-12)


def test_explicit_loss_overrides_length():
    assert ImpairmentConfig(length_km=40.0, loss_db=3.0).loss == 3.0


@pytest.mark.parametrize("kw", [dict(loss_db=-1.0), dict(eta=0.0), dict(eta=1.2), dict(V_el=-0.1),
                                dict(xi_injected=-1e-3), dict(linewidth_lo_hz=-1.0)])
def test_impairment_config_rejects(kw):
    with pytest.raises(DomainError):
        ImpairmentConfig(**kw)


def test_link_echo():
    cfg = ImpairmentConfig(xi_injected=0.01)
    lb = cfg.link()
    assert (lb.eta, lb.V_el, lb.xi_B) == (0.6, 0.1, 0.01)
    assert lb.T == pytest.approx(T_REF)


# -- symbol-rate channel -------------------------------------------------------------------

def test_symbol_channel_variance_and_gain():
    c = build_pcs_qam(64, 0.0749, 4.74)
    x = sample_symbols(c, 1_000_000, 5)
    link = LinkBudget(T=T_REF, eta=0.6, V_el=0.1, xi_B=6.34e-3)
    y = symbol_channel(x, link, seed=5)
    q = np.concatenate([y.real, y.imag])
    target = vb_predict(4.74, T_REF, 0.6, 0.1, 6.34e-3)
    assert target == pytest.approx(1.963180, abs=1e-6)
    var = float(np.mean(q**2))
    sigma = variance_sigma(float(np.mean(q**4)), var, q.size)
    assert abs(var - target) < 3 * sigma
    gain = np.real(np.vdot(x, y)) / np.sum(np.abs(x) ** 2)
    assert gain == pytest.approx(math.sqrt(0.6 * T_REF / 2), rel=3e-3)


def test_symbol_channel_noise_only():
    y = symbol_channel(np.zeros(400_000), LinkBudget(T=1.0, eta=1.0, V_el=0.0))
    q = np.concatenate([y.real, y.imag])
    assert np.mean(q**2) == pytest.approx(1.0, abs=3 * math.sqrt(2 / q.size))
    assert abs(np.mean(y.real * y.imag)) < 4 / math.sqrt(y.size)


def test_symbol_channel_streams():
    x = np.ones(1000)
    link = LinkBudget(T=0.5)
    assert np.array_equal(symbol_channel(x, link, 3, 0), symbol_channel(x, link, 3, 0))
    assert not np.array_equal(symbol_channel(x, link, 3, 0), symbol_channel(x, link, 3, 1))
    assert not np.array_equal(symbol_channel(x, link, 3, 0), symbol_channel(x, link, 4, 0))


def test_block_rng_independent_of_order():
    a = block_rng(7, 3).standard_normal(5)
    block_rng(7, 2).standard_normal(100)
    assert np.array_equal(a, block_rng(7, 3).standard_normal(5))


# -- waveform impairments -----------------------------------------------------------------

def test_identity_impairments_bitwise():
    w = random_waveform()
    out = apply_waveform_impairments(w, ImpairmentConfig(**IDENTITY))
    assert np.array_equal(out.samples, w.samples)
    assert out.meta["block"] == 0 and out.meta["impairments"]["eta"] == 1.0


def test_cfo_shifts_tone():
    n = 1 << 16
    w = Waveform(np.ones((2, n), dtype=complex), FS)
    cfo = 1000 * FS / n  # on an FFT bin
    out = apply_waveform_impairments(w, ImpairmentConfig(**{**IDENTITY, "cfo_hz": cfo}))
    spec = np.abs(np.fft.fft(out.samples[0])) ** 2
    assert int(np.argmax(spec)) == 1000
    assert spec[1000] / spec.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(np.abs(out.samples), 1.0)


def test_wiener_increment_variance():
    lw = 2.0e4
    ph = wiener_phase(1_000_000, lw, FS, np.random.default_rng(1))
    inc = np.diff(ph)
    assert np.var(inc) == pytest.approx(2 * np.pi * lw / FS, rel=0.05)
    assert not wiener_phase(10, 0.0, FS, np.random.default_rng(1)).any()


def test_laser_phase_noise_is_pure_phase():
    w = random_waveform()
    cfg = ImpairmentConfig(**{**IDENTITY, "linewidth_tx_hz": 1e5, "linewidth_lo_hz": 1e5})
    out = apply_waveform_impairments(w, cfg)
    assert np.allclose(np.abs(out.samples), np.abs(w.samples), rtol=1e-12)
    # both polarizations share the laser
    d = np.angle(out.samples * np.conj(w.samples))
    assert np.allclose(np.exp(1j * d[0]), np.exp(1j * d[1]))


def test_polarization_matrix_unitary():
    cfg = ImpairmentConfig(pol_theta=0.7, pol_phi=1.3)
    M = cfg.pol_matrix()
    assert np.allclose(M @ M.conj().T, np.eye(2), atol=1e-15)


@pytest.mark.parametrize("pol", [dict(pol_theta=0.4, pol_phi=0.9), dict(pol_theta=0.1, pol_rate=1e6)])
def test_energy_conservation(pol):
    w = random_waveform()
    loss = 3.0
    out = apply_waveform_impairments(w, ImpairmentConfig(**{**IDENTITY, "loss_db": loss, "cfo_hz": 2e7, **pol}))
    e_in, e_out = np.sum(np.abs(w.samples) ** 2), np.sum(np.abs(out.samples) ** 2)
    assert e_out / e_in == pytest.approx(10 ** (-loss / 10), rel=1e-12)


def test_static_rotation_applied():
    w = random_waveform(1000)
    cfg = ImpairmentConfig(**{**IDENTITY, "pol_theta": 0.3, "pol_phi": 0.2})
    out = apply_waveform_impairments(w, cfg)
    assert np.allclose(out.samples, cfg.pol_matrix() @ w.samples, atol=1e-14)


# -- front-end --------------------------------------------------------------------------------

def test_scope_bandwidth_attenuation():
    H = lowpass_response(1 << 12, FS, 1.0e9)
    f = np.fft.fftfreq(1 << 12, 1 / FS)
    k = int(np.argmin(np.abs(f - 1.5e9)))
    assert -20 * math.log10(abs(H[k])) >= 3.0
    assert abs(H[0]) == 1.0


def test_scope_attenuates_out_of_band_tone():
    n = 1 << 14
    t = np.arange(n) / FS
    power_db = {}
    for k in (1000, 5000):  # about 305 MHz and 1.53 GHz
        x = np.exp(2j * np.pi * (k * FS / n) * t)
        y = apply_lowpass(np.vstack([x, x]), FS, 1.0e9)
        power_db[k] = 10 * math.log10(np.mean(np.abs(y[0]) ** 2))
    assert -0.5 < power_db[1000] < 0
    assert power_db[5000] <= -3.0


def test_frontend_noise_budget():
    n = 400_000
    blank = Waveform(np.zeros((2, n), dtype=complex), FS)
    cfg = ImpairmentConfig(scope_bandwidth_hz=None, V_el=0.1, lo_level=1.0, xi_injected=0.05)
    rng = np.random.default_rng(2)
    sig = receiver_frontend(blank, cfg, rng, signal=True).samples
    shot = receiver_frontend(blank, cfg, rng, signal=False).samples
    elec = receiver_frontend(blank, cfg, rng, signal=False, lo=False).samples
    tol = 4 * math.sqrt(2 / (2 * n)) * 2.5
    assert np.mean(np.abs(sig) ** 2) / 2 == pytest.approx(2 * (1 + 0.05) + 0.2, abs=tol)
    assert np.mean(np.abs(shot) ** 2) / 2 == pytest.approx(2.2, abs=tol)
    assert np.mean(np.abs(elec) ** 2) / 2 == pytest.approx(0.2, abs=tol)


def test_signal_after_matched_filter():
    # a noiseless link reproduces sqrt(eta T) x at the matched-filter output
    rng = np.random.default_rng(3)
    data = rng.standard_normal((2, 4000)) + 1j * rng.standard_normal((2, 4000))
    fc = FrameConfig(pilot_ratio=0)
    f = build_frame(data, fc)
    w = shape_and_upconvert(f, fc)
    w = w.replace(np.pad(w.samples, ((0, 0), (3000, 3000))))
    cfg = ImpairmentConfig(**{**IDENTITY, "loss_db": 2.2, "eta": 0.6})
    sym, _ = matched_filter_downsample(apply_waveform_impairments(w, cfg), fc)
    aligned, _, _ = synchronize(sym, fc)
    ref = f.symbols
    gain = np.vdot(ref, aligned[:, :ref.shape[1]]) / np.vdot(ref, ref)
    assert abs(gain) == pytest.approx(math.sqrt(0.6 * T_REF), rel=1e-4)


# -- shot-noise calibration ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def calibrations():
    return [calibration_capture(ImpairmentConfig(seed=s), 200_000) for s in range(2)]


def test_calibration_snu_anchors(calibrations):
    for cal in calibrations:
        assert cal.shot_var * cal.conversion == pytest.approx(1.0 + cal.V_el, rel=1e-12)
        assert cal.V_el == pytest.approx(0.1, abs=3e-3)
        # shot-noise variance after matched filtering, 2 * lo_level raw
        assert cal.shot_var - cal.elec_var == pytest.approx(2.0, rel=0.01)


def test_calibration_repeatability(calibrations):
    a, b = calibrations
    assert a.conversion / b.conversion == pytest.approx(1.0, abs=0.02)
    assert not np.array_equal(a.samples, b.samples)


def test_calibration_linear_in_lo_power():
    shot = [calibration_capture(ImpairmentConfig(lo_level=lo, V_el=0.0, scope_bandwidth_hz=None), 50_000)
            for lo in (1.0, 2.0, 4.0)]
    v = np.array([c.shot_var for c in shot])
    assert np.allclose(v / np.array([1.0, 2.0, 4.0]), 2.0, rtol=0.02)


def test_calibration_deterministic_and_keyed():
    cfg = ImpairmentConfig(seed=9)
    a = calibration_capture(cfg, 20_000)
    b = calibration_capture(cfg, 20_000)
    assert np.array_equal(a.samples, b.samples)
    # block streams and the calibration stream never coincide
    blank = Waveform(np.zeros((2, 200_000), dtype=complex), FS)
    blk = receiver_frontend(blank, cfg, block_rng(cfg.seed, 0), signal=False)
    cal_stream = receiver_frontend(blank, cfg, np.random.default_rng([cfg.seed, 0xCA1B, 0, 0]), signal=False)
    assert not np.allclose(blk.samples[:, :100], cal_stream.samples[:, :100])


def test_calibration_errors():
    with pytest.raises(CalibrationError):
        CalibrationCapture(np.zeros((2, 1)), shot_var=0.2, elec_var=0.2)
    with pytest.raises(DomainError):
        calibration_capture(ImpairmentConfig(), 5_000)


def test_calibration_json():
    import json

    cal = CalibrationCapture(np.zeros((2, 1)), shot_var=2.2, elec_var=0.2)
    d = json.loads(cal.to_json())
    assert d["conversion"] == pytest.approx(0.5) and d["V_el_snu"] == pytest.approx(0.1)
