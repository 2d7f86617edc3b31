"""Acceptance gate: one PASS/FAIL line per criterion at the contract tolerances.

Each test records its line through ``record_acceptance`` before asserting, so
the terminal summary lists every criterion even when one fails.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import T_REF, record_acceptance
from pcsqkd.channel import ImpairmentConfig, apply_waveform_impairments, symbol_channel
from pcsqkd.constellation import (
    DensityMatrix,
    build_pcs_qam,
    coherent_state_fock,
    modulated_density_matrix,
    optimize_nu,
    sample_symbols,
    trace_distance,
)
from pcsqkd.experiments import REFERENCE, ExperimentConfig, run_experiment
from pcsqkd.rxdsp import DspConfig, crosstalk_db, estimate_params, matched_filter_downsample, receive, synchronize
from pcsqkd.security import GAUSSIAN, LinkBudget, covariance_model, worst_case_xi
from pcsqkd.txdsp import FrameConfig, build_frame, rrc_taps, shape_and_upconvert, zadoff_chu

FC = FrameConfig()


# -- 1. shaping exponent ----------------------------------------------------------------

def test_criterion_1_shaping_exponent():
    ok, parts = True, []
    for name in ("pcs64", "pcs256"):
        ref = REFERENCE[name]
        t0 = time.perf_counter()
        nu = optimize_nu(ref.order, ref.V_A).nu_star
        dt = time.perf_counter() - t0
        dev = nu / ref.nu - 1
        ok &= abs(dev) <= 0.10 and dt < 60
        parts.append(f"{name} nu*={nu:.5f} ref={ref.nu} dev={100 * dev:+.2f}% in {dt:.1f}s")
    record_acceptance("1", ok, "; ".join(parts) + " (tol 10%, < 60 s)")
    assert ok


# -- 2. secret fraction against V_A ---------------------------------------------------------

def test_criterion_2_rate_curve():
    out = run_experiment(ExperimentConfig(experiment="rate-curve"))
    peaks = out.summary["peaks"]
    at = {m: peaks[m]["V_A_snu"] for m in peaks}
    val = {m: peaks[m]["secret_fraction_bits_per_symbol"] for m in peaks}
    ratio = val["pcs256"] / val[GAUSSIAN]
    checks = {
        "pcs64 argmax in [4,6]": 4 <= at["pcs64"] <= 6,
        "pcs256 argmax in [8,12]": 8 <= at["pcs256"] <= 12,
        "gaussian >= pcs256 >= pcs64": val[GAUSSIAN] >= val["pcs256"] >= val["pcs64"],
        "pcs256 within 5% of gaussian": ratio >= 0.95,
    }
    ok = all(checks.values())
    detail = (f"argmax pcs64={at['pcs64']} pcs256={at['pcs256']} gaussian={at[GAUSSIAN]}; peaks "
              f"pcs64={val['pcs64']:.4f} pcs256={val['pcs256']:.4f} gaussian={val[GAUSSIAN]:.4f}; "
              f"pcs256/gaussian={ratio:.3f}; failed: {[k for k, v in checks.items() if not v] or 'none'}")
    record_acceptance("2", ok, detail)
    assert ok


# -- 3. operating-point key rates ------------------------------------------------------------

def test_criterion_3_table_rates():
    out = run_experiment(ExperimentConfig(experiment="table1"))
    s = out.summary
    devs = {m: s[m]["skr_deviation_pct"] for m in ("pcs64", "pcs256")}
    ordered = s["pcs64"]["skr_mbps"] > s["pcs256"]["skr_mbps"]
    ok = all(abs(d) <= 20 for d in devs.values()) and ordered
    detail = "; ".join(f"{m} SKR={s[m]['skr_mbps']:.2f} Mb/s ref={REFERENCE[m].skr_mbps} dev={devs[m]:+.2f}%"
                       for m in devs)
    record_acceptance("3", ok, f"{detail}; pcs64 > pcs256: {ordered} (tol 20%)")
    assert ok


# -- 4. distance reach -----------------------------------------------------------------------

def test_criterion_4_distance_reach():
    out = run_experiment(ExperimentConfig(experiment="distance-sweep"))
    cross = out.summary["crossing_km"]
    ok = cross["pcs64"] is not None and abs(cross["pcs64"] - 22) <= 3 and cross["pcs64"] > cross["pcs256"]
    record_acceptance("4", ok, f"zero crossing pcs64={cross['pcs64']:.2f} km pcs256={cross['pcs256']:.2f} km "
                               f"(target 22 +- 3 km, pcs64 > pcs256)")
    assert ok


# -- 5. estimator null, recovery and coverage -----------------------------------------------------

def test_criterion_5a_null_blocks():
    cfg = ExperimentConfig(
        experiment="e2e-sim", path="waveform", blocks=100, symbols_per_block=20_000, seeds=[11],
        impairments={"cfo_hz": 0.0, "linewidth_tx_hz": 0.0, "linewidth_lo_hz": 0.0, "xi_injected": 0.0},
        dsp={"periodogram_size": 1 << 16, "coarse_cfo_symbols": 1 << 15},
    )
    out = run_experiment(cfg)
    reports = [json.loads(v) for k, v in out.files.items() if k.startswith("blocks/")]
    ok_blocks = [r for r in reports if r["status"] == "ok"]
    z = np.array([r["xi_B_hat"] / r["xi_std_error"] for r in ok_blocks])
    inside = int(np.sum(np.abs(z) < 3))
    ok = len(reports) == 100 and inside >= 95
    record_acceptance("5a", ok, f"{inside}/{len(reports)} blocks with |xi_hat| < 3 SE ({len(ok_blocks)} decoded; "
                                f"z mean {z.mean():+.2f} std {z.std(ddof=1):.2f}; need >= 95)")
    assert ok


def test_criterion_5b_injected_recovery():
    cfg = ExperimentConfig(experiment="e2e-sim", blocks=20)
    out = run_experiment(cfg)
    s = out.summary["pcs64"]
    target = REFERENCE["pcs64"].xi_B
    dev = s["xi_B_hat_mean"] / target - 1
    ok = s["failed"] == 0 and abs(dev) <= 0.05
    record_acceptance("5b", ok, f"20-block mean xi_hat={s['xi_B_hat_mean']:.4e} injected={target} dev={100 * dev:+.2f}% "
                                f"(tol 5%, {s['symbols_per_block']} symbols per block)")
    assert ok


def test_criterion_5c_worst_case_coverage():
    trials, n_samples, eps, xi = 10_000, 10_000, 0.05, 6.34e-3
    link = LinkBudget(T=T_REF, eta=0.6, V_el=0.1, xi_B=xi)
    c = build_pcs_qam(64, REFERENCE["pcs64"].nu, REFERENCE["pcs64"].V_A)
    violations = 0
    for k in range(trials):
        # n_samples quadrature samples: half as many complex symbols
        x = sample_symbols(c, n_samples // 2, [5, k])
        y = symbol_channel(x, link, seed=5, block=k)
        rep = estimate_params(x, y, V_el=0.1, min_symbols=1)
        violations += worst_case_xi(rep.xi_B_hat, n_samples, eps, V_el=0.1) < xi
    rate = violations / trials
    ok = abs(rate - eps) <= 0.01
    record_acceptance("5c", ok, f"violation rate {100 * rate:.2f}% over {trials} trials of N={n_samples} "
                                f"at eps={eps} (target 5% +- 1%)")
    assert ok


# -- 6. DSP identities -----------------------------------------------------------------------------

def _transmit(n_data, seed, lead=3000):
    data = sample_symbols(build_pcs_qam(64, 0.0749, 4.74), 2 * n_data, seed).reshape(2, n_data)
    frame = build_frame(data, FC, seed=seed)
    w = shape_and_upconvert(frame, FC)
    return frame, w.replace(np.pad(w.samples, ((0, 0), (lead, 3000))))


def test_criterion_6_dsp_identities():
    # RRC cascade at symbol instants
    h = rrc_taps(FC)
    r = np.convolve(h, h)
    mid = len(r) // 2
    k = np.arange(-(mid // FC.up), mid // FC.up + 1)
    isi = float(np.max(np.abs(r[mid + k[k != 0] * FC.up])) / r[mid])

    # periodic autocorrelation of both preamble sequences
    zc = max(float(np.max(np.abs(np.fft.ifft(np.abs(np.fft.fft(zadoff_chu(512, q))) ** 2)[1:])))
             for q in FC.cazac_roots)

    # polarization demultiplexing through the full receiver
    xtalk = []
    for i, (theta, phi) in enumerate([(0.3, 0.4), (math.pi / 4, 0.7), (math.pi / 2, 0.0), (2.2, -1.0)]):
        frame, w = _transmit(20000, 100 + i)
        imp = ImpairmentConfig(pol_theta=theta, pol_phi=phi, seed=100 + i)
        rx = receive(apply_waveform_impairments(w, imp), frame, FC, DspConfig(), imp.scope_bandwidth_hz)
        xtalk.append(crosstalk_db(rx.taps, imp.pol_matrix()))

    # CFO at 20 MHz with shot and electronic noise, lasers ideal
    cfo_err = []
    for seed in range(10):
        frame, w = _transmit(20000, 200 + seed)
        imp = ImpairmentConfig(linewidth_tx_hz=0.0, linewidth_lo_hz=0.0, seed=200 + seed)
        rx = receive(apply_waveform_impairments(w, imp), frame, FC, DspConfig(), imp.scope_bandwidth_hz)
        cfo_err.append(abs(rx.cfo_hat - imp.cfo_hz))

    # back-to-back error vector magnitude
    frame, w = _transmit(10000, 300)
    sym, _ = matched_filter_downsample(w, FC)
    aligned, _, _ = synchronize(sym, FC)
    ref = frame.symbols
    got = aligned[:, :ref.shape[1]]
    evm = math.sqrt(np.mean(np.abs(got - ref) ** 2) / np.mean(np.abs(ref) ** 2))

    checks = {"isi": isi < 1e-4, "zc": zc < 1e-9, "cma": max(xtalk) < -20, "cfo": max(cfo_err) < 1e3,
              "evm": evm < 1e-3}
    ok = all(checks.values())
    record_acceptance("6", ok, f"RRC ISI {isi:.2e}; ZC sidelobe {zc:.2e}; CMA crosstalk worst {max(xtalk):.1f} dB; "
                               f"CFO error worst {max(cfo_err):.0f} Hz over 10 seeds (ideal lasers); "
                               f"EVM {evm:.2e}; failed: {[k for k, v in checks.items() if not v] or 'none'}")
    assert ok


# -- 7. quantum-state numerics -----------------------------------------------------------------------

def test_criterion_7_state_numerics():
    c = build_pcs_qam(64, 0.0749, 4.74)
    rho = modulated_density_matrix(c)
    self_d = trace_distance(rho, rho)

    pure_err = 0.0
    for alpha in (0.3, 1.0, 1.7 + 0.4j, 2.5j):
        a = DensityMatrix.from_pure(coherent_state_fock(alpha, 60))
        v = DensityMatrix.from_pure(coherent_state_fock(0, 60))
        pure_err = max(pure_err, abs(trace_distance(a, v) - math.sqrt(1 - math.exp(-abs(alpha) ** 2))))

    gaps = {}
    monotone = True
    for V_A in (4.74, 10.1):
        lb = LinkBudget(T=T_REF, eta=0.6, V_el=0.1, xi_B=0.012)
        zg = covariance_model(GAUSSIAN, V_A, lb.T, lb.eta, lb.V_el, lb.xi_A).Z
        row = []
        for order in (64, 256, 1024):
            nu = optimize_nu(order, V_A).nu_star
            zd = covariance_model(build_pcs_qam(order, nu, V_A), V_A, lb.T, lb.eta, lb.V_el, lb.xi_A).Z
            row.append(abs(zd - zg))
        gaps[V_A] = row
        monotone &= row[0] > row[1] > row[2]
    ok = self_d <= 1e-12 and pure_err <= 1e-9 and monotone
    gap_txt = "; ".join(f"V_A={v}: " + " > ".join(f"{g:.1e}" for g in row) for v, row in gaps.items())
    record_acceptance("7", ok, f"D(rho,rho)={self_d:.1e}; pure-state error {pure_err:.1e}; "
                               f"|Z - Z_gauss| over 64/256/1024: {gap_txt}")
    assert ok
