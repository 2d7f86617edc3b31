"""Experiment runners behind the ``pcsqkd`` command line.

Every runner takes a validated :class:`ExperimentConfig` and fills an
:class:`Outputs` sink with named files. Grid points and blocks may run in a
process pool, but results are assembled in index order and floats are
written with ``repr``, so a fixed configuration gives byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable, NamedTuple

import numpy as np
from scipy.optimize import brentq

from .channel import (
    ImpairmentConfig,
    apply_waveform_impairments,
    calibration_capture,
    symbol_channel,
    transmittance_at,
)
from .constellation import build_pcs_qam, optimize_nu, sample_symbols
from .errors import (
    AmbiguousCFOError,
    DomainError,
    EqualizerDivergenceError,
    EstimationPrecisionError,
    FrameLengthError,
    SyncError,
)
from .rxdsp import DspConfig, estimate_params, receive
from .security import GAUSSIAN, LinkBudget, SecurityConfig, rate_report, secret_fraction, skr, worst_case_xi
from .txdsp import FrameConfig, build_frame, shape_and_upconvert

EXPERIMENTS = ("rate-curve", "distance-sweep", "e2e-sim", "table1", "shape-opt")
PATHS = ("fast", "waveform")


class ReferenceRow(NamedTuple):
    order: int
    nu: float
    V_A: float
    xi_B: float
    skr_mbps: float


# measured operating points of the 9.5 km link used as defaults and targets
REFERENCE = {
    "pcs64": ReferenceRow(64, 0.0749, 4.74, 6.34e-3, 67.6),
    "pcs256": ReferenceRow(256, 0.0294, 10.1, 1.10e-2, 66.8),
}

# default link for the V_A sweep
CURVE_LINK = {"loss_db": 2.2, "eta": 0.6, "V_el": 0.1, "xi_B": 0.012}

DEFAULT_MODULATIONS = {
    "rate-curve": ("pcs64", "pcs256", GAUSSIAN),
    "distance-sweep": ("pcs64", "pcs256"),
    "e2e-sim": ("pcs64",),
    "table1": ("pcs64", "pcs256"),
    "shape-opt": ("pcs64", "pcs256"),
}

DEFAULT_GRID = {
    "V_A_min": 1.0,
    "V_A_max": 20.0,
    "V_A_step": 0.5,
    "distance_max_km": 40.0,
    "distance_step_km": 0.5,
}

# per-block failures that are recorded and excluded instead of aborting a run
BLOCK_ERRORS = (SyncError, EqualizerDivergenceError, AmbiguousCFOError, EstimationPrecisionError, FrameLengthError)


class ConfigError(DomainError):
    """Experiment configuration that cannot be run."""


def order_of(name: str) -> int:
    m = re.fullmatch(r"pcs(\d+)", name)
    if m is None:
        raise ConfigError(f"{name!r} is not a shaped-QAM modulation")
    return int(m.group(1))


@dataclass
class ExperimentConfig:
    experiment: str
    modulations: tuple = ()
    link: dict = field(default_factory=dict)
    security: dict = field(default_factory=dict)
    frame: dict = field(default_factory=dict)
    impairments: dict = field(default_factory=dict)
    dsp: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    seeds: tuple = (0,)
    blocks: int = 20
    path: str = "fast"
    symbols_per_block: int | None = None
    calibration_symbols: int = 1_000_000
    V_A: float | None = None
    nu: float | None = None
    workers: int = 1
    output_dir: str = "runs"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.path not in PATHS:
            raise ConfigError(f"unknown path {self.path!r}")
        if not self.modulations:
            self.modulations = DEFAULT_MODULATIONS[self.experiment]
        self.modulations = tuple(self.modulations)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.blocks < 1 or self.workers < 1:
            raise ConfigError("blocks and workers must be positive")
        for m in self.modulations:
            if m != GAUSSIAN:
                order_of(m)
        if self.experiment in ("distance-sweep", "table1", "e2e-sim"):
            for m in self.modulations:
                if m not in REFERENCE and (self.experiment != "e2e-sim" or self.V_A is None):
                    raise ConfigError(f"{self.experiment} has no reference operating point for {m!r}")
        if self.experiment == "shape-opt" and GAUSSIAN in self.modulations:
            raise ConfigError("shape-opt compares discrete constellations only")
        unknown = set(self.grid) - set(DEFAULT_GRID)
        if unknown:
            raise ConfigError(f"unknown grid keys {sorted(unknown)}")
        # building every module type up front surfaces bad parameters before any work
        self.link_budget()
        self.security_config()
        self.frame_config()
        self.impairment_config()
        self.dsp_config()
        self.grid_values("V_A")
        self.grid_values("distance")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown configuration keys {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modulations"] = list(self.modulations)
        d["seeds"] = list(self.seeds)
        return d

    def link_budget(self) -> LinkBudget:
        p = {**CURVE_LINK, **self.link}
        unknown = set(p) - set(CURVE_LINK)
        if unknown:
            raise ConfigError(f"unknown link keys {sorted(unknown)}")
        return LinkBudget(T=10 ** (-p["loss_db"] / 10), eta=p["eta"], V_el=p["V_el"], xi_B=p["xi_B"])

    def security_config(self) -> SecurityConfig:
        return SecurityConfig(**self.security)

    def frame_config(self) -> FrameConfig:
        return FrameConfig.from_dict(self.frame)

    def impairment_config(self, modulation: str | None = None, seed: int | None = None) -> ImpairmentConfig:
        p = dict(self.impairments)
        if modulation in REFERENCE and "xi_injected" not in p:
            p["xi_injected"] = REFERENCE[modulation].xi_B
        if seed is not None:
            p["seed"] = seed
        return ImpairmentConfig(**p)

    def dsp_config(self) -> DspConfig:
        p = dict(self.dsp)
        if "phase_filter_lengths" in p:
            p["phase_filter_lengths"] = tuple(p["phase_filter_lengths"])
        return DspConfig(**p)

    def grid_values(self, axis: str) -> np.ndarray:
        g = {**DEFAULT_GRID, **self.grid}
        if axis == "V_A":
            lo, hi, step = g["V_A_min"], g["V_A_max"], g["V_A_step"]
            if not 0 < lo <= hi or step <= 0:
                raise ConfigError("V_A grid needs 0 < V_A_min <= V_A_max and a positive step")
        else:
            lo, hi, step = 0.0, g["distance_max_km"], g["distance_step_km"]
            if hi <= 0 or step <= 0:
                raise ConfigError("distance grid needs a positive maximum and step")
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return lo + step * np.arange(n)

    def block_symbols(self) -> int:
        if self.symbols_per_block is not None:
            n = int(self.symbols_per_block)
        elif self.path == "fast":
            n = int(self.security_config().N)
        else:
            n = 40_000
        if n < 2 or n % 2:
            raise ConfigError("symbols_per_block must be an even count (two polarizations)")
        return n


@dataclass
class Outputs:
    """Named output files in insertion order, plus a JSON-able summary."""

    files: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    failures: int = 0

    def add(self, name: str, content: bytes | str) -> None:
        self.files[name] = content.encode() if isinstance(content, str) else content


# -- formatting --------------------------------------------------------------------

def fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def csv_bytes(header: list[str], rows: list[list]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue().encode()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def json_bytes(obj) -> bytes:
    return (json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n").encode()


def pool_map(fn: Callable, items: list, workers: int = 1) -> list:
    """Ordered map, optionally over a process pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# -- rate curve --------------------------------------------------------------------

def _curve_point(args) -> tuple[float, float]:
    name, V_A, link, sec = args
    if name == GAUSSIAN:
        return math.nan, secret_fraction(GAUSSIAN, V_A, link, sec).value
    order = order_of(name)
    nu = optimize_nu(order, V_A).nu_star
    return nu, secret_fraction(build_pcs_qam(order, nu, V_A), V_A, link, sec).value


def run_rate_curve(cfg: ExperimentConfig, out: Outputs) -> None:
    """Secret fraction against V_A with the shaping re-optimized at each point."""
    link, sec = cfg.link_budget(), cfg.security_config()
    grid = cfg.grid_values("V_A")
    jobs = [(m, float(v), link, sec) for m in cfg.modulations for v in grid]
    res = pool_map(_curve_point, jobs, cfg.workers)
    per_mod = {m: res[i * len(grid):(i + 1) * len(grid)] for i, m in enumerate(cfg.modulations)}

    header = ["V_A_snu"]
    for m in cfg.modulations:
        header.append(f"secret_fraction_{m}_bits_per_symbol")
        if m != GAUSSIAN:
            header.append(f"nu_{m}")
    rows = []
    for k, v in enumerate(grid):
        row = [float(v)]
        for m in cfg.modulations:
            nu, sf = per_mod[m][k]
            row.append(sf)
            if m != GAUSSIAN:
                row.append(nu)
        rows.append(row)
    out.add("rate_curve.csv", csv_bytes(header, rows))

    peaks = {}
    for m in cfg.modulations:
        sfs = np.array([r[1] for r in per_mod[m]])
        k = int(np.argmax(sfs))
        peaks[m] = {"V_A_snu": float(grid[k]), "secret_fraction_bits_per_symbol": float(sfs[k])}
    out.summary = {"peaks": peaks, "mode": "finite-size" if sec.finite_size else "asymptotic"}
    out.add("rate_curve_summary.json", json_bytes(out.summary))


# -- distance sweep ----------------------------------------------------------------

def _fraction_at(distance_km, c, row, link, sec, loss_per_km):
    T = transmittance_at(distance_km, loss_per_km)
    return secret_fraction(c, row.V_A, LinkBudget(T=T, eta=link.eta, V_el=link.V_el, xi_B=row.xi_B), sec).value


def run_distance_sweep(cfg: ExperimentConfig, out: Outputs) -> None:
    """Secret fraction and key rate against fiber length at fixed ``xi_B``."""
    link, sec, frame = cfg.link_budget(), cfg.security_config(), cfg.frame_config()
    loss_per_km = cfg.impairment_config().loss_db_per_km
    grid = cfg.grid_values("distance")
    header, cols, crossing = ["distance_km"], [], {}
    for m in cfg.modulations:
        row = REFERENCE[m]
        c = build_pcs_qam(row.order, row.nu, row.V_A)
        sf = np.array([_fraction_at(d, c, row, link, sec, loss_per_km) for d in grid])
        rate = [skr(v, frame.symbol_rate, frame.pilot_ratio)[0] / 1e6 for v in sf]
        header += [f"secret_fraction_{m}_bits_per_symbol", f"skr_{m}_mbps"]
        cols += [sf, rate]
        neg = np.nonzero(sf <= 0)[0]
        if neg.size == 0 or neg[0] == 0:
            crossing[m] = None if neg.size == 0 else 0.0
        else:
            k = neg[0]
            crossing[m] = brentq(_fraction_at, grid[k - 1], grid[k], args=(c, row, link, sec, loss_per_km),
                                 xtol=1e-6)
    rows = [[float(d)] + [col[k] for col in cols] for k, d in enumerate(grid)]
    out.add("distance_sweep.csv", csv_bytes(header, rows))
    out.summary = {"crossing_km": crossing, "loss_db_per_km": loss_per_km,
                   "mode": "finite-size" if sec.finite_size else "asymptotic"}
    out.add("distance_sweep_summary.json", json_bytes(out.summary))


# -- table of operating points -------------------------------------------------------

def run_table1(cfg: ExperimentConfig, out: Outputs) -> None:
    """Recompute the shaping exponent and key rate at each reference operating point."""
    link, sec, frame = cfg.link_budget(), cfg.security_config(), cfg.frame_config()
    T = cfg.impairment_config().link().T
    header = ["constellation", "nu_star", "nu_reference", "nu_deviation_pct", "V_A_snu", "xi_B_snu",
              "xi_worst_snu", "I_AB_bits", "chi_EB_bits", "secret_fraction_bits_per_symbol", "skr_mbps",
              "skr_reference_mbps", "skr_deviation_pct"]
    rows = []
    for m in cfg.modulations:
        row = REFERENCE[m]
        nu_star = optimize_nu(row.order, row.V_A).nu_star
        lb = LinkBudget(T=T, eta=link.eta, V_el=link.V_el, xi_B=row.xi_B)
        rep = rate_report(build_pcs_qam(row.order, row.nu, row.V_A), row.V_A, lb, sec,
                          frame.symbol_rate, frame.pilot_ratio)
        rate = rep.skr / 1e6
        rows.append([m, nu_star, row.nu, 100 * (nu_star / row.nu - 1), row.V_A, row.xi_B, rep.xi_used,
                     rep.I_AB, rep.chi_EB, rep.secret_fraction, rate, row.skr_mbps,
                     100 * (rate / row.skr_mbps - 1)])
    out.add("table1.csv", csv_bytes(header, rows))
    lines = [f"{'constellation':<14}{'nu*':>10}{'ref':>9}{'dev%':>8}{'V_A':>7}{'xi_B':>10}"
             f"{'SKR Mb/s':>10}{'ref':>7}{'dev%':>8}"]
    for r in rows:
        lines.append(f"{r[0]:<14}{r[1]:>10.5f}{r[2]:>9.4f}{r[3]:>+8.2f}{r[4]:>7.2f}{r[5]:>10.2e}"
                     f"{r[10]:>10.2f}{r[11]:>7.1f}{r[12]:>+8.2f}")
    out.add("table1.txt", "\n".join(lines) + "\n")
    out.summary = {r[0]: {"nu_star": r[1], "nu_deviation_pct": r[3], "skr_mbps": r[10],
                          "skr_deviation_pct": r[12]} for r in rows}


# -- shaping optimization ------------------------------------------------------------

def _shape_point(args):
    order, V_A = args
    return optimize_nu(order, V_A)


def run_shape_opt(cfg: ExperimentConfig, out: Outputs) -> None:
    """Optimal shaping exponent and residual trace distance per order over a V_A grid."""
    grid = cfg.grid_values("V_A")
    orders = [order_of(m) for m in cfg.modulations]
    jobs = [(o, float(v)) for o in orders for v in grid]
    res = pool_map(_shape_point, jobs, cfg.workers)
    header = ["V_A_snu"]
    for m in cfg.modulations:
        header += [f"nu_star_{m}", f"trace_distance_{m}"]
    rows, monotone = [], True
    for k, v in enumerate(grid):
        row, dists = [float(v)], []
        for i in range(len(orders)):
            r = res[i * len(grid) + k]
            row += [r.nu_star, r.min_distance]
            dists.append(r.min_distance)
        by_order = [d for _, d in sorted(zip(orders, dists))]
        monotone &= all(b < a for a, b in zip(by_order, by_order[1:]))
        rows.append(row)
    out.add("shape_opt.csv", csv_bytes(header, rows))
    out.summary = {"distance_decreases_with_order": bool(monotone)}
    out.add("shape_opt_summary.json", json_bytes(out.summary))


# -- end-to-end blocks ----------------------------------------------------------------

@dataclass(frozen=True)
class BlockTask:
    modulation: str
    order: int
    nu: float
    V_A: float
    seed: int
    block: int
    n_symbols: int
    path: str
    impairments: ImpairmentConfig
    frame: FrameConfig
    dsp: DspConfig
    security: SecurityConfig
    calibration: Any = None


def _block_rates(task: BlockTask, rep) -> dict:
    imp, sec = task.impairments, task.security
    c = build_pcs_qam(task.order, task.nu, task.V_A)
    T_hat = min(max(rep.etaT_hat / imp.eta, 1e-12), 1.0)
    n = rep.symbols_used
    xi_worst = worst_case_xi(rep.xi_B_hat, n, sec.epsilon, V_el=rep.V_el) if sec.finite_size else rep.xi_B_hat
    lb = LinkBudget(T=T_hat, eta=imp.eta, V_el=rep.V_el, xi_B=max(xi_worst, 0.0))
    kf = secret_fraction(c, task.V_A, lb, replace(sec, finite_size=False, N=n))
    rate, raw = skr(kf.value, task.frame.symbol_rate, task.frame.pilot_ratio)
    return {"xi_worst": xi_worst, "T_hat": T_hat, "I_AB": kf.I_AB, "chi_EB": kf.chi_EB,
            "secret_fraction": kf.value, "skr_mbps": rate / 1e6, "skr_raw_mbps": raw / 1e6}


def simulate_fast_block(task: BlockTask):
    """Symbol-rate channel; returns the estimation report."""
    c = build_pcs_qam(task.order, task.nu, task.V_A)
    x = sample_symbols(c, task.n_symbols, [task.seed, task.block, 1])
    y = symbol_channel(x, task.impairments.link(), seed=task.seed, block=task.block)
    return estimate_params(x, y, V_el=task.impairments.V_el)


def simulate_waveform_block(task: BlockTask, calibration=None):
    """Full Tx waveform, fiber and front-end, then Bob's DSP; returns the estimation report."""
    c = build_pcs_qam(task.order, task.nu, task.V_A)
    per_pol = task.n_symbols // 2
    data = sample_symbols(c, 2 * per_pol, [task.seed, task.block, 1]).reshape(2, per_pol)
    frame = build_frame(data, task.frame, seed=[task.seed, task.block, 2])
    w = shape_and_upconvert(frame, task.frame, seed=task.seed)
    # unknown capture start exercises the synchronization
    lead = int(np.random.default_rng([task.seed, task.block, 3]).integers(500, 1500))
    w = w.replace(np.pad(w.samples, ((0, 0), (lead, 1000))))
    rw = apply_waveform_impairments(w, task.impairments, task.block)
    cal = calibration if calibration is not None else task.calibration
    rx = receive(rw, frame, task.frame, task.dsp, task.impairments.scope_bandwidth_hz, cal)
    rep = estimate_params(frame.data, rx.data, calibration=cal)
    rep.cfo_hat = rx.cfo_hat
    rep.residual_phase_var = rx.residual_phase_var
    return rep


def run_block(task: BlockTask) -> dict:
    report = {"modulation": task.modulation, "seed": task.seed, "block": task.block, "path": task.path}
    try:
        rep = simulate_fast_block(task) if task.path == "fast" else simulate_waveform_block(task)
    except BLOCK_ERRORS as e:
        report.update(status="failed", error=f"{type(e).__name__}: {e}")
        return report
    report.update(status="ok", **rep.to_dict(), **_block_rates(task, rep))
    return report


BLOCK_COLUMNS = [
    ("seed", "seed"), ("block", "block"), ("status", "status"), ("etaT_hat", "etaT_hat"),
    ("xi_B_hat", "xi_B_hat_snu"), ("xi_std_error", "xi_std_error_snu"), ("xi_worst", "xi_worst_snu"),
    ("V_B_hat", "V_B_hat_snu"), ("symbols_used", "symbols_used"), ("secret_fraction", "secret_fraction_bits_per_symbol"),
    ("skr_mbps", "skr_mbps"), ("cfo_hat", "cfo_hat_hz"),
]


def run_e2e_sim(cfg: ExperimentConfig, out: Outputs) -> None:
    """Per-block excess-noise estimates and key rates over seeded blocks."""
    frame, dsp, sec = cfg.frame_config(), cfg.dsp_config(), cfg.security_config()
    n = cfg.block_symbols()
    summary = {}
    for m in cfg.modulations:
        if m == GAUSSIAN:
            raise ConfigError("e2e-sim needs a discrete constellation")
        order = order_of(m)
        ref = REFERENCE.get(m)
        V_A = cfg.V_A if cfg.V_A is not None else ref.V_A
        if cfg.nu is not None:
            nu = cfg.nu
        elif ref is not None and V_A == ref.V_A:
            nu = ref.nu
        else:
            nu = optimize_nu(order, V_A).nu_star
        tasks = []
        for seed in cfg.seeds:
            imp = cfg.impairment_config(m, seed)
            cal = None
            if cfg.path == "waveform":
                cal = calibration_capture(imp, cfg.calibration_symbols, frame)
            tasks += [BlockTask(m, order, nu, V_A, seed, b, n, cfg.path, imp, frame, dsp, sec, cal)
                      for b in range(cfg.blocks)]
        reports = pool_map(run_block, tasks, cfg.workers)
        for r in reports:
            out.add(f"blocks/{m}_seed{r['seed']}_block{r['block']:04d}.json", json_bytes(r))
        out.add(f"e2e_{m}_blocks.csv",
                csv_bytes([h for _, h in BLOCK_COLUMNS], [[r.get(k) for k, _ in BLOCK_COLUMNS] for r in reports]))
        ok = [r for r in reports if r["status"] == "ok"]
        failed = len(reports) - len(ok)
        out.failures += failed
        stats = {"blocks": len(reports), "failed": failed, "nu": nu, "V_A": V_A,
                 "xi_injected": tasks[0].impairments.xi_injected, "symbols_per_block": n}
        for key in ("xi_B_hat", "xi_worst", "etaT_hat", "skr_mbps", "secret_fraction"):
            v = np.array([r[key] for r in ok], dtype=float)
            stats[f"{key}_mean"] = float(v.mean()) if v.size else None
            stats[f"{key}_std"] = float(v.std(ddof=1)) if v.size > 1 else None
        summary[m] = stats
    out.summary = summary
    out.add("e2e_summary.json", json_bytes(summary))


RUNNERS = {
    "rate-curve": run_rate_curve,
    "distance-sweep": run_distance_sweep,
    "e2e-sim": run_e2e_sim,
    "table1": run_table1,
    "shape-opt": run_shape_opt,
}


def run_experiment(cfg: ExperimentConfig, out: Outputs | None = None) -> Outputs:
    out = Outputs() if out is None else out
    RUNNERS[cfg.experiment](cfg, out)
    return out
