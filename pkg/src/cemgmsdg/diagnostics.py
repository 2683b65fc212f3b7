"""Error metrics, convergence studies and localization-decay studies."""
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .assembly import DEFAULT_GAMMA, FineOperators
from .cem import build_multiscale_basis, localization_error, m_schedule
from .grid import build_hierarchy
from .spectral import DEFAULT_L, build_spectral_basis
from .wavesim import (DEFAULT_T, DEFAULT_TAU, SourceLoad, SourceSpec, downscale, init_coarse,
                      init_fine, run_coarse, run_fine)

REPORT_HEADER = "H,m,L,gamma,tau,energy_err_pct,l2_err_pct,order_est,basis_secs,solve_secs"
REPORT_NOTE = ("# errors are relative percentages at the final time; energy error uses the "
               "broken a-norm, L2 error the mass matrix; order_est is from the L2 column")


def _relative(u, v, W):
    e = u - v
    num = math.sqrt(max(float(e @ (W @ e)), 0.0))
    den = math.sqrt(max(float(u @ (W @ u)), 0.0))
    if den == 0.0:
        warnings.warn("reference norm is zero; reporting the absolute error", RuntimeWarning,
                      stacklevel=3)
        return num, False
    return 100.0 * num / den, True


def energy_error(u_fine, u_ms, N):
    """``100 ||u - u_ms||_a / ||u||_a`` (absolute norm if ``||u||_a == 0``)."""
    return _relative(np.asarray(u_fine, float), np.asarray(u_ms, float), N)[0]


def l2_error(u_fine, u_ms, M):
    return _relative(np.asarray(u_fine, float), np.asarray(u_ms, float), M)[0]


def observed_order(e_coarse, e_fine, ratio=2.0):
    return math.log(e_coarse / e_fine) / math.log(ratio)


@dataclass
class ErrorReport:
    H: float
    m: int
    L: int
    gamma: float
    tau: float
    energy_error_pct: float
    l2_error_pct: float
    order_est: float = float("nan")
    basis_secs: float = 0.0
    solve_secs: float = 0.0
    relative: bool = True

    def csv_row(self, timings=True):
        def f(x):
            return "" if isinstance(x, float) and math.isnan(x) else repr(float(x))
        secs = (f(self.basis_secs), f(self.solve_secs)) if timings else ("", "")
        return ",".join([f(self.H), str(self.m), str(self.L), f(self.gamma), f(self.tau),
                         f(self.energy_error_pct), f(self.l2_error_pct), f(self.order_est), *secs])


def write_report_csv(path, reports, timings=True):
    lines = [REPORT_NOTE, REPORT_HEADER] + [r.csv_row(timings) for r in reports]
    Path(path).write_text("\n".join(lines) + "\n")


def read_report_csv(path):
    rows = []
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    keys = lines[0].split(",")
    for ln in lines[1:]:
        rows.append({k: (float(v) if v else float("nan")) for k, v in zip(keys, ln.split(","))})
    return rows


@dataclass
class StudyConfig:
    """Convergence study on a fixed fine grid of ``n_fine`` cells per dimension.

    ``medium(mesh)`` returns a coefficient field; ``u0``/``v0`` are callables
    ``(x, y) -> values`` or None for zero data.  ``m_list`` overrides the
    schedule when given.
    """

    n_fine: int
    coarse_sizes: list  # nc values, coarse to fine
    medium: Callable
    source: SourceSpec = field(default_factory=SourceSpec)
    m_list: list | None = None
    schedule: str = "formula"
    L: int = DEFAULT_L
    gamma: float = DEFAULT_GAMMA
    tau: float = DEFAULT_TAU
    T: float = DEFAULT_T
    u0: Callable | None = None
    v0: Callable | None = None
    threads: int = 1


def initial_vectors(ops, u0, v0):
    from .assembly import l2_project
    n = ops.mesh.n_dofs
    U = l2_project(ops.mesh, u0, solver=ops.mass_solver) if u0 else np.zeros(n)
    V = l2_project(ops.mesh, v0, solver=ops.mass_solver) if v0 else np.zeros(n)
    return U, V


def fine_reference(ops, source, tau, n_steps, u0=None, v0=None):
    load = SourceLoad(ops.mesh, source)
    U, V = initial_vectors(ops, u0, v0)
    W0, W1 = init_fine(U, V, load(0.0), ops.A, ops.mass_solver, tau)
    state, _ = run_fine(ops.A, ops.mass_solver, ops.M, W0, W1, tau, n_steps, load)
    return state.U_curr


def multiscale_solution(ops, basis, source, tau, n_steps, u0=None, v0=None):
    load = SourceLoad(ops.mesh, source)
    U, V = initial_vectors(ops, u0, v0)
    C0, C1 = init_coarse(U, V, load(0.0), basis, ops.A, ops.M, tau)
    state, _ = run_coarse(basis, C0, C1, tau, n_steps, load)
    return downscale(basis, state.U_curr)


def run_convergence_study(config, log=None):
    """One :class:`ErrorReport` per coarse size, errors at the final time ``T``.

    The fine reference lives in the broken space of each coarse partition, so
    it is recomputed (once) for every distinct ``nc``.
    """
    n_steps = int(round(config.T / config.tau)) - 1
    reports = []
    for k, nc in enumerate(config.coarse_sizes):
        if config.n_fine % nc:
            raise ValueError(f"coarse size 1/{nc} does not nest in fine grid 1/{config.n_fine}")
        mesh = build_hierarchy(nc, config.n_fine // nc)
        field_ = config.medium(mesh)
        m = config.m_list[k] if config.m_list is not None else m_schedule(mesh.H, config.schedule)
        ops = FineOperators(mesh, field_, config.gamma, check_coercivity=False)
        t0 = time.perf_counter()
        ts = build_spectral_basis(mesh, field_, ops.M, config.L, threads=config.threads)
        basis = build_multiscale_basis(mesh, ops.A, ts, m, threads=config.threads)
        t1 = time.perf_counter()
        u_ms = multiscale_solution(ops, basis, config.source, config.tau, n_steps,
                                   config.u0, config.v0)
        t2 = time.perf_counter()
        u_ref = fine_reference(ops, config.source, config.tau, n_steps, config.u0, config.v0)
        en, rel_e = _relative(u_ref, u_ms, ops.N)
        l2, rel_l = _relative(u_ref, u_ms, ops.M)
        rep = ErrorReport(H=mesh.H, m=m, L=config.L, gamma=config.gamma, tau=config.tau,
                          energy_error_pct=en, l2_error_pct=l2, basis_secs=t1 - t0,
                          solve_secs=t2 - t1, relative=rel_e and rel_l)
        if reports and reports[-1].l2_error_pct > 0 and l2 > 0:
            rep.order_est = observed_order(reports[-1].l2_error_pct, l2,
                                           ratio=reports[-1].H / rep.H)
        reports.append(rep)
        if log:
            log(rep)
    return reports


@dataclass
class DecayTable:
    m_values: list
    errors: np.ndarray  # (len(m_values), n_columns)
    slope: float
    intercept: float
    r_squared: float

    @property
    def mean_errors(self):
        return self.errors.mean(axis=1)


def fit_log_decay(m_values, mean_errors):
    """Least squares fit of ``log(error)`` against ``m``; returns slope, intercept, R^2."""
    m = np.asarray(m_values, float)
    e = np.asarray(mean_errors, float)
    keep = e > 0
    m, y = m[keep], np.log(e[keep])
    if len(m) < 2:
        return float("nan"), float("nan"), float("nan")
    slope, intercept = np.polyfit(m, y, 1)
    resid = y - (slope * m + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def run_decay_study(mesh, field_, m_values, L=DEFAULT_L, gamma=DEFAULT_GAMMA, ops=None,
                    test_space=None):
    """``||psi_j - psi_{j,m}||_a`` for every column and each ``m``, plus a log-linear fit."""
    ops = ops or FineOperators(mesh, field_, gamma, check_coercivity=False)
    ts = test_space or build_spectral_basis(mesh, field_, ops.M, L)
    glob = build_multiscale_basis(mesh, ops.A, ts, None, coarse_operator=False)
    rows = []
    for m in m_values:
        loc = build_multiscale_basis(mesh, ops.A, ts, m, coarse_operator=False)
        rows.append(localization_error(glob.Psi, loc.Psi, ops.N))
    errors = np.vstack(rows)
    slope, intercept, r2 = fit_log_decay(m_values, errors.mean(axis=1))
    return DecayTable(list(m_values), errors, slope, intercept, r2)


def write_decay_csv(path, table):
    lines = ["m,mean_err,max_err,min_err"]
    for m, row in zip(table.m_values, table.errors):
        lines.append(f"{m},{float(row.mean())!r},{float(row.max())!r},{float(row.min())!r}")
    lines.append(f"# slope={table.slope!r} intercept={table.intercept!r} r2={table.r_squared!r}")
    Path(path).write_text("\n".join(lines) + "\n")
