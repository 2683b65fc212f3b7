"""Command line front end driven by an INI experiment file.

Subcommands: ``bases``, ``solve``, ``convergence``, ``decay``, ``export-field``.
Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 stability refusal.
"""
import argparse
import configparser
import io
import math
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import DEFAULT_GAMMA, FineOperators
from .cem import SingularKKTError, build_multiscale_basis, load_basis, m_schedule, save_basis
from .diagnostics import (ErrorReport, StudyConfig, energy_error, fine_reference, initial_vectors,
                          l2_error, run_convergence_study, run_decay_study, write_decay_csv,
                          write_report_csv)
from .grid import build_hierarchy
from .medium import RasterFormatError, constant_field, load_raster, synthetic_field
from .spectral import DEFAULT_L, EigenSolverError, build_spectral_basis, write_eigenvalue_csv
from .wavesim import (DEFAULT_F0, DEFAULT_T, DEFAULT_TAU, SourceLoad, SourceSpec, StabilityWarning,
                      downscale, estimate_cfl, init_coarse, run_coarse)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_UNSTABLE = 0, 2, 3, 4


class ConfigError(ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class StabilityRefusal(RuntimeError):
    pass


def _int(s):
    try:
        return int(s)
    except ValueError:
        raise ValueError("expected an integer") from None


def _pos_int(s):
    v = _int(s)
    if v < 1:
        raise ValueError("must be a positive integer")
    return v


def _nonneg_int(s):
    v = _int(s)
    if v < 0:
        raise ValueError("must be a non-negative integer")
    return v


def _float(s):
    try:
        return float(s)
    except ValueError:
        raise ValueError("expected a number") from None


def _pos_float(s):
    v = _float(s)
    if not v > 0 or not math.isfinite(v):
        raise ValueError("must be a positive number")
    return v


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return s
    return parse


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("must be true or false")


def _int_list(s):
    vals = [_int(x) for x in s.replace(",", " ").split()]
    if not vals:
        raise ValueError("must be a non-empty list of integers")
    return vals


# section -> key -> (parser, default); None means unset
SCHEMA = {
    "mesh": {"nc": (_pos_int, 8), "nf_per_block": (_pos_int, 8)},
    "medium": {
        "kind": (_choice("constant", "synthetic", "raster"), "constant"),
        "value": (_pos_float, 1.0),
        "background": (_pos_float, 1.0),
        "contrast": (_float, 1.0),
        "pattern": (_choice("inclusions", "channels"), "inclusions"),
        "path": (str, None),
        "format": (_choice("ascii", "binary"), "ascii"),
    },
    "discretization": {
        "gamma": (_pos_float, float(DEFAULT_GAMMA)),
        "L": (_pos_int, DEFAULT_L),
        "m": (_nonneg_int, None),
        "m_schedule": (_choice("formula", "table1"), "formula"),
        "init": (_choice("b-projection", "l2-gram"), "b-projection"),
        "init_stiffness": (_choice("coarse", "fine"), "coarse"),
    },
    "time": {"tau": (_pos_float, DEFAULT_TAU), "T": (_pos_float, DEFAULT_T)},
    "source": {
        "kind": (_choice("ricker", "none"), "ricker"),
        "f0": (_pos_float, DEFAULT_F0),
        "h_src": (_pos_float, 1.0 / 256),
        "spatial_sign": (_choice("positive", "negative"), "positive"),
        "center_x": (_float, 0.5),
        "center_y": (_float, 0.5),
    },
    "initial": {
        "u0": (_choice("zero", "sine", "gaussian"), "zero"),
        "v0": (_choice("zero", "sine", "gaussian"), "zero"),
        "width": (_pos_float, 0.05),
    },
    "outputs": {
        "dir": (str, "out"),
        "report": (str, "report.csv"),
        "basis": (str, "basis.bin"),
        "snapshot_stride": (_nonneg_int, 0),
        "field_format": (_choice("vtk", "raw"), "vtk"),
        "reference": (_bool, False),
        "record_timings": (_bool, False),
    },
    "study": {
        "n_fine": (_pos_int, None),
        "coarse_sizes": (_int_list, None),
        "m_list": (_int_list, None),
        "decay_m": (_int_list, [0, 1, 2, 3, 4]),
    },
    "seeds": {"medium": (_int, 0)},
}


@dataclass
class ExperimentConfig:
    """Validated experiment settings, one attribute dict per INI section."""

    mesh: dict
    medium: dict
    discretization: dict
    time: dict
    source: dict
    initial: dict
    outputs: dict
    study: dict
    seeds: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def n_steps(self):
        # steps after the (U^0, U^1) start pair so the run ends at t = T
        return max(int(round(self.time["T"] / self.time["tau"])) - 1, 0)

    def to_ini(self):
        """INI text that parses back to an equal config (unset keys omitted)."""
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section in SCHEMA:
            cp[section] = {}
            for k, v in getattr(self, section).items():
                if v is None:
                    continue
                if isinstance(v, list):
                    v = ",".join(map(str, v))
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                elif isinstance(v, float):
                    v = repr(v)
                cp[section][k] = str(v)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def out_path(self, name):
        out = Path(self.outputs["dir"])
        if not out.is_absolute():
            out = self.base_dir / out
        out.mkdir(parents=True, exist_ok=True)
        return out / name

    def source_spec(self):
        s = self.source
        return SourceSpec(kind=s["kind"], f0=s["f0"], h_src=s["h_src"],
                          center=(s["center_x"], s["center_y"]), spatial_sign=s["spatial_sign"])

    def coarse_m(self, H):
        d = self.discretization
        return d["m"] if d["m"] is not None else m_schedule(H, d["m_schedule"])

    def medium_factory(self):
        md, seed = self.medium, self.seeds["medium"]

        def make(mesh):
            if md["kind"] == "constant":
                return constant_field(mesh, md["value"])
            if md["kind"] == "synthetic":
                return synthetic_field(mesh, md["background"], md["contrast"], md["pattern"], seed)
            path = Path(md["path"])
            if not path.is_absolute():
                path = self.base_dir / path
            return load_raster(path, md["format"], mesh)
        return make


def parse_config(text, base_dir=None):
    """Parse and validate INI text; raises :class:`ConfigError` naming the key."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", f"malformed config: {exc}".splitlines()[0]) from exc
    unknown = [s for s in cp.sections() if s not in SCHEMA]
    if unknown:
        raise ConfigError(unknown[0], "unknown section")
    values = {}
    for section, keys in SCHEMA.items():
        got = dict(cp[section]) if cp.has_section(section) else {}
        for k in got:
            if k not in keys:
                raise ConfigError(f"{section}.{k}", "unknown key")
        parsed = {}
        for k, (conv, default) in keys.items():
            if k in got:
                try:
                    parsed[k] = conv(got[k].strip())
                except ValueError as exc:
                    raise ConfigError(f"{section}.{k}", f"{exc} (got {got[k]!r})") from None
            else:
                parsed[k] = default
        values[section] = parsed
    cfg = ExperimentConfig(**values, base_dir=Path(base_dir) if base_dir else Path.cwd())
    _cross_check(cfg)
    return cfg


def _cross_check(cfg):
    md = cfg.medium
    if md["kind"] == "synthetic" and md["contrast"] < 1:
        raise ConfigError("medium.contrast", "must be >= 1")
    if md["kind"] == "raster" and not md["path"]:
        raise ConfigError("medium.path", "raster medium needs a path")
    if cfg.discretization["L"] >= (cfg.mesh["nf_per_block"] + 1) ** 2:
        raise ConfigError("discretization.L", "exceeds the block dof count")
    if cfg.time["tau"] > cfg.time["T"]:
        raise ConfigError("time.tau", "larger than the final time T")
    st = cfg.study
    if st["n_fine"] is not None and st["coarse_sizes"] is not None:
        for nc in st["coarse_sizes"]:
            if nc < 1 or st["n_fine"] % nc:
                raise ConfigError("study.coarse_sizes", f"1/{nc} does not nest in 1/{st['n_fine']}")
        if st["m_list"] is not None and len(st["m_list"]) != len(st["coarse_sizes"]):
            raise ConfigError("study.m_list", "length differs from study.coarse_sizes")


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, base_dir=path.parent)


def _initial_callable(kind, width):
    if kind == "zero":
        return None
    if kind == "sine":
        return lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
    return lambda x, y: np.exp(-((x - 0.5) ** 2 + (y - 0.5) ** 2) / (2 * width * width))


# ---------------------------------------------------------------- field files

def write_field(path, mesh, values, t):
    with open(path, "wb") as fh:
        np.savez(fh, nc=mesh.nc, nf=mesh.nf_per_block, t=float(t),
                 values=np.asarray(values, float))


def read_field(path):
    with np.load(path) as data:
        mesh = build_hierarchy(int(data["nc"]), int(data["nf"]))
        values = np.array(data["values"])
        t = float(data["t"])
    if values.shape != (mesh.n_dofs,):
        raise ValueError(f"{path}: expected {mesh.n_dofs} values, found {values.shape}")
    return mesh, values, t


def node_average(mesh, values):
    """Per fine-grid node mean of the duplicated DG dofs, x fastest."""
    n = mesh.n_fine + 1
    idx = np.rint(mesh.dof_coords / mesh.h).astype(np.int64)
    flat = idx[:, 1] * n + idx[:, 0]
    sums = np.bincount(flat, weights=values, minlength=n * n)
    counts = np.bincount(flat, minlength=n * n)
    return sums / counts


def format_vtk(mesh, values, t, name="u"):
    n = mesh.n_fine + 1
    nodal = node_average(mesh, values)
    lines = ["# vtk DataFile Version 3.0", f"cemgmsdg field t={float(t)!r}", "ASCII",
             "DATASET STRUCTURED_POINTS", f"DIMENSIONS {n} {n} 1", "ORIGIN 0 0 0",
             f"SPACING {mesh.h!r} {mesh.h!r} 1", f"POINT_DATA {n * n}",
             f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
    lines += [repr(float(v)) for v in nodal]
    return "\n".join(lines) + "\n"


def format_raw(mesh, values, t):
    lines = [f"# t={float(t)!r} nc={mesh.nc} nf={mesh.nf_per_block}", "dof,x,y,value"]
    for i, ((x, y), v) in enumerate(zip(mesh.dof_coords, values)):
        lines.append(f"{i},{float(x)!r},{float(y)!r},{float(v)!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands

def _setup(cfg):
    mesh = build_hierarchy(cfg.mesh["nc"], cfg.mesh["nf_per_block"])
    field_ = cfg.medium_factory()(mesh)
    ops = FineOperators(mesh, field_, cfg.discretization["gamma"], check_coercivity=False)
    return mesh, field_, ops


def _build_basis(cfg, mesh, field_, ops, threads):
    ts = build_spectral_basis(mesh, field_, ops.M, cfg.discretization["L"], threads=threads)
    basis = build_multiscale_basis(mesh, ops.A, ts, cfg.coarse_m(mesh.H), threads=threads)
    return ts, basis


def cmd_bases(cfg, threads=1, out=print):
    mesh, field_, ops = _setup(cfg)
    ts, basis = _build_basis(cfg, mesh, field_, ops, threads)
    bpath = cfg.out_path(cfg.outputs["basis"])
    save_basis(bpath, basis, mesh)
    write_eigenvalue_csv(cfg.out_path("eigenvalues.csv"), ts)
    out(f"basis: {bpath} ({basis.n_coarse} columns, m={basis.m}, Lambda={basis.Lambda!r})")
    return EXIT_OK


def cmd_solve(cfg, threads=1, from_basis=None, allow_unstable=False, out=print):
    mesh, field_, ops = _setup(cfg)
    t0 = time.perf_counter()
    if from_basis:
        basis = load_basis(from_basis, mesh, ops.A, ops.M)
    else:
        basis = _build_basis(cfg, mesh, field_, ops, threads)[1]
    t1 = time.perf_counter()
    tau, n_steps = cfg.time["tau"], cfg.n_steps
    cfl = estimate_cfl(basis.coarse_stiffness)
    if tau >= cfl.tau_max and not allow_unstable:
        raise StabilityRefusal(f"tau={tau!r} >= estimated tau_max={cfl.tau_max!r}; "
                               "pass --allow-unstable to run anyway")

    load = SourceLoad(mesh, cfg.source_spec())
    init = cfg.initial
    u0 = _initial_callable(init["u0"], init["width"])
    v0 = _initial_callable(init["v0"], init["width"])
    U, V = initial_vectors(ops, u0, v0)
    d = cfg.discretization
    C0, C1 = init_coarse(U, V, load(0.0), basis, ops.A, ops.M, tau, d["init"], d["init_stiffness"])

    stride = cfg.outputs["snapshot_stride"]
    fmt = cfg.outputs["field_format"]

    def snapshot(n, C):
        u = downscale(basis, C)
        text = format_vtk(mesh, u, n * tau) if fmt == "vtk" else format_raw(mesh, u, n * tau)
        cfg.out_path(f"snap_{n:06d}.{'vtk' if fmt == 'vtk' else 'csv'}").write_text(text)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StabilityWarning)
        state, diag = run_coarse(basis, C0, C1, tau, n_steps, load, cfg.time["T"], energy=True,
                                 tau_max=cfl.tau_max, callback=snapshot if stride else None,
                                 stride=stride)
    t2 = time.perf_counter()
    u_ms = downscale(basis, state.U_curr)
    write_field(cfg.out_path("field.npz"), mesh, u_ms, state.t)

    lines = ["n,E_half,norm_half"]
    lines += [f"{k},{e!r},{q!r}" for k, (e, q) in enumerate(zip(diag.E_half, diag.norm_half))]
    cfg.out_path("energy.csv").write_text("\n".join(lines) + "\n")
    out(f"tau/tau_max = {diag.rho:.6f}; final t = {state.t!r}")
    if tau >= cfl.tau_max:
        out(f"warning: unstable step, energy growth factor {diag.growth():.3e}")
    elif load.is_zero:
        out(f"max relative energy drift {diag.max_relative_drift():.3e}")

    if cfg.outputs["reference"]:
        u_ref = fine_reference(ops, cfg.source_spec(), tau, n_steps, u0, v0)
        en = energy_error(u_ref, u_ms, ops.N)
        l2 = l2_error(u_ref, u_ms, ops.M)
        rep = ErrorReport(H=mesh.H, m=basis.m if basis.m is not None else -1, L=d["L"],
                          gamma=d["gamma"], tau=tau, energy_error_pct=en, l2_error_pct=l2,
                          basis_secs=t1 - t0, solve_secs=t2 - t1)
        write_report_csv(cfg.out_path(cfg.outputs["report"]), [rep],
                         timings=cfg.outputs["record_timings"])
        out(f"energy error {en:.4f}%, L2 error {l2:.4f}%")
    return EXIT_OK


def cmd_convergence(cfg, threads=1, out=print):
    st, d = cfg.study, cfg.discretization
    if st["n_fine"] is None or st["coarse_sizes"] is None:
        key = "study.n_fine" if st["n_fine"] is None else "study.coarse_sizes"
        raise ConfigError(key, "required for the convergence study")
    init = cfg.initial
    sc = StudyConfig(n_fine=st["n_fine"], coarse_sizes=st["coarse_sizes"],
                     medium=cfg.medium_factory(), source=cfg.source_spec(),
                     m_list=st["m_list"] if st["m_list"] is not None
                     else ([d["m"]] * len(st["coarse_sizes"]) if d["m"] is not None else None),
                     schedule=d["m_schedule"], L=d["L"], gamma=d["gamma"], tau=cfg.time["tau"],
                     T=cfg.time["T"], u0=_initial_callable(init["u0"], init["width"]),
                     v0=_initial_callable(init["v0"], init["width"]), threads=threads)
    reports = run_convergence_study(
        sc, log=lambda r: out(f"H=1/{round(1 / r.H)} m={r.m}: energy {r.energy_error_pct:.4f}% "
                              f"L2 {r.l2_error_pct:.4f}%"))
    write_report_csv(cfg.out_path(cfg.outputs["report"]), reports,
                     timings=cfg.outputs["record_timings"])
    return EXIT_OK


def cmd_decay(cfg, threads=1, out=print):
    mesh, field_, ops = _setup(cfg)
    ts = build_spectral_basis(mesh, field_, ops.M, cfg.discretization["L"], threads=threads)
    table = run_decay_study(mesh, field_, cfg.study["decay_m"], cfg.discretization["L"],
                            cfg.discretization["gamma"], ops=ops, test_space=ts)
    write_decay_csv(cfg.out_path("decay.csv"), table)
    out(f"log-error slope {table.slope:.4f} per layer, R^2 {table.r_squared:.4f}")
    return EXIT_OK


def cmd_export_field(path, raw=False, output=None, out=print):
    mesh, values, t = read_field(path)
    text = format_raw(mesh, values, t) if raw else format_vtk(mesh, values, t)
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="cemgmsdg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI experiment file")
    common.add_argument("--threads", type=int, default=1, help="worker threads for block solves")
    sub.add_parser("bases", parents=[common], help="build and persist the multiscale basis")
    s = sub.add_parser("solve", parents=[common], help="run the coarse wave simulation")
    s.add_argument("--from-basis", help="reuse a basis file written by 'bases'")
    s.add_argument("--allow-unstable", action="store_true", help="run even if tau >= tau_max")
    sub.add_parser("convergence", parents=[common], help="errors against the fine reference")
    sub.add_parser("decay", parents=[common], help="localization error versus oversampling")
    e = sub.add_parser("export-field", help="convert a field file to structured-points ASCII")
    e.add_argument("field", help="field file written by 'solve'")
    e.add_argument("--raw", action="store_true", help="dump the duplicated-dof vector instead")
    e.add_argument("-o", "--output", help="output path (default: stdout)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    err = lambda msg: print(f"cemgmsdg: {msg}", file=sys.stderr)  # noqa: E731
    try:
        if args.command == "export-field":
            return cmd_export_field(args.field, args.raw, args.output)
        if args.threads < 1:
            raise ConfigError("--threads", "must be a positive integer")
        cfg = load_config(args.config)
        if args.command == "bases":
            return cmd_bases(cfg, args.threads)
        if args.command == "solve":
            return cmd_solve(cfg, args.threads, args.from_basis, args.allow_unstable)
        if args.command == "convergence":
            return cmd_convergence(cfg, args.threads)
        return cmd_decay(cfg, args.threads)
    except ConfigError as exc:
        err(f"config error: {exc}")
        return EXIT_CONFIG
    except RasterFormatError as exc:
        err(f"config error: medium.path: {exc}")
        return EXIT_CONFIG
    except (SingularKKTError, EigenSolverError) as exc:
        err(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except StabilityRefusal as exc:
        err(f"refusing unstable run: {exc}")
        return EXIT_UNSTABLE


if __name__ == "__main__":
    sys.exit(main())
