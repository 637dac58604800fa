"""Command-line experiment runner.

Subcommands::

    run CONFIG.json      full sweep from a JSON config (writes convergence.csv,
                         optional eigenvalues.csv and manifest.json)
    sample               sample a point cloud to an .npz file
    assemble             build an operator and write it in Matrix Market format
    solve                solve the screened Poisson problem for a cloud/operator pair
    converge             sweep over N for one or more methods from flags
    diagnose             verification suites and slope fits of a convergence table
    eigs                 leading eigenvalues of an operator

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .assembly import ScreenedSystem, SparseOperator, assemble, export_matrix_market, forward_error, inverse_error
from .assembly import leading_eigenvalues
from .exceptions import ConfigurationError, GrbffdError, UnsupportedModeError
from .local_ops import METHODS, SCHEMES, MethodConfig
from .manifolds import BUILTIN_NAMES, PointCloud, builtin_spec, sample_points
from .stencils import build_knn_index, monge_project
from .verification import (
    CSV_COLUMNS,
    diameter_statistics,
    fit_slope,
    regularization_sweep,
    reproduction_suite,
    resample_stencil,
    run_trial,
)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

EIG_COLUMNS = ("manifold", "method", "N", "trial", "seed", "index", "real", "imag")


class NumericalFailure(Exception):
    """A numerical error tagged with the experiment coordinates where it happened."""


# ---------------------------------------------------------------------------
# run configuration


def _line_of(text, key):
    """1-based line of the first occurrence of ``"key"`` in ``text`` (1 if absent)."""
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


class RunConfig:
    """Validated contents of a JSON run file.

    Top-level keys (defaults in brackets): ``manifold``, ``N`` (list),
    ``methods`` (non-empty list of objects with ``method`` and optionally
    ``weight``, ``l``, ``kappa``, ``K``), ``mode`` [random], ``trials`` [1],
    ``seed_base`` [0], ``l`` [4], ``kappa`` [3], ``delta`` [1e-6],
    ``gamma_th`` [3], ``k_step`` [2], ``k_max`` [null],
    ``K`` [{"policy": "auto", "k0": 30}] or ``{"policy": "fixed", "k": 30}``,
    ``norm_estimate`` [true], ``eigenvalues`` [null] or
    ``{"count": 6, "shift": 10}``, ``output_dir`` [out].
    """

    KEYS = {
        "manifold", "N", "methods", "mode", "trials", "seed_base", "l", "kappa", "delta",
        "gamma_th", "k_step", "k_max", "K", "norm_estimate", "eigenvalues", "output_dir",
    }

    def __init__(self, data, text="", source="<config>"):
        self.text = text
        self.source = source
        self._check(data)

    def _fail(self, key, msg):
        raise ConfigurationError(f"{self.source}:{_line_of(self.text, key)}: {msg}")

    @classmethod
    def from_file(cls, path):
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}:1: top level must be a JSON object")
        return cls(data, text=text, source=str(path))

    def _int_list(self, data, key):
        v = data.get(key)
        if not isinstance(v, list) or not v or not all(isinstance(x, int) and x >= 2 for x in v):
            self._fail(key, f"{key!r} must be a non-empty list of integers >= 2")
        return sorted(v)

    def _k_policy(self, K, key="K"):
        if not isinstance(K, dict) or K.get("policy") not in ("auto", "fixed"):
            self._fail(key, "'K' must be {\"policy\": \"auto\", \"k0\": ...} or {\"policy\": \"fixed\", \"k\": ...}")
        if K["policy"] == "auto":
            if not isinstance(K.get("k0"), int):
                self._fail(key, "auto K policy needs an integer 'k0'")
            return {"policy": "auto", "k0": K["k0"]}
        if not isinstance(K.get("k"), int):
            self._fail(key, "fixed K policy needs an integer 'k'")
        return {"policy": "fixed", "k": K["k"]}

    def _check(self, data):
        unknown = sorted(set(data) - self.KEYS)
        if unknown:
            self._fail(unknown[0], f"unknown key {unknown[0]!r}")
        if data.get("manifold") not in BUILTIN_NAMES:
            self._fail("manifold", f"'manifold' must be one of {', '.join(BUILTIN_NAMES)}")
        self.manifold = data["manifold"]
        self.Ns = self._int_list(data, "N")
        self.mode = data.get("mode", "random")
        if self.mode not in ("random", "well_sampled"):
            self._fail("mode", "'mode' must be 'random' or 'well_sampled'")
        if self.mode == "well_sampled" and builtin_spec(self.manifold).grid is None:
            self._fail("mode", f"{self.manifold} has no well-sampled grid")
        self.trials = data.get("trials", 1)
        if not isinstance(self.trials, int) or self.trials < 1:
            self._fail("trials", "'trials' must be a positive integer")
        self.seed_base = data.get("seed_base", 0)
        if not isinstance(self.seed_base, int) or self.seed_base < 0:
            self._fail("seed_base", "'seed_base' must be a non-negative integer")
        self.norm_estimate = bool(data.get("norm_estimate", True))
        eig = data.get("eigenvalues")
        if eig is not None:
            if not isinstance(eig, dict) or not isinstance(eig.get("count", 6), int):
                self._fail("eigenvalues", "'eigenvalues' must be {\"count\": int, \"shift\": number}")
            eig = {"count": eig.get("count", 6), "shift": float(eig.get("shift", 10.0))}
        self.eigenvalues = eig
        self.output_dir = data.get("output_dir", "out")

        defaults = {
            "l": data.get("l", 4), "kappa": data.get("kappa", 3), "delta": data.get("delta", 1e-6),
            "gamma_th": data.get("gamma_th", 3.0), "k_step": data.get("k_step", 2),
            "k_max": data.get("k_max"), "K": self._k_policy(data.get("K", {"policy": "auto", "k0": 30})),
        }
        methods = data.get("methods")
        if not isinstance(methods, list) or not methods:
            self._fail("methods", "'methods' must be a non-empty list")
        self.methods = []
        self.configs = []
        d = builtin_spec(self.manifold).d
        for entry in methods:
            if isinstance(entry, str):
                entry = {"method": entry}
            if not isinstance(entry, dict) or entry.get("method") not in METHODS:
                self._fail("methods", f"each method needs 'method' in {', '.join(METHODS)}")
            weight = entry.get("weight", "one_over_k")
            if weight not in SCHEMES:
                self._fail("weight", f"'weight' must be one of {', '.join(SCHEMES)}")
            resolved = {**defaults, **{k: v for k, v in entry.items() if k not in ("method", "weight")}}
            resolved["K"] = self._k_policy(resolved["K"])
            try:
                cfg = method_config(entry["method"], weight, resolved)
                cfg.validate(d, min(self.Ns))
            except ConfigurationError as exc:
                self._fail("methods", str(exc))
            self.configs.append(cfg)
            self.methods.append({"method": entry["method"], "weight": cfg.weight_scheme, **resolved})

    def manifest(self):
        """The fully resolved configuration, itself a valid run file."""
        return {
            "manifold": self.manifold, "N": self.Ns, "mode": self.mode, "trials": self.trials,
            "seed_base": self.seed_base, "methods": self.methods, "norm_estimate": self.norm_estimate,
            "eigenvalues": self.eigenvalues, "output_dir": str(self.output_dir),
        }


def method_config(method, weight, opts):
    K = opts["K"]
    auto = K["policy"] == "auto"
    return MethodConfig(
        method=method, weight_scheme=weight, l=opts["l"], kappa=opts["kappa"],
        delta=opts["delta"], k0=K["k0"] if auto else K["k"], k_step=opts["k_step"],
        gamma_th=opts["gamma_th"], k_max=opts["k_max"], auto=auto,
        k_fixed=None if auto else K["k"],
    )


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _trial(manifold, cfg, N, mode, seed, trial, norm_estimate, eig=None):
    try:
        return run_trial(
            manifold, cfg, N, mode=mode, seed=seed, trial=trial, norm_estimate=norm_estimate,
            eig_count=eig["count"] if eig else 0, eig_shift=eig["shift"] if eig else 10.0,
        )
    except (ConfigurationError, UnsupportedModeError):
        raise
    except (GrbffdError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        raise NumericalFailure(f"method={cfg.label} N={N} trial={trial}: {exc}") from exc


def execute(run, out_dir=None, log=None):
    """Run every (method, N, trial) of a :class:`RunConfig`; returns the records."""
    out = Path(out_dir or run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, eig_rows = [], []
    for cfg in run.configs:
        for N in run.Ns:
            for t in range(run.trials):
                seed = run.seed_base + t
                rec, _, eigs = _trial(run.manifold, cfg, N, run.mode, seed, t, run.norm_estimate, run.eigenvalues)
                records.append(rec)
                if log:
                    log(f"{rec['method']:>12} N={N:<6} trial={t} FE={rec['FE']:.3e} IE={rec['IE']:.3e} "
                        f"mean_K={rec['mean_K']:.1f} ({rec['wall_time_s']:.1f}s)")
                if eigs is not None:
                    for i, ev in enumerate(eigs):
                        eig_rows.append({"manifold": run.manifold, "method": cfg.label, "N": N, "trial": t,
                                         "seed": seed, "index": i, "real": ev.real, "imag": ev.imag})
    write_csv(out / "convergence.csv", CSV_COLUMNS, records)
    if run.eigenvalues:
        write_csv(out / "eigenvalues.csv", EIG_COLUMNS, eig_rows)
    (out / "manifest.json").write_text(json.dumps(run.manifest(), indent=2) + "\n")
    return records


def slope_table(records):
    """FE and IE slopes (median over trials) per manifold, method, l and K policy."""
    groups = {}
    for r in records:
        groups.setdefault((r["manifold"], r["method"], r["l"], r["K_policy"]), []).append(r)
    rows = []
    for (man, method, l, pol), rs in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
        Ns = sorted({int(r["N"]) for r in rs})
        if len(Ns) < 2:
            continue
        row = {"manifold": man, "method": method, "l": l, "K_policy": pol, "n_points": len(Ns)}
        for key in ("FE", "IE"):
            med = [np.median([float(r[key]) for r in rs if int(r["N"]) == N]) for N in Ns]
            row[f"{key}_slope"], row[f"{key}_stderr"] = fit_slope(Ns, med)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# argument parsing


def _add_cloud_args(p, n_required=True):
    p.add_argument("--manifold", choices=BUILTIN_NAMES, default="ellipse1d")
    p.add_argument("--n", type=int, required=n_required, help="number of points")
    p.add_argument("--mode", choices=("random", "well_sampled"), default="random")
    p.add_argument("--seed", type=int, default=0)


def _add_method_args(p):
    p.add_argument("--method", default="grbffd", help="gmls, rbffd or grbffd (comma list for converge)")
    p.add_argument("--weight", choices=SCHEMES, default="one_over_k", help="GMLS weight scheme")
    p.add_argument("--l", type=int, default=4, help="polynomial degree")
    p.add_argument("--kappa", type=int, default=3, help="PHS exponent r**(2 kappa + 1)")
    p.add_argument("--k0", type=int, default=30, help="initial stencil size for auto-tuning")
    p.add_argument("--k-fixed", type=int, default=None, help="use this stencil size everywhere (no tuning)")
    p.add_argument("--gamma-th", type=float, default=3.0, help="spike-ratio threshold")
    p.add_argument("--delta", type=float, default=1e-6, help="ridge parameter")


def _config_from_args(a, method=None):
    return MethodConfig(
        method=method or a.method, weight_scheme=a.weight, l=a.l, kappa=a.kappa, delta=a.delta,
        k0=a.k0, gamma_th=a.gamma_th, auto=a.k_fixed is None, k_fixed=a.k_fixed,
    )


def _cloud_from_args(a):
    if getattr(a, "cloud", None):
        return PointCloud.load(a.cloud)
    if a.n is None:
        raise ConfigurationError("either --cloud or --n is required")
    return sample_points(a.manifold, a.n, mode=a.mode, seed=a.seed)


def build_parser():
    parser = argparse.ArgumentParser(prog="grbffd", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a sweep from a JSON config")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides output_dir)")

    p = sub.add_parser("sample", help="sample a point cloud")
    _add_cloud_args(p)
    p.add_argument("--out", required=True, help="output .npz path")

    p = sub.add_parser("assemble", help="assemble an operator (Matrix Market output)")
    _add_cloud_args(p, n_required=False)
    p.add_argument("--cloud", help="point cloud .npz (instead of sampling)")
    _add_method_args(p)
    p.add_argument("--out", required=True, help="output .mtx path")
    p.add_argument("--stats", help="optional CSV of per-point K, gamma and stencil diameter")

    p = sub.add_parser("solve", help="solve (I - L) F = h")
    p.add_argument("--cloud", required=True)
    p.add_argument("--operator", required=True, help="Matrix Market operator")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--out", help="CSV of the solution F")

    p = sub.add_parser("converge", help="convergence sweep from flags")
    p.add_argument("--manifold", choices=BUILTIN_NAMES, default="ellipse1d")
    p.add_argument("--n", required=True, help="comma-separated N values")
    p.add_argument("--mode", choices=("random", "well_sampled"), default="random")
    p.add_argument("--seed", type=int, default=0, help="seed of trial 0")
    p.add_argument("--trials", type=int, default=1)
    _add_method_args(p)
    p.add_argument("--no-norm", action="store_true", help="skip the inverse-norm estimate")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("diagnose", help="verification suites and slope fits")
    p.add_argument("suite", choices=("slopes", "errorbars", "reproduction", "regularization", "diameters"))
    p.add_argument("--csv", help="convergence.csv for the slopes and errorbars suites")
    _add_cloud_args(p, n_required=False)
    _add_method_args(p)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--base", type=int, default=0, help="base point for the regularization suite")
    p.add_argument("--ns", default="2000,4000,8000,16000,32000", help="N values for the diameters suite")
    p.add_argument("--out", help="CSV output (stdout when omitted)")

    p = sub.add_parser("eigs", help="leading eigenvalues of L")
    _add_cloud_args(p, n_required=False)
    p.add_argument("--cloud")
    p.add_argument("--operator", help="Matrix Market operator (instead of assembling)")
    _add_method_args(p)
    p.add_argument("--count", type=int, default=6)
    p.add_argument("--shift", type=float, default=10.0)
    p.add_argument("--out", help="CSV output (stdout when omitted)")
    return parser


# ---------------------------------------------------------------------------
# commands


def _emit(rows, columns, out):
    if out:
        write_csv(out, columns, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def cmd_run(a):
    run = RunConfig.from_file(a.config)
    execute(run, a.out, log=lambda s: print(s, file=sys.stderr))


def cmd_sample(a):
    sample_points(a.manifold, a.n, mode=a.mode, seed=a.seed).save(a.out)


def cmd_assemble(a):
    cloud = _cloud_from_args(a)
    cfg = _config_from_args(a)
    op = assemble(cloud, cfg)
    export_matrix_market(op, a.out)
    if a.stats:
        D = np.array([monge_project(cloud, op.row(i)[0]).d_k_max for i in range(op.n)])
        rows = [{"point": i, "K": int(op.k_final[i]), "gamma": float(op.gamma[i]), "d_k_max": float(D[i]),
                 "converged": int(op.converged[i])} for i in range(op.n)]
        write_csv(a.stats, ("point", "K", "gamma", "d_k_max", "converged"), rows)


def cmd_solve(a):
    cloud = PointCloud.load(a.cloud)
    L = sp.csr_matrix(scipy.io.mmread(a.operator))
    if L.shape != (cloud.N, cloud.N):
        raise ConfigurationError(f"operator is {L.shape[0]}x{L.shape[1]} but the cloud has {cloud.N} points")
    op = SparseOperator.from_matrix(L)
    system = ScreenedSystem(op, tol=a.tol)
    F = system.solve(cloud.h_values)
    fe = forward_error(op, cloud.f_values, cloud.lap_values)
    ie = inverse_error(F, cloud.f_values)
    print(f"FE={fe:.6e} IE={ie:.6e} residual={system.residual(F, cloud.h_values):.3e} solver={system.last_solver}")
    if a.out:
        write_csv(a.out, ("point", "F", "f"), [{"point": i, "F": F[i], "f": cloud.f_values[i]} for i in range(cloud.N)])


def cmd_converge(a):
    Ns = [int(x) for x in a.n.split(",")]
    methods = [m.strip() for m in a.method.split(",") if m.strip()]
    if not methods:
        raise ConfigurationError("empty method list")
    data = {
        "manifold": a.manifold, "N": Ns, "mode": a.mode, "trials": a.trials, "seed_base": a.seed,
        "methods": [{"method": m, "weight": a.weight} for m in methods],
        "l": a.l, "kappa": a.kappa, "delta": a.delta, "gamma_th": a.gamma_th,
        "K": {"policy": "fixed", "k": a.k_fixed} if a.k_fixed else {"policy": "auto", "k0": a.k0},
        "norm_estimate": not a.no_norm, "output_dir": a.out,
    }
    run = RunConfig(data, text=json.dumps(data, indent=2), source="<flags>")
    execute(run, log=lambda s: print(s, file=sys.stderr))


def error_bars(records):
    """Mean and standard deviation of FE and IE over trials per method and N."""
    groups = {}
    for r in records:
        groups.setdefault((r["manifold"], r["method"], r["l"], r["K_policy"], int(r["N"])), []).append(r)
    rows = []
    for key, rs in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0][:4])) + (kv[0][4],)):
        row = dict(zip(("manifold", "method", "l", "K_policy", "N"), key), trials=len(rs))
        for col in ("FE", "IE"):
            v = np.array([float(r[col]) for r in rs])
            row[f"{col}_mean"], row[f"{col}_std"] = v.mean(), v.std(ddof=1) if len(v) > 1 else 0.0
        rows.append(row)
    return rows


def cmd_diagnose(a):
    if a.suite in ("slopes", "errorbars"):
        if not a.csv:
            raise ConfigurationError(f"the {a.suite} suite needs --csv")
        with open(a.csv, newline="") as fh:
            records = list(csv.DictReader(fh))
        if a.suite == "errorbars":
            cols = ("manifold", "method", "l", "K_policy", "N", "trials", "FE_mean", "FE_std", "IE_mean", "IE_std")
            _emit(error_bars(records), cols, a.out)
            return
        cols = ("manifold", "method", "l", "K_policy", "n_points", "FE_slope", "FE_stderr", "IE_slope", "IE_stderr")
        _emit(slope_table(records), cols, a.out)
        return
    if a.suite == "diameters":
        Ns = [int(x) for x in a.ns.split(",")]
        rows = diameter_statistics(a.manifold, Ns, a.k0, trials=max(1, min(a.trials, 8)), seed=a.seed)
        _emit(rows, ("N", "median", "mean", "std", "max"), a.out)
        return
    cloud = _cloud_from_args(a)
    cfg = _config_from_args(a)
    if a.suite == "reproduction":
        rep = reproduction_suite(cloud, cfg, trials=a.trials, seed=a.seed)
        row = {"n_stencils": rep.n_stencils, "max_defect_scaled": rep.max_defect,
               "out_of_space_defect": rep.out_of_space_defect, "max_row_sum_scaled": rep.max_row_sum,
               "max_weight_sum_scaled": float(rep.weight_sums.max()),
               "median_weight_sum_scaled": float(np.median(rep.weight_sums))}
        _emit([row], tuple(row), a.out)
        return
    index = build_knn_index(cloud)
    st = monge_project(cloud, index.query([a.base], cfg.k_start())[0])
    deltas = np.logspace(-8, 0, 17)
    c3, c4 = regularization_sweep(st, cfg, deltas, extra_points=resample_stencil(cloud, st, 200, seed=a.seed))
    _emit([{"delta": d, "C3": x, "C4": y} for d, x, y in zip(deltas, c3, c4)], ("delta", "C3", "C4"), a.out)


def cmd_eigs(a):
    if a.operator:
        op = SparseOperator.from_matrix(sp.csr_matrix(scipy.io.mmread(a.operator)))
    else:
        op = assemble(_cloud_from_args(a), _config_from_args(a))
    vals = leading_eigenvalues(op, count=a.count, shift=a.shift)
    _emit([{"index": i, "real": v.real, "imag": v.imag} for i, v in enumerate(vals)], ("index", "real", "imag"), a.out)


COMMANDS = {
    "run": cmd_run, "sample": cmd_sample, "assemble": cmd_assemble, "solve": cmd_solve,
    "converge": cmd_converge, "diagnose": cmd_diagnose, "eigs": cmd_eigs,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (ConfigurationError, UnsupportedModeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GrbffdError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
