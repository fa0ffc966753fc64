"""Study harness and command-line interface.

Studies are configured by a JSON document, run deterministically for a
fixed config+seed, and write two artifacts: ``<prefix>.csv`` with one row
per grid size and ``<prefix>.json`` with the full report (slopes, pass
flags and thresholds next to every measured value, config echo, library
versions).  Exit code 0 means every pass flag is true; 1 a study-level
failure; 2 a malformed configuration or command line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .atomistic import check_phonon_stability, force_at, linearize_at
from .cauchy_born import check_fe_stability, force_cb, force_fe, linearize_fe
from .hybrid import (
    BlendFunction,
    force_qc,
    kyfan_bound_check,
    linearize_qc,
    make_blend,
    stability_constant,
    stability_constant_circulant,
)
from .lattice import (
    FourierSum,
    LatticeField,
    LatticeSpec,
    sobolev_norm,
    uniform_norm,
    zero_field,
)
from .potentials import UnknownModelError, builtin_models, check_derivatives, get_model
from .solver import SolveOptions, solve_atomistic, solve_cb_reference, solve_hybrid

CSV_SCHEMA_VERSION = 1

CONSISTENCY_SLOPE_THRESHOLD = 1.9
CONVERGENCE_SLOPE_THRESHOLD = 1.8
STABILITY_VARIATION_THRESHOLD = 0.5
STABILITY_CONSTANT_SPREAD = 2.0
KYFAN_MARGIN = 0.99


class ConfigError(ValueError):
    """Malformed or inconsistent study configuration."""


@dataclass
class StudyConfig:
    study: str
    dim: int
    model_name: str
    model_params: dict = field(default_factory=dict)
    blend: dict | None = None
    n_list: list[int] = field(default_factory=lambda: [8, 16, 32])
    load_modes: list[dict] = field(default_factory=list)
    amplitude: float = 1e-2
    solver: dict = field(default_factory=dict)
    cb_reference: dict | None = None
    drop_coarsest: bool = False
    seed: int = 0
    samples: int = 10
    tol: float = 1e-6

    @classmethod
    def from_dict(cls, doc: dict) -> "StudyConfig":
        known = {
            "study", "dim", "model", "blend", "n_list", "load", "amplitude",
            "solver", "cb_reference", "drop_coarsest", "seed", "samples", "tol",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            study = doc["study"]
            dim = int(doc["dim"])
        except KeyError as exc:
            raise ConfigError(f"missing required key {exc}") from exc
        model = doc.get("model", {"name": "harmonic-nn"})
        cfg = cls(
            study=study,
            dim=dim,
            model_name=model.get("name", "harmonic-nn"),
            model_params=dict(model.get("params", {})),
            blend=doc.get("blend"),
            n_list=[int(n) for n in doc.get("n_list", [8, 16, 32])],
            load_modes=list(doc.get("load", {}).get("modes", [])),
            amplitude=float(doc.get("amplitude", 1e-2)),
            solver=dict(doc.get("solver", {})),
            cb_reference=doc.get("cb_reference"),
            drop_coarsest=bool(doc.get("drop_coarsest", False)),
            seed=int(doc.get("seed", 0)),
            samples=int(doc.get("samples", 10)),
            tol=float(doc.get("tol", 1e-6)),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.study not in (
            "consistency", "convergence", "stability", "stability_constant",
            "derivative_check",
        ):
            raise ConfigError(f"unknown study '{self.study}'")
        if self.dim not in (1, 2, 3):
            raise ConfigError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.n_list != sorted(self.n_list) or len(set(self.n_list)) != len(self.n_list):
            raise ConfigError("n_list must be strictly ascending")
        if any(n < 2 for n in self.n_list):
            raise ConfigError("grid sizes must be >= 2")
        if self.amplitude <= 0:
            raise ConfigError("amplitude must be positive")

    def make_model(self):
        try:
            return get_model(self.model_name, self.dim, self.model_params)
        except UnknownModelError as exc:
            raise ConfigError(str(exc)) from exc
        except TypeError as exc:
            raise ConfigError(f"bad model parameters: {exc}") from exc

    def make_blend_function(self) -> BlendFunction:
        doc = self.blend or {}
        try:
            return make_blend(
                self.dim,
                shape=doc.get("shape", "ball"),
                center=doc.get("center"),
                r0=doc.get("r0", 0.15),
                r1=doc.get("r1", 0.35),
                order=doc.get("order", 2),
            )
        except ValueError as exc:
            raise ConfigError(f"bad blend geometry: {exc}") from exc

    def make_load(self) -> FourierSum:
        if not self.load_modes:
            raise ConfigError(f"study '{self.study}' requires load modes")
        modes = []
        for m in self.load_modes:
            try:
                kvec = tuple(int(v) for v in m["k"])
                amp = tuple(float(v) for v in m["amp"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad load mode {m}: {exc}") from exc
            if len(kvec) != self.dim or len(amp) != self.dim:
                raise ConfigError(f"load mode {m} does not match dim={self.dim}")
            if all(v == 0 for v in kvec):
                raise ConfigError("load modes must be nonzero (mean-zero load)")
            modes.append((kvec, amp, float(m.get("phase", 0.0))))
        return FourierSum(modes=tuple(modes), amplitude=self.amplitude)

    def make_solver_options(self) -> SolveOptions:
        try:
            return SolveOptions(**self.solver)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad solver options: {exc}") from exc

    def check_amplitude(self) -> None:
        """Fail early if the manufactured field breaches the smoothness region."""
        from .potentials import SmoothnessError
        from .atomistic import energy_at

        model = self.make_model()
        load = self.make_load()
        n = self.n_list[-1]
        spec = LatticeSpec(self.dim, n)
        u = load.sample(spec, "displacement")
        try:
            energy_at(u, model)
        except SmoothnessError as exc:
            raise ConfigError(
                f"amplitude {self.amplitude} breaches the smoothness region: {exc}"
            ) from exc

    def as_dict(self) -> dict:
        return {
            "study": self.study,
            "dim": self.dim,
            "model": {"name": self.model_name, "params": self.model_params},
            "blend": self.blend,
            "n_list": self.n_list,
            "load": {"modes": self.load_modes},
            "amplitude": self.amplitude,
            "solver": self.solver,
            "cb_reference": self.cb_reference,
            "drop_coarsest": self.drop_coarsest,
            "seed": self.seed,
            "samples": self.samples,
            "tol": self.tol,
        }


@dataclass
class StudyResult:
    rows: list[dict]
    slopes: dict
    passed: bool
    report: dict

    def as_dict(self) -> dict:
        return {
            "rows": self.rows,
            "slopes": self.slopes,
            "passed": self.passed,
            **self.report,
        }


def fit_slope(
    eps: list[float], errs: list[float], drop_coarsest: bool, noise_floor: float
) -> float | None:
    """Least-squares slope of log(err) vs log(eps).

    Rows at or below the noise floor are excluded (they measure solver
    noise, not the discretization); a slope is reported only when at least
    three grid sizes entered the study.
    """
    if len(eps) < 3:
        return None
    pairs = [(e, r) for e, r in zip(eps, errs) if np.isfinite(r) and r > noise_floor]
    if drop_coarsest and len(pairs) > 1:
        pairs = pairs[1:]
    if len(pairs) < 2:
        return None
    x = np.log([p[0] for p in pairs])
    y = np.log([p[1] for p in pairs])
    return float(np.polyfit(x, y, 1)[0])


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

def run_consistency(cfg: StudyConfig) -> StudyResult:
    model = cfg.make_model()
    blend = cfg.make_blend_function()
    load = cfg.make_load()
    cfg.check_amplitude()
    opts = cfg.make_solver_options()
    rows = []
    for n in cfg.n_list:
        spec = LatticeSpec(cfg.dim, n)
        u = load.sample(spec, "displacement")
        f_at = force_at(u, model)
        f_fe = force_fe(u, model)
        f_cb = force_cb(u, model)
        f_qc = force_qc(u, model, blend)

        def gap(a, b):
            return uniform_norm(LatticeField(spec, a.values - b.values, "force"), 0)

        rows.append(
            {
                "n": n,
                "eps": 1.0 / n,
                "gap_at_cb": gap(f_at, f_cb),
                "gap_fe_cb": gap(f_fe, f_cb),
                "gap_qc_at": gap(f_qc, f_at),
                "gap_qc_cb": gap(f_qc, f_cb),
            }
        )
    eps = [r["eps"] for r in rows]
    floor = 100.0 * opts.residual_tol
    slopes = {}
    degenerate = []
    for key in ("gap_at_cb", "gap_fe_cb", "gap_qc_at", "gap_qc_cb"):
        errs = [r[key] for r in rows]
        if max(errs) <= floor:
            slopes[key] = None
            degenerate.append(key)
        else:
            slopes[key] = fit_slope(eps, errs, cfg.drop_coarsest, floor)
    active = [s for k, s in slopes.items() if k not in degenerate]
    passed = all(s is not None and s >= CONSISTENCY_SLOPE_THRESHOLD for s in active)
    report = {
        "threshold": CONSISTENCY_SLOPE_THRESHOLD,
        "degenerate_gaps": degenerate,
        "noise_floor": floor,
    }
    return StudyResult(rows, slopes, passed, report)


def run_convergence(cfg: StudyConfig) -> StudyResult:
    model = cfg.make_model()
    blend = cfg.make_blend_function()
    load = cfg.make_load()
    cfg.check_amplitude()
    opts = cfg.make_solver_options()

    reference = None
    ref_doc = cfg.cb_reference
    if ref_doc:
        n_ref = int(ref_doc.get("n_ref", 2 * cfg.n_list[-1])) if isinstance(ref_doc, dict) else 2 * cfg.n_list[-1]
        reference = solve_cb_reference(load, model, n_ref)
        if not reference.report.converged:
            raise StudyFailure(f"continuum reference failed to converge at n_ref={n_ref}")

    rows = []
    for n in cfg.n_list:
        spec = LatticeSpec(cfg.dim, n)
        f = load.sample(spec, "force")
        u_at, rep_at = solve_atomistic(f, model, opts)
        if not rep_at.converged:
            raise StudyFailure(f"atomistic solve failed at n={n}: {rep_at.message}")
        u_qc, rep_qc = solve_hybrid(f, model, blend, opts)
        if not rep_qc.converged:
            raise StudyFailure(f"hybrid solve failed at n={n}: {rep_qc.message}")
        row = {
            "n": n,
            "eps": 1.0 / n,
            "err_qc_at": sobolev_norm(
                LatticeField(spec, u_qc.values - u_at.values, "displacement"), 2
            ),
            "iters_at": rep_at.iterations,
            "iters_qc": rep_qc.iterations,
            "raw_residual_qc": rep_qc.raw_residual,
        }
        if reference is not None:
            u_ref = reference.sample(spec)
            row["err_ref_at"] = sobolev_norm(
                LatticeField(spec, u_ref.values - u_at.values, "displacement"), 2
            )
            row["err_ref_qc"] = sobolev_norm(
                LatticeField(spec, u_ref.values - u_qc.values, "displacement"), 2
            )
        rows.append(row)

    eps = [r["eps"] for r in rows]
    floor = 100.0 * opts.residual_tol
    slopes = {"err_qc_at": fit_slope(eps, [r["err_qc_at"] for r in rows], cfg.drop_coarsest, floor)}
    if reference is not None:
        for key in ("err_ref_at", "err_ref_qc"):
            slopes[key] = fit_slope(eps, [r[key] for r in rows], cfg.drop_coarsest, floor)
    main_ok = slopes["err_qc_at"] is not None and slopes["err_qc_at"] >= CONVERGENCE_SLOPE_THRESHOLD
    ref_ok = True
    if reference is not None:
        ref_ok = (
            slopes["err_ref_at"] is not None
            and slopes["err_ref_at"] >= CONVERGENCE_SLOPE_THRESHOLD
        )
    passed = bool(main_ok and ref_ok)
    report = {"threshold": CONVERGENCE_SLOPE_THRESHOLD, "noise_floor": floor}
    return StudyResult(rows, slopes, passed, report)


def run_stability(cfg: StudyConfig) -> StudyResult:
    model = cfg.make_model()
    blend = cfg.make_blend_function()
    rng = np.random.default_rng(cfg.seed)
    atom = check_phonon_stability(model, cfg.n_list)
    fe = None
    kyfan = None
    if atom.passed:
        fe = check_fe_stability(model, cfg.n_list)
        if fe.passed:
            kyfan = kyfan_bound_check(model, blend, cfg.n_list, rng=rng)
    rows = []
    for i, n in enumerate(cfg.n_list):
        row = {"n": n, "atomistic_min_ratio": atom.min_ratios[i]}
        row["fe_min_ratio"] = fe.min_ratios[i] if fe is not None else float("nan")
        rows.append(row)
    passed = bool(atom.passed and fe is not None and fe.passed and kyfan is not None and kyfan.passed)
    slopes = {}
    report = {
        "a_at": atom.a_estimate,
        "a_fe": fe.a_estimate if fe is not None else None,
        "atomistic": atom.as_dict(),
        "finite_element": fe.as_dict() if fe is not None else None,
        "kyfan": kyfan.as_dict() if kyfan is not None else None,
        "variation_threshold": STABILITY_VARIATION_THRESHOLD,
        "kyfan_margin": KYFAN_MARGIN,
    }
    return StudyResult(rows, slopes, passed, report)


def run_stability_constant(cfg: StudyConfig) -> StudyResult:
    model = cfg.make_model()
    blend = cfg.make_blend_function() if cfg.blend is not None else None
    caps = {1: 32, 2: 32, 3: 8}
    if cfg.n_list[-1] > caps[cfg.dim]:
        raise ConfigError(
            f"dense stability-constant solve capped at n <= {caps[cfg.dim]} for d={cfg.dim}"
        )
    rows = []
    for n in cfg.n_list:
        spec = LatticeSpec(cfg.dim, n)
        u0 = zero_field(spec, "displacement")
        if blend is None:
            op = linearize_at(u0, model)
        else:
            op = linearize_qc(u0, model, blend)
        c_est = stability_constant(op)
        row = {"n": n, "c_est": c_est}
        if op.is_position_independent():
            row["c_oracle"] = stability_constant_circulant(op)
        else:
            row["c_oracle"] = float("nan")
        rows.append(row)
    cs = [r["c_est"] for r in rows]
    spread = max(cs) / min(cs)
    oracle_gap = max(
        (abs(r["c_est"] - r["c_oracle"]) for r in rows if np.isfinite(r["c_oracle"])),
        default=float("nan"),
    )
    passed = spread <= STABILITY_CONSTANT_SPREAD
    report = {
        "spread": spread,
        "spread_threshold": STABILITY_CONSTANT_SPREAD,
        "oracle_max_gap": oracle_gap,
        "blended": blend is not None,
    }
    return StudyResult(rows, slopes={}, passed=passed, report=report)


def run_derivative_check(cfg: StudyConfig) -> StudyResult:
    rows = []
    ok = True
    if cfg.model_name == "all":
        models = list(builtin_models(cfg.dim).values())
    else:
        models = [cfg.make_model()]
    for i, model in enumerate(models):
        rep = check_derivatives(model, samples=cfg.samples, tol=cfg.tol, seed=cfg.seed + i)
        rows.append(rep.as_dict() | {"n": i})
        ok = ok and rep.passed
    return StudyResult(rows, slopes={}, passed=ok, report={"tol": cfg.tol})


class StudyFailure(RuntimeError):
    """A study step failed (solver divergence, reference failure, ...)."""


_RUNNERS = {
    "consistency": run_consistency,
    "convergence": run_convergence,
    "stability": run_stability,
    "stability_constant": run_stability_constant,
    "derivative_check": run_derivative_check,
}


def run_study(cfg: StudyConfig) -> StudyResult:
    return _RUNNERS[cfg.study](cfg)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return "nan"
    if isinstance(x, str):
        return x
    return format(float(x), ".17e")


def write_csv(path: str, cfg: StudyConfig, result: StudyResult) -> None:
    rows = result.rows
    if rows:
        columns = list(rows[0].keys())
    else:
        columns = []
    lines = [f"# latblend csv schema v{CSV_SCHEMA_VERSION} study={cfg.study}"]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in columns))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def write_json(path: str, cfg: StudyConfig, result: StudyResult) -> None:
    doc = {
        "config": cfg.as_dict(),
        "result": result.as_dict(),
        "versions": {"latblend": __version__, "numpy": np.__version__},
    }
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _apply_thread_cap() -> None:
    cap = os.environ.get("LATBLEND_THREADS")
    if not cap:
        return
    try:
        limit = max(1, int(cap))
    except ValueError:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=limit)
    except Exception:
        # best effort: cap future pools through the conventional variables
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(limit))


def _load_config(path: str, study: str) -> StudyConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    doc.setdefault("study", study)
    if doc["study"] != study:
        raise ConfigError(
            f"config study '{doc['study']}' does not match subcommand '{study}'"
        )
    return StudyConfig.from_dict(doc)


def cli_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="latblend",
        description="Force-blended atomistic/continuum studies on periodic lattices.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "consistency": "consistency",
        "convergence": "convergence",
        "stability": "stability",
        "stability-constant": "stability_constant",
        "check-derivatives": "derivative_check",
    }
    for name in commands:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the study JSON config")
        p.add_argument("--out", required=True, help="output path prefix")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0

    _apply_thread_cap()
    study = commands[args.command]
    try:
        cfg = _load_config(args.config, study)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        result = run_study(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StudyFailure as exc:
        print(f"study failed: {exc}", file=sys.stderr)
        return 1

    out_dir = os.path.dirname(args.out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    write_csv(args.out + ".csv", cfg, result)
    write_json(args.out + ".json", cfg, result)

    for key, slope in result.slopes.items():
        shown = "degenerate" if slope is None else f"{slope:.3f}"
        print(f"{cfg.study}: slope[{key}] = {shown}")
    print(f"{cfg.study}: {'PASS' if result.passed else 'FAIL'}")
    return 0 if result.passed else 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
