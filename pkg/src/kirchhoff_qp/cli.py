"""Command line front end and pipeline orchestration.

    kirchhoff-qp solve     --config cfg.json [--forcing f.json] --out run/
    kirchhoff-qp reduce    --config cfg.json [--solution run/] --out run/
    kirchhoff-qp measure   --config cfg.json [--blocks blocks.json] --gammas 0.1,0.05 --out measure.csv
    kirchhoff-qp stability --solution run/ [--t-max T] [--s 3] [--out run/]
    kirchhoff-qp verify
    kirchhoff-qp run       --config cfg.json --out run/

Exit codes: 0 success, 2 configuration error, 3 omega excluded, 4 divergence
(1 is used by verify when an invariant fails). KIRCHHOFF_QP_THREADS caps the
BLAS/OpenMP thread pools.
"""
import os

if os.environ.get("KIRCHHOFF_QP_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["KIRCHHOFF_QP_THREADS"])

import argparse
import copy
import json
import sys
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .kam_reducibility import NonResonanceViolation, reduce
from .linearization import StatePair, linearize
from .measure import default_exponents, gamma_sweep, sweep_csv
from .nash_moser import (DivergenceError, NashMoserConfig, assemble_full_solution, eval_F_full,
                         nash_moser_iterate, solve_zero_mode)
from .regularization import regularize
from .spectral_core import FrequencyContext, NearResonanceError, SpaceTimeField
from .stability import default_horizon, integrate_original, integrate_reduced, snapshots_csv
from .toeplitz_ops import BlockDiagonal

EXIT_OK, EXIT_CONFIG, EXIT_EXCLUDED, EXIT_DIVERGENCE = 0, 2, 3, 4
STATUS = {EXIT_OK: "ok", EXIT_CONFIG: "config_error", EXIT_EXCLUDED: "omega_excluded",
          EXIT_DIVERGENCE: "divergence"}


class ConfigError(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage, code, diagnostics):
        super().__init__(f"stage {stage} failed")
        self.stage, self.code, self.diagnostics = stage, code, diagnostics


def load_schema(name):
    return json.loads(resources.files(__package__).joinpath("schemas", name).read_text())


def sample_config_path():
    return resources.files(__package__).joinpath("data", "sample_config.json")


@dataclass
class RunConfig:
    nu: int
    eps: float
    l_max: int
    j_max: int
    omega: list = None
    omega_box: list = None
    gamma: float = None
    gamma_exponent: float = 1 / 3
    tau: float = 3.0
    N0: int = 8
    chi: float = 1.5
    mu1: float = None
    max_steps: int = 8
    residual_tol: float = 1e-10
    inversion_path: str = "dense_oracle"
    kam_steps: int = 12
    kam_tol: float = 1e-12
    kam_check: bool = True
    forcing: dict = None
    forcing_path: str = None
    output_dir: str = None
    seed: int = 0
    record_timing: bool = False
    stages: dict = field(default_factory=lambda: {"solve": True, "reduce": True,
                                                  "measure": False, "stability": False})
    measure: dict = field(default_factory=dict)
    stability: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d, base_dir=None):
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        for key in ("nu", "eps", "l_max", "j_max"):
            if key not in d:
                raise ConfigError(f"missing config key {key!r}")
        cfg = cls(**copy.deepcopy(d))
        cfg._base = Path(base_dir) if base_dir else Path(".")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d, Path(path).parent)

    def validate(self):
        if not isinstance(self.nu, int) or self.nu < 1:
            raise ConfigError("nu must be a positive integer")
        if self.l_max < 1 or self.j_max < 1:
            raise ConfigError("l_max and j_max must be positive")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.omega is None and self.omega_box is None:
            raise ConfigError("give omega or omega_box")
        if self.omega is not None and len(self.omega) != self.nu:
            raise ConfigError("omega has the wrong length")
        if self.omega_box is not None:
            b = np.asarray(self.omega_box, float)
            if b.shape != (self.nu, 2) or np.any(b[:, 1] <= b[:, 0]):
                raise ConfigError("omega_box must hold nu nonempty intervals")
        if self.inversion_path not in ("dense_oracle", "reduced"):
            raise ConfigError("inversion_path must be dense_oracle or reduced")
        if not 0 < self.gamma_exponent < 1:
            raise ConfigError("gamma_exponent must lie in (0, 1)")
        if not 0 < self.resolved_gamma() < 1:
            raise ConfigError("gamma (given, or eps ** gamma_exponent) must lie in (0, 1)")
        unknown = set(self.stages) - {"solve", "reduce", "measure", "stability"}
        if unknown:
            raise ConfigError(f"unknown stages {sorted(unknown)}")

    # derived quantities are always recomputed here
    def resolved_omega(self):
        if self.omega is not None:
            return [float(x) for x in self.omega]
        b = np.asarray(self.omega_box, float)
        rng = np.random.Generator(np.random.Philox(key=self.seed))
        return [float(x) for x in rng.uniform(b[:, 0], b[:, 1])]

    def resolved_gamma(self):
        if self.gamma is not None:
            return float(self.gamma)
        return float(self.eps ** self.gamma_exponent)

    def context(self):
        return FrequencyContext(self.nu, self.resolved_omega(), self.resolved_gamma(), self.tau,
                                self.l_max, self.j_max)

    def nm_config(self):
        return NashMoserConfig(eps=self.eps, gamma=self.resolved_gamma(), N0=self.N0, chi=self.chi,
                               mu1=self.mu1, max_steps=self.max_steps, residual_tol=self.residual_tol,
                               tau=self.tau, inversion_path=self.inversion_path,
                               kam_steps=self.kam_steps)

    def derived(self):
        nmc = self.nm_config()
        ts, tm = default_exponents(self.nu)
        g = self.resolved_gamma()
        return {"s0": (self.nu + 1) // 2 + 1, "tau_star": ts, "tau_measure": tm,
                "gamma": g, "gamma_star": 5 * g, "mu1": nmc.mu1, "kappa": nmc.kappa,
                "b1": nmc.b1, "a1": nmc.a1_nm, "omega": self.resolved_omega(),
                "N_schedule": [nmc.N(n) for n in range(min(self.max_steps, 6) + 1)],
                "gamma_n": [g * (1 + 2.0 ** -n) for n in range(6)]}

    def forcing_field(self):
        if self.forcing is not None:
            d = self.forcing
        elif self.forcing_path:
            p = Path(self.forcing_path)
            p = p if p.is_absolute() else getattr(self, "_base", Path(".")) / p
            try:
                d = json.loads(p.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read forcing {p}: {exc}") from exc
        else:
            return SpaceTimeField.zeros(self.nu, self.l_max, self.j_max)
        try:
            f = SpaceTimeField.from_json(d)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"forcing does not parse: {exc}") from exc
        if f.nu != self.nu:
            raise ConfigError("forcing nu differs from the config")
        if not f.is_real():
            raise ConfigError("forcing must be real valued")
        return f.resize(self.l_max, self.j_max)

    def as_dict(self):
        d = {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}
        return {k: v for k, v in d.items() if v is not None}


def _json_safe(x):
    if isinstance(x, dict):
        return {str(k): _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if np.isfinite(v) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _json_safe(x.tolist())
    return x


def _write_json(path, obj):
    Path(path).write_text(json.dumps(_json_safe(obj), indent=1, sort_keys=True) + "\n")


def _strip_timing(csv_text, enabled):
    """Zero the wall_time column unless timing is recorded (keeps reruns byte-identical)."""
    if enabled:
        return csv_text
    lines = csv_text.rstrip("\n").split("\n")
    head = lines[0].split(",")
    if "wall_time" not in head:
        return csv_text
    k = head.index("wall_time")
    out = [lines[0]]
    for ln in lines[1:]:
        cols = ln.split(",")
        cols[k] = "0"
        out.append(",".join(cols))
    return "\n".join(out) + "\n"


# stages

def stage_solve(cfg, ctx, out):
    f = cfg.forcing_field()
    try:
        v0, p0 = solve_zero_mode(f, ctx, cfg.eps)
    except ValueError as exc:
        raise StageFailure("solve", EXIT_CONFIG, {"message": str(exc)})
    res = nash_moser_iterate(f, cfg.nm_config(), ctx)
    (out / "convergence.csv").write_text(_strip_timing(res.csv(), cfg.record_timing))
    diag = {"status": res.status, "residuals": res.residuals,
            "quadratic_constants": res.quadratic_constants(), "exclusion": res.exclusion}
    if res.status == "excluded":
        raise StageFailure("solve", EXIT_EXCLUDED, diag)
    if res.status != "converged":
        raise StageFailure("solve", EXIT_DIVERGENCE, diag)
    v, p = assemble_full_solution(res.state, v0, p0)
    F1, F2 = eval_F_full(v, p, f, cfg.eps, ctx)
    diag.update({"u_norm_s0": res.state.norm(ctx.s0), "full_residual_s0": float(np.hypot(F1.norm(ctx.s0), F2.norm(ctx.s0))),
                 "space_time_mean_v": abs(complex(v.coeffs[(ctx.l_max,) * ctx.nu + (v.j_max,)])),
                 "space_time_mean_p": abs(complex(p.coeffs[(ctx.l_max,) * ctx.nu + (p.j_max,)]))})
    sol = {"eps": cfg.eps, "omega": list(ctx.omega), "u": res.state.u.to_json(),
           "psi": res.state.psi.to_json(), "v": v.to_json(), "p": p.to_json()}
    _write_json(out / "solution.json", sol)
    return res.state, diag


def load_solution(path, eps=None):
    p = Path(path)
    if p.is_dir():
        p = p / "solution.json"
    d = json.loads(p.read_text())
    u = SpaceTimeField.from_json(d["u"])
    psi = SpaceTimeField.from_json(d["psi"])
    return StatePair(u, psi, float(d["eps"] if eps is None else eps)), d


def stage_reduce(cfg, ctx, state, out):
    Lin = linearize(state, ctx)
    L = ctx.l_max
    reg = regularize(Lin, l_coef=3 * L, l_op=2 * L)
    fin = reduce(reg.m, reg.R4, ctx, steps=cfg.kam_steps, N0=cfg.N0, chi=cfg.chi, tol=cfg.kam_tol,
                 check=cfg.kam_check)
    (out / "reduction.csv").write_text(_strip_timing(fin.table_csv(), cfg.record_timing))
    _write_json(out / "regularization.json", reg.report)
    diag = {"regularization": reg.report, "stopped_by": fin.stopped_by,
            "conjugation_defect": fin.conjugation_defect, "violation": fin.violation,
            "m": reg.m, "R_D_final": fin.table[-1]["R_D_s0"],
            "min_margins": [r["min_margin"] for r in fin.table[1:]]}
    if fin.stopped_by == "violation":
        raise StageFailure("reduce", EXIT_EXCLUDED, diag)
    if fin.stopped_by == "divergence":
        raise StageFailure("reduce", EXIT_DIVERGENCE, diag)
    sup, ratio = fin.asymptotics(cfg.eps)
    diag.update({"asymptotic_sup": sup, "asymptotic_ratio": ratio})
    _write_json(out / "blocks.json", fin.D_inf.to_json(reg.m))
    return Lin, reg, fin, diag


def stage_measure(cfg, ctx, D_inf, m, out_csv, gammas=None):
    mc = cfg.measure
    box = mc.get("box") or cfg.omega_box or [[1.0, 2.0]] * cfg.nu
    gammas = gammas or mc.get("gammas") or [0.1, 0.05, 0.025]
    if mc.get("flat_blocks", False):
        D_inf = None
    stats = gamma_sweep(D_inf, m, box, gammas, n_samples=mc.get("n_samples", 10_000), seed=cfg.seed,
                        L_scan=mc.get("L_scan") or 2 * ctx.l_max,
                        J_scan=mc.get("J_scan") or ctx.j_max, mult=mc.get("multiplier", 1.0))
    Path(out_csv).write_text(sweep_csv(stats))
    return {"gammas": list(gammas), "excluded_fraction": [s.excluded_fraction for s in stats],
            "ci": [[s.ci_low, s.ci_high] for s in stats], "worst_margin": [s.worst_margin for s in stats],
            "worst_kind": [s.worst_kind for s in stats]}


def _initial_data(rng, J, s):
    j = np.arange(-J, J + 1)
    w = np.maximum(1, np.abs(j)).astype(float)
    c = (rng.normal(size=2 * J + 1) + 1j * rng.normal(size=2 * J + 1)) * w ** -(s + 1.0)
    c = (c + np.conj(c[::-1])) / 2
    c[J] = 0
    return c


def stage_stability(cfg, ctx, Lin, fin, out, t_max=None, s=None):
    sc = cfg.stability
    s = sc.get("s", 1.0) if s is None else s
    T = t_max or sc.get("t_max") or default_horizon(ctx.omega, sc.get("periods", 10))
    n = sc.get("n_snapshots", 51)
    tg = np.linspace(0.0, T, n)
    rng = np.random.default_rng(cfg.seed)
    J = ctx.j_max
    v0, p0 = _initial_data(rng, J, s), _initial_data(rng, J, s - 1)
    snaps, _, _, C = integrate_original(Lin.a, Lin.calR, ctx.omega, v0, p0, tg, s=s)
    red = integrate_reduced(fin.D_inf, _initial_data(rng, J, s), tg, s=s)
    hn = np.array([x.h_norm_s for x in red])
    drift = float(np.max(np.abs(hn / hn[0] - 1)))
    (out / "stability.csv").write_text(snapshots_csv(snaps))
    (out / "stability_reduced.csv").write_text(snapshots_csv(red))
    return {"t_max": float(T), "s": s, "C_s": C, "reduced_norm_drift": drift}


def run_pipeline(cfg, out=None):
    """Run the enabled stages in order; returns (exit code, summary dict)."""
    out = Path(out or cfg.output_dir or "run")
    out.mkdir(parents=True, exist_ok=True)
    summary = {"config": cfg.as_dict(), "derived": cfg.derived(), "stages": {},
               "failed_stage": None, "diagnostics": None}
    code = EXIT_OK
    try:
        ctx = cfg.context()
        resolved = cfg.as_dict() | {"omega": list(ctx.omega), "forcing": cfg.forcing_field().to_json()}
        resolved.pop("forcing_path", None)
        resolved.pop("output_dir", None)
        _write_json(out / "config.json", resolved)
        st = cfg.stages
        state = Lin = fin = None
        if st.get("solve", True):
            state, summary["stages"]["solve"] = stage_solve(cfg, ctx, out)
        if st.get("reduce", True) or st.get("stability", False):
            if state is None:
                state, _ = load_solution(out)
            Lin, reg, fin, summary["stages"]["reduce"] = stage_reduce(cfg, ctx, state, out)
        if st.get("measure", False):
            D, m = (fin.D_inf, fin.m) if fin is not None else (None, 1.0)
            summary["stages"]["measure"] = stage_measure(cfg, ctx, D, m, out / "measure.csv")
        if st.get("stability", False):
            summary["stages"]["stability"] = stage_stability(cfg, ctx, Lin, fin, out)
    except StageFailure as exc:
        code = exc.code
        summary["failed_stage"] = exc.stage
        summary["diagnostics"] = exc.diagnostics
        summary["stages"][exc.stage] = exc.diagnostics
    except (NonResonanceViolation, NearResonanceError) as exc:
        code = EXIT_EXCLUDED
        summary["diagnostics"] = getattr(exc, "as_dict", lambda: {"message": str(exc)})()
    except DivergenceError as exc:
        code = EXIT_DIVERGENCE
        summary["diagnostics"] = {"message": str(exc)}
    except ConfigError as exc:
        code = EXIT_CONFIG
        summary["diagnostics"] = {"message": str(exc)}
    summary["exit_code"] = code
    summary["status"] = STATUS[code]
    _write_json(out / "summary.json", summary)
    return code, summary


# subcommands

def _load_cfg(args):
    cfg = RunConfig.load(args.config)
    if getattr(args, "forcing", None):
        cfg.forcing, cfg.forcing_path = None, str(Path(args.forcing).resolve())
    return cfg


def cmd_run(args):
    return cmd_run_cfg(_load_cfg(args), args.out)


def cmd_solve(args):
    cfg = _load_cfg(args)
    cfg.stages = {"solve": True, "reduce": False, "measure": False, "stability": False}
    return cmd_run_cfg(cfg, args.out)


def cmd_reduce(args):
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.solution and Path(args.solution).resolve() != out.resolve():
        src = Path(args.solution)
        src = src / "solution.json" if src.is_dir() else src
        (out / "solution.json").write_text(src.read_text())
    cfg.stages = {"solve": False, "reduce": True, "measure": False, "stability": False}
    return cmd_run_cfg(cfg, out)


def cmd_run_cfg(cfg, out):
    code, summary = run_pipeline(cfg, out)
    print(json.dumps({"status": summary["status"], "failed_stage": summary["failed_stage"]}))
    return code


def cmd_measure(args):
    cfg = _load_cfg(args)
    ctx = cfg.context()
    D, m = None, 1.0
    if args.blocks:
        d = json.loads(Path(args.blocks).read_text())
        D = BlockDiagonal.from_json(d)
        m = float(d.get("mean_coefficient", 1.0))
    gammas = [float(x) for x in args.gammas.split(",")] if args.gammas else None
    if args.samples:
        cfg.measure["n_samples"] = args.samples
    res = stage_measure(cfg, ctx, D, m, args.out, gammas)
    print(json.dumps(_json_safe(res)))
    return EXIT_OK


def cmd_stability(args):
    run = Path(args.solution)
    cfg = RunConfig.load(run / "config.json")
    out = Path(args.out or run)
    out.mkdir(parents=True, exist_ok=True)
    ctx = cfg.context()
    state, _ = load_solution(run)
    try:
        Lin, reg, fin, rdiag = stage_reduce(cfg, ctx, state, out)
    except StageFailure as exc:
        print(json.dumps(_json_safe({"status": STATUS[exc.code], "diagnostics": exc.diagnostics})))
        return exc.code
    res = stage_stability(cfg, ctx, Lin, fin, out, args.t_max, args.s)
    _write_json(out / "stability.json", res)
    print(json.dumps(_json_safe(res)))
    return EXIT_OK


def cmd_verify(args):
    from .invariants import run_all
    results = run_all()
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def build_parser():
    ap = argparse.ArgumentParser(prog="kirchhoff-qp", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("solve", help="Nash-Moser solve for the configured forcing")
    p.add_argument("--config", required=True)
    p.add_argument("--forcing")
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_solve)
    p = sub.add_parser("reduce", help="regularize and reduce the linearized operator at a solution")
    p.add_argument("--config", required=True)
    p.add_argument("--solution")
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_reduce)
    p = sub.add_parser("measure", help="Monte Carlo excluded-frequency fractions")
    p.add_argument("--config", required=True)
    p.add_argument("--blocks")
    p.add_argument("--gammas")
    p.add_argument("--samples", type=int)
    p.add_argument("--out", default="measure.csv")
    p.set_defaults(func=cmd_measure)
    p = sub.add_parser("stability", help="linear flows along a stored solution")
    p.add_argument("--solution", required=True)
    p.add_argument("--t-max", type=float, dest="t_max")
    p.add_argument("--s", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stability)
    p = sub.add_parser("verify", help="run the invariant checks")
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("run", help="all stages enabled in the config")
    p.add_argument("--config", required=True)
    p.add_argument("--forcing")
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
