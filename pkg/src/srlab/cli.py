"""Command-line front end: ``srlab <subcommand> [--flags]``.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines
(keys are flag names without the dashes); explicit flags override the
file.  Exit status is 0 on success, 2 for invalid input and 3 when a
computation fails.
"""
from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bridge, bundle, geometry, heatkernel, io, roughpath, stochastics, variational

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument types


def _number(token: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number {token.strip()!r}") from None
    if not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"non-finite number {token.strip()!r}")
    return value


def float_list(text: str) -> list:
    tokens = str(text).split(",")
    if not any(t.strip() for t in tokens):
        raise argparse.ArgumentTypeError("empty list")
    return [_number(t) for t in tokens]


def positive_list(text: str) -> list:
    values = float_list(text)
    for token, v in zip(str(text).split(","), values):
        if v <= 0:
            raise argparse.ArgumentTypeError(f"non-positive value {token.strip()!r}")
    return values


def positive_float(text: str) -> float:
    v = _number(str(text))
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return v


def positive_int(text: str) -> int:
    try:
        v = int(str(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def nonneg_int(text: str) -> int:
    try:
        v = int(str(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}")
    return v


def int_range(text: str) -> list:
    """``4..9`` or ``4,5,6``."""
    text = str(text)
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid level list {text!r}") from None


def key_value(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), geometry._coerce(v.strip())


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """Resolved options of one run; echoed into every output header."""

    subcommand: str
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"subcommand": self.subcommand}
        for k, v in sorted(self.options.items()):
            if k in ("config", "func", "timestamp", "workers"):
                continue
            out[k] = str(v) if isinstance(v, Path) else v
        return out


def _apply_config_file(parser: argparse.ArgumentParser, path: str):
    """Validate a key-value file against ``parser`` and install it as defaults."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from None
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = geometry._KV.match(line)
        if not m:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = m.group(1).replace("-", "_"), m.group(2)
        if key not in actions or key in ("config", "help"):
            raise ConfigError(f"{path}:{lineno}: unknown key {m.group(1)!r}")
        act = actions[key]
        try:
            if isinstance(act, argparse._StoreTrueAction):
                defaults[key] = value.lower() in ("1", "true", "yes", "on")
            elif isinstance(act, argparse._AppendAction):
                defaults[key] = [act.type(v.strip()) if act.type else v.strip() for v in value.split(";")]
            else:
                defaults[key] = act.type(value) if act.type else value
        except argparse.ArgumentTypeError as exc:
            raise ConfigError(f"{path}:{lineno}: {key}: {exc}") from None
        if act.choices is not None and defaults[key] not in act.choices:
            raise ConfigError(f"{path}:{lineno}: {key}: invalid choice {value!r}")
    parser.set_defaults(**defaults)


def _common(p: argparse.ArgumentParser, model=True):
    p.add_argument("--config", help="key = value file; flags override it")
    if model:
        p.add_argument("--model", default="heisenberg", help="built-in model name")
        p.add_argument("--param", action="append", type=key_value, default=[],
                       help="model parameter key=value (repeatable)")
    p.add_argument("--seed", type=nonneg_int, default=0)
    p.add_argument("--out", help="output CSV path (default: stdout)")
    p.add_argument("--json", help="JSON summary path")
    p.add_argument("--workers", type=positive_int, default=None,
                   help=f"worker threads (default: ${stochastics.WORKERS_ENV} or 1)")
    p.add_argument("--timestamp", action="store_true", help="add a creation time to CSV headers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srlab", description="sub-Riemannian diffusion laboratory",
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("validate-model", help="structural checks of a model", allow_abbrev=False)
    _common(p)
    p.add_argument("--points", type=positive_int, default=100)
    p.add_argument("--max-depth", type=positive_int, default=4)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="simulate an ensemble of endpoints", allow_abbrev=False)
    _common(p)
    p.add_argument("--x0", type=float_list)
    p.add_argument("--eps", type=_nonneg_float, default=0.5)
    p.add_argument("--n", type=positive_int, default=1000)
    p.add_argument("--level", type=positive_int, default=stochastics.DEFAULT_LEVEL)
    p.add_argument("--horizon", type=positive_float, default=1.0)
    p.add_argument("--drift", default="none", help="'none' or Zk: add the frame field Z_k as V")
    p.add_argument("--record-stride", type=positive_int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("distance", help="sub-Riemannian distance by optimal control", allow_abbrev=False)
    _common(p)
    p.add_argument("--x", type=float_list)
    p.add_argument("--a", type=float_list, required=False)
    p.add_argument("--n-controls", type=positive_int, default=32)
    p.add_argument("--n-starts", type=positive_int, default=16)
    p.add_argument("--max-iter", type=positive_int, default=300)
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("heatkernel", help="Monte Carlo heat kernel at one point", allow_abbrev=False)
    _common(p)
    p.add_argument("--x", type=float_list)
    p.add_argument("--a", type=float_list)
    p.add_argument("--eps", type=positive_float, default=0.5)
    p.add_argument("--t", type=positive_float, default=1.0)
    p.add_argument("--n", type=positive_int, default=100000)
    p.add_argument("--level", type=positive_int, default=stochastics.DEFAULT_LEVEL)
    p.add_argument("--bandwidth", type=positive_list, default=None)
    p.set_defaults(func=cmd_heatkernel)

    p = sub.add_parser("ldp-curve", help="eps^2 log p against -d^2/2", allow_abbrev=False)
    _common(p)
    p.add_argument("--x", type=float_list)
    p.add_argument("--a", type=float_list)
    p.add_argument("--eps", type=positive_list, default=[0.5, 0.35, 0.25])
    p.add_argument("--n", type=positive_int, default=200000)
    p.add_argument("--level", type=positive_int, default=stochastics.DEFAULT_LEVEL)
    p.set_defaults(func=cmd_ldp)

    p = sub.add_parser("bridge", help="rejection-sampled bridges", allow_abbrev=False)
    _common(p)
    p.add_argument("--x", type=float_list)
    p.add_argument("--a", type=float_list)
    p.add_argument("--eps", type=positive_float, default=0.5)
    p.add_argument("--delta", type=positive_float, default=None, help="default 0.1 * eps")
    p.add_argument("--n-target", type=positive_int, default=1000)
    p.add_argument("--budget", type=positive_int, default=10 ** 6)
    p.add_argument("--level", type=positive_int, default=stochastics.DEFAULT_LEVEL)
    p.add_argument("--fdd", action="store_true", help="also run the flat-model marginal test")
    p.add_argument("--paths", help="write accepted paths to this .npz file")
    p.set_defaults(func=cmd_bridge)

    p = sub.add_parser("concentration", help="bridge concentration along an eps ladder", allow_abbrev=False)
    _common(p)
    p.add_argument("--x", type=float_list)
    p.add_argument("--a", type=float_list)
    p.add_argument("--eps", type=positive_list, default=[0.5, 0.35, 0.25])
    p.add_argument("--delta-rule", type=positive_float, default=0.1)
    p.add_argument("--n-target", type=positive_int, default=500)
    p.add_argument("--budget", type=positive_int, default=10 ** 6)
    p.add_argument("--level", type=positive_int, default=stochastics.DEFAULT_LEVEL)
    p.set_defaults(func=cmd_concentration)

    p = sub.add_parser("roughpath-check", help="Chen, geometricity and Cauchy checks", allow_abbrev=False)
    _common(p, model=False)
    p.add_argument("--level", type=positive_int, default=8, help="level of the random lifts")
    p.add_argument("--dim", type=positive_int, default=2)
    p.add_argument("--levels", type=int_range, default=list(range(4, 10)), help="Cauchy levels, e.g. 4..9")
    p.add_argument("--seeds", type=positive_int, default=50)
    p.add_argument("--alpha", type=positive_float, default=0.35)
    p.add_argument("--m", type=positive_int, default=25)
    p.set_defaults(func=cmd_roughpath)

    p = sub.add_parser("verify", help="property suite for one model", allow_abbrev=False)
    _common(p)
    p.add_argument("--points", type=positive_int, default=20)
    p.set_defaults(func=cmd_verify)
    return parser


def _nonneg_float(text):
    v = _number(str(text))
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text!r}")
    return v


# ---------------------------------------------------------------------------
# helpers


def _model(args):
    return geometry.build_model(args.model, **dict(args.param))


def _point(model, values, name, default_zero=True):
    if values is None:
        if default_zero:
            return np.zeros(model.dim_n)
        raise ConfigError(f"--{name} is required")
    v = np.asarray(values, float)
    if v.shape != (model.dim_n,):
        raise ConfigError(f"--{name} needs {model.dim_n} coordinates for model {model.name!r}, got {len(v)}")
    return v


def _emit(args, columns, rows, cfg: dict, summary: dict | None = None):
    text = io.csv_text(columns, rows, cfg, args.timestamp)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.json:
        io.write_json(args.json, {"config": cfg, **(summary or {})})


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args, cfg):
    model = _model(args)
    pts = geometry.random_points(model, args.points, args.seed)
    report = geometry.validate_model(model, pts, {"max_depth": args.max_depth})
    rows = [[c.name, c.passed, c.detail] for c in report.checks]
    _emit(args, ["check", "passed", "detail"], rows, cfg,
          {"passed": report.passed, "max_depth_needed": report.max_depth_needed})
    if not args.out:
        print(report.table(), file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _drift_field(model, token):
    if token in (None, "", "none"):
        return None
    if not (token[:1] in "Zz" and token[1:].isdigit() and 1 <= int(token[1:]) <= model.dim_n):
        raise ConfigError(f"--drift must be 'none' or Z1..Z{model.dim_n}, got {token!r}")
    return geometry.frame_field(model, int(token[1:]) - 1)


def cmd_simulate(args, cfg):
    model = _model(args)
    x0 = _point(model, args.x0, "x0")
    ens = stochastics.simulate_ensemble(model, x0, args.eps, args.n, args.level, args.seed,
                                        V=_drift_field(model, args.drift), horizon=args.horizon,
                                        record_stride=args.record_stride, workers=args.workers)
    if args.out and args.out.endswith(".npz"):
        io.write_ensemble(ens, args.out)
        if args.json:
            io.write_json(args.json, {"config": cfg, "mean": ens.endpoints.mean(axis=0)})
        return EXIT_OK
    n = model.dim_n
    rows = [[i, *row] for i, row in enumerate(ens.endpoints.tolist())]
    _emit(args, ["index"] + [f"x{i + 1}" for i in range(n)], rows, cfg,
          {"mean": ens.endpoints.mean(axis=0), "cov": np.atleast_2d(np.cov(ens.endpoints.T))})
    return EXIT_OK


def cmd_distance(args, cfg):
    model = _model(args)
    x = _point(model, args.x, "x")
    a = _point(model, args.a, "a", default_zero=False)
    res = variational.sr_distance(model, x, a, n_controls=args.n_controls, n_starts=args.n_starts,
                                  max_iter=args.max_iter, seed=args.seed, workers=args.workers or 1)
    n = model.dim_n
    rows = [[t, *p] for t, p in zip(res.times.tolist(), res.path.tolist())]
    summary = res.to_dict()
    if model.distance_oracle is not None:
        summary["oracle"] = float(model.distance_oracle(x, a))
    if args.out:
        _emit(args, ["t"] + [f"x{i + 1}" for i in range(n)], rows, cfg, summary)
    else:
        sys.stdout.write(io.to_json({"config": cfg, **summary}) + "\n")
    if not res.converged:
        print(f"error: variational: no feasible start (violation {res.constraint_violation:.2e})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


HK_COLUMNS = ["eps", "t", "p_hat", "stderr", "lower_bound_99", "certified", "exact"]


def cmd_heatkernel(args, cfg):
    model = _model(args)
    x = _point(model, args.x, "x")
    a = _point(model, args.a, "a", default_zero=False)
    est = heatkernel.heat_kernel_mc(model, x, a, args.eps, args.n, args.t, args.level, args.seed,
                                    args.bandwidth, workers=args.workers)
    rep = heatkernel.certify(est)
    exact = (model.heat_kernel_oracle(args.eps ** 2 * args.t, x, a)
             if model.heat_kernel_oracle is not None else math.nan)
    _emit(args, HK_COLUMNS, [[args.eps, args.t, est.p_hat, est.stderr, rep.lower_bound, rep.certified, exact]],
          cfg, {"bandwidth": est.bandwidth})
    return EXIT_OK


LDP_COLUMNS = ["eps", "p_hat", "stderr", "eps2logp", "target", "feasible_flag"]


def cmd_ldp(args, cfg):
    model = _model(args)
    x = _point(model, args.x, "x")
    a = _point(model, args.a, "a", default_zero=False)
    rows = heatkernel.ldp_curve(model, x, a, args.eps, args.n, level=args.level, seed=args.seed,
                                workers=args.workers)
    body = [[r.eps, r.p_hat, r.stderr, r.eps2logp, r.target, r.feasible] for r in rows]
    _emit(args, LDP_COLUMNS, body, cfg,
          {"gaps": [r.gap for r in rows], "gaps_decreasing": heatkernel.gaps_decreasing(rows),
           "exact": [r.exact for r in rows], "eps2logp_stderr": [r.eps2logp_stderr for r in rows]})
    return EXIT_OK


def cmd_bridge(args, cfg):
    model = _model(args)
    x = _point(model, args.x, "x")
    a = _point(model, args.a, "a", default_zero=False)
    delta = args.delta or 0.1 * args.eps
    br = bridge.sample_bridges(model, x, a, args.eps, delta, args.n_target, args.budget, args.level, args.seed)
    summary = {"accepted": br.accepted, "proposals": br.proposals, "acceptance_rate": br.acceptance_rate}
    if args.fdd:
        rep = bridge.fdd_consistency(model, x, a, args.eps, delta, N=args.n_target, budget=args.budget,
                                     level=args.level, seed=args.seed)
        summary.update(ks_stat=rep.ks_stat, fdd_passed=rep.passed, inconclusive=rep.inconclusive)
    if args.paths:
        Path(args.paths).parent.mkdir(parents=True, exist_ok=True)
        with open(args.paths, "wb") as fh:
            np.savez_compressed(fh, times=br.times, paths=br.paths, indices=br.indices)
    mid = br.paths[:, br.times.size // 2, :]
    rows = [[args.eps, delta, br.accepted, br.proposals, br.acceptance_rate, *mid.mean(axis=0), *mid.std(axis=0)]]
    n = model.dim_n
    cols = ["eps", "delta", "accepted", "proposals", "acceptance_rate"] + \
        [f"mid_mean{i + 1}" for i in range(n)] + [f"mid_std{i + 1}" for i in range(n)]
    _emit(args, cols, rows, cfg, summary)
    return EXIT_OK


def cmd_concentration(args, cfg):
    model = _model(args)
    x = _point(model, args.x, "x")
    a = _point(model, args.a, "a", default_zero=False)
    rows = bridge.concentration_curve(model, x, a, args.eps, args.delta_rule, args.n_target, args.budget,
                                      args.level, args.seed)
    body = [[r.eps, r.median_sup_dist, r.q90_sup_dist, r.accepted, r.acceptance_rate, r.delta] for r in rows]
    _emit(args, ["eps", "median_sup_dist", "q90_sup_dist", "accepted", "acceptance_rate", "delta"], body, cfg,
          {"medians_strictly_decreasing": bridge.strictly_decreasing(r.median_sup_dist for r in rows)})
    return EXIT_OK


def cmd_roughpath(args, cfg):
    try:
        bcfg = roughpath.BesovConfig(args.alpha, args.m)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    w = stochastics.sample_brownian(args.level, (args.seed, 0), args.dim)
    h = stochastics.sample_brownian(args.level, (args.seed, 1), args.dim)
    p = roughpath.lift_dyadic(w)
    trans = roughpath.translate(p, h)
    target = roughpath.lift_dyadic(w + h)
    dil = roughpath.dilate(p, -1.7)
    dil_target = roughpath.lift_dyadic(w.scale(-1.7))
    rows = [
        ["chen_defect", roughpath.chen_defect(p), 1e-12],
        ["geometricity_defect", roughpath.geometricity_defect(p), 1e-12],
        ["translation_defect", max(np.abs(trans.level1 - target.level1).max(),
                                   np.abs(trans.level2 - target.level2).max()), 1e-12],
        ["dilation_defect", max(np.abs(dil.level1 - dil_target.level1).max(),
                                np.abs(dil.level2 - dil_target.level2).max()), 1e-12],
    ]
    cauchy = roughpath.dyadic_cauchy_check(args.levels, args.seeds, args.dim, args.seed, bcfg)
    rows += [[f"cauchy_median_k{r.level}", r.median_distance, math.nan] for r in cauchy]
    _emit(args, ["quantity", "value", "tolerance"], rows, cfg,
          {"cauchy_decreasing": bridge.strictly_decreasing(r.median_distance for r in cauchy)})
    return EXIT_OK


def _test_functions(n):
    return [
        ("const", lambda x: 1.0),
        ("sin_x1", lambda x: math.sin(x[0])),
        ("x1x2", lambda x: x[0] * x[min(1, n - 1)]),
        ("exp_mix", lambda x: math.exp(0.3 * x[0] - 0.2 * x[-1])),
        ("cos_sum", lambda x: math.cos(x.sum())),
    ]


def cmd_verify(args, cfg):
    model = _model(args)
    rng = np.random.default_rng(args.seed)
    rows = []

    def add(name, value, tol):
        rows.append([name, value, tol, bool(value <= tol)])

    pts = geometry.random_points(model, args.points, rng)
    report = geometry.validate_model(model, pts)
    rows.append(["validate_model", 0.0 if report.passed else 1.0, 0.0, report.passed])
    worst = 0.0
    for _ in range(args.points):
        u = bundle.random_frame_point(model, rng)
        for _, f in _test_functions(model.dim_n):
            worst = max(worst, bundle.verify_generator(u, f, model, 1e-3))
    add("generator_identity", worst, 1e-4)
    e_err = rt_err = ortho = 0.0
    u0 = bundle.FramePoint.identity(model, np.zeros(model.dim_n))
    for _ in range(5):
        vel = rng.normal(size=(8, model.dim_d))
        h = variational.PiecewiseLinearPath.from_velocities(vel)
        h = h.scale(2.0 / max(h.norm(), 1e-12) * rng.uniform(0.2, 1.0))
        traj = bundle.develop(u0, h, model, dt=2.0 ** -12)
        E = variational.energy_path(traj.times, traj.x, model, tol=1e-4)
        e_err = max(e_err, abs(h.energy() - E) / max(h.energy(), 1e-300))
        back = bundle.antidevelop(u0, traj.times, traj.x, model, tol=1e-4)
        rt_err = max(rt_err, float(np.abs(back(h.times) - h.values).max()) / max(h.norm(), 1e-300))
        ortho = max(ortho, traj.orthogonality_drift())
    add("energy_preservation_rel", e_err, 1e-6)
    add("round_trip_rel", rt_err, 1e-4)
    add("orthogonality_drift", ortho, 1e-8)
    h = variational.PiecewiseLinearPath.from_velocities(rng.normal(size=(8, model.dim_d)))
    mc = variational.malliavin_cov(model, u0, h)
    add("jk_residual", mc.jk_residual, 1e-8)
    add("gamma_psd_violation", max(0.0, -mc.min_eigenvalue), 1e-10)
    _emit(args, ["check", "value", "tolerance", "passed"], rows, cfg)
    if not args.out:
        width = max(len(r[0]) for r in rows)
        for r in rows:
            print(f"{r[0]:<{width}}  {'PASS' if r[3] else 'FAIL'}  {r[1]:.3e}", file=sys.stderr)
    return EXIT_OK if all(r[3] for r in rows) else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# entry points

NUMERIC_ERRORS = (bundle.StepRejected, bundle.AdmissibilityError, variational.InfeasibleError,
                  variational.MalliavinError, bridge.BridgeError, FloatingPointError, np.linalg.LinAlgError)


def _subparser(parser, name):
    for act in parser._actions:
        if isinstance(act, argparse._SubParsersAction):
            return act.choices[name]
    raise KeyError(name)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    try:
        if args.config:
            sp = _subparser(parser, args.subcommand)
            _apply_config_file(sp, args.config)
            args = parser.parse_args(argv)
        cfg = ExperimentConfig(args.subcommand, vars(args).copy()).to_dict()
        cfg["param"] = dict(getattr(args, "param", []) or [])
        return args.func(args, cfg)
    except (ConfigError, geometry.ModelDefinitionError) as exc:
        print(f"srlab {args.subcommand}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NUMERIC_ERRORS as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        print(f"srlab {args.subcommand}: numerical failure [{module}.{type(exc).__name__}]: {exc}",
              file=sys.stderr)
        return EXIT_NUMERIC


def run(config: dict) -> int:
    """Run one experiment from a mapping of option names to values."""
    config = dict(config)
    argv = [config.pop("subcommand")]
    for key, value in config.items():
        flag = "--" + key.replace("_", "-")
        if value is True:
            argv.append(flag)
        elif value is False or value is None:
            continue
        elif isinstance(value, (list, tuple)):
            argv += [flag, ",".join(str(v) for v in value)]
        else:
            argv += [flag, str(value)]
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
