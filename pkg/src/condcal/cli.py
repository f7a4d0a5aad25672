"""Command-line interface.

Exit codes: 0 success, 2 invalid input or configuration, 3 solver failure,
4 a requested coverage assertion failed.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

from . import __version__
from .calibrate import fit_model, fit_two_sided, predict_set, predict_two_sided
from .core import ValidationError, regularizer_from_dict
from .estimate import TiltSpec, n_sample_fit, rkhs_coverage_estimate
from .eval import (
    ASSERTIONS,
    EvalConfig,
    SimSpec,
    check_assertions,
    evaluate,
    long_rows,
    reports_to_json,
    rows_to_csv,
    simulate,
)
from .io import (
    atomic_write,
    basis_from_dict,
    config_digest,
    load_json,
    load_model,
    read_calibration,
    read_table,
    save_model,
    score_function,
    write_table,
)
from .qr_solver import SolverError

EXIT_INVALID = 2
EXIT_SOLVER = 3
EXIT_ASSERT = 4

SCORE_CHOICES = ("identity", "absolute-residual", "signed-residual", "aps-classification", "custom")


class _Fail(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _alpha(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def _positive(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    calib, kind = read_calibration(args.calib, args.score)
    basis = basis_from_dict(load_json(args.basis))
    kernel = None if args.kernel is None else regularizer_from_dict(load_json(args.kernel))
    if args.two_sided:
        if kind not in ("identity", "signed-residual"):
            raise ValidationError("--two-sided needs an identity or signed-residual score")
        models = fit_two_sided(calib, basis, args.alpha, kernel)
    else:
        models = (fit_model(calib, basis, args.alpha, kernel),)
    digest = save_model(args.out, models, kind, args.alpha)
    print(f"wrote {args.out} (n={calib.n}, d={basis.d}, digest {digest[:12]})")
    return 0


def cmd_predict(args) -> int:
    bundle = load_model(args.model)
    if args.two_sided != bundle.two_sided:
        raise ValidationError(
            "--two-sided needs a model calibrated with --two-sided"
            if args.two_sided
            else "model was calibrated two-sided; pass --two-sided"
        )
    table = read_table(args.test, require_target=False)
    p = bundle.models[0].calib.p
    if table.x.shape[1] != p:
        raise ValidationError(f"test covariates have {table.x.shape[1]} columns, model expects {p}")
    kind = bundle.score_kind
    sf = score_function(kind)
    if args.method == "conservative" and (args.randomize or args.two_sided):
        raise ValidationError("the conservative method is one-sided and unrandomized")
    if args.method == "conservative" and args.m_upper is None:
        raise ValidationError("--method conservative needs --m-upper")
    if kind in ("absolute-residual", "signed-residual") and table.mu_hat is None:
        raise ValidationError(f"score kind {kind} needs a 'mu_hat' column in the test file")
    if kind == "aps-classification" and table.probs is None:
        raise ValidationError("aps-classification needs pi_1..pi_k columns in the test file")
    variant = "randomized" if args.randomize else "unrandomized"
    header = ["test_index"]
    header += ["s_lo", "s_hi"] if args.two_sided else ["s_star"]
    header += ["set_lower", "set_upper", "method", "u_draw"]
    if kind == "aps-classification":
        header.append("labels")
    lines = [",".join(header)]
    for i, row in enumerate(table.x):
        pred = None
        if kind == "aps-classification":
            pred = table.probs[i]
        elif table.mu_hat is not None:
            pred = float(table.mu_hat[i])
        if args.two_sided:
            pi = predict_two_sided(*bundle.models, row, sf, variant, args.seed, i, pred, args.method, args.eps)
            vals = [_fmt(pi.lower), _fmt(pi.upper)]
        else:
            pi = predict_set(bundle.models[0], row, sf, variant, args.seed, i, pred, args.method, args.eps, args.m_upper)
            vals = [_fmt(pi.threshold)]
        lo_txt = hi_txt = ""
        if pi.realized is not None and kind != "aps-classification":
            lo_txt, hi_txt = _fmt(pi.realized[0]), _fmt(pi.realized[1])
        u_txt = "" if pi.u is None else ";".join(repr(float(u)) for u in pi.u)
        line = [str(i)] + vals + [lo_txt, hi_txt, pi.method or "", u_txt]
        if kind == "aps-classification":
            line.append(";".join(str(k + 1) for k in (pi.realized or ())))
        lines.append(",".join(line))
    atomic_write(args.out, ("\n".join(lines) + "\n").encode())
    print(f"wrote {args.out} ({table.n} test points)")
    return 0


def cmd_estimate(args) -> int:
    bundle = load_model(args.model)
    model = bundle.models[-1]
    if model.kind != "kernel":
        raise ValidationError("coverage estimates need a model calibrated with a kernel")
    doc = load_json(args.tilt)
    items = doc if isinstance(doc, list) else doc.get("tilts", [doc])
    tilts = [TiltSpec.from_dict(t) for t in items]
    if not tilts:
        raise ValidationError("no tilts given")
    fit = n_sample_fit(model)
    out = {"config_digest": bundle.digest, "alpha": bundle.alpha, "estimates": []}
    for t in tilts:
        est = rkhs_coverage_estimate(model, t, fit)
        out["estimates"].append({"tilt": t.to_dict(), "label": t.label, **est.to_dict()})
    atomic_write(args.out, (json.dumps(out, indent=2, sort_keys=True) + "\n").encode())
    print(f"wrote {args.out} ({len(tilts)} tilts)")
    return 0


def cmd_simulate(args) -> int:
    doc = load_json(args.spec)
    if args.seed is not None:
        doc = {**doc, "seed": args.seed}
    spec = SimSpec.from_dict(doc)
    data = simulate(spec, args.trial)
    residual = spec.score_kind != "identity"
    write_table(args.out_calib, data.calib.x, y=data.calib.y, mu_hat=data.mu_calib if residual else None)
    write_table(args.out_test, data.x_test, y=data.y_test, mu_hat=data.mu_test if residual else None)
    print(f"wrote {args.out_calib} ({spec.n} rows) and {args.out_test} ({spec.test_n} rows)")
    return 0


def cmd_evaluate(args) -> int:
    doc = load_json(args.config)
    cfg = EvalConfig.from_dict(doc)
    over = {}
    if args.trials is not None:
        over["trials"] = args.trials
    if args.seed is not None:
        over["seed"] = args.seed
    if over:
        cfg = EvalConfig.from_dict({**cfg.to_dict(), **over})
    names = []
    for a in args.assertions or []:
        names += [n for n in a.split(",") if n]
    for n in names:
        if n not in ASSERTIONS:
            raise ValidationError(f"unknown assertion {n!r}; expected one of {ASSERTIONS}")
    reports, results = evaluate(cfg, args.workers)
    digest = config_digest(cfg.to_dict())
    failures = check_assertions(cfg, reports, results, names) if names else []
    atomic_write(args.out_json, (reports_to_json(cfg, reports, digest) + "\n").encode())
    if args.out_csv:
        atomic_write(args.out_csv, rows_to_csv(long_rows(cfg, results)).encode())
    for m, r in reports.items():
        print(f"{m}: marginal coverage {r.marginal:.4f} (stderr {r.marginal_stderr:.4f}), "
              f"mean length {r.mean_length:.4f}")
    if failures:
        for f in failures:
            print(f"ASSERTION FAILED {f}", file=sys.stderr)
        return EXIT_ASSERT
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="condcal",
        description="Conformal prediction sets with coverage guarantees over classes of covariate shifts.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="fit the calibration model and write a model file")
    c.add_argument("--calib", required=True, help="calibration CSV (x1..xp and score, or y with mu_hat/pi_k)")
    c.add_argument("--basis", required=True, help="basis JSON (columns list or preset)")
    c.add_argument("--kernel", help="kernel JSON (gaussian, polynomial or lipschitz family)")
    c.add_argument("--alpha", required=True, type=_alpha, help="miscoverage level in (0, 1)")
    c.add_argument("--score", choices=SCORE_CHOICES, help="score kind when computing scores from y")
    c.add_argument("--two-sided", action="store_true", help="fit lower and upper bound models")
    c.add_argument("--out", required=True, help="model file to write")
    c.set_defaults(func=cmd_calibrate)

    q = sub.add_parser("predict", help="prediction sets for test points")
    q.add_argument("--model", required=True, help="model file from calibrate")
    q.add_argument("--test", required=True, help="test CSV (x1..xp, plus mu_hat or pi_k if the score needs it)")
    q.add_argument("--method", choices=("sensitivity", "binary", "conservative", "auto"), default="auto",
                   help="threshold algorithm (auto: sensitivity for linear classes, binary otherwise)")
    q.add_argument("--randomize", action="store_true", help="randomized sets with exact coverage")
    q.add_argument("--seed", type=_seed, default=0, help="seed for the randomization streams")
    q.add_argument("--two-sided", action="store_true", help="two-sided sets (model must be two-sided)")
    q.add_argument("--eps", type=_positive, help="bisection tolerance")
    q.add_argument("--m-upper", type=float, help="score upper bound for --method conservative")
    q.add_argument("--out", required=True, help="output CSV")
    q.set_defaults(func=cmd_predict)

    e = sub.add_parser("estimate", help="coverage estimates under tilts for a kernel model")
    e.add_argument("--model", required=True)
    e.add_argument("--tilt", required=True, help="tilt JSON: one object, a list, or {'tilts': [...]}")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="write calibration and test CSVs from a synthetic design")
    s.add_argument("--spec", required=True, help="SimSpec JSON")
    s.add_argument("--trial", type=int, default=0, help="trial index of the draw")
    s.add_argument("--seed", type=_seed, help="override the spec seed")
    s.add_argument("--out-calib", required=True)
    s.add_argument("--out-test", required=True)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("evaluate", help="Monte Carlo coverage evaluation")
    v.add_argument("--config", required=True, help="evaluation config JSON")
    v.add_argument("--trials", type=int, help="override the number of trials")
    v.add_argument("--seed", type=_seed, help="override the config seed")
    v.add_argument("--workers", type=int, help="worker processes (capped by CONDCAL_THREADS)")
    v.add_argument("--out-json", required=True)
    v.add_argument("--out-csv")
    v.add_argument("--assert", dest="assertions", action="append", metavar="NAME",
                   help=f"fail with exit code 4 unless the guarantee holds; one of {', '.join(ASSERTIONS)}")
    v.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
