"""Command-line front end.

``lmmvar --data FILE --formula F`` fits the model and prints the fixed-effect
table, the variance decomposition, the R^2 summary and fit diagnostics, as
text, JSON or CSV. Every flag can also be set through an ``LMMVAR_<FLAG>``
environment variable (e.g. ``LMMVAR_BOOTSTRAP=1000``); explicit flags win.

``lmmvar-validate REPORT.json`` re-checks the additive identities from the
numbers stored in a JSON report.

Exit status: 0 converged, 2 not converged or too many failed bootstrap refits
(report still written), 1 input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .bootstrap import BootstrapError, parametric_bootstrap
from .decomposition import CROSS_FIXED, CROSS_RANDOM, FIXED, RANDOM_DATA, RANDOM_POP
from .design import DataError, load_sleepstudy, read_csv
from .estimator import VarianceDecomposition
from .formula import FormulaError
from .reml import ConvergenceWarning

__all__ = ["RunConfig", "build_report", "main", "render_csv", "render_text", "run",
           "validate_main", "validate_report"]

ENV_PREFIX = "LMMVAR_"
EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2
SLEEPSTUDY = "sleepstudy"


@dataclass(frozen=True)
class RunConfig:
    data_path: str
    formula: str
    output_format: str = "text"
    scale_y: bool = False
    bootstrap_n: int = 0
    seed: int = 0
    level: float = 0.95
    tol: float = 1e-8
    max_iter: int = 500
    workers: int = 1
    emit_plot: str | None = None

    def __post_init__(self):
        if self.output_format not in ("text", "json", "csv"):
            raise ValueError(f"unknown output format {self.output_format!r}")
        if self.bootstrap_n < 0:
            raise ValueError("--bootstrap must be >= 0")
        if not 0 < self.level < 1:
            raise ValueError("--level must be in (0, 1)")
        if self.tol <= 0 or self.max_iter < 1 or self.workers < 1:
            raise ValueError("--tol must be > 0, --max-iter and --workers >= 1")


# -- report ---------------------------------------------------------------

def _z_table(model: VarianceDecomposition) -> list[dict]:
    fit = model.fit_result_
    s = model.y_scale_
    names = ["(Intercept)", *model.frame_.column_labels_X]
    est = [fit.mu_hat, *fit.beta_hat]
    se = [fit.se_mu, *np.sqrt(np.diag(fit.cov_beta))]
    rows = []
    for name, b, e in zip(names, est, se):
        z = b / e if e > 0 else math.inf
        rows.append({"term": name, "estimate": float(b * s), "std_error": float(e * s),
                     "z_value": float(z), "p_value": float(2 * stats.norm.sf(abs(z)))})
    return rows


def build_report(model: VarianceDecomposition, config: RunConfig, bootstrap_note: str | None = None
                 ) -> dict:
    """JSON-ready dictionary describing a fitted model; all numbers are floats."""
    frame, dec, rep = model.frame_, model.decomposition_, model.reml_report_
    table = model.attribution_
    sy2 = dec.sigma_y2

    def rows(kind):
        return [{"label": r.label, "value": r.value, "share": r.share} for r in table.select(kind)]

    random_rows = [
        {"label": pop.label, "population": pop.value, "data_specific": dat.value,
         "population_share": pop.share, "data_specific_share": dat.share}
        for pop, dat in zip(table.select(RANDOM_POP), table.select(RANDOM_DATA))
    ]
    boot = None
    if model.bootstrap_ is not None:
        b = model.bootstrap_
        boot = {
            "n_replicates": b.n_replicates, "n_failed": b.n_failed, "level": b.level,
            "seed": b.seed, "method": "percentile",
            "intervals": {k: {"point": v[0], "lower": v[1], "upper": v[2]} for k, v in b.per_row.items()},
        }
    elif bootstrap_note:
        boot = {"error": bootstrap_note}
    return {
        "model": {
            "formula": config.formula, "data": config.data_path, "response": frame.response,
            "n": frame.n, "k": frame.k, "r": frame.r, "p": list(frame.p),
            "scale_y": config.scale_y, "y_scale": model.y_scale_,
        },
        "variance_components": {
            "sigma_eps2": model.variance_components_.sigma_eps2,
            "random": [{"block": lab, "sigma_u2": s2, "at_boundary": flag}
                       for lab, s2, flag in zip(frame.block_labels,
                                                model.variance_components_.sigma_u2,
                                                rep.boundary_flags)],
        },
        "fixed_effects": {"p_value_method": "z-approx", "rows": _z_table(model)},
        "decomposition": {
            "sigma_y2": sy2, "s_x2": dec.s_x2, "s_z2_pop": dec.s_z2_pop, "s_z2_data": dec.s_z2_data,
            "s_xz2": dec.s_xz2, "sigma_eps2": dec.sigma_eps2,
            "shares": {"s_x2": dec.s_x2 / sy2, "s_z2_pop": dec.s_z2_pop / sy2,
                       "s_z2_data": dec.s_z2_data / sy2, "s_xz2": dec.s_xz2 / sy2,
                       "sigma_eps2": dec.sigma_eps2 / sy2},
            "identity_residual": dec.identity_residual,
            "advisory": not dec.converged,
        },
        "partials": {"fixed": rows(FIXED), "random": random_rows,
                     "cross_fixed": rows(CROSS_FIXED), "cross_random": rows(CROSS_RANDOM)},
        "r_squared": {"r2": dec.r2, "r2_pop": dec.r2_pop,
                      "r2_marginal_nakagawa": dec.r2_marginal_naka,
                      "r2_conditional_nakagawa": dec.r2_conditional_naka},
        "bootstrap": boot,
        "diagnostics": {
            "converged": rep.converged, "iterations": rep.iterations,
            "reml_equation_residuals": list(rep.residual_reml_eqs),
            "tolerance": rep.tolerance, "boundary_flags": list(rep.boundary_flags),
            "restricted_loglik": rep.restricted_loglik, "factorization": rep.factorization,
            "newton_steps": rep.newton_steps,
        },
    }


def _pct(x: float) -> str:
    return f"{100 * x:7.1f}"


def _ci(doc: dict, key: str) -> str:
    boot = doc["bootstrap"]
    if not boot or "intervals" not in boot or key not in boot["intervals"]:
        return ""
    iv = boot["intervals"][key]
    return f"  [{100 * iv['lower']:6.1f}, {100 * iv['upper']:6.1f}]"


def _decomposition_lines(doc: dict) -> list[tuple[str, float, float, str]]:
    """(label, value, share, interval key) in display order."""
    d, parts = doc["decomposition"], doc["partials"]
    out = []
    for row in parts["fixed"]:
        out.append((f"Fixed      {row['label']}", row["value"], row["share"], f"fixed: {row['label']}"))
    for row in parts["random"]:
        lab = row["label"]
        out.append((f"Random     {lab}", row["population"] + row["data_specific"],
                    row["population_share"] + row["data_specific_share"], f"random: {lab}"))
        out.append(("  population", row["population"], row["population_share"],
                    f"random-population: {lab}"))
        out.append(("  data-specific", row["data_specific"], row["data_specific_share"],
                    f"random-data: {lab}"))
    if parts["random"]:
        out.append(("Random data-specific + cross", d["s_z2_data"] + d["s_xz2"],
                    d["shares"]["s_z2_data"] + d["shares"]["s_xz2"], "S_Z^2 data-specific + S_XxZ^2"))
    if parts["cross_fixed"]:
        out.append(("Cross-term", d["s_xz2"], d["shares"]["s_xz2"], "S_XxZ^2"))
        for row in parts["cross_fixed"]:
            out.append((f"  via {row['label']}", row["value"], row["share"], f"cross-fixed: {row['label']}"))
        for row in parts["cross_random"]:
            out.append((f"  via {row['label']}", row["value"], row["share"], f"cross-random: {row['label']}"))
    out.append(("Residual", d["sigma_eps2"], d["shares"]["sigma_eps2"], "residual"))
    return out


def render_text(doc: dict) -> str:
    m, fe, d, r2, diag = doc["model"], doc["fixed_effects"], doc["decomposition"], doc["r_squared"], \
        doc["diagnostics"]
    buf = io.StringIO()
    w = buf.write
    w(f"Linear mixed model fit by REML: {m['formula']}\n")
    w(f"n = {m['n']}, fixed covariates = {m['k']}, random blocks = {m['r']}")
    w(f", y scaled by 1/{m['y_scale']:.6g}\n" if m["scale_y"] else "\n")
    w(f"\nFixed effects (p-values: {fe['p_value_method']})\n")
    w(f"{'':24s}{'Estimate':>12s}{'Std. Error':>12s}{'z value':>10s}{'Pr(>|z|)':>12s}\n")
    for row in fe["rows"]:
        w(f"{row['term']:24s}{row['estimate']:12.4f}{row['std_error']:12.4f}"
          f"{row['z_value']:10.3f}{row['p_value']:12.3g}\n")
    w("\nVariance components\n")
    for row in doc["variance_components"]["random"]:
        flag = "  (boundary)" if row["at_boundary"] else ""
        w(f"{row['block']:36s}{row['sigma_u2']:14.6g}{flag}\n")
    w(f"{'Residual':36s}{doc['variance_components']['sigma_eps2']:14.6g}\n")
    boot = doc["bootstrap"]
    header = f"\nVariance explained (sigma_y^2 = {d['sigma_y2']:.6g})"
    if boot and "intervals" in boot:
        lv = 100 * boot["level"]
        header += (f", {lv:g}% percentile intervals from {boot['n_replicates']} replicates"
                   f" ({boot['n_failed']} failed)")
    w(header + "\n")
    w(f"{'':36s}{'value':>14s}{'%':>8s}\n")
    for label, value, share, key in _decomposition_lines(doc):
        w(f"{label:36s}{value:14.6g}{_pct(share):>8s}{_ci(doc, key)}\n")
    if boot and "error" in boot:
        w(f"bootstrap not reported: {boot['error']}\n")
    w(f"\nR^2 = {r2['r2']:.4f}   R^2_pop = {r2['r2_pop']:.4f}   "
      f"R^2_m (Nakagawa) = {r2['r2_marginal_nakagawa']:.4f}   "
      f"R^2_c (Nakagawa) = {r2['r2_conditional_nakagawa']:.4f}\n")
    if d["s_x2"] < 0 or r2["r2"] < 0:
        w("note: negative values are bias-corrected estimates and are not truncated\n")
    w(f"\nconverged: {diag['converged']} after {diag['iterations']} iterations "
      f"({diag['factorization']}); max REML equation residual "
      f"{max(diag['reml_equation_residuals'], default=0.0):.2e}; "
      f"identity residual {d['identity_residual']:.2e}\n")
    if d["advisory"]:
        w("warning: REML did not converge; the decomposition is advisory\n")
    return buf.getvalue()


def render_csv(doc: dict) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["section", "label", "estimate", "std_error", "share", "lower", "upper", "p_value"])
    for row in doc["fixed_effects"]["rows"]:
        out.writerow(["fixed_effect", row["term"], repr(row["estimate"]), repr(row["std_error"]),
                      "", "", "", repr(row["p_value"])])
    intervals = (doc["bootstrap"] or {}).get("intervals", {})
    for label, value, share, key in _decomposition_lines(doc):
        iv = intervals.get(key)
        lo, hi = (repr(iv["lower"]), repr(iv["upper"])) if iv else ("", "")
        out.writerow(["decomposition", key, repr(value), "", repr(share), lo, hi, ""])
    for name, value in doc["r_squared"].items():
        out.writerow(["r_squared", name, repr(value), "", "", "", "", ""])
    return buf.getvalue()


def write_plot(doc: dict, path: str) -> None:
    """Bar chart of the decomposition shares, written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    d, parts = doc["decomposition"], doc["partials"]
    labels, values = [], []
    for row in parts["fixed"]:
        labels.append(f"fixed: {row['label']}")
        values.append(row["share"])
    for row in parts["random"]:
        labels += [f"random pop.: {row['label']}", f"random data: {row['label']}"]
        values += [row["population_share"], row["data_specific_share"]]
    if parts["cross_fixed"]:
        labels.append("cross-term")
        values.append(d["shares"]["s_xz2"])
    labels.append("residual")
    values.append(d["shares"]["sigma_eps2"])
    fig, ax = plt.subplots(figsize=(7, 0.45 * len(labels) + 1.2))
    ax.barh(range(len(labels)), [100 * v for v in values], color="0.4")
    ax.set_yticks(range(len(labels)), labels)
    ax.invert_yaxis()
    ax.axvline(0, color="k", lw=0.8)
    ax.set_xlabel("% of sample variance of the response")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# -- validation -----------------------------------------------------------

def validate_report(doc: dict, tol_identity: float = 1e-8, tol_partial: float = 1e-10) -> list[str]:
    """Re-check the additive identities of a JSON report. Returns a list of failures.

    Partial sums are compared relative to ``sigma_y2`` because some totals
    (e.g. the cross term in balanced designs) are exactly zero.
    """
    d, parts = doc["decomposition"], doc["partials"]
    sy2 = d["sigma_y2"]
    problems = []

    def check(name, got, want, tol):
        dev = abs(got - want) / abs(sy2)
        if not dev <= tol:
            problems.append(f"{name}: {got!r} vs {want!r} (relative deviation {dev:.3e})")

    total = d["s_x2"] + d["s_z2_pop"] + d["s_z2_data"] + d["s_xz2"] + d["sigma_eps2"]
    tol_id = tol_identity if doc["diagnostics"]["converged"] else math.inf
    check("sum of summands", total, sy2, tol_id)
    if parts["fixed"]:
        check("fixed partials", sum(r["value"] for r in parts["fixed"]), d["s_x2"], tol_partial)
    check("random population partials", sum(r["population"] for r in parts["random"]),
          d["s_z2_pop"], tol_partial)
    check("random data-specific partials", sum(r["data_specific"] for r in parts["random"]),
          d["s_z2_data"], tol_partial)
    if parts["cross_fixed"]:
        check("cross partials (fixed side)", sum(r["value"] for r in parts["cross_fixed"]),
              d["s_xz2"], tol_partial)
        check("cross partials (random side)", sum(r["value"] for r in parts["cross_random"]),
              d["s_xz2"], tol_partial)
    for key in ("s_x2", "s_z2_pop", "s_z2_data", "s_xz2", "sigma_eps2"):
        check(f"share of {key}", d["shares"][key] * sy2, d[key], tol_partial)
    check("r2", (1.0 - doc["r_squared"]["r2"]) * sy2, d["sigma_eps2"], tol_partial)
    return problems


def validate_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lmmvar-validate",
                                     description="Re-check the identities stored in a JSON report.")
    parser.add_argument("report", help="JSON report written by lmmvar --output json ('-' for stdin)")
    args = parser.parse_args(argv)
    try:
        text = sys.stdin.read() if args.report == "-" else open(args.report, encoding="utf-8").read()
        doc = json.loads(text)
        problems = validate_report(doc)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"lmmvar-validate: cannot read report: {exc}", file=sys.stderr)
        return EXIT_INPUT
    for p in problems:
        print(f"FAIL {p}")
    if not problems:
        print("OK all identities hold")
    return EXIT_INPUT if problems else EXIT_OK


# -- entry point ----------------------------------------------------------

def _env(name: str, default):
    return os.environ.get(ENV_PREFIX + name, default)


def _env_flag(name: str) -> bool:
    return str(_env(name, "")).strip().lower() in ("1", "true", "yes", "on")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lmmvar",
        description="Fit a variance-components linear mixed model by REML and decompose "
                    "the sample variance of the response.",
        epilog=f"Every option may also be set via an environment variable {ENV_PREFIX}<NAME>, "
               f"e.g. {ENV_PREFIX}DATA, {ENV_PREFIX}SCALE_Y=1, {ENV_PREFIX}MAX_ITER. "
               "Exit status: 0 converged, 2 not converged or bootstrap failure, 1 input error.",
    )
    p.add_argument("--data", default=_env("DATA", None),
                   help=f"CSV file with a header row, or '{SLEEPSTUDY}' for the bundled data")
    p.add_argument("--formula", default=_env("FORMULA", None),
                   help="model formula, e.g. 'Reaction ~ Days + (Days || Subject)'")
    p.add_argument("--output", choices=("text", "json", "csv"), default=_env("OUTPUT", "text"))
    p.add_argument("--scale-y", action="store_true", default=_env_flag("SCALE_Y"),
                   help="scale the response to unit sample variance before fitting")
    p.add_argument("--bootstrap", type=int, default=int(_env("BOOTSTRAP", 0)), metavar="N",
                   help="parametric bootstrap replicates (0 = none)")
    p.add_argument("--seed", type=int, default=int(_env("SEED", 0)))
    p.add_argument("--level", type=float, default=float(_env("LEVEL", 0.95)))
    p.add_argument("--tol", type=float, default=float(_env("TOL", 1e-8)))
    p.add_argument("--max-iter", type=int, default=int(_env("MAX_ITER", 500)))
    p.add_argument("--workers", type=int, default=int(_env("WORKERS", 1)))
    p.add_argument("--plot", default=_env("PLOT", None), metavar="FILE.svg",
                   help="also write a bar chart of the shares as SVG")
    return p


def _load(path: str):
    if path == SLEEPSTUDY:
        return load_sleepstudy()
    return read_csv(path)


def run(config: RunConfig, out=None) -> int:
    """Fit, decompose, optionally bootstrap, and write the report to ``out``."""
    out = out or sys.stdout
    data = _load(config.data_path)
    model = VarianceDecomposition(config.formula, tol=config.tol, max_iter=config.max_iter,
                                  scale_y=config.scale_y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model.fit(data)
    note = None
    if config.bootstrap_n and model.converged_:
        try:
            model.bootstrap_ = parametric_bootstrap(
                model.frame_, model.fit_result_, config.bootstrap_n, seed=config.seed,
                level=config.level, workers=config.workers, config=model._config(),
            )
        except BootstrapError as exc:
            note = str(exc)
    elif config.bootstrap_n:
        note = "skipped because the original fit did not converge"
    doc = build_report(model, config, note)
    if config.output_format == "json":
        out.write(json.dumps(doc, indent=2) + "\n")
    elif config.output_format == "csv":
        out.write(render_csv(doc))
    else:
        out.write(render_text(doc))
    if config.emit_plot:
        write_plot(doc, config.emit_plot)
    if note:
        print(f"lmmvar: bootstrap: {note}", file=sys.stderr)
    if not model.converged_ or note:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _describe(exc: Exception, config: RunConfig | None) -> str:
    if isinstance(exc, FormulaError) and config is not None:
        text = config.formula
        col = len(text.encode("utf-8")[: exc.position].decode("utf-8", errors="ignore"))
        return f"formula error: {exc}\n  {text}\n  {' ' * col}^"
    if isinstance(exc, DataError) and config is not None:
        return f"data error in {config.data_path}: {exc}"
    return f"error: {exc}"


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    if not args.data or not args.formula:
        print("lmmvar: --data and --formula are required", file=sys.stderr)
        return EXIT_INPUT
    config = None
    try:
        config = RunConfig(
            data_path=args.data, formula=args.formula, output_format=args.output,
            scale_y=args.scale_y, bootstrap_n=args.bootstrap, seed=args.seed, level=args.level,
            tol=args.tol, max_iter=args.max_iter, workers=args.workers, emit_plot=args.plot,
        )
        return run(config)
    except (FormulaError, DataError, OSError, ValueError) as exc:
        print(f"lmmvar: {_describe(exc, config)}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
