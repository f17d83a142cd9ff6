"""Command line interface.

Every subcommand reads a TOML experiment config, writes its outputs under
the configured (or --out overridden) directory, and exits with

    0   all configured checks passed (or none were configured)
    2   a threshold check failed conclusively, or a cluster mismatch
    3   a required rate fit or check was inconclusive
    4   the configuration file was missing, malformed, or inconsistent
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness
from .coeff import make_family
from .harness import CheckFailed, ConfigError, InconclusiveFit, load_config
from .spectral import ClusterError


def _write_report(report, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    report.to_csv(os.path.join(out_dir, "report.csv"))
    report.to_json(os.path.join(out_dir, "report.json"))
    for line in report.summary_lines():
        print(line)
    code = report.exit_code()
    print(f"wrote {out_dir}/report.csv and report.json (exit {code})")
    return code


def cmd_correctors(args) -> int:
    """Solve the cell problems and print the homogenized tensor."""
    cfg = load_config(args.config, out_dir=args.out)
    field = make_family(cfg.family, cfg.params)
    cs = harness.cached_correctors(cfg, field)
    d = field.dim

    def cell_norm(pf):
        return float(np.sqrt(np.mean(pf.values ** 2)))

    summary = {
        "family": cfg.family,
        "params": list(cfg.params),
        "grid": cfg.cell_n,
        "tol": cfg.cell_tol,
        "A_hat": cs.A_hat.tolist(),
        "chi_norms": [cell_norm(cs.chi[j]) for j in range(d)],
        "upsilon_norms": [[cell_norm(cs.upsilon[i][j]) for j in range(d)]
                          for i in range(d)],
        "bigB_norms": [cell_norm(cs.bigB[j]) for j in range(d)],
    }
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "correctors.json")
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"family {cfg.family} params {list(cfg.params)} on a "
          f"{cfg.cell_n}^{d} grid")
    print("A_hat =")
    for row in cs.A_hat:
        print("   " + "  ".join(f"{v:+.12f}" for v in row))
    print(f"wrote {path}")
    return 0


def cmd_oracle1d(args) -> int:
    cfg = load_config(args.config, out_dir=args.out)
    return _write_report(harness.oracle1d_sweep(cfg), cfg.out_dir)


def cmd_sweep_dirichlet(args) -> int:
    cfg = load_config(args.config, out_dir=args.out)
    return _write_report(harness.sweep_dirichlet(cfg), cfg.out_dir)


def cmd_sweep_neumann(args) -> int:
    cfg = load_config(args.config, out_dir=args.out)
    return _write_report(harness.sweep_neumann(cfg), cfg.out_dir)


def cmd_gradient(args) -> int:
    """Dirichlet sweep with the weighted gradient rows forced on."""
    cfg = load_config(args.config, out_dir=args.out)
    if cfg.bc != "dirichlet" or cfg.multiplicity != 1:
        raise ConfigError("gradient rows need a simple Dirichlet eigenvalue")
    cfg.gradient_rows = True
    return _write_report(harness.sweep_dirichlet(cfg), cfg.out_dir)


def cmd_h1(args) -> int:
    cfg = load_config(args.config, out_dir=args.out)
    return _write_report(harness.h1_sweep(cfg), cfg.out_dir)


def cmd_report(args) -> int:
    """Re-render the summary of an existing report.json."""
    out_dir = args.out or (os.path.dirname(args.config) if args.config
                           else None)
    if args.config and args.config.endswith(".json"):
        path = args.config
    elif out_dir:
        path = os.path.join(out_dir, "report.json")
    else:
        raise ConfigError("report needs --out DIR or --config report.json")
    try:
        with open(path) as fh:
            blob = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc

    print(f"{blob['name']} ({blob['bc']}): {len(blob['rows'])} eps rows"
          + (f", lambda0 = {blob['lambda0']!r}" if blob.get("lambda0")
             is not None else ""))
    for r in blob["rows"]:
        parts = [f"eps={r['eps']:g}", f"unknowns={r['unknowns']}"]
        for key in ("r0", "r1", "e0", "e1", "e2", "proj_range", "osborn",
                    "w0", "w1", "h1_res", "compat_max"):
            if r.get(key) is not None:
                parts.append(f"{key}={r[key]:.4e}")
        print("  " + "  ".join(parts))
    for name, fit in sorted(blob.get("slopes", {}).items()):
        tag = "  (inconclusive)" if fit.get("inconclusive") else ""
        print(f"  slope({name}) = {fit['slope']:+.3f}"
              f"  (fit residual {fit['max_residual']:.3f}){tag}")
    theta = blob.get("theta") or {}
    if theta:
        print("  theta: " + ", ".join(f"{k}={theta[k]}"
                                      for k in sorted(theta)))
    code = 0
    for c in blob.get("checks", []):
        state = ("INCONCLUSIVE" if c["inconclusive"]
                 else "PASS" if c["passed"] else "FAIL")
        print(f"  check {c['name']}: {state} (required {c['required']}, "
              f"measured {c['measured']})")
        if c["inconclusive"]:
            code = max(code, 3) if code != 2 else 2
        elif not c["passed"]:
            code = 2
    return code


_COMMANDS = (
    ("correctors", cmd_correctors,
     "solve the periodic cell problems and report the homogenized tensor"),
    ("oracle1d", cmd_oracle1d,
     "run the closed-form 1D expansion sweep"),
    ("sweep-dirichlet", cmd_sweep_dirichlet,
     "eps sweep of the Dirichlet eigenvalue expansion"),
    ("sweep-neumann", cmd_sweep_neumann,
     "eps sweep of the Neumann eigenvalue expansion"),
    ("gradient", cmd_gradient,
     "Dirichlet sweep with weighted gradient residual rows"),
    ("h1", cmd_h1,
     "source-problem sweep of the second-order H1 residual"),
    ("report", cmd_report,
     "re-render the summary of an existing report.json"),
)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="eigenhom",
        description="Two-scale eigenvalue expansions for periodic elliptic "
                    "operators: solve, sweep, and verify convergence rates.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_text in _COMMANDS:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", default=None,
                        help="TOML experiment configuration"
                        + (" (or report.json for 'report')"
                           if name == "report" else ""))
        sp.add_argument("--out", default=None,
                        help="output directory (overrides [output] dir)")
        sp.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    if args.fn is not cmd_report and not args.config:
        parser.error(f"{args.command} requires --config")

    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 4
    except ClusterError as exc:
        print(f"cluster mismatch: {exc}", file=sys.stderr)
        return 2
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 2
    except InconclusiveFit as exc:
        print(f"inconclusive: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
