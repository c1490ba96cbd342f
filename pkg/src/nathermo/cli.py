"""Command-line entry point.

    nathermo sweep --config exchange.json --out exchange.csv
    nathermo verify --config exchange.json --out report.json
    nathermo trajectories --config exchange.json --theta 1.5707963 --out dump.csv

Exit codes: 0 success, 1 configuration error, 2 some sweep rows or hard
verification checks failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, GridSpec, HeisenbergModel, RunConfig, load_config
from .dynamics import conservation_residual
from .flucts import (
    detailed_residuals,
    ft_report,
    integral_exchange_ft,
    integral_work_ft,
    jsonable,
)
from .heisenberg import (
    FLAGS,
    SweepRow,
    evaluate_setup,
    options_from_flags,
    run_sweep,
    work_ft_variant_report,
)
from .trajectories import enumerate_ensemble

log = logging.getLogger("nathermo")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration (JSON)")
    common.add_argument("--out", type=Path, help="output path (default: from config, else stdout)")
    common.add_argument("--mode", choices=("exchange", "work"), help="override the config mode")
    common.add_argument("--theta-min", type=float)
    common.add_argument("--theta-max", type=float)
    common.add_argument("--points", type=int)
    common.add_argument("--slices", type=int, help="initial propagator slice count")
    common.add_argument(
        "--flag", action="append", default=[], choices=FLAGS, help="diagnostic switch (repeatable)"
    )
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="nathermo", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("sweep", parents=[common], help="theta sweep to CSV")
    sp.add_argument("--workers", type=int, default=1)
    sub.add_parser("verify", parents=[common], help="run the invariant suite, emit JSON")
    tp = sub.add_parser("trajectories", parents=[common], help="dump the trajectory lattice")
    tp.add_argument("--theta", type=float, required=True)
    return ap


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.mode:
        if cfg.mode == "custom":
            raise ConfigError("--mode cannot override a custom model")
        cfg = replace(cfg, mode=args.mode)
    grid = cfg.grid
    if args.theta_min is not None:
        grid = replace(grid, min=args.theta_min)
    if args.theta_max is not None:
        grid = replace(grid, max=args.theta_max)
    if args.points is not None:
        if args.points < 1:
            raise ConfigError("--points must be >= 1")
        grid = replace(grid, points=args.points)
    prop = cfg.propagator
    if args.slices is not None:
        try:
            prop = replace(prop, slices=args.slices)
        except ValueError as exc:
            raise ConfigError(f"--slices: {exc}") from None
    flags = tuple(dict.fromkeys(cfg.flags + tuple(args.flag)))
    return replace(cfg, grid=GridSpec(grid.min, grid.max, grid.points), propagator=prop, flags=flags)


def _open_out(path: Path | None):
    if path is None:
        return sys.stdout, False
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.open("w", newline=""), True


def _custom_row(cfg: RunConfig):
    def row(mode, theta, flags):
        try:
            return SweepRow(float(theta), evaluate_setup(cfg.build_setup(theta), mode, flags))
        except (ArithmeticError, ValueError) as exc:
            return SweepRow(float(theta), None, f"{type(exc).__name__}: {exc}")

    return row


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    mode = cfg.evaluation_mode
    table = run_sweep(
        mode,
        cfg.grid.values(),
        cfg.model.params(cfg.propagator) if isinstance(cfg.model, HeisenbergModel) else None,
        cfg.flags,
        workers=args.workers,
        row_fn=_custom_row(cfg) if cfg.mode == "custom" else None,
    )
    out = args.out or (Path(cfg.outputs.csv) if cfg.outputs.csv else None)
    fh, close = _open_out(out)
    try:
        table.write_csv(fh)
    finally:
        if close:
            fh.close()
    ft = table.column("ft_exchange" if mode == "exchange" else "ft_work")
    sigma = table.column("Sigma")
    ok = ~np.isnan(ft)
    dev = float(np.max(np.abs(ft[ok] - 1))) if ok.any() else float("nan")
    smin = float(np.min(sigma[ok])) if ok.any() else float("nan")
    print(
        f"rows={len(table.rows)} failed={len(table.failed)} "
        f"max|ft-1|={dev:.3e} min<Sigma>={smin:.3e}"
    )
    return 2 if table.failed else 0


@dataclass
class Check:
    name: str
    value: float
    bound: float
    hard: bool
    lower: bool = False  # True: passes when value >= bound

    @property
    def passed(self) -> bool:
        if np.isnan(self.value):
            return False
        return self.value >= self.bound if self.lower else self.value <= self.bound

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "bound": self.bound,
            "hard": self.hard,
            "passed": self.passed,
        }


def verify_config(cfg: RunConfig) -> dict:
    """Invariant suite over the grid; returns the JSON-ready report."""
    opts = options_from_flags(cfg.flags)
    worst: dict[str, list] = {}
    reports = []
    # identities that hold only for the default construction
    default = opts.epsilon_convention == "derived" and opts.delta_a_basis == "ij"

    def note(name, value, bound, hard, lower=False):
        prev = worst.get(name)
        if prev is None:
            worst[name] = [value, bound, hard, lower]
        elif lower:
            prev[0] = min(prev[0], value)
        else:
            prev[0] = max(prev[0], value)

    for theta in cfg.grid.values():
        setup = cfg.build_setup(theta)
        ens = enumerate_ensemble(setup, opts)
        rep = ft_report(ens, cfg.evaluation_mode, "force-epsilon-zero" in cfg.flags)
        reports.append({"theta": theta, **rep.to_dict()})
        valid = ens.record_valid
        note("forward_normalization", abs(ens.p_forward.sum() - 1), 1e-10, True)
        note("reverse_normalization", abs(ens.p_reverse.sum() - 1), 1e-10, opts.reverse_reading == "j")
        closure = np.abs(ens.delta_a - ens.q - ens.epsilon - ens.w)[valid]
        note("first_law_closure", float(closure.max()) if closure.size else 0.0, 1e-12, True)
        note("work_ft_normalization_route", abs(integral_work_ft(ens).normalization - 1), 1e-10,
             opts.reverse_reading == "j")
        cons = conservation_residual(setup.protocol, [0.0, setup.protocol.duration])
        note("excluded_mass", ens.excluded_mass, 1e-9, False)
        if not setup.is_driven:
            ident = np.abs(ens.delta_a - ens.q - ens.epsilon)[valid]
            note("epsilon_identity", float(ident.max()) if ident.size else 0.0, 1e-9, default)
            note("exchange_ft", abs(integral_exchange_ft(ens, "identity") - 1), 1e-9,
                 opts.delta_a_basis == "ij")
            note("exchange_detailed_residual", detailed_residuals(ens, "exchange")[0], 1e-9,
                 default and opts.reverse_reading == "j")
            note("entropy_production_min", rep.sigma, -1e-12, default, lower=True)
            note("entropy_production_vs_kl",
                 abs(rep.sigma - rep.diagnostics["kl_entropy_production"]), 1e-9,
                 opts.reverse_reading == "j" and opts.delta_a_basis == "ij")
            note("conservation_residual", float(cons.max()), 1e-10, True)
        else:
            note("conservation_residual", float(cons.max()), 1e-10, False)
        note("work_detailed_residual", detailed_residuals(ens, "work")[0], 1e-9, False)
        note("work_ft_decomposition_deviation", abs(rep.ft_work - 1), 1e-9, False)

    checks = [Check(k, float(v[0]), v[1], v[2], v[3]) for k, v in worst.items()]
    passed = all(c.passed for c in checks if c.hard)
    result = {
        "passed": passed,
        "mode": cfg.evaluation_mode,
        "flags": list(cfg.flags),
        "checks": [c.to_dict() for c in checks],
        "reports": reports,
    }
    if cfg.evaluation_mode == "work":
        variants = work_ft_variant_report(cfg.grid.values(), builder=cfg.build_setup)
        result["work_ft_variants"] = jsonable(variants.to_dict())
    return result


def cmd_verify(args) -> int:
    cfg = _resolve_config(args)
    result = verify_config(cfg)
    out = args.out or (Path(cfg.outputs.json) if cfg.outputs.json else None)
    fh, close = _open_out(out)
    try:
        json.dump(result, fh, indent=2, allow_nan=False)
        fh.write("\n")
    finally:
        if close:
            fh.close()
    failed = [c["name"] for c in result["checks"] if c["hard"] and not c["passed"]]
    summary = "all hard checks passed" if not failed else "failed: " + ", ".join(failed)
    print(summary, file=sys.stderr if out is None else sys.stdout)
    return 0 if not failed else 2


def cmd_trajectories(args) -> int:
    cfg = _resolve_config(args)
    ens = enumerate_ensemble(cfg.build_setup(args.theta), options_from_flags(cfg.flags))
    fh, close = _open_out(args.out)
    try:
        ens.write_csv(fh)
    finally:
        if close:
            fh.close()
    return 0


COMMANDS = {"sweep": cmd_sweep, "verify": cmd_verify, "trajectories": cmd_trajectories}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ArithmeticError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
