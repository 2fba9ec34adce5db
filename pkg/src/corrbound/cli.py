"""Command-line front end: ``corrbound {sample,correlate,bound,verify,report}``.

Exit codes: 0 success, 1 invalid input, 2 numerical or runtime failure,
3 verification checks failed.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import backend as be
from . import expr as ex
from .bounds import BasisCapError
from .config import ConfigError, RunConfig, load_config
from .correlation import estimates_from_batch, orbit_batch, write_estimates_csv
from .gibbs import GibbsEnsemble, load_ensemble, sample_gibbs, save_ensemble
from .labeler import LabelError
from .report import SCHEMA_VERSION, BoundReport, compute_report, dumps, estimate_dict, export_overlaps, timestamp

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_FAILED = 0, 1, 2, 3

log = logging.getLogger("corrbound")


class EnsembleMismatch(ValueError):
    pass


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.gibbs.seed = args.seed
    if getattr(args, "out", None):
        cfg.output.dir = args.out
    return cfg


def check_ensemble(ens: GibbsEnsemble, cfg: RunConfig, system) -> None:
    problems = []
    if ens.system_name != system.name:
        problems.append(f"system {ens.system_name!r} != {system.name!r}")
    if ens.beta != cfg.gibbs.beta:
        problems.append(f"beta {ens.beta!r} != {cfg.gibbs.beta!r}")
    if ens.r != system.r:
        problems.append(f"r {ens.r} != {system.r}")
    if problems:
        raise EnsembleMismatch("ensemble does not match the configuration: " + "; ".join(problems))


def _ensemble(args, cfg: RunConfig, system) -> GibbsEnsemble:
    if args.ensemble:
        ens = load_ensemble(args.ensemble, system)
        check_ensemble(ens, cfg, system)
        return ens
    g = cfg.gibbs
    log.info("sampling %d points (no --ensemble given)", g.n)
    return sample_gibbs(system, g.beta, g.n, g.burn_in, g.thin, g.proposal_scale, g.seed)


def cmd_sample(args) -> int:
    cfg = _load(args)
    system = cfg.build_system()
    g = cfg.gibbs
    ens = sample_gibbs(system, g.beta, g.n, g.burn_in, g.thin, g.proposal_scale, g.seed)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    path = Path(args.ensemble) if args.ensemble else cfg.output_path("ensemble.csv")
    save_ensemble(ens, path)
    for w in ens.warnings:
        log.warning(w)
    print(f"{path}  n={ens.n}  acceptance={ens.acceptance_rate:.3f}  ess(H)={ens.ess.get('H', float('nan')):.0f}")
    return EXIT_OK


def cmd_correlate(args) -> int:
    cfg = _load(args)
    system = cfg.build_system()
    ens = _ensemble(args, cfg, system)
    d = cfg.dynamics
    batch = orbit_batch(system, [system.parse(cfg.observable)], ens, d.T, d.dt, d.n_traj, d.drift_tol, d.max_steps)
    norm, direct = estimates_from_batch(batch, 0)
    norm.observable = direct.observable = cfg.observable
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_estimates_csv([norm, direct], cfg.output_path("estimates.csv"))
    doc = {"schema_version": SCHEMA_VERSION, "timestamp": timestamp(), "config": cfg.to_dict(),
           "estimates": [estimate_dict(norm), estimate_dict(direct)],
           "warnings": list(dict.fromkeys(ens.warnings + norm.warnings + direct.warnings))}
    json_path = cfg.output_path("estimates.json")
    json_path.write_text(dumps(doc))
    for e in (norm, direct):
        print(f"{e.method}: {e.value:.6g} +/- {e.total_error:.2g}")
    for w in doc["warnings"]:
        log.warning(w)
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_bound(args) -> int:
    cfg = _load(args)
    system = cfg.build_system()
    ens = _ensemble(args, cfg, system)
    b, d = cfg.bounds, cfg.dynamics
    batch = orbit_batch(system, [system.parse(cfg.observable)], ens, d.T, d.dt, d.n_traj, d.drift_tol, d.max_steps)
    rep, od = compute_report(
        system, ens, cfg.observable, b.degrees, d.T, d.dt, d.n_traj, d_probe=b.d_probe,
        saturation_degree=b.saturation_degree, labeler=cfg.build_labeler(system), standardize=b.standardize,
        n_resamples=b.resamples, jitter=b.jitter, seed=cfg.gibbs.seed, batch=batch,
        partition_grams=b.partition_gram, config=cfg.to_dict(), basis_cap=b.basis_cap, max_degree=b.max_degree,
    )
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    rep.to_json(cfg.output_path("report.json"))
    rep.to_csv(cfg.output_path("report.csv"))
    export_overlaps(od, cfg.output_path("gram.csv"))
    print(rep.summary())
    print(f"wrote {cfg.output_path('report.json')}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    names = verify.SUITES if args.suite == "all" else (args.suite,)
    seed = verify.DEFAULT_SEED if args.seed is None else args.seed
    results = []
    for name in names:
        res = verify.run_suite(name, scale=args.scale, seed=seed, progress=log.info)
        results.append(res)
        for c in res.checks:
            print(f"{name}: {c.line()}")
    text = verify.verification_document(results)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"verify_{args.suite}.json").write_text(text)
    elif args.json:
        sys.stdout.write(text)
    n_fail = sum(len(r.failures) for r in results)
    n_all = sum(len(r.checks) for r in results)
    print(f"{n_all - n_fail}/{n_all} checks passed")
    return EXIT_OK if n_fail == 0 else EXIT_FAILED


def cmd_report(args) -> int:
    rep = BoundReport.from_json(args.report)
    print(rep.summary())
    if args.csv:
        rep.to_csv(args.csv)
        print(f"wrote {args.csv}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for the compiled kernels")
    g.add_argument("--backend", choices=("auto", "compiled", "python"), default=argparse.SUPPRESS)
    g.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="corrbound", description=__doc__.splitlines()[0], parents=[g])
    sub = p.add_subparsers(dest="command", required=True)
    add = sub.add_parser

    def sub_add(name, **kw):
        return add(name, parents=[g], **kw)

    sub.add_parser = sub_add

    def common(sp, ensemble_help: str | None = "existing ensemble file (.csv or .npz)"):
        sp.add_argument("--config", required=True, metavar="PATH")
        sp.add_argument("--out", metavar="DIR", help="output directory (overrides [output] dir)")
        sp.add_argument("--seed", type=int, help="override [gibbs] seed")
        if ensemble_help:
            sp.add_argument("--ensemble", metavar="PATH", help=ensemble_help)

    common(sub.add_parser("sample", help="draw a Gibbs ensemble"), "where to write the ensemble")
    common(sub.add_parser("correlate", help="estimate C(A) by both estimators"))
    common(sub.add_parser("bound", help="full bound report"))
    v = sub.add_parser("verify", help="run verification suites")
    v.add_argument("suite", help="oscillator, product, pendulum or all")
    v.add_argument("--scale", choices=("full", "quick"), default="full")
    v.add_argument("--seed", type=int)
    v.add_argument("--out", metavar="DIR")
    v.add_argument("--json", action="store_true", help="print the JSON document to stdout")
    r = sub.add_parser("report", help="summarise a saved bound report")
    r.add_argument("report", metavar="JSON")
    r.add_argument("--csv", metavar="PATH", help="also write the flat CSV projection")
    return p


VALIDATION_ERRORS = (ConfigError, EnsembleMismatch, ex.ExpressionError, LabelError, BasisCapError, FileNotFoundError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    verbose = getattr(args, "verbose", 0)
    threads = getattr(args, "threads", 1)
    backend = getattr(args, "backend", "auto")
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s: %(message)s")
    try:
        if threads < 1:
            raise ConfigError([("--threads", "must be >= 1")])
        be.set_threads(threads)
        be.set_default(None if backend == "auto" else backend)
        if args.command == "verify":
            from .verify import SUITES
            if args.suite not in SUITES + ("all",):
                raise ConfigError([("suite", f"unknown suite {args.suite!r}; valid: {', '.join(SUITES + ('all',))}")])
        handler = {"sample": cmd_sample, "correlate": cmd_correlate, "bound": cmd_bound, "verify": cmd_verify,
                   "report": cmd_report}[args.command]
        return handler(args)
    except VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID if args.command == "report" else EXIT_RUNTIME
    except Exception as err:  # numerical failures inside the pipeline
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
