"""Command-line interface.

Subcommands: fit, analyze, subsample, simulate, moment-surface, validate.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

The report path writes delimited files plus PNG figures into the output
directory and records everything in ``manifest.json``.  Outputs depend only
on the input file and the run configuration, never on the worker count
(``--workers`` / ``LABELEMBED_WORKERS``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, em, figures, simulate
from .dataio import (
    DatasetFormatError,
    Reports,
    RunConfig,
    load_dataset,
    load_draws_dir,
    load_embeddings_csv,
    write_analysis_outputs,
    write_dataset,
    write_outputs,
    _fmt,
    _safe_name,
    _write_csv,
)
from .model import (
    DomainError,
    GaussianPrior,
    GridSpec,
    MOMENT_SURFACE_COLUMNS,
    NumericalError,
    moment_surface,
)

log = logging.getLogger("labelembed.cli")

WORKERS_ENV = "LABELEMBED_WORKERS"

# CLI flags whose values are range specs and may start with a minus sign.
_RANGE_FLAGS = {"--z1", "--z2"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; we reserve 2 for data
        raise UsageError(message)


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _add_common_io(p, input_required=True):
    p.add_argument("--input", required=input_required, help="annotation file to read")
    p.add_argument(
        "--format", choices=("wide", "long"), default="wide", help="input file layout"
    )
    p.add_argument(
        "--labels",
        default=None,
        help="comma-separated class order (required to pin ordering in long format)",
    )


def _add_fit_flags(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--em-iters", type=int, default=50, help="maximum EM iterations")
    p.add_argument("--min-iters", type=int, default=5, help="minimum EM iterations")
    p.add_argument(
        "--rel-tol",
        type=float,
        default=1e-3,
        help="relative change of the prior below which EM stops",
    )
    p.add_argument(
        "--m-step",
        choices=em.M_STEP_MODES,
        default="paper",
        help="prior update from posterior means, or pooling all draws",
    )
    p.add_argument("--mcmc", type=int, default=1000, help="retained draws per chain")
    p.add_argument("--burnin", type=int, default=50, help="discarded warm-up steps")
    p.add_argument("--thin", type=int, default=20, help="keep every thin-th state")
    p.add_argument(
        "--proposal-scale", type=float, default=0.5, help="random-walk step size"
    )
    p.add_argument(
        "--no-adapt",
        action="store_true",
        help="disable proposal-scale adaptation during burn-in",
    )
    p.add_argument("--seed", type=int, default=0, help="run seed")
    p.add_argument(
        "--pca-scale",
        action="store_true",
        help="scale embedding dimensions to unit variance before PCA",
    )
    p.add_argument(
        "--ellipse-coverage", type=float, default=0.95, help="ellipse probability mass"
    )
    p.add_argument(
        "--save-draws",
        action="store_true",
        help="write per-instance draws/<id>.csv (large)",
    )
    p.add_argument(
        "--workers",
        type=int,
        default=_default_workers(),
        help="parallel E-step workers (does not affect results)",
    )
    p.add_argument("--no-plots", action="store_true", help="skip PNG figure rendering")
    p.add_argument(
        "--plot-instances",
        default=None,
        help="comma-separated instance ids (or 'all') to render profile plots for",
    )
    p.add_argument(
        "--replay",
        default=None,
        help="path to a run_config.json; replaces all configuration flags",
    )


def build_parser() -> _Parser:
    parser = _Parser(
        prog="labelembed",
        description="Estimate continuous label embeddings from annotation counts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit embeddings and write reports")
    _add_common_io(p_fit, input_required=False)
    _add_fit_flags(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_an = sub.add_parser("analyze", help="recompute analyses for a saved fit")
    _add_common_io(p_an)
    p_an.add_argument("--run", required=True, help="directory written by fit")
    p_an.add_argument("--out", default=None, help="output directory (default: --run)")
    p_an.add_argument("--pca-scale", action="store_true")
    p_an.add_argument("--ellipse-coverage", type=float, default=0.95)
    p_an.add_argument("--no-plots", action="store_true")
    p_an.set_defaults(func=cmd_analyze)

    p_sub = sub.add_parser("subsample", help="randomly thin annotations into cohorts")
    _add_common_io(p_sub)
    p_sub.add_argument(
        "--groups",
        required=True,
        help="cohort plan n@J[,n@J...]; sizes must sum to the dataset size",
    )
    p_sub.add_argument("--seed", type=int, default=0)
    p_sub.add_argument("--out", required=True, help="output dataset file (wide)")
    p_sub.set_defaults(func=cmd_subsample)

    p_sim = sub.add_parser("simulate", help="draw a synthetic annotated dataset")
    p_sim.add_argument("--n", type=int, required=True, help="number of instances")
    p_sim.add_argument("--k", type=int, required=True, help="number of classes")
    p_sim.add_argument(
        "--j", required=True, help="annotations per instance (int, or comma list of n)"
    )
    p_sim.add_argument("--mu", default=None, help="comma-separated prior mean")
    p_sim.add_argument(
        "--sigma", type=float, default=10.0, help="prior variance (isotropic)"
    )
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.set_defaults(func=cmd_simulate)

    p_ms = sub.add_parser(
        "moment-surface", help="tabulate Beta mean/log-variance over a 2-D grid"
    )
    p_ms.add_argument("--z1", required=True, help="range spec start:stop:step")
    p_ms.add_argument("--z2", required=True, help="range spec start:stop:step")
    p_ms.add_argument("--out", required=True, help="output directory")
    p_ms.add_argument("--no-plots", action="store_true")
    p_ms.set_defaults(func=cmd_moment_surface)

    p_val = sub.add_parser("validate", help="parse a dataset and report its shape")
    _add_common_io(p_val)
    p_val.set_defaults(func=cmd_validate)

    return parser


def _parse_labels(arg):
    if arg is None:
        return None
    names = [s.strip() for s in arg.split(",") if s.strip()]
    return tuple(names) if names else None


def _instance_groups(dataset):
    """Per-instance biplot grouping plus majority / gold name columns."""
    names = dataset.labels.names
    majority = []
    for inst in dataset.instances:
        top, _ = analysis.majority_vote(inst.votes)
        majority.append(names[top])
    if all("J_group" in inst.metadata for inst in dataset.instances):
        groups = [f"J={inst.metadata['J_group']}" for inst in dataset.instances]
    else:
        groups = list(majority)
    gold = None
    if any(inst.gold is not None for inst in dataset.instances):
        gold = [None if inst.gold is None else names[inst.gold] for inst in dataset.instances]
    return groups, majority, gold


def _build_reports(dataset, embeddings, final_draws, pca_scale, coverage) -> Reports:
    groups, majority, gold = _instance_groups(dataset)
    reports = Reports(groups=groups, majority=majority, gold=gold)
    try:
        reports.corr = analysis.correlation_matrix(embeddings, labels=dataset.labels)
    except DomainError as exc:
        log.warning("skipping correlation matrix: %s", exc)
    if reports.corr is not None and final_draws is not None:
        try:
            reports.corr_std = analysis.correlation_std(final_draws)
        except DomainError as exc:
            log.warning("skipping correlation std: %s", exc)
    try:
        reports.pca = analysis.pca_biplot(embeddings, groups=groups, scale=pca_scale)
    except DomainError as exc:
        log.warning("skipping PCA biplot: %s", exc)
    if reports.pca is not None:
        ellipses = []
        scores = reports.pca.scores
        for g in sorted(set(groups)):
            mask = np.array([x == g for x in groups])
            if mask.sum() < 3:
                continue
            try:
                ellipses.append(
                    analysis.concentration_ellipse(scores[mask], coverage, group=g)
                )
            except DomainError as exc:
                log.warning("skipping ellipse for group %s: %s", g, exc)
        reports.ellipses = tuple(ellipses)
    return reports


def _render_figures(out: Path, dataset, reports: Reports, fit=None, plot_ids=None):
    """Write PNG reports; returns the relative paths rendered."""
    produced = []
    names = dataset.labels.names
    if reports.corr is not None:
        figures.save_correlation_heatmap(
            reports.corr, names, out / "correlation.png", "embedding correlation"
        )
        produced.append("correlation.png")
    if reports.corr_std is not None:
        figures.save_correlation_heatmap(
            reports.corr_std,
            names,
            out / "correlation_std.png",
            "correlation standard deviation",
        )
        produced.append("correlation_std.png")
    if reports.pca is not None:
        figures.save_biplot(
            reports.pca,
            names,
            out / "biplot.png",
            groups=reports.groups,
            ellipses=reports.ellipses,
        )
        produced.append("biplot.png")
    if fit is not None and plot_ids:
        wanted = set(fit.instance_ids) if plot_ids == "all" else {
            s.strip() for s in plot_ids.split(",") if s.strip()
        }
        unknown = wanted - set(fit.instance_ids)
        if unknown:
            raise DomainError(f"unknown instance ids for plotting: {sorted(unknown)}")
        inst_dir = out / "instances"
        by_id = {inst.instance_id: inst for inst in dataset.instances}
        for i, inst_id in enumerate(fit.instance_ids):
            if inst_id not in wanted:
                continue
            rel = f"instances/{_safe_name(inst_id)}.png"
            figures.save_instance_profile(
                fit.final_draws[i].draws,
                fit.embeddings[i],
                by_id[inst_id].votes.counts,
                names,
                inst_dir / f"{_safe_name(inst_id)}.png",
                title=inst_id,
            )
            produced.append(rel)
    return produced


def cmd_fit(args) -> int:
    if args.replay:
        cfg = RunConfig.from_json(Path(args.replay).read_text(encoding="utf-8"))
        if cfg.command != "fit":
            raise DomainError(f"replay config is for command {cfg.command!r}, not fit")
    else:
        if not args.input:
            raise UsageError("fit requires --input (or --replay)")
        cfg = RunConfig(
            command="fit",
            seed=args.seed,
            input_path=args.input,
            input_format=args.format,
            labels=_parse_labels(args.labels),
            em_iters=args.em_iters,
            min_iters=args.min_iters,
            rel_tol=args.rel_tol,
            m_step=args.m_step,
            mcmc=args.mcmc,
            burnin=args.burnin,
            thin=args.thin,
            proposal_scale=args.proposal_scale,
            adapt=not args.no_adapt,
            pca_scale=args.pca_scale,
            ellipse_coverage=args.ellipse_coverage,
            save_draws=args.save_draws,
            plots=not args.no_plots,
            plot_instances=args.plot_instances,
        )
    dataset = load_dataset(cfg.input_path, cfg.input_format, labels=cfg.labels)
    result = em.fit(dataset, cfg.em_config(), workers=args.workers)
    reports = _build_reports(
        dataset,
        result.embeddings,
        result.final_draws,
        cfg.pca_scale,
        cfg.ellipse_coverage,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = []
    if cfg.plots:
        extra = _render_figures(
            out, dataset, reports, fit=result, plot_ids=cfg.plot_instances
        )
    write_outputs(
        result,
        dataset.labels,
        reports,
        out,
        run_config=cfg,
        save_draws=cfg.save_draws,
        extra_files=extra,
    )
    status = "converged" if result.converged else "stopped at max iterations"
    print(
        f"fit: {dataset.n} instances, K={dataset.K}, "
        f"{result.iterations_run} iterations ({status}); outputs in {out}"
    )
    return 0


def cmd_analyze(args) -> int:
    dataset = load_dataset(args.input, args.format, labels=_parse_labels(args.labels))
    run_dir = Path(args.run)
    ids, embeddings = load_embeddings_csv(run_dir / "embeddings.csv", dataset.labels)
    if list(ids) != dataset.ids():
        raise DomainError("embeddings.csv instances do not match --input dataset")
    draws = None
    if (run_dir / "draws").is_dir():
        draws = load_draws_dir(run_dir / "draws", ids, dataset.labels)
    reports = _build_reports(
        dataset, embeddings, draws, args.pca_scale, args.ellipse_coverage
    )
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    extra = [] if args.no_plots else _render_figures(out, dataset, reports)
    write_analysis_outputs(ids, dataset.labels, reports, out, extra_files=extra)
    print(f"analyze: refreshed reports for {len(ids)} instances in {out}")
    return 0


def _parse_plan(text: str):
    plan = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            n, j = part.split("@")
            plan.append((int(n), int(j)))
        except ValueError:
            raise UsageError(f"bad cohort spec {part!r}; expected n@J") from None
    if not plan:
        raise UsageError("--groups must contain at least one n@J cohort")
    return plan


def cmd_subsample(args) -> int:
    dataset = load_dataset(args.input, args.format, labels=_parse_labels(args.labels))
    plan = _parse_plan(args.groups)
    thinned = analysis.subsample_annotations(dataset, plan, seed=args.seed)
    write_dataset(thinned, args.out)
    sizes = {}
    for inst in thinned.instances:
        sizes[inst.metadata["J_group"]] = sizes.get(inst.metadata["J_group"], 0) + 1
    summary = ", ".join(f"J={j}: {n}" for j, n in sorted(sizes.items(), key=lambda t: int(t[0])))
    print(f"subsample: wrote {thinned.n} instances ({summary}) to {args.out}")
    return 0


def cmd_simulate(args) -> int:
    K = args.k
    mu = np.zeros(K)
    if args.mu:
        parts = [float(v) for v in args.mu.split(",")]
        if len(parts) != K:
            raise UsageError(f"--mu needs {K} values, got {len(parts)}")
        mu = np.asarray(parts)
    if args.sigma <= 0:
        raise UsageError("--sigma must be > 0")
    j = args.j
    if "," in j:
        j_values = [int(v) for v in j.split(",")]
    else:
        j_values = int(j)
    prior = GaussianPrior(mu, args.sigma * np.eye(K))
    spec = simulate.SimSpec(n=args.n, K=K, J=j_values, prior=prior, seed=args.seed)
    dataset, true_z = simulate.sample_dataset(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(dataset, out / "dataset.csv")
    _write_csv(
        out / "true_embeddings.csv",
        ["instance_id", *(f"z_{n}" for n in dataset.labels.names)],
        (
            [inst.instance_id, *(_fmt(v) for v in row)]
            for inst, row in zip(dataset.instances, true_z)
        ),
    )
    print(f"simulate: wrote {dataset.n} instances (K={K}) to {out}")
    return 0


def cmd_moment_surface(args) -> int:
    table = moment_surface(GridSpec.parse(args.z1), GridSpec.parse(args.z2))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "moment_surface.csv",
        list(MOMENT_SURFACE_COLUMNS),
        ([_fmt(v) for v in row] for row in table),
    )
    if not args.no_plots:
        figures.save_moment_surface(table, out / "moment_surface.png")
    print(f"moment-surface: wrote {table.shape[0]} grid rows to {out}")
    return 0


def cmd_validate(args) -> int:
    dataset = load_dataset(args.input, args.format, labels=_parse_labels(args.labels))
    stats = analysis.agreement_stats(dataset)
    j_values = [inst.votes.J for inst in dataset.instances]
    gold_count = sum(1 for inst in dataset.instances if inst.gold is not None)
    print(f"valid dataset: {dataset.n} instances, K={dataset.K}")
    print(f"classes: {', '.join(dataset.labels.names)}")
    print(f"annotations per instance: min {min(j_values)}, max {max(j_values)}")
    print(f"distinct annotation patterns: {stats.distinct_pattern_count}")
    print(f"full-agreement fraction: {stats.full_agreement_fraction:.4f}")
    print(f"instances with gold labels: {gold_count}")
    return 0


def _merge_range_flags(argv):
    """Allow ``--z1 -3:3:0.1`` by folding the value into ``--z1=...``."""
    merged = []
    skip = False
    for i, tok in enumerate(argv):
        if skip:
            skip = False
            continue
        if tok in _RANGE_FLAGS and i + 1 < len(argv):
            merged.append(f"{tok}={argv[i + 1]}")
            skip = True
        else:
            merged.append(tok)
    return merged


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(_merge_range_flags(argv))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DatasetFormatError, DomainError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
