"""File formats, run configuration and output serialization.

Two ingestion formats are supported:

* wide  -- header ``instance_id,<class1>,...,<classK>[,gold][,J_group]``,
  one row per instance with integer vote counts.  ``gold`` and ``J_group``
  are reserved trailing column names, so classes cannot use them.
* long  -- header ``instance_id,vote[,annotator_id]``, one row per
  individual annotation; rows are aggregated into counts.

Floats are written with shortest round-trip precision (Python ``repr``), so
serialize/parse cycles are lossless and outputs are byte-stable for a fixed
run configuration.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .analysis import CorrelationReport, EllipseSpec, PcaResult
from .em import EmConfig, FitResult
from .model import (
    AnnotationDataset,
    ClassLabels,
    DomainError,
    Instance,
    VoteCounts,
    dirichlet_moments,
)
from .sampler import McmcConfig

log = logging.getLogger("labelembed.io")

FORMAT_VERSION = "1"
RESERVED_COLUMNS = ("gold", "J_group")


class DatasetFormatError(DomainError):
    """A dataset file violates the ingestion format; message carries the line."""


def _fmt(x) -> str:
    """Shortest round-trip decimal representation of a float."""
    return repr(float(x))


def _parse_count(text: str, line: int, column: str) -> int:
    text = text.strip()
    try:
        value = int(text)
    except ValueError:
        raise DatasetFormatError(
            f"line {line}: count for {column!r} is not an integer: {text!r}"
        ) from None
    if value < 0:
        raise DatasetFormatError(f"line {line}: negative count for {column!r}: {value}")
    return value


def _read_rows(path) -> list[list[str]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.reader(fh))
    except OSError as exc:
        raise DatasetFormatError(f"cannot read {path}: {exc}") from exc


def load_dataset(path, format: str = "wide", labels=None) -> AnnotationDataset:
    """Parse an annotation file into a validated dataset.

    ``labels`` optionally pins the class order; in wide format it must then
    match the header exactly, in long format it replaces first-appearance
    ordering.
    """
    if format == "wide":
        return _load_wide(path, labels)
    if format == "long":
        return _load_long(path, labels)
    raise DomainError(f"unknown format {format!r}; expected 'wide' or 'long'")


def _load_wide(path, labels=None) -> AnnotationDataset:
    rows = _read_rows(path)
    if not rows:
        raise DatasetFormatError("line 1: file is empty, expected a header")
    header = [c.strip() for c in rows[0]]
    if len(header) < 3 or header[0] != "instance_id":
        raise DatasetFormatError(
            "line 1: wide header must be instance_id,<class1>,...,<classK>[,gold][,J_group]"
        )
    names = header[1:]
    extras = []
    while names and names[-1] in RESERVED_COLUMNS:
        extras.append(names.pop())
    extras.reverse()
    if len(set(names)) != len(names):
        raise DatasetFormatError("line 1: duplicate class names in header")
    if len(names) < 2:
        raise DatasetFormatError("line 1: need at least 2 class columns")
    try:
        class_labels = ClassLabels(names)
    except DomainError as exc:
        raise DatasetFormatError(f"line 1: {exc}") from exc
    if labels is not None:
        wanted = list(labels.names if isinstance(labels, ClassLabels) else labels)
        if wanted != list(names):
            raise DatasetFormatError(
                f"line 1: header classes {names} do not match requested labels {wanted}"
            )
    K = class_labels.K
    n_cols = 1 + K + len(extras)

    instances = []
    seen_ids = set()
    for line_no, row in enumerate(rows[1:], start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue  # ignore blank lines
        if len(row) != n_cols:
            raise DatasetFormatError(
                f"line {line_no}: expected {n_cols} fields, got {len(row)}"
            )
        inst_id = row[0].strip()
        if not inst_id:
            raise DatasetFormatError(f"line {line_no}: empty instance id")
        if inst_id in seen_ids:
            raise DatasetFormatError(f"line {line_no}: duplicate instance id {inst_id!r}")
        seen_ids.add(inst_id)
        counts = [
            _parse_count(cell, line_no, names[k]) for k, cell in enumerate(row[1 : 1 + K])
        ]
        if sum(counts) < 1:
            raise DatasetFormatError(
                f"line {line_no}: instance {inst_id!r} has zero annotations"
            )
        gold = None
        metadata = {}
        for col, cell in zip(extras, row[1 + K :]):
            cell = cell.strip()
            if not cell:
                continue
            if col == "gold":
                if cell not in class_labels.names:
                    raise DatasetFormatError(
                        f"line {line_no}: unknown gold class {cell!r}"
                    )
                gold = class_labels.index(cell)
            else:
                metadata[col] = cell
        instances.append(
            Instance(
                instance_id=inst_id,
                votes=VoteCounts(counts),
                gold=gold,
                metadata=metadata,
            )
        )
    if not instances:
        raise DatasetFormatError("line 1: file has a header but no instances")
    return AnnotationDataset(class_labels, instances)


def _load_long(path, labels=None) -> AnnotationDataset:
    rows = _read_rows(path)
    if not rows:
        raise DatasetFormatError("line 1: file is empty, expected a header")
    header = [c.strip() for c in rows[0]]
    if len(header) < 2 or header[0] != "instance_id" or header[1] != "vote":
        raise DatasetFormatError(
            "line 1: long header must be instance_id,vote[,annotator_id]"
        )
    explicit = labels is not None
    if explicit:
        names = list(labels.names if isinstance(labels, ClassLabels) else labels)
    else:
        names = []
        log.warning(
            "no class order given for long format; using first-appearance order"
        )
    index = {name: k for k, name in enumerate(names)}
    counts: dict[str, list[int]] = {}
    order: list[str] = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) < 2:
            raise DatasetFormatError(f"line {line_no}: expected instance_id,vote")
        inst_id, vote = row[0].strip(), row[1].strip()
        if not inst_id:
            raise DatasetFormatError(f"line {line_no}: empty instance id")
        if not vote:
            raise DatasetFormatError(f"line {line_no}: empty vote")
        if vote not in index:
            if explicit:
                raise DatasetFormatError(f"line {line_no}: unknown class {vote!r}")
            index[vote] = len(names)
            names.append(vote)
        if inst_id not in counts:
            counts[inst_id] = []
            order.append(inst_id)
        counts[inst_id].append(index[vote])
    if not order:
        raise DatasetFormatError("line 1: file has a header but no annotations")
    if len(names) < 2:
        raise DatasetFormatError(
            f"line 1: found {len(names)} distinct class(es); need at least 2"
        )
    class_labels = ClassLabels(names)
    instances = []
    for inst_id in order:
        tally = np.bincount(counts[inst_id], minlength=class_labels.K)
        instances.append(Instance(instance_id=inst_id, votes=VoteCounts(tally)))
    return AnnotationDataset(class_labels, instances)


def write_dataset(dataset: AnnotationDataset, path) -> None:
    """Write a dataset in wide format (gold / J_group columns as needed)."""
    has_gold = any(inst.gold is not None for inst in dataset.instances)
    has_jgroup = any("J_group" in inst.metadata for inst in dataset.instances)
    header = ["instance_id", *dataset.labels.names]
    if has_gold:
        header.append("gold")
    if has_jgroup:
        header.append("J_group")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for inst in dataset.instances:
            row = [inst.instance_id, *(str(int(c)) for c in inst.votes.counts)]
            if has_gold:
                row.append("" if inst.gold is None else dataset.labels.names[inst.gold])
            if has_jgroup:
                row.append(inst.metadata.get("J_group", ""))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run's outputs.

    Worker count is intentionally not part of the configuration: results are
    independent of it, so replays with any parallelism reproduce the same
    bytes.
    """

    command: str
    seed: int = 0
    input_path: Optional[str] = None
    input_format: str = "wide"
    labels: Optional[tuple[str, ...]] = None
    em_iters: int = 50
    min_iters: int = 5
    rel_tol: float = 1e-3
    m_step: str = "paper"
    mcmc: int = 1000
    burnin: int = 50
    thin: int = 20
    proposal_scale: float = 0.5
    adapt: bool = True
    pca_scale: bool = False
    ellipse_coverage: float = 0.95
    save_draws: bool = False
    plots: bool = True
    plot_instances: Optional[str] = None
    format_version: str = FORMAT_VERSION

    def mcmc_config(self) -> McmcConfig:
        return McmcConfig(
            n_retained=self.mcmc,
            burn_in=self.burnin,
            thin=self.thin,
            proposal_scale=self.proposal_scale,
            adapt=self.adapt,
            seed=self.seed,
        )

    def em_config(self) -> EmConfig:
        return EmConfig(
            max_iterations=self.em_iters,
            rel_tol=self.rel_tol,
            mcmc=self.mcmc_config(),
            min_iterations=self.min_iters,
            m_step=self.m_step,
        )

    def to_json(self) -> str:
        payload = asdict(self)
        if payload["labels"] is not None:
            payload["labels"] = list(payload["labels"])
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        payload = json.loads(text)
        version = payload.pop("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise DomainError(f"unsupported run config version {version!r}")
        if payload.get("labels") is not None:
            payload["labels"] = tuple(payload["labels"])
        return cls(format_version=version, **payload)


# ---------------------------------------------------------------------------
# Fit outputs
# ---------------------------------------------------------------------------


@dataclass
class Reports:
    """Optional analysis artifacts to serialize next to a fit."""

    corr: Optional[np.ndarray] = None
    corr_std: Optional[np.ndarray] = None
    pca: Optional[PcaResult] = None
    ellipses: Sequence[EllipseSpec] = field(default_factory=tuple)
    groups: Optional[Sequence[str]] = None  # biplot grouping, per instance
    majority: Optional[Sequence[str]] = None
    gold: Optional[Sequence[Optional[str]]] = None

    @classmethod
    def from_correlation_report(cls, report: CorrelationReport, **kwargs) -> "Reports":
        return cls(corr=report.corr, corr_std=report.std, **kwargs)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_matrix_csv(path: Path, matrix: np.ndarray, names: Sequence[str]) -> None:
    rows = [[name, *(_fmt(v) for v in row)] for name, row in zip(names, matrix)]
    _write_csv(path, ["class", *names], rows)


def write_embeddings_csv(path: Path, fit: FitResult, labels: ClassLabels) -> None:
    header = (
        ["instance_id"]
        + [f"z_{n}" for n in labels.names]
        + [f"softmax_{n}" for n in labels.names]
        + ["cov_trace"]
    )
    rows = []
    for i, inst_id in enumerate(fit.instance_ids):
        z = fit.embeddings[i]
        sm = dirichlet_moments(z).mean
        trace = float(np.trace(fit.per_instance_cov[i]))
        rows.append(
            [inst_id, *(_fmt(v) for v in z), *(_fmt(v) for v in sm), _fmt(trace)]
        )
    _write_csv(path, header, rows)


def load_embeddings_csv(path, labels: ClassLabels):
    """Read back an embeddings table; returns (ids, n x K embedding matrix)."""
    rows = _read_rows(path)
    if not rows:
        raise DatasetFormatError(f"line 1: {path} is empty")
    header = rows[0]
    wanted = [f"z_{n}" for n in labels.names]
    try:
        cols = [header.index(w) for w in wanted]
    except ValueError as exc:
        raise DatasetFormatError(f"line 1: {path} lacks column {exc}") from None
    ids, vecs = [], []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            vecs.append([float(row[c]) for c in cols])
        except (ValueError, IndexError):
            raise DatasetFormatError(f"line {line_no}: malformed embedding row") from None
        ids.append(row[0])
    if not ids:
        raise DatasetFormatError("line 1: no embedding rows")
    return ids, np.asarray(vecs)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_report_files(
    instance_ids: Sequence[str], labels: ClassLabels, reports: Reports, out: Path
) -> list[str]:
    """Write the optional analysis files; returns the relative names written."""
    produced: list[str] = []
    if reports.corr is not None:
        _write_matrix_csv(out / "correlation.csv", reports.corr, labels.names)
        produced.append("correlation.csv")
    if reports.corr_std is not None:
        _write_matrix_csv(out / "correlation_std.csv", reports.corr_std, labels.names)
        produced.append("correlation_std.csv")

    if reports.pca is not None:
        pca = reports.pca
        groups = reports.groups or [""] * len(instance_ids)
        majority = reports.majority or [""] * len(instance_ids)
        gold = reports.gold
        header = ["instance_id", "pc1", "pc2", "group", "majority"]
        if gold is not None:
            header.append("gold")
        rows = []
        for i, inst_id in enumerate(instance_ids):
            row = [
                inst_id,
                _fmt(pca.scores[i, 0]),
                _fmt(pca.scores[i, 1]),
                str(groups[i]),
                str(majority[i]),
            ]
            if gold is not None:
                row.append("" if gold[i] is None else str(gold[i]))
            rows.append(row)
        _write_csv(out / "biplot.csv", header, rows)
        evr = pca.explained_variance_ratio
        evr1 = _fmt(evr[0]) if evr.size > 0 else _fmt(0.0)
        evr2 = _fmt(evr[1]) if evr.size > 1 else _fmt(0.0)
        _write_csv(
            out / "loadings.csv",
            ["class", "pc1", "pc2", "evr_pc1", "evr_pc2"],
            [
                [name, _fmt(pca.loadings[k, 0]), _fmt(pca.loadings[k, 1]), evr1, evr2]
                for k, name in enumerate(labels.names)
            ],
        )
        produced += ["biplot.csv", "loadings.csv"]

    if reports.ellipses:
        _write_csv(
            out / "ellipses.csv",
            ["group", "center_pc1", "center_pc2", "axis1", "axis2", "angle_rad"],
            [
                [
                    e.group,
                    _fmt(e.center[0]),
                    _fmt(e.center[1]),
                    _fmt(e.axes[0]),
                    _fmt(e.axes[1]),
                    _fmt(e.angle),
                ]
                for e in reports.ellipses
            ],
        )
        produced.append("ellipses.csv")
    return produced


def write_manifest(out: Path, produced: Sequence[str]) -> dict:
    manifest = {
        "format_version": FORMAT_VERSION,
        "files": {name: _sha256(out / name) for name in sorted(produced)},
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


def write_analysis_outputs(
    instance_ids: Sequence[str],
    labels: ClassLabels,
    reports: Reports,
    out_dir,
    extra_files: Sequence[str] = (),
) -> dict:
    """Serialize analysis files alone (for re-analysis of a saved fit)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    produced = list(extra_files) + _write_report_files(instance_ids, labels, reports, out)
    return write_manifest(out, produced)


def write_outputs(
    fit: FitResult,
    labels: ClassLabels,
    reports: Reports,
    out_dir,
    run_config: Optional[RunConfig] = None,
    save_draws: bool = False,
    extra_files: Sequence[str] = (),
) -> dict:
    """Serialize a fit and its reports; returns the written manifest.

    The manifest maps every produced file (relative path) to its SHA-256
    content hash; optional reports that are absent simply do not appear.
    ``extra_files`` names files already present in ``out_dir`` (figures,
    datasets) that should be hashed into the manifest as well.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    produced: list[str] = list(extra_files)

    write_embeddings_csv(out / "embeddings.csv", fit, labels)
    produced.append("embeddings.csv")

    prior_payload = {
        "classes": list(labels.names),
        "mu": [float(v) for v in fit.final_prior.mu],
        "sigma": [[float(v) for v in row] for row in fit.final_prior.sigma],
        "iterations": fit.iterations_run,
        "converged": fit.converged,
    }
    (out / "prior.json").write_text(
        json.dumps(prior_payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    produced.append("prior.json")

    produced += _write_report_files(fit.instance_ids, labels, reports, out)

    if save_draws:
        draws_dir = out / "draws"
        draws_dir.mkdir(parents=True, exist_ok=True)
        for inst_id, draws in zip(fit.instance_ids, fit.final_draws):
            fname = draws_dir / f"{_safe_name(inst_id)}.csv"
            _write_csv(
                fname,
                list(labels.names),
                ([_fmt(v) for v in row] for row in draws.draws),
            )
            produced.append(f"draws/{fname.name}")

    if run_config is not None:
        (out / "run_config.json").write_text(run_config.to_json(), encoding="utf-8")
        produced.append("run_config.json")

    return write_manifest(out, produced)


def _safe_name(instance_id: str) -> str:
    return "".join(c if (c.isalnum() or c in "-_.") else "_" for c in instance_id)


def load_draws_dir(draws_dir, instance_ids, labels: ClassLabels):
    """Read per-instance draw files back into PosteriorDraws-like arrays."""
    from .sampler import PosteriorDraws

    out = []
    for inst_id in instance_ids:
        path = Path(draws_dir) / f"{_safe_name(inst_id)}.csv"
        rows = _read_rows(path)
        mat = np.asarray([[float(v) for v in row] for row in rows[1:]])
        if mat.ndim != 2 or mat.shape[1] != labels.K:
            raise DatasetFormatError(f"line 1: malformed draws file {path}")
        out.append(PosteriorDraws(draws=mat, acceptance_rate=float("nan"), seed_used=0))
    return out
