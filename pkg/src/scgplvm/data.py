"""Count-matrix container, QC filtering, and the per-likelihood preprocessing pipelines.

Two on-disk count formats are understood:

* dense CSV: header row holds gene ids, the first column holds cell ids;
* triplet text: a ``%%shape N D`` header followed by ``row col value`` lines
  (1-indexed; repeated coordinates accumulate).

Cell metadata always travels in a sidecar CSV with columns
``cell_id,batch,celltype`` (``celltype`` may be empty or missing).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyResult, ParseError, ShapeMismatch, ZeroRow

LIBRARY_NORMALIZED = "library_normalized"
LOG_GAUSSIAN = "log_gaussian"
RAW_COUNTS = "raw_counts"


@dataclass(frozen=True)
class CountDataset:
    """Cells x genes matrix of nonnegative integer counts with per-cell labels."""

    counts: np.ndarray
    cell_ids: tuple
    gene_ids: tuple
    batch_labels: np.ndarray
    celltype_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise ShapeMismatch(f"counts must be 2-D, got shape {counts.shape}")
        if counts.dtype.kind == "f":
            if not np.all(np.isfinite(counts)) or np.any(counts != np.round(counts)):
                raise ParseError("counts must be integral")
            counts = counts.astype(np.int64)
        elif counts.dtype.kind not in "iu":
            raise ParseError(f"counts must be integers, got dtype {counts.dtype}")
        if np.any(counts < 0):
            raise ParseError("counts must be nonnegative")
        n, d = counts.shape
        object.__setattr__(self, "counts", counts.astype(np.int64, copy=False))
        object.__setattr__(self, "cell_ids", tuple(str(c) for c in self.cell_ids))
        object.__setattr__(self, "gene_ids", tuple(str(g) for g in self.gene_ids))
        batch = np.asarray(self.batch_labels).astype(str)
        object.__setattr__(self, "batch_labels", batch)
        if self.celltype_labels is not None:
            object.__setattr__(
                self, "celltype_labels", np.asarray(self.celltype_labels).astype(str)
            )
        if len(self.cell_ids) != n or len(batch) != n:
            raise ShapeMismatch(
                f"{n} cells but {len(self.cell_ids)} ids and {len(batch)} batch labels"
            )
        if self.celltype_labels is not None and len(self.celltype_labels) != n:
            raise ShapeMismatch(
                f"{n} cells but {len(self.celltype_labels)} cell-type labels"
            )
        if len(self.gene_ids) != d:
            raise ShapeMismatch(f"{d} genes but {len(self.gene_ids)} gene ids")

    @property
    def n_cells(self) -> int:
        return self.counts.shape[0]

    @property
    def n_genes(self) -> int:
        return self.counts.shape[1]

    @property
    def batch_levels(self) -> list:
        return sorted(set(self.batch_labels.tolist()))

    def subset(self, cells=None, genes=None) -> "CountDataset":
        cells = np.arange(self.n_cells) if cells is None else np.asarray(cells)
        genes = np.arange(self.n_genes) if genes is None else np.asarray(genes)
        cells = np.flatnonzero(cells) if cells.dtype == bool else cells
        genes = np.flatnonzero(genes) if genes.dtype == bool else genes
        return CountDataset(
            counts=self.counts[np.ix_(cells, genes)],
            cell_ids=tuple(self.cell_ids[i] for i in cells),
            gene_ids=tuple(self.gene_ids[j] for j in genes),
            batch_labels=self.batch_labels[cells],
            celltype_labels=None
            if self.celltype_labels is None
            else self.celltype_labels[cells],
        )


@dataclass(frozen=True)
class DesignMatrix:
    phi: np.ndarray
    levels: tuple = field(default=())

    @property
    def n_levels(self) -> int:
        return self.phi.shape[1]


@dataclass(frozen=True)
class ProcessedMatrix:
    """Real-valued matrix tagged with the pipeline that produced it."""

    values: np.ndarray
    pipeline_tag: str
    target: Optional[float] = None


# --------------------------------------------------------------------------
# IO
# --------------------------------------------------------------------------


def default_meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.csv")


def read_metadata(meta_path: Path):
    if not meta_path.exists():
        raise FileNotFoundError(f"metadata sidecar not found: {meta_path}")
    with open(meta_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"cell_id", "batch"} <= set(reader.fieldnames):
            raise ParseError(f"{meta_path}: metadata needs columns cell_id,batch[,celltype]")
        rows = list(reader)
    ids = [r["cell_id"] for r in rows]
    if len(set(ids)) != len(ids):
        raise ParseError(f"{meta_path}: duplicate cell_id values")
    batch = [r["batch"] for r in rows]
    celltype = [r.get("celltype") or "" for r in rows]
    if all(c == "" for c in celltype):
        celltype = None
    return ids, batch, celltype


def _parse_int_matrix(values: np.ndarray, source: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise ParseError(f"{source}: non-finite entries")
    if np.any(values < 0):
        raise ParseError(f"{source}: negative counts")
    if np.any(values != np.round(values)):
        raise ParseError(f"{source}: non-integer counts")
    return values.astype(np.int64)


def _load_csv_counts(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        gene_ids = header[1:]
        cell_ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            cell_ids.append(row[0])
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not gene_ids:
        raise ParseError(f"{path}: no gene columns")
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(gene_ids))
    return _parse_int_matrix(values, str(path)), cell_ids, gene_ids


def _load_triplet_counts(path: Path):
    shape = None
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("%%shape"):
                parts = line.split()
                if len(parts) != 3:
                    raise ParseError(f"{path}:{lineno}: malformed shape header")
                try:
                    shape = (int(parts[1]), int(parts[2]))
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: malformed shape header") from None
                continue
            if line.startswith("%"):
                continue
            if shape is None:
                raise ParseError(f"{path}:{lineno}: entry before %%shape header")
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 'row col value'")
            try:
                i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric entry") from None
            if not (1 <= i <= shape[0] and 1 <= j <= shape[1]):
                raise ParseError(f"{path}:{lineno}: index ({i}, {j}) outside shape {shape}")
            if v < 0 or v != round(v):
                raise ParseError(f"{path}:{lineno}: count {parts[2]} is not a nonnegative integer")
            entries.append((i - 1, j - 1, int(v)))
    if shape is None:
        raise ParseError(f"{path}: missing %%shape header")
    counts = np.zeros(shape, dtype=np.int64)
    if entries:
        arr = np.array(entries, dtype=np.int64)
        np.add.at(counts, (arr[:, 0], arr[:, 1]), arr[:, 2])
    return counts


def load_dataset(path, format: str = "csv", meta_path=None, gene_ids: Optional[Sequence[str]] = None) -> CountDataset:
    """Read a count matrix plus its metadata sidecar.

    ``meta_path`` defaults to ``<stem>.meta.csv`` next to the count file.
    Triplet files carry no ids, so cell ids come from the metadata in file
    order and gene ids default to ``gene_<j>``.
    """
    path = Path(path)
    meta_path = default_meta_path(path) if meta_path is None else Path(meta_path)
    if not path.exists():
        raise FileNotFoundError(f"count file not found: {path}")
    ids, batch, celltype = read_metadata(meta_path)

    if format == "csv":
        counts, cell_ids, genes = _load_csv_counts(path)
        if len(ids) != len(cell_ids):
            raise ShapeMismatch(f"metadata has {len(ids)} rows for {len(cell_ids)} cells")
        index = {cid: k for k, cid in enumerate(ids)}
        try:
            order = [index[cid] for cid in cell_ids]
        except KeyError as exc:
            raise ShapeMismatch(f"cell {exc.args[0]!r} missing from metadata") from None
    elif format in ("mtx_triplet", "triplet"):
        counts = _load_triplet_counts(path)
        if len(ids) != counts.shape[0]:
            raise ShapeMismatch(f"metadata has {len(ids)} rows for {counts.shape[0]} cells")
        cell_ids = ids
        order = list(range(len(ids)))
        genes = list(gene_ids) if gene_ids is not None else [f"gene_{j}" for j in range(counts.shape[1])]
    else:
        raise ValueError(f"unknown count format {format!r}")

    return CountDataset(
        counts=counts,
        cell_ids=cell_ids,
        gene_ids=genes,
        batch_labels=np.array([batch[k] for k in order]),
        celltype_labels=None if celltype is None else np.array([celltype[k] for k in order]),
    )


def write_dataset(ds: CountDataset, counts_path, meta_path=None, format: str = "csv") -> None:
    counts_path = Path(counts_path)
    meta_path = default_meta_path(counts_path) if meta_path is None else Path(meta_path)
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["cell_id", *ds.gene_ids])
        for cid, row in zip(ds.cell_ids, ds.counts):
            writer.writerow([cid, *row.tolist()])
        counts_path.write_text(buf.getvalue(), encoding="utf-8")
    elif format in ("mtx_triplet", "triplet"):
        rows, cols = np.nonzero(ds.counts)
        lines = [f"%%shape {ds.n_cells} {ds.n_genes}"]
        lines += [f"{i + 1} {j + 1} {ds.counts[i, j]}" for i, j in zip(rows, cols)]
        counts_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown count format {format!r}")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["cell_id", "batch", "celltype"])
    celltypes = ds.celltype_labels if ds.celltype_labels is not None else [""] * ds.n_cells
    for row in zip(ds.cell_ids, ds.batch_labels, celltypes):
        writer.writerow(row)
    meta_path.write_text(buf.getvalue(), encoding="utf-8")


# --------------------------------------------------------------------------
# QC and normalization
# --------------------------------------------------------------------------


def filter_qc(
    ds: CountDataset,
    min_cell_counts: int = 200,
    min_cells_per_gene: int = 3,
    until_stable: bool = False,
) -> CountDataset:
    """Drop cells with total count below ``min_cell_counts``, then genes
    detected in ``min_cells_per_gene`` or fewer of the remaining cells.

    One pass of each by default. ``until_stable`` repeats the pair of passes
    until nothing changes, which makes the filter idempotent.
    """
    if min_cell_counts < 0 or min_cells_per_gene < 0:
        raise ValueError("QC thresholds must be nonnegative")
    while True:
        keep_cells = ds.counts.sum(axis=1) >= min_cell_counts
        if not keep_cells.any():
            raise EmptyResult("every cell fell below the total-count threshold")
        detected = (ds.counts[keep_cells] > 0).sum(axis=0)
        keep_genes = detected > min_cells_per_gene
        if not keep_genes.any():
            raise EmptyResult("every gene fell below the detection threshold")
        if keep_cells.all() and keep_genes.all():
            return ds
        ds = ds.subset(keep_cells, keep_genes)
        if not until_stable:
            return ds


def library_normalize(ds_or_counts, target: float = 5000.0) -> ProcessedMatrix:
    counts = ds_or_counts.counts if isinstance(ds_or_counts, CountDataset) else np.asarray(ds_or_counts)
    if target <= 0:
        raise ValueError("target must be positive")
    totals = counts.sum(axis=1).astype(np.float64)
    zero = np.flatnonzero(totals == 0)
    if zero.size:
        raise ZeroRow(f"{zero.size} all-zero rows (first at index {zero[0]}); run filter_qc first")
    values = counts * (target / totals)[:, None]
    return ProcessedMatrix(values=values, pipeline_tag=LIBRARY_NORMALIZED, target=float(target))


def gaussian_pipeline(ds_or_counts, target: float = 5000.0, standardize: bool = False) -> ProcessedMatrix:
    """Library-normalize then ``log1p``; optionally z-score each gene."""
    values = np.log1p(library_normalize(ds_or_counts, target).values)
    if standardize:
        sd = values.std(axis=0)
        values = (values - values.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    return ProcessedMatrix(values=values, pipeline_tag=LOG_GAUSSIAN, target=float(target))


def raw_counts(ds: CountDataset) -> ProcessedMatrix:
    return ProcessedMatrix(values=ds.counts.astype(np.float64), pipeline_tag=RAW_COUNTS)


def one_hot_design(labels) -> DesignMatrix:
    labels = np.asarray(labels).astype(str)
    levels, codes = np.unique(labels, return_inverse=True)
    phi = np.zeros((labels.shape[0], levels.shape[0]))
    phi[np.arange(labels.shape[0]), codes] = 1.0
    return DesignMatrix(phi=phi, levels=tuple(levels.tolist()))
