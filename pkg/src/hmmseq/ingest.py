"""Count-table ingest: parsing, low-count filtering, upper-quartile library
offsets, and per-chromosome partitioning."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

META_COLUMNS = ("gene_id", "chromosome", "position")


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class GeneMeta:
    id: str
    chromosome: str
    position: int


@dataclass(frozen=True)
class LibraryMeta:
    name: str
    treatment: int
    replicate: int
    subject: int | None = None


@dataclass
class CountMatrix:
    genes: list[GeneMeta]
    libraries: list[LibraryMeta]
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        self.validate()

    def validate(self):
        if self.counts.shape != (len(self.genes), len(self.libraries)):
            raise IngestError(
                f"count matrix shape {self.counts.shape} does not match "
                f"{len(self.genes)} genes x {len(self.libraries)} libraries"
            )
        if not np.issubdtype(self.counts.dtype, np.integer):
            raise IngestError("counts must be integers")
        if self.counts.size and self.counts.min() < 0:
            raise IngestError("counts must be nonnegative")

        seen = set()
        for g in self.genes:
            if g.id in seen:
                raise IngestError(f"duplicate gene id {g.id!r}")
            seen.add(g.id)

        last: dict[str, int] = {}
        for g in self.genes:
            prev = last.get(g.chromosome)
            if prev is not None and g.position <= prev:
                raise IngestError(
                    f"positions on chromosome {g.chromosome!r} must strictly "
                    f"increase (gene {g.id!r} at {g.position})"
                )
            last[g.chromosome] = g.position

        for lib in self.libraries:
            if lib.treatment not in (1, 2):
                raise IngestError(f"library {lib.name!r} has treatment {lib.treatment}")
            if lib.replicate < 1:
                raise IngestError(f"library {lib.name!r} has replicate {lib.replicate}")
        subjects = [lib.subject for lib in self.libraries]
        if any(s is not None for s in subjects):
            if any(s is None for s in subjects):
                raise IngestError("either all or no libraries carry a subject id")
            for j in (1, 2):
                per = [lib.subject for lib in self.libraries if lib.treatment == j]
                if len(per) != len(set(per)):
                    raise IngestError(f"subject repeated within treatment {j}")
            s1 = {lib.subject for lib in self.libraries if lib.treatment == 1}
            s2 = {lib.subject for lib in self.libraries if lib.treatment == 2}
            if s1 != s2:
                raise IngestError("paired subjects must appear in both treatments")

    @property
    def n_genes(self) -> int:
        return len(self.genes)

    @property
    def n_libraries(self) -> int:
        return len(self.libraries)

    @property
    def paired(self) -> bool:
        return bool(self.libraries) and self.libraries[0].subject is not None

    def gene_ids(self) -> list[str]:
        return [g.id for g in self.genes]


@dataclass
class ChromosomeBlock:
    chromosome: str
    genes: list[GeneMeta]
    libraries: list[LibraryMeta]
    counts: np.ndarray
    rho: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        self.rho = np.asarray(self.rho, dtype=float)
        if self.rho.size == 0:
            self.rho = np.zeros(len(self.libraries))
        if self.rho.shape != (len(self.libraries),):
            raise IngestError("rho length must match the library count")
        if not np.all(np.isfinite(self.rho)):
            raise IngestError("rho must be finite")

    @property
    def n_genes(self) -> int:
        return len(self.genes)

    def gene_ids(self) -> list[str]:
        return [g.id for g in self.genes]


def _load_layout(path: str, names: list[str]) -> list[LibraryMeta]:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise IngestError("layout must map library names to descriptors")
    libraries = []
    for name in names:
        if name not in raw:
            raise IngestError(f"layout missing library {name!r}")
        entry = raw[name]
        try:
            treatment = int(entry["treatment"])
            replicate = int(entry["replicate"])
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"bad layout entry for {name!r}: {exc}") from exc
        subject = entry.get("subject")
        subject = None if subject is None else int(subject)
        libraries.append(LibraryMeta(name, treatment, replicate, subject))
    # underscore keys hold metadata, not library descriptors
    extra = {k for k in raw if k not in names and not k.startswith("_")}
    if extra:
        raise IngestError(f"layout names unknown libraries: {sorted(extra)}")
    return libraries


def load_counts(
    counts_path: str,
    layout_path: str,
    delimiter: str | None = None,
) -> CountMatrix:
    """Parse a delimited count table plus its library-layout sidecar.

    The table header is ``gene_id  chromosome  position  <lib> ...``; the
    sidecar maps each library column to its treatment/replicate (and subject,
    for paired designs). Tab or comma delimiting is sniffed from the header
    when not given. Leading ``#`` lines are metadata and are skipped; error
    line numbers count physical lines.
    """
    with open(counts_path, newline="") as fh:
        skipped = 0
        head = fh.readline()
        while head.startswith("#"):
            skipped += 1
            head = fh.readline()
        if not head:
            raise IngestError("empty count file")
        if delimiter is None:
            delimiter = "\t" if "\t" in head else ","
        reader = csv.reader(itertools.chain([head], fh), delimiter=delimiter)

        header = next(reader, None)
        if header is None:
            raise IngestError("empty count file")
        header = [h.strip() for h in header]
        if tuple(header[:3]) != META_COLUMNS:
            raise IngestError(
                f"header must start with {' '.join(META_COLUMNS)}, got {header[:3]}"
            )
        names = header[3:]
        if not names:
            raise IngestError("count file has no library columns")

        genes = []
        rows = []
        seen: set[str] = set()
        last: dict[str, int] = {}
        for lineno, row in enumerate(reader, start=skipped + 2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(
                    f"expected {len(header)} columns, got {len(row)} at line {lineno}"
                )
            gid = row[0].strip()
            chrom = row[1].strip()
            if gid in seen:
                raise IngestError(f"duplicate gene id {gid!r} at line {lineno}")
            seen.add(gid)
            try:
                pos = int(row[2])
            except ValueError:
                raise IngestError(f"non-integer position at line {lineno}") from None
            prev = last.get(chrom)
            if prev is not None and pos <= prev:
                raise IngestError(
                    f"position not increasing on chromosome {chrom!r} at line {lineno}"
                )
            last[chrom] = pos
            counts = []
            for cell in row[3:]:
                try:
                    y = int(cell)
                except ValueError:
                    raise IngestError(
                        f"non-integer count {cell!r} at line {lineno}"
                    ) from None
                if y < 0:
                    raise IngestError(f"negative count at line {lineno}")
                counts.append(y)
            genes.append(GeneMeta(gid, chrom, pos))
            rows.append(counts)

    libraries = _load_layout(layout_path, names)
    counts = np.array(rows, dtype=np.int64).reshape(len(genes), len(names))
    return CountMatrix(genes, libraries, counts)


def filter_low_counts(cm: CountMatrix, threshold: int = 10) -> CountMatrix:
    """Drop genes whose total count across all libraries is below threshold."""
    if threshold < 0:
        raise IngestError("threshold must be >= 0")
    keep = cm.counts.sum(axis=1) >= threshold
    genes = [g for g, k in zip(cm.genes, keep) if k]
    return CountMatrix(genes, cm.libraries, cm.counts[keep])


def upper_quartile_effects(cm: CountMatrix) -> np.ndarray:
    """Per-library log offsets from upper-quartile normalization.

    rho_l = log(UQ_l) - mean_l log(UQ_l) where UQ_l is the 75th percentile of
    library l's nonzero counts; the centering makes rho a pure offset with
    the gene-level intercepts absorbing the grand mean.
    """
    log_uq = np.empty(cm.n_libraries)
    for l in range(cm.n_libraries):
        col = cm.counts[:, l]
        nonzero = col[col > 0]
        if nonzero.size == 0:
            raise IngestError(f"library {cm.libraries[l].name!r} is all zeros")
        log_uq[l] = np.log(np.percentile(nonzero, 75))
    return log_uq - log_uq.mean()


def split_by_chromosome(cm: CountMatrix, rho: np.ndarray) -> list[ChromosomeBlock]:
    """Partition the matrix into per-chromosome blocks ordered by position.

    Blocks appear in first-occurrence order of the chromosomes.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (cm.n_libraries,):
        raise IngestError("rho length must match the library count")
    order: list[str] = []
    by_chrom: dict[str, list[int]] = {}
    for idx, g in enumerate(cm.genes):
        if g.chromosome not in by_chrom:
            order.append(g.chromosome)
            by_chrom[g.chromosome] = []
        by_chrom[g.chromosome].append(idx)

    blocks = []
    for chrom in order:
        idx = np.array(by_chrom[chrom])
        pos = np.array([cm.genes[i].position for i in idx])
        idx = idx[np.argsort(pos, kind="stable")]
        genes = [cm.genes[i] for i in idx]
        blocks.append(ChromosomeBlock(chrom, genes, cm.libraries, cm.counts[idx], rho))
    return blocks
