"""Impression logs: loading, feature hashing, label validation and batching.

The canonical on-disk format is a UTF-8, tab-separated file with a header row.
Every schema field holds a string-valued categorical feature; the label columns
``y_ctr`` and ``y_cvr`` are located by name, not by position.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import LabelParseError, SchemaError
from .loss import ScenarioPartition

log = logging.getLogger(__name__)

LABEL_COLUMNS = ("y_ctr", "y_cvr")
DEFAULT_VOCAB_SIZE = 100_003
POLICIES = ("reject", "coerce")

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 20)
def hash_feature(field_name: str, raw_value: str, vocab_size: int = DEFAULT_VOCAB_SIZE) -> int:
    """Bucket of ``"field_name=raw_value"`` under FNV-1a 64, modulo ``vocab_size``."""
    if vocab_size < 1:
        raise ValueError("vocab_size must be >= 1")
    return fnv1a_64(f"{field_name}={raw_value}".encode("utf-8")) % vocab_size


@dataclass(frozen=True)
class Sample:
    feature_indices: tuple
    y_ctr: int
    y_cvr: int


@dataclass
class Dataset:
    """Column-oriented impression rows.

    ``features`` is an (n, F) int64 array of per-field indices, each column
    bounded by the matching entry of ``vocab_sizes``.
    """

    features: np.ndarray
    y_ctr: np.ndarray
    y_cvr: np.ndarray
    field_names: tuple = ()
    vocab_sizes: tuple = ()

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.int64)
        if features.ndim != 2:
            features = features.reshape(len(self.y_ctr), -1)
        self.features = features
        self.y_ctr = np.asarray(self.y_ctr, dtype=np.int8)
        self.y_cvr = np.asarray(self.y_cvr, dtype=np.int8)
        if not self.field_names:
            self.field_names = tuple(f"f{k}" for k in range(self.features.shape[1]))
        self.field_names = tuple(self.field_names)
        self.vocab_sizes = tuple(int(v) for v in self.vocab_sizes)

    def __len__(self):
        return len(self.y_ctr)

    def __getitem__(self, i) -> Sample:
        return Sample(tuple(int(v) for v in self.features[i]), int(self.y_ctr[i]), int(self.y_cvr[i]))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.y_ctr[idx], self.y_cvr[idx],
                       self.field_names, self.vocab_sizes)

    @property
    def y_ctcvr(self) -> np.ndarray:
        return self.y_ctr * self.y_cvr


@dataclass(frozen=True)
class DatasetStats:
    impressions: int
    clicks: int
    conversions: int
    ctr_ratio: float | None
    cvr_ratio: float | None
    ctcvr_ratio: float | None

    def to_text(self) -> str:
        def pct(x):
            return "absent" if x is None else f"{100 * x:.2f}%"

        return (
            f"impressions={self.impressions}\nclicks={self.clicks}\n"
            f"conversions={self.conversions}\nctr={pct(self.ctr_ratio)}\n"
            f"cvr={pct(self.cvr_ratio)}\nctcvr={pct(self.ctcvr_ratio)}\n"
        )


def _parse_label(cell, row, name):
    cell = cell.strip()
    if cell == "0":
        return 0
    if cell == "1":
        return 1
    raise LabelParseError(f"row {row}: {name}={cell!r} is not a 0/1 label", row=row)


def load_tsv(path, schema=None, policy="coerce", vocab_size=DEFAULT_VOCAB_SIZE):
    """Read a canonical TSV into a :class:`Dataset`.

    ``schema`` lists the feature columns (default: every non-label column in
    header order). Rows with ``y_cvr=1, y_ctr=0`` are either rejected with an
    error (``policy="reject"``) or stored with ``y_ctr=1``; the second return
    value counts such rows. Row numbers in errors are 1-based file lines.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        if schema is None:
            schema = [c for c in header if c not in LABEL_COLUMNS]
        schema = list(schema)
        missing = [c for c in schema + list(LABEL_COLUMNS) if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        cols = [header.index(c) for c in schema]
        i_ctr, i_cvr = header.index("y_ctr"), header.index("y_cvr")

        feats, ctr, cvr = [], [], []
        violations = 0
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}: row {line_no} has {len(row)} cells, header has {len(header)}")
            yc = _parse_label(row[i_ctr], line_no, "y_ctr")
            yv = _parse_label(row[i_cvr], line_no, "y_cvr")
            if yv == 1 and yc == 0:
                violations += 1
                if policy == "reject":
                    raise LabelParseError(f"row {line_no}: conversion without click", row=line_no)
                yc = 1
            feats.append([hash_feature(name, row[c], vocab_size) for name, c in zip(schema, cols)])
            ctr.append(yc)
            cvr.append(yv)
    if violations:
        log.warning("%s: %d conversion-without-click rows coerced to y_ctr=1", path, violations)
    features = np.array(feats, dtype=np.int64).reshape(len(ctr), len(schema))
    ds = Dataset(features, np.array(ctr), np.array(cvr), tuple(schema), (vocab_size,) * len(schema))
    return ds, violations


def write_tsv(path, field_names, raw_features, y_ctr, y_cvr):
    """Write rows of string features plus labels in canonical layout."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("\t".join(list(field_names) + list(LABEL_COLUMNS)) + "\n")
        for row, yc, yv in zip(raw_features, y_ctr, y_cvr):
            fh.write("\t".join(list(row) + [str(int(yc)), str(int(yv))]) + "\n")


def partition_batch(y_ctr, y_cvr, scores) -> ScenarioPartition:
    """Group a batch's scores into ctnocvr / cvr / zeros by their labels."""
    y_ctr = np.asarray(y_ctr)
    y_cvr = np.asarray(y_cvr)
    scores = np.asarray(scores, dtype=np.float64)
    if not (len(y_ctr) == len(y_cvr) == len(scores)):
        raise ValueError(
            f"alignment mismatch: {len(y_ctr)} y_ctr, {len(y_cvr)} y_cvr, {len(scores)} scores"
        )
    return ScenarioPartition.from_labels(scores, y_ctr, y_cvr)


def count_stats(impressions, clicks, conversions) -> DatasetStats:
    return DatasetStats(
        impressions,
        clicks,
        conversions,
        clicks / impressions if impressions else None,
        conversions / clicks if clicks else None,
        conversions / impressions if impressions else None,
    )


def stats(dataset: Dataset) -> DatasetStats:
    clicks = int(np.sum(dataset.y_ctr))
    conversions = int(np.sum(dataset.y_ctr * dataset.y_cvr))
    return count_stats(len(dataset), clicks, conversions)


def batch_iter(n_or_dataset, batch_size, seed=0, shuffle=True):
    """Yield index arrays covering every row once; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = n_or_dataset if isinstance(n_or_dataset, (int, np.integer)) else len(n_or_dataset)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def train_valid_split(dataset: Dataset, valid_fraction=0.2, seed=0):
    """Deterministic random split into (train, valid)."""
    n = len(dataset)
    order = np.random.default_rng([seed, 7]).permutation(n)
    n_valid = int(round(n * valid_fraction))
    return dataset.subset(np.sort(order[n_valid:])), dataset.subset(np.sort(order[:n_valid]))


# -- public Alibaba datasets -------------------------------------------------

# impressions / clicks / conversions of the full public datasets
PUBLISHED_COUNTS = {
    "FR": (27_035_601, 542_753, 14_430),
    "NL": (17_717_195, 381_078, 13_815),
    "US": (27_392_613, 449_608, 10_830),
    "CCP": (85_316_519, 3_317_703, 17_167),
}


@dataclass
class AliExpressLayout:
    """Column layout assumed for the AliExpress country CSVs (FR/NL/US).

    The common mirror ships ``train.csv``/``test.csv`` with a header of
    ``search_id, categorical_1..16, numerical_1..63, click, conversion``
    (comma separated). Numerical columns are bucketised to one decimal.
    For Ali-CCP, use a pre-flattened CSV with the same label column names.
    """

    delimiter: str = ","
    click: str = "click"
    conversion: str = "conversion"
    categorical_prefix: str = "categorical_"
    numerical_prefix: str = "numerical_"
    skip: tuple = ("search_id",)


def adapter_stats(paths, layout: AliExpressLayout | None = None) -> DatasetStats:
    """Label counts over one or more raw public files, without loading features.

    Conversions are counted as rows with both click and conversion set, so
    conversion-without-click artifacts are ignored.
    """
    layout = layout or AliExpressLayout()
    if isinstance(paths, (str, Path)):
        paths = [paths]
    imps = clicks = convs = 0
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh, delimiter=layout.delimiter)
            header = next(reader)
            try:
                ic, iv = header.index(layout.click), header.index(layout.conversion)
            except ValueError:
                raise SchemaError(f"{path}: needs {layout.click!r} and {layout.conversion!r}") from None
            for row in reader:
                if not row:
                    continue
                imps += 1
                c = row[ic].strip() in ("1", "1.0")
                clicks += c
                convs += c and row[iv].strip() in ("1", "1.0")
    return count_stats(imps, clicks, convs)


def check_published_counts(s: DatasetStats, name: str) -> list:
    """Mismatches between ``s`` and the published counts for dataset ``name``."""
    expected = PUBLISHED_COUNTS[name.upper()]
    got = (s.impressions, s.clicks, s.conversions)
    labels = ("impressions", "clicks", "conversions")
    return [f"{k}: expected {e}, got {g}" for k, e, g in zip(labels, expected, got) if e != g]


def convert_aliexpress(src, dst, layout: AliExpressLayout | None = None):
    """Rewrite an AliExpress CSV as a canonical TSV; returns the schema used."""
    layout = layout or AliExpressLayout()
    with open(src, newline="", encoding="utf-8") as fin, open(dst, "w", encoding="utf-8") as fout:
        reader = csv.reader(fin, delimiter=layout.delimiter)
        header = next(reader)
        keep = [
            (i, name) for i, name in enumerate(header)
            if name.startswith((layout.categorical_prefix, layout.numerical_prefix))
            and name not in layout.skip
        ]
        ic, iv = header.index(layout.click), header.index(layout.conversion)
        fout.write("\t".join([n for _, n in keep] + list(LABEL_COLUMNS)) + "\n")
        for row in reader:
            if not row:
                continue
            cells = []
            for i, name in keep:
                v = row[i].strip()
                if name.startswith(layout.numerical_prefix):
                    v = _bucket(v)
                cells.append(v.replace("\t", " "))
            yc = "1" if row[ic].strip() in ("1", "1.0") else "0"
            yv = "1" if row[iv].strip() in ("1", "1.0") else "0"
            fout.write("\t".join(cells + [yc, yv]) + "\n")
    return [n for _, n in keep]


def _bucket(value):
    try:
        return str(int(np.floor(float(value) * 10)))
    except ValueError:
        return value
