"""Clinical table parsing, encoding, correlation audit and logistic-regression baseline."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ClinicalParseError, ConfigurationError, DivergenceError

CLINICAL_HEADER = [
    "patient_id", "age", "tumor_size", "tumor_type", "er", "pr", "her2", "her2_expr",
    "grade", "surgery", "ki67", "subtype", "lnm_count", "aln_label",
]

ALN_LABELS = ["N0", "N1-2", "N2+"]

VOCABULARIES = {
    "tumor_type": ["Invasive ductal carcinoma", "Invasive lobular carcinoma", "Other type"],
    "er": ["Positive", "Negative"],
    "pr": ["Positive", "Negative"],
    "her2": ["Positive", "Negative"],
    "her2_expr": ["0", "1+", "2+", "3+"],
    "grade": ["1", "2", "3"],
    "surgery": ["ALND", "SLNB"],
    "subtype": ["Luminal A", "Luminal B", "Triple negative", "HER2(+)"],
}

NUMERIC = ("age", "tumor_size", "ki67")

# feature subset fed to the fusion model
SELECTED_FEATURES = [("age", "numeric"), ("tumor_size", "numeric"),
                     ("er", "categorical"), ("pr", "categorical"), ("her2", "categorical")]
# lnm_count is excluded: it determines the label
ALL_FEATURES = [("age", "numeric"), ("tumor_size", "numeric"), ("ki67", "numeric")] + [
    (name, "categorical") for name in VOCABULARIES
]


@dataclass
class ClinicalRecord:
    patient_id: str
    age: float
    tumor_size: float
    tumor_type: str
    er: str
    pr: str
    her2: str
    her2_expr: str
    grade: str
    surgery: str
    ki67: float
    subtype: str
    lnm_count: int
    aln_label: str

    def label(self, task: str = "binary") -> int:
        idx = ALN_LABELS.index(self.aln_label)
        return idx if task == "multiclass" else int(idx > 0)


def parse_clinical(path) -> list[ClinicalRecord]:
    """Read the clinical CSV; every invalid row is reported with its line number."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ClinicalParseError(f"{path}: empty file")
        missing = [c for c in CLINICAL_HEADER if c not in header]
        if missing:
            raise ClinicalParseError(f"{path}: missing required column(s) {', '.join(missing)}")
        if header != CLINICAL_HEADER:
            raise ClinicalParseError(f"{path}: header must be exactly {','.join(CLINICAL_HEADER)}")
        records, problems = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                records.append(_parse_row(row))
            except ClinicalParseError as exc:
                problems.append(f"row {lineno}: {exc}")
    if problems:
        raise ClinicalParseError(f"{path}: " + "; ".join(problems))
    ids = [r.patient_id for r in records]
    if len(set(ids)) != len(ids):
        raise ClinicalParseError(f"{path}: duplicate patient_id values")
    return records


def _parse_row(row: list[str]) -> ClinicalRecord:
    if len(row) != len(CLINICAL_HEADER):
        raise ClinicalParseError(f"expected {len(CLINICAL_HEADER)} fields, got {len(row)}")
    values = dict(zip(CLINICAL_HEADER, (v.strip() for v in row)))
    for col, v in values.items():
        if v == "":
            raise ClinicalParseError(f"column {col}: missing value")
    out = {"patient_id": values["patient_id"]}
    for col in NUMERIC:
        try:
            out[col] = float(values[col])
        except ValueError:
            raise ClinicalParseError(f"column {col}: cannot parse {values[col]!r} as a number") from None
        if not math.isfinite(out[col]):
            raise ClinicalParseError(f"column {col}: non-finite value")
    try:
        out["lnm_count"] = int(values["lnm_count"])
    except ValueError:
        raise ClinicalParseError(f"column lnm_count: cannot parse {values['lnm_count']!r} as an integer") from None
    for col, vocab in VOCABULARIES.items():
        if values[col] not in vocab:
            raise ClinicalParseError(f"column {col}: unknown category {values[col]!r}")
        out[col] = values[col]
    if values["aln_label"] not in ALN_LABELS:
        raise ClinicalParseError(f"column aln_label: unknown label {values['aln_label']!r}")
    out["aln_label"] = values["aln_label"]
    rec = ClinicalRecord(**out)
    validate_record(rec)
    return rec


def validate_record(rec: ClinicalRecord) -> None:
    if rec.age <= 0:
        raise ClinicalParseError("column age: must be positive")
    if rec.tumor_size < 0:
        raise ClinicalParseError("column tumor_size: must be non-negative")
    if not 0 <= rec.ki67 <= 100:
        raise ClinicalParseError("column ki67: must lie in [0, 100]")
    if rec.lnm_count < 0:
        raise ClinicalParseError("column lnm_count: must be non-negative")
    if (rec.lnm_count == 0) != (rec.aln_label == "N0"):
        raise ClinicalParseError(f"lnm_count {rec.lnm_count} is inconsistent with label {rec.aln_label}")


def write_clinical(path, records: Sequence[ClinicalRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CLINICAL_HEADER)
        for r in records:
            writer.writerow([r.patient_id, f"{r.age:g}", f"{r.tumor_size:g}", r.tumor_type, r.er, r.pr,
                             r.her2, r.her2_expr, r.grade, r.surgery, f"{r.ki67:g}", r.subtype,
                             r.lnm_count, r.aln_label])


# -- encoding -------------------------------------------------------------------

def standardize(values, stats: tuple[float, float] | None = None):
    """Z-score ``values`` with population std.

    Pass the training cohort's ``stats`` to encode validation/test data.
    """
    x = np.asarray(values, dtype=np.float64)
    if stats is None:
        mean = float(x.mean())
        std = float(x.std())
        if std == 0:
            raise ConfigurationError("zero standard deviation: constant feature must be dropped")
        stats = (mean, std)
    mean, std = stats
    return (x - mean) / std, stats


def one_hot(value, vocabulary: Sequence) -> np.ndarray:
    try:
        idx = list(vocabulary).index(value)
    except ValueError:
        raise ClinicalParseError(f"unknown category {value!r}; expected one of {list(vocabulary)}") from None
    out = np.zeros(len(vocabulary))
    out[idx] = 1.0
    return out


@dataclass
class ClinicalEncoder:
    """Feature schema plus training-cohort statistics for standardized columns."""

    features: list = field(default_factory=lambda: list(SELECTED_FEATURES))
    stats: dict = field(default_factory=dict)

    @property
    def schema(self) -> list[tuple[str, str]]:
        slots = []
        for name, kind in self.features:
            if kind == "numeric":
                slots.append((name, "standardized"))
            else:
                slots.extend((f"{name}={v}", "one-hot") for v in VOCABULARIES[name])
        return slots

    @property
    def dim(self) -> int:
        return len(self.schema)

    def fit(self, records: Sequence[ClinicalRecord]) -> "ClinicalEncoder":
        self.stats = {}
        for name, kind in self.features:
            if kind == "numeric":
                _, self.stats[name] = standardize([getattr(r, name) for r in records])
        return self

    def transform(self, records: Sequence[ClinicalRecord]) -> np.ndarray:
        if not records:
            return np.zeros((0, self.dim))
        cols = []
        for name, kind in self.features:
            if kind == "numeric":
                if name not in self.stats:
                    raise ConfigurationError("encoder must be fitted on the training cohort first")
                z, _ = standardize([getattr(r, name) for r in records], self.stats[name])
                cols.append(z[:, None])
            else:
                cols.append(np.stack([one_hot(getattr(r, name), VOCABULARIES[name]) for r in records]))
        return np.hstack(cols)


def select_features(records: Sequence[ClinicalRecord] = (), mode: str = "selected") -> ClinicalEncoder:
    """Return the encoder for the fusion model.

    ``mode="selected"`` is age, tumor size and ER/PR/HER2 status; ``"all"``
    uses every clinical column except ``lnm_count``. Fits on ``records`` when given.
    """
    if mode == "selected":
        enc = ClinicalEncoder(list(SELECTED_FEATURES))
    elif mode == "all":
        enc = ClinicalEncoder(list(ALL_FEATURES))
    else:
        raise ConfigurationError(f"unknown clinical feature mode {mode!r}")
    if records:
        enc.fit(records)
    return enc


def encode_for_correlation(records: Sequence[ClinicalRecord], task: str = "binary"):
    """Numeric matrix for the correlation audit: raw numerics, one-hot categoricals, and the outcome."""
    names, cols = [], []
    for name in NUMERIC:
        names.append(name)
        cols.append([getattr(r, name) for r in records])
    for name, vocab in VOCABULARIES.items():
        for v in vocab:
            names.append(f"{name}={v}")
            cols.append([float(getattr(r, name) == v) for r in records])
    names.append("aln_label")
    cols.append([r.label(task) for r in records])
    return names, np.asarray(cols, dtype=np.float64).T


def correlation_matrix(data: np.ndarray) -> np.ndarray:
    """Pearson correlation between columns of ``data``.

    Rows/columns of zero-variance features are NaN (undefined), including their
    diagonal entry; every other diagonal entry is exactly 1.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] < 2:
        raise ValueError("correlation needs at least two records")
    centered = data - data.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    defined = norms > 0
    safe = np.where(defined, norms, 1.0)
    unit = centered / safe
    corr = np.clip(unit.T @ unit, -1.0, 1.0)
    corr = (corr + corr.T) / 2
    np.fill_diagonal(corr, 1.0)
    corr[~defined, :] = np.nan
    corr[:, ~defined] = np.nan
    return corr


def write_correlation(path, names: Sequence[str], corr: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["feature", *names])
        for name, row in zip(names, corr):
            writer.writerow([name, *("NA" if np.isnan(v) else f"{v:.6f}" for v in row)])


# -- logistic regression baseline -----------------------------------------------

@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float = 0.0


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def lr_predict(model: LogisticModel, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    p = sigmoid(x @ model.weights + model.bias)
    return float(p) if p.ndim == 0 else p


def lr_fit(x, y, epochs: int = 5000, lr: float = 0.1) -> LogisticModel:
    """Full-batch gradient descent on mean binary cross-entropy, no regularization."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    n = len(y)
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(epochs):
        t = x @ w + b
        p = sigmoid(t)
        # log(1 + e^t) - y t, stable form
        loss = float(np.mean(np.logaddexp(0.0, t) - y * t))
        if not math.isfinite(loss):
            raise DivergenceError(f"logistic regression diverged (loss {loss}); try a smaller lr")
        err = p - y
        w -= lr * (x.T @ err) / n
        b -= lr * float(err.mean())
    if not (np.all(np.isfinite(w)) and math.isfinite(b)):
        raise DivergenceError("logistic regression parameters became non-finite; try a smaller lr")
    return LogisticModel(w, b)
