"""Cohort tables, clinical CSV loading, covariate preprocessing, volume file IO."""

import csv
import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, ParseError
from .survival import records_from_arrays
from .volume import N_CHANNELS, Volume

CSV_COLUMNS = ("id", "age_years", "sex", "resection", "mgmt", "time_months", "event")

VOCABS = {
    "sex": ("male", "female"),
    "resection": ("GTR", "NTR", "NA"),
    "mgmt": ("methylated", "unmethylated", "NA"),
}

VOLUME_MAGIC = b"MMGS"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<4sHHIII")


@dataclass(frozen=True)
class CohortTable:
    """One clinical row per patient, plus an optional volume reference each."""

    ids: tuple
    age: np.ndarray
    sex: tuple
    resection: tuple
    mgmt: tuple
    time: np.ndarray
    event: np.ndarray
    volume_refs: tuple = None

    def __post_init__(self):
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise ParseError("duplicate patient identifiers")
        for name in ("sex", "resection", "mgmt"):
            for v in getattr(self, name):
                if v not in VOCABS[name]:
                    raise ParseError(f"{name} value {v!r} outside vocabulary")
        if np.any(self.time <= 0):
            raise ParseError("time_months must be > 0")
        if self.volume_refs is not None and len(self.volume_refs) != n:
            raise ParseError("volume references must align with rows")

    def __len__(self):
        return len(self.ids)

    def records(self):
        return records_from_arrays(self.time, self.event)

    def subset(self, idx):
        idx = np.asarray(idx)
        refs = (
            None
            if self.volume_refs is None
            else tuple(self.volume_refs[i] for i in idx)
        )
        return replace(
            self,
            ids=tuple(self.ids[i] for i in idx),
            age=self.age[idx],
            sex=tuple(self.sex[i] for i in idx),
            resection=tuple(self.resection[i] for i in idx),
            mgmt=tuple(self.mgmt[i] for i in idx),
            time=self.time[idx],
            event=self.event[idx],
            volume_refs=refs,
        )


def load_clinical_csv(path):
    """Parse a clinical cohort CSV.

    Empty cells in categorical columns become the explicit NA level where the
    vocabulary carries one (resection, mgmt); empty continuous cells and
    out-of-vocabulary values are parse errors naming the row. Extra columns
    are ignored with a warning.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"{path}: missing required columns {missing}")
        extra = [c for c in header if c not in CSV_COLUMNS]
        if extra:
            warnings.warn(f"{path}: ignoring extra columns {extra}", stacklevel=2)
        col = {c: header.index(c) for c in CSV_COLUMNS}

        ids, age, sex, resection, mgmt, time, event = [], [], [], [], [], [], []
        seen = set()
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise ParseError(f"{path}:{rownum}: expected {len(header)} cells")

            def cell(name):
                return row[col[name]].strip()

            pid = cell("id")
            if not pid:
                raise ParseError(f"{path}:{rownum}: empty id")
            if pid in seen:
                raise ParseError(f"{path}:{rownum}: duplicate id {pid!r}")
            seen.add(pid)

            raw_age = cell("age_years")
            if not raw_age:
                raise ParseError(f"{path}:{rownum}: empty age_years (continuous NA unsupported)")
            try:
                age_v = float(raw_age)
            except ValueError:
                raise ParseError(f"{path}:{rownum}: malformed age_years {raw_age!r}") from None

            cats = {}
            for name in ("sex", "resection", "mgmt"):
                v = cell(name) or "NA"
                if v not in VOCABS[name]:
                    raise ParseError(
                        f"{path}:{rownum}: {name} value {v!r} outside vocabulary {VOCABS[name]}"
                    )
                cats[name] = v

            raw_t = cell("time_months")
            try:
                t_v = float(raw_t)
            except ValueError:
                raise ParseError(f"{path}:{rownum}: malformed time_months {raw_t!r}") from None
            if not np.isfinite(t_v) or t_v <= 0:
                raise ParseError(f"{path}:{rownum}: time_months must be > 0, got {raw_t!r}")

            raw_e = cell("event")
            if raw_e not in ("0", "1"):
                raise ParseError(f"{path}:{rownum}: event must be 0 or 1, got {raw_e!r}")

            ids.append(pid)
            age.append(age_v)
            sex.append(cats["sex"])
            resection.append(cats["resection"])
            mgmt.append(cats["mgmt"])
            time.append(t_v)
            event.append(int(raw_e))

    if not ids:
        raise ParseError(f"{path}: no data rows")
    return CohortTable(
        ids=tuple(ids),
        age=np.asarray(age, dtype=np.float64),
        sex=tuple(sex),
        resection=tuple(resection),
        mgmt=tuple(mgmt),
        time=np.asarray(time, dtype=np.float64),
        event=np.asarray(event, dtype=np.int64),
    )


def write_clinical_csv(path, table):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for i in range(len(table)):
            writer.writerow(
                [
                    table.ids[i],
                    repr(float(table.age[i])),
                    table.sex[i],
                    table.resection[i],
                    table.mgmt[i],
                    repr(float(table.time[i])),
                    int(table.event[i]),
                ]
            )


# ---------------------------------------------------------------------------
# covariate preprocessing


def fit_scaler(table):
    """Training-split min/max for the continuous covariates."""
    return {"age_min": float(table.age.min()), "age_max": float(table.age.max())}


def _scale_age(age, scaler):
    lo, hi = scaler["age_min"], scaler["age_max"]
    if hi <= lo:
        return np.zeros_like(age)
    return np.clip(2.0 * (age - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def preprocess_clinical(table, scaler):
    """Covariate matrix for the networks: age scaled to [-1, 1] with training
    min/max (values outside clamp), categoricals one-hot with their NA level.

    Returns (matrix, schema) where schema names the columns in order.
    """
    cols = [_scale_age(table.age, scaler)]
    schema = ["age"]
    for name in ("sex", "resection", "mgmt"):
        values = getattr(table, name)
        for level in VOCABS[name]:
            cols.append(np.array([1.0 if v == level else 0.0 for v in values]))
            schema.append(f"{name}={level}")
    return np.column_stack(cols), schema


def cox_design(table, scaler):
    """Reference-coded design for Cox fits (first level of each categorical
    dropped to keep the design full-rank)."""
    cols = [_scale_age(table.age, scaler)]
    schema = ["age"]
    for name in ("sex", "resection", "mgmt"):
        values = getattr(table, name)
        for level in VOCABS[name][1:]:
            cols.append(np.array([1.0 if v == level else 0.0 for v in values]))
            schema.append(f"{name}={level}")
    return np.column_stack(cols), schema


# ---------------------------------------------------------------------------
# volume binary IO


def write_volume(path, volume):
    """MMGS binary: magic, u16 version, u16 channels, u32 D/H/W, f32 payload."""
    c, d, h, w = volume.data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, c, d, h, w))
        fh.write(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())


def read_volume(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, channels, d, h, w = _HEADER.unpack(head)
        if magic != VOLUME_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VOLUME_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if channels != N_CHANNELS:
            raise FormatError(f"{path}: expected {N_CHANNELS} channels, got {channels}")
        payload = fh.read()
    expected = channels * d * h * w * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, dims imply {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(channels, d, h, w)
    return Volume(data.copy())
