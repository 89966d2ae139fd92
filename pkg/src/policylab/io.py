"""Dataset, truth and fold-plan file formats.

CSV (interchange): columns ``f0..f{m-1}, t, y`` plus a JSON sidecar
``<file>.meta.json`` holding the schema and propensity table.

Binary (performance), little-endian::

    magic b"PLDS" | u32 version | u32 header_len | header JSON
    | i32[N] per feature column | i32[N] treatment | f64[N] outcome

Propensities are not stored per row; they are the design constants of the
header's propensity table.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import pandas as pd

from .core import DataValidationError, Dataset, FoldPlan, Schema, require_valid

FORMAT_VERSION = 1
DATASET_MAGIC = b"PLDS"
TRUTH_MAGIC = b"PLTR"


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _header(d: Dataset) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "schema": d.schema.to_dict(),
        "propensity_table": list(d.propensity_table),
        "n_rows": d.n_rows,
        "schema_hash": d.schema_hash,
    }


def _from_header(header: dict, features, treatment, outcome) -> Dataset:
    if header.get("format_version") != FORMAT_VERSION:
        raise DataValidationError(f"unsupported dataset format version {header.get('format_version')}")
    schema = Schema.from_dict(header["schema"])
    if len(treatment) != header["n_rows"]:
        raise DataValidationError(f"header says {header['n_rows']} rows, file has {len(treatment)}")
    t = np.asarray(treatment, dtype=np.int64)
    table = np.asarray(header["propensity_table"], dtype=np.float64)
    if table.shape != (schema.arm_count,):
        raise DataValidationError("propensity table length does not match arm count")
    valid_t = (t >= 0) & (t < schema.arm_count)
    prop = np.where(valid_t, table[np.clip(t, 0, schema.arm_count - 1)], np.nan)
    return Dataset(schema, features, t, outcome, prop, tuple(table))


def write_csv(d: Dataset, path: str | Path) -> Path:
    path = Path(path)
    frame = pd.DataFrame({f"f{j}": d.features[:, j] for j in range(d.schema.n_features)})
    frame["t"] = d.treatment
    frame["y"] = d.outcome
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    meta = Path(str(path) + ".meta.json")
    meta.write_text(json.dumps(_header(d), indent=2, sort_keys=True) + "\n")
    return path


def read_csv(path: str | Path, validate: bool = True) -> Dataset:
    path = Path(path)
    meta = Path(str(path) + ".meta.json")
    if not meta.exists():
        raise DataValidationError(f"missing metadata sidecar {meta}")
    header = json.loads(meta.read_text())
    m = len(header["schema"]["feature_cardinalities"])
    frame = pd.read_csv(path, float_precision="round_trip")
    expected = [f"f{j}" for j in range(m)] + ["t", "y"]
    if list(frame.columns) != expected:
        raise DataValidationError(f"CSV columns {list(frame.columns)} != {expected}")
    d = _from_header(
        header,
        frame[expected[:m]].to_numpy(np.int64),
        frame["t"].to_numpy(np.int64),
        frame["y"].to_numpy(np.float64),
    )
    return require_valid(d) if validate else d


def write_binary(d: Dataset, path: str | Path) -> Path:
    path = Path(path)
    header = json.dumps(_header(d), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header)
        for j in range(d.schema.n_features):
            fh.write(d.features[:, j].astype("<i4").tobytes())
        fh.write(d.treatment.astype("<i4").tobytes())
        fh.write(d.outcome.astype("<f8").tobytes())
    return path


def read_binary(path: str | Path, validate: bool = True) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise DataValidationError(f"{path} is not a binary dataset file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise DataValidationError(f"unsupported dataset format version {version}")
    header = json.loads(raw[12 : 12 + hlen])
    n, m = header["n_rows"], len(header["schema"]["feature_cardinalities"])
    off = 12 + hlen
    expected = off + n * (4 * m + 4 + 8)
    if len(raw) != expected:
        raise DataValidationError(f"{path}: expected {expected} bytes, found {len(raw)}")
    cols = np.frombuffer(raw, dtype="<i4", count=n * (m + 1), offset=off).reshape(m + 1, n)
    y = np.frombuffer(raw, dtype="<f8", count=n, offset=off + 4 * n * (m + 1))
    d = _from_header(header, cols[:m].T.astype(np.int64), cols[m].astype(np.int64), y.astype(np.float64))
    return require_valid(d) if validate else d


def read_dataset(path: str | Path, validate: bool = True) -> Dataset:
    """Load either format, chosen by content (binary magic) or ``.csv`` suffix."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == DATASET_MAGIC:
        return read_binary(path, validate)
    return read_csv(path, validate)


def write_truth(potential_outcomes: np.ndarray, dataset_path: str | Path, path: str | Path) -> Path:
    """Truth sidecar: N x K conditional means, bound to a dataset file by its SHA-256.

    Layout: magic | u32 version | u64 N | u32 K | 32-byte dataset digest | f64[N*K] row-major.
    """
    mu = np.ascontiguousarray(potential_outcomes, dtype="<f8")
    digest = bytes.fromhex(file_sha256(dataset_path))
    with open(path, "wb") as fh:
        fh.write(TRUTH_MAGIC + struct.pack("<IQI", FORMAT_VERSION, mu.shape[0], mu.shape[1]) + digest)
        fh.write(mu.tobytes())
    return Path(path)


def read_truth(path: str | Path, dataset_path: str | Path | None = None) -> np.ndarray:
    """Return the potential-outcome matrix; verify the binding if ``dataset_path`` is given."""
    raw = Path(path).read_bytes()
    if raw[:4] != TRUTH_MAGIC:
        raise DataValidationError(f"{path} is not a truth file")
    version, n, k = struct.unpack_from("<IQI", raw, 4)
    if version != FORMAT_VERSION:
        raise DataValidationError(f"unsupported truth format version {version}")
    digest = raw[20:52].hex()
    if dataset_path is not None and digest != file_sha256(dataset_path):
        raise DataValidationError(f"truth file {path} does not belong to dataset {dataset_path}")
    if len(raw) != 52 + 8 * n * k:
        raise DataValidationError(f"{path}: truncated truth matrix")
    return np.frombuffer(raw, dtype="<f8", offset=52).reshape(n, k).astype(np.float64)


def write_fold_plan(plan: FoldPlan, path: str | Path) -> Path:
    Path(path).write_text(json.dumps(plan.to_dict(), separators=(",", ":")) + "\n")
    return Path(path)


def read_fold_plan(path: str | Path) -> FoldPlan:
    return FoldPlan.from_dict(json.loads(Path(path).read_text()))
