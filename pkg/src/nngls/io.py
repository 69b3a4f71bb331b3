"""File formats: dataset and result CSVs, model JSON and run manifests."""

from __future__ import annotations

import csv
import json
import os
import re
import tempfile

import numpy as np

from .spatial_core import SpatialDataset
from .trainer import FitResult


class InputError(ValueError):
    """Malformed or incomplete input file."""


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "sigma2", "phi", "tau2")
PREDICTION_COLUMNS = ("s1", "s2", "y_hat", "sigma0", "pi_lower", "pi_upper")
BAND_COLUMNS = ("query_id", "lower", "upper")

_X_COL = re.compile(r"^x(\d+)$")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _read_table(path) -> tuple:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    if not rows:
        raise InputError(f"{path}: empty file (no header)")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise InputError(f"{path}: line {k} has {len(r)} fields, header has {len(header)}")
    try:
        data = np.array(body, dtype=np.float64).reshape(len(body), len(header))
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric entry ({exc})") from None
    return header, data


def _x_columns(header, path, d=None) -> list:
    idx = sorted(int(m.group(1)) for h in header if (m := _X_COL.match(h)))
    if d is None:
        if not idx:
            raise InputError(f"{path}: missing column 'x1'")
        d = max(idx)
    for k in range(1, d + 1):
        if k not in idx:
            raise InputError(f"{path}: missing column 'x{k}'")
    return [header.index(f"x{k}") for k in range(1, d + 1)]


def _column(header, data, name, path):
    if name not in header:
        raise InputError(f"{path}: missing column '{name}'")
    return data[:, header.index(name)]


def read_dataset_csv(path) -> SpatialDataset:
    """Read columns ``x1..xd, y, s1, s2`` (any order, extra columns ignored)."""
    header, data = _read_table(path)
    xc = _x_columns(header, path)
    y = _column(header, data, "y", path)
    S = np.column_stack([_column(header, data, "s1", path), _column(header, data, "s2", path)])
    return SpatialDataset(data[:, xc], y, S)


def read_query_csv(path, d: int) -> tuple:
    """Covariates ``x1..xd`` and coordinates ``s1, s2`` of query rows; returns ``(X0, S0)``."""
    header, data = _read_table(path)
    xc = _x_columns(header, path, d)
    S0 = np.column_stack([_column(header, data, "s1", path), _column(header, data, "s2", path)])
    return data[:, xc].reshape(-1, d), S0


def read_covariates_csv(path, d: int) -> np.ndarray:
    header, data = _read_table(path)
    return data[:, _x_columns(header, path, d)].reshape(-1, d)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_dataset_csv(path, dataset: SpatialDataset):
    cols = [f"x{k + 1}" for k in range(dataset.d)] + ["y", "s1", "s2"]
    write_csv(path, cols, np.column_stack([dataset.X, dataset.Y, dataset.S]))


def write_truth_csv(path, f_true, effect):
    write_csv(path, ("f_true", "effect"), np.column_stack([f_true, effect]))


def write_history_csv(path, history):
    rows = [[h[c] for c in HISTORY_COLUMNS] for h in history if all(c in h for c in HISTORY_COLUMNS)]
    write_csv(path, HISTORY_COLUMNS, rows)


def write_predictions_csv(path, result, S0):
    cols = result.to_columns(S0)
    write_csv(path, PREDICTION_COLUMNS, np.column_stack([cols[c] for c in PREDICTION_COLUMNS])
              if len(cols["s1"]) else [])


def write_band_csv(path, band):
    rows = [(q, lo, hi) for q, (lo, hi) in enumerate(zip(band.lower, band.upper))]
    write_csv(path, BAND_COLUMNS, rows)


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: malformed JSON ({exc})") from None


def atomic_write_json(path, obj):
    """Write JSON through a temporary file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model_json(path, fit: FitResult):
    atomic_write_json(path, fit.to_dict())


def load_model_json(path) -> FitResult:
    d = read_json(path)
    try:
        return FitResult.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: invalid model file ({type(exc).__name__}: {exc})") from None
