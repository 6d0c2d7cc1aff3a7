"""File formats: series CSV, columnar binary series, truth JSON and run configs.

Series CSV files carry one column per channel (header row = channel labels)
and one row per time point.  The binary format ``.gcts`` is columnar: a magic
line, a JSON header declaring ``n``, ``T`` and ``labels``, then the ``n``
channels as contiguous little-endian float64 columns of length ``T``.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import yaml

from .exceptions import ValidationError
from .var_core import GroundTruth, GroundTruthSpec

BINARY_MAGIC = b"GCTS1\n"
BINARY_SUFFIX = ".gcts"


def default_labels(n: int) -> list[str]:
    return [f"x{i + 1}" for i in range(n)]


def write_series_csv(path, series: np.ndarray, labels=None) -> None:
    """Write an (n, T) array with channels as columns."""
    series = np.asarray(series, dtype=float)
    labels = list(labels) if labels is not None else default_labels(series.shape[0])
    if len(labels) != series.shape[0]:
        raise ValidationError("one label per channel required")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(labels)
        for row in series.T:
            writer.writerow([repr(float(v)) for v in row])


def read_series_csv(path) -> tuple[np.ndarray, list[str]]:
    """Return the (n, T) array and channel labels."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty series file")
    labels = rows[0]
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric entry ({exc})") from None
    if data.size == 0 or data.shape[1] != len(labels):
        raise ValidationError(f"{path}: expected {len(labels)} columns per row")
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{path}: non-finite values")
    return data.T.copy(), labels


def write_series_binary(path, series: np.ndarray, labels=None) -> None:
    series = np.asarray(series, dtype="<f8")
    n, T = series.shape
    labels = list(labels) if labels is not None else default_labels(n)
    header = json.dumps({"n": n, "T": T, "labels": labels}).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(header)
        fh.write(np.ascontiguousarray(series).tobytes())


def read_series_binary(path) -> tuple[np.ndarray, list[str]]:
    with open(path, "rb") as fh:
        if fh.readline() != BINARY_MAGIC:
            raise ValidationError(f"{path}: not a binary series file")
        header = json.loads(fh.readline())
        payload = fh.read()
    n, T = int(header["n"]), int(header["T"])
    if len(payload) != 8 * n * T:
        raise ValidationError(f"{path}: header declares ({n}, {T}) but payload has {len(payload) // 8} values")
    data = np.frombuffer(payload, dtype="<f8").reshape(n, T).astype(float)
    return data, list(header.get("labels") or default_labels(n))


def read_series(path) -> tuple[np.ndarray, list[str]]:
    path = Path(path)
    if path.suffix == BINARY_SUFFIX:
        return read_series_binary(path)
    return read_series_csv(path)


def write_series(path, series, labels=None) -> None:
    path = Path(path)
    if path.suffix == BINARY_SUFFIX:
        write_series_binary(path, series, labels)
    else:
        write_series_csv(path, series, labels)


def series_files(directory) -> list[Path]:
    """Series files of a directory in sorted name order."""
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix in (".csv", BINARY_SUFFIX)
                   and p.stem.startswith("series"))
    if not files:
        raise ValidationError(f"no series files in {directory}")
    return files


def read_panel_series(paths) -> tuple[list[np.ndarray], list[str]]:
    series, labels = [], None
    for p in paths:
        s, lab = read_series(p)
        if labels is not None and lab != labels:
            raise ValidationError(f"{p}: channel labels differ from the first series")
        labels = lab
        series.append(s)
    return series, labels


def truth_to_json(truth: GroundTruth) -> dict:
    data = truth.to_json_dict()
    spec = truth.spec
    data["spec"] = {"n": spec.n, "p": spec.p, "K": spec.K, "T": spec.T,
                    "common_density": spec.common_density,
                    "differential_density": spec.differential_density,
                    "fused": spec.fused, "self_lags": spec.self_lags}
    data["coefs"] = truth.coefs.tolist()
    return data


def write_truth(path, truth: GroundTruth) -> None:
    with open(path, "w") as fh:
        json.dump(truth_to_json(truth), fh, indent=1, sort_keys=True)


def _mask(adjacency: dict, n: int) -> np.ndarray:
    m = np.zeros((n, n), dtype=bool)
    for i, js in adjacency.items():
        m[int(i), [int(j) for j in js]] = True
    return m


def read_truth(path) -> GroundTruth:
    with open(path) as fh:
        data = json.load(fh)
    n, K = int(data["n"]), int(data["K"])
    s = data.get("spec", {})
    spec = GroundTruthSpec(n, int(data["p"]), K, int(s.get("T", 2 * int(data["p"]) + 2)),
                           float(s.get("common_density", 0.0)), float(s.get("differential_density", 0.0)),
                           bool(s.get("fused", False)), None, bool(s.get("self_lags", False)))
    common = _mask(data["common"], n)
    differential = np.stack([_mask(data["differential"][str(k)], n) for k in range(K)])
    coefs = np.asarray(data["coefs"], dtype=float) if "coefs" in data else np.zeros((K, spec.p, n, n))
    return GroundTruth(spec, coefs, common, differential)


def write_support(path, support: np.ndarray, labels=None) -> None:
    """Estimated supports as JSON adjacency lists keyed by model index (row i lists causes j)."""
    support = np.asarray(support, dtype=bool)
    data = {"n": int(support.shape[1]), "K": int(support.shape[0]),
            "labels": list(labels) if labels is not None else default_labels(support.shape[1]),
            "models": {str(k): {str(i): [int(j) for j in np.flatnonzero(support[k, i])]
                                for i in range(support.shape[1])} for k in range(support.shape[0])}}
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)


def read_support(path) -> np.ndarray:
    with open(path) as fh:
        data = json.load(fh)
    models = data["models"]
    n = int(data["n"])
    try:
        return np.stack([_mask(models[str(k)], n) for k in range(int(data["K"]))])
    except KeyError as exc:
        raise ValidationError(f"{path}: missing model {exc}") from None


def write_coefs(path, coefs: np.ndarray, labels=None) -> None:
    coefs = np.asarray(coefs, dtype=float)
    np.savez(path, coefs=coefs, labels=np.array(labels if labels is not None else default_labels(coefs.shape[-1])))


def read_coefs(path) -> tuple[np.ndarray, list[str]]:
    with np.load(path) as f:
        return f["coefs"], [str(s) for s in f["labels"]]


def load_config(path) -> dict:
    """Read a YAML run config; an empty file gives an empty dict."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: config must be a mapping")
    return data


def dump_config(path, config: dict) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config, fh, sort_keys=True)


def write_rows_csv(path, rows: list[dict], fieldnames=None) -> None:
    fieldnames = fieldnames or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
