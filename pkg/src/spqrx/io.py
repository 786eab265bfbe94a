"""Model files, run configuration and CSV ingestion.

Model files are JSON documents carrying a ``format_version``.  Floats are
written with Python's shortest round-trip ``repr`` so a saved model reloads
bit-for-bit.  CSV files use a header row, comma separator, dot decimals,
UTF-8 and LF line endings.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .distributions import BlendSpec
from .network import XiActivation
from .regression import Architecture, FittedModel, TrainingConfig

__all__ = ["FORMAT_VERSION", "DataError", "ConfigError", "save_model", "load_model",
           "read_csv", "write_csv", "RunConfig", "load_config"]

FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed or unusable input data."""


class ConfigError(ValueError):
    """Invalid configuration or command-line arguments."""


def _clean(obj):
    # JSON has no nan/inf; encode them as strings and decode on load
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def save_model(model: FittedModel, path) -> None:
    doc = {"format_version": FORMAT_VERSION, **model.to_dict()}
    text = json.dumps(_clean(doc), indent=1, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_model(path) -> FittedModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"model file {path} has format version {version!r}; "
                        f"this build reads version {FORMAT_VERSION}")
    try:
        return FittedModel.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"model file {path} is malformed: {exc}") from exc


def read_csv(path, response: Optional[str] = "y", columns: Optional[Sequence[str]] = None):
    """Read a numeric CSV.

    Returns ``(X, y, names)`` where ``y`` is ``None`` when ``response`` is
    ``None`` or absent, and ``names`` are the covariate column names.  Any
    non-numeric cell raises :class:`DataError` naming its row (1-based, data
    rows only) and column.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        rows = []
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
            vals = []
            for name, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {r}, column {name!r}: "
                                    f"non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {r}, column {name!r}: non-finite value")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path} has no data rows")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names")
    data = np.array(rows, float)
    has_y = response is not None and response in header
    if columns is None:
        names = [h for h in header if not (has_y and h == response)]
    else:
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        names = list(columns)
    X = data[:, [header.index(c) for c in names]]
    y = data[:, header.index(response)] if has_y else None
    return X, y, names


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# Run configuration

_SECTIONS = {"mode", "architecture", "blend", "training", "grid", "preprocessing", "threads"}
_ARCH = {"num_basis", "order", "hidden", "activation", "xi_activation"}
_XI = {"kind", "lo", "hi"}
_BLEND = {"p_a", "p_b", "c1", "c2"}
_PRE = {"sqrt", "columns", "response"}
_GRID = {"num_basis", "hidden", "activation", "p_a", "p_b", "c1"}


class RunConfig:
    """Validated run configuration (see :func:`load_config` for the schema)."""

    def __init__(self, doc: Optional[dict] = None):
        doc = {} if doc is None else doc
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a mapping")
        _only(doc, _SECTIONS, "top level")
        self.mode = doc.get("mode", "spqrx")
        if self.mode not in ("spqr", "spqrx"):
            raise ConfigError("mode must be 'spqr' or 'spqrx'")
        try:
            a = dict(doc.get("architecture", {}))
            _only(a, _ARCH, "architecture")
            xa = a.pop("xi_activation", None)
            if xa is not None:
                _only(xa, _XI, "architecture.xi_activation")
                base = XiActivation.default(xa.get("kind", "scaled_tanh"))
                hi = xa.get("hi")
                a["xi_activation"] = XiActivation(base.kind, float(xa.get("lo", base.lo)),
                                                  base.hi if hi is None else float(hi))
            if "hidden" in a:
                a["hidden"] = tuple(a["hidden"]) if isinstance(a["hidden"], list) else (a["hidden"],)
            self.architecture = Architecture(**a)
            b = dict(doc.get("blend", {}))
            _only(b, _BLEND, "blend")
            self.blend = BlendSpec(**{"p_a": 0.9, "p_b": 0.99, "c1": 25.0, **b})
            t = dict(doc.get("training", {}))
            _only(t, {f.name for f in fields(TrainingConfig)}, "training")
            self.training = TrainingConfig(**t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        self.grid = dict(doc.get("grid", {}) or {})
        _only(self.grid, _GRID, "grid")
        for k, v in self.grid.items():
            if not isinstance(v, list) or not v:
                raise ConfigError(f"grid.{k} must be a non-empty list")
        pre = dict(doc.get("preprocessing", {}))
        _only(pre, _PRE, "preprocessing")
        self.sqrt = bool(pre.get("sqrt", False))
        self.columns = pre.get("columns")
        self.response = pre.get("response", "y")
        threads = doc.get("threads", 1)
        if not isinstance(threads, int) or threads < 1:
            raise ConfigError("threads must be a positive integer")
        self.threads = threads


def _only(d: dict, allowed: set, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_config(path) -> RunConfig:
    """Load and validate a JSON run configuration.

    Sections: ``mode``, ``architecture`` (num_basis, order, hidden,
    activation, xi_activation{kind, lo, hi}), ``blend`` (p_a, p_b, c1, c2),
    ``training`` (every :class:`TrainingConfig` field), ``grid`` (lists keyed
    by num_basis, hidden, activation, p_a, p_b, c1), ``preprocessing`` (sqrt,
    columns, response) and ``threads``.  Unknown keys are rejected.
    """
    if path is None:
        return RunConfig({})
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig(doc)
