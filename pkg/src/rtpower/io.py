"""Reading and writing trial tables, scenarios and reports."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
import pandas as pd

from . import __version__
from .core_types import (
    OPTIONAL_COLUMNS,
    REQUIRED_COLUMNS,
    ContrastCoding,
    PowerCell,
    RandomStructure,
    Scenario,
    TrialTable,
    ValidationError,
    validate_scenario,
)


class DataIOError(OSError):
    """File-level failure (missing, unreadable or unwritable path)."""


TRIAL_COLUMNS = ("participant_id", "item_id", "condition", "setting", "trial_index", "correct",
                 "replicate", "rt_ms")
_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


def fmt_number(v) -> str:
    """Shortest text that parses back to the identical value."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def atomic_write_text(path, text: str) -> Path:
    """Write ``text`` to a sibling temp file, then rename it over ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        try:
            with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


# ---------------------------------------------------------------- trials


def _to_float(text: str) -> float:
    # pandas' own parser is not correctly rounded; float() is
    try:
        return float(text)
    except ValueError:
        return math.nan


def _parse_bool(values: pd.Series, rows_offset: int = 1) -> pd.Series:
    out = []
    bad = []
    for k, v in enumerate(values):
        s = str(v).strip().lower()
        if s in _TRUE:
            out.append(True)
        elif s in _FALSE:
            out.append(False)
        else:
            bad.append(k + rows_offset)
    if bad:
        raise ValidationError(f"correct: unparseable boolean on row(s) {bad[:10]}")
    return pd.Series(out, index=values.index, dtype=bool)


def load_trials(path, columns: Optional[Mapping[str, str]] = None, *, require_positive_rt: bool = True,
                delimiter: str = ",") -> TrialTable:
    """Read a long-format trial CSV.

    ``columns`` maps canonical names to the file's header names, e.g.
    ``{"participant_id": "subject"}``.  Row numbers in error messages count
    data rows from 1 (the header is row 0).
    """
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"no such file: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, sep=delimiter)
    except pd.errors.EmptyDataError:
        raise ValidationError(f"{path}: no header row") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    mapping = dict(columns or {})
    unknown = [k for k in mapping if k not in REQUIRED_COLUMNS + OPTIONAL_COLUMNS]
    if unknown:
        raise ValidationError(f"column mapping names unknown field(s) {unknown}")
    rename = {}
    for canon in REQUIRED_COLUMNS + OPTIONAL_COLUMNS:
        src = mapping.get(canon, canon)
        if src in raw.columns:
            rename[src] = canon
    missing = [c for c in REQUIRED_COLUMNS if mapping.get(c, c) not in raw.columns]
    if missing:
        shown = [f"{c} (as {mapping[c]!r})" if c in mapping else c for c in missing]
        raise ValidationError(f"{path}: missing required column(s) {shown}; header is {list(raw.columns)}")
    df = raw[list(rename)].rename(columns=rename)
    for c in df.columns:
        df[c] = df[c].str.strip()

    problems = []
    rt = pd.Series([_to_float(v) for v in df["rt_ms"]], index=df.index, dtype=float)
    empty = df["rt_ms"] == ""
    unparsable = rt.isna() & ~empty
    if unparsable.any():
        rows = (np.flatnonzero(unparsable.to_numpy()) + 1).tolist()
        problems.append(f"rt_ms: unparseable number on row(s) {rows[:10]}")
    if empty.any():
        rows = (np.flatnonzero(empty.to_numpy()) + 1).tolist()
        problems.append(f"rt_ms: missing value on row(s) {rows[:10]}")
    if require_positive_rt:
        nonpos = (rt <= 0).to_numpy()
        if nonpos.any():
            rows = (np.flatnonzero(nonpos) + 1).tolist()
            problems.append(f"rt_ms: non-positive value on row(s) {rows[:10]}")
    df["rt_ms"] = rt
    for c in ("trial_index", "replicate"):
        if c in df.columns:
            num = pd.to_numeric(df[c], errors="coerce")
            bad = num.isna() | (num != np.floor(num))
            if bad.any():
                rows = (np.flatnonzero(bad.to_numpy()) + 1).tolist()
                problems.append(f"{c}: not an integer on row(s) {rows[:10]}")
            else:
                df[c] = num.astype(np.int64)
    if "correct" in df.columns:
        try:
            df["correct"] = _parse_bool(df["correct"])
        except ValidationError as exc:
            problems.extend(exc.violations)
    if problems:
        raise ValidationError([f"{path}: {p}" for p in problems])
    order = [c for c in TRIAL_COLUMNS if c in df.columns]
    return TrialTable(df[order], require_positive_rt=require_positive_rt)


def write_trials(table: TrialTable, path) -> Path:
    """CSV with canonical column order and round-trip float formatting."""
    df = table.data
    cols = [c for c in TRIAL_COLUMNS if c in df.columns]
    lines = [",".join(cols)]
    values = [df[c].tolist() for c in cols]
    for row in zip(*values):
        lines.append(",".join(fmt_number(v) for v in row))
    return atomic_write_text(path, "\n".join(lines) + "\n")


# ------------------------------------------------------------- scenarios

_SCENARIO_KEYS = {"fixed", "by_participant", "by_item", "residual_sd", "contrasts", "n_participants",
                  "n_items", "obs_per_cell", "name", "description"}
_STRUCTURE_KEYS = {"factor_name", "term_names", "sds", "corr"}
_CONTRAST_KEYS = {"related_code", "unrelated_code", "online_code", "lab_code"}
_REQUIRED_SCENARIO_KEYS = ("fixed", "by_participant", "by_item", "residual_sd")
BUNDLED = ("lab_semantic", "lab_phonological", "online_semantic", "online_phonological")


def _unknown_keys(d: Mapping) -> list:
    found = [k for k in d if k not in _SCENARIO_KEYS]
    for key in ("by_participant", "by_item"):
        if isinstance(d.get(key), Mapping):
            found += [f"{key}.{k}" for k in d[key] if k not in _STRUCTURE_KEYS]
    if isinstance(d.get("contrasts"), Mapping):
        found += [f"contrasts.{k}" for k in d["contrasts"] if k not in _CONTRAST_KEYS]
    return found


def scenario_from_mapping(d: Mapping, *, strict: bool = True, source: str = "scenario") -> Scenario:
    if not isinstance(d, Mapping):
        raise ValidationError(f"{source}: top level must be a JSON object")
    unknown = _unknown_keys(d)
    if unknown:
        msg = f"{source}: unknown key(s) {unknown}"
        if strict:
            raise ValidationError(msg)
        warnings.warn(msg, UserWarning, stacklevel=3)
    missing = [k for k in _REQUIRED_SCENARIO_KEYS if k not in d]
    if missing:
        raise ValidationError(f"{source}: missing key(s) {missing}")
    try:
        s = Scenario.from_dict({k: v for k, v in d.items() if k in _SCENARIO_KEYS})
    except ValidationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{source}: malformed scenario ({exc})") from None
    problems = validate_scenario(s)
    if problems:
        raise ValidationError(problems)
    return s


def load_scenario(path, *, strict: bool = True) -> Scenario:
    """Validated scenario from a JSON file; ``obs_per_cell`` defaults to 1."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return scenario_from_mapping(d, strict=strict, source=str(path))


def bundled_scenario_path(name: str):
    if name not in BUNDLED:
        raise ValidationError(f"unknown bundled scenario {name!r}; choose from {list(BUNDLED)}")
    return resources.files("rtpower.scenarios").joinpath(f"{name}.json")


def bundled_scenario(name: str) -> Scenario:
    ref = bundled_scenario_path(name)
    with resources.as_file(ref) as p:
        return load_scenario(p)


def resolve_scenario(name_or_path: str, *, strict: bool = True) -> Scenario:
    """A bundled scenario by name, or a scenario file by path."""
    if name_or_path in BUNDLED:
        return bundled_scenario(name_or_path)
    return load_scenario(name_or_path, strict=strict)


def save_scenario(s: Scenario, path) -> Path:
    return atomic_write_text(path, json.dumps(s.to_dict(), indent=2) + "\n")


# --------------------------------------------------------------- reports

POWER_COLUMNS = ("n_participants", "n_items", "residual_sd", "n_sim", "n_converged", "n_significant",
                 "power", "mc_se")


@dataclass
class Report:
    """Everything needed to interpret and reproduce one run.

    ``results`` is the flat table written to CSV (a list of row dicts);
    ``details`` holds any nested payload that only goes into the JSON.
    """

    command: str
    request: dict
    results: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    base_seed: Optional[int] = None
    tool_version: str = __version__
    timing: dict = field(default_factory=dict)
    input_digests: dict = field(default_factory=dict)
    columns: Optional[list] = None

    def table_columns(self) -> list:
        if self.columns:
            return list(self.columns)
        seen = {}
        for row in self.results:
            for k in row:
                seen.setdefault(k, None)
        if not seen:
            return list(POWER_COLUMNS) if self.command in ("power", "sweep") else []
        return list(seen)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "tool_version": self.tool_version,
            "base_seed": self.base_seed,
            "request": self.request,
            "input_digests": self.input_digests,
            "timing": self.timing,
            "columns": self.table_columns(),
            "results": self.results,
            "details": self.details,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Report":
        return cls(
            command=d["command"],
            request=d.get("request", {}),
            results=list(d.get("results", [])),
            details=dict(d.get("details", {})),
            base_seed=d.get("base_seed"),
            tool_version=d.get("tool_version", ""),
            timing=dict(d.get("timing", {})),
            input_digests=dict(d.get("input_digests", {})),
            columns=d.get("columns"),
        )


def power_rows(cells: Iterable[PowerCell]) -> list:
    rows = []
    for c in cells:
        d = c.to_dict()
        rows.append({k: d.get(k) for k in POWER_COLUMNS if k != "residual_sd" or c.residual_sd is not None})
    return rows


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def report_json(report: Report) -> str:
    return json.dumps(_jsonable(report.to_dict()), indent=2, allow_nan=True) + "\n"


def report_csv(report: Report) -> str:
    cols = report.table_columns()
    lines = [",".join(cols)]
    for row in report.results:
        lines.append(",".join(_csv_cell(row.get(c)) for c in cols))
    return "\n".join(lines) + "\n"


def _csv_cell(v) -> str:
    text = fmt_number(v)
    if any(ch in text for ch in ',"\n'):
        text = '"' + text.replace('"', '""') + '"'
    return text


def write_report(report: Report, dest, formats=("json", "csv")) -> list:
    """Write ``<dest>.json`` and/or ``<dest>.csv``; returns the written paths."""
    formats = set(formats)
    bad = formats - {"json", "csv"}
    if bad:
        raise ValidationError(f"unknown report format(s) {sorted(bad)}")
    dest = Path(dest)
    stem = dest.with_suffix("") if dest.suffix in (".json", ".csv") else dest
    written = []
    if "json" in formats:
        written.append(atomic_write_text(stem.with_name(stem.name + ".json"), report_json(report)))
    if "csv" in formats:
        written.append(atomic_write_text(stem.with_name(stem.name + ".csv"), report_csv(report)))
    return written


def read_report(path) -> Report:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return Report.from_dict(json.loads(text))


def read_results_csv(path) -> list:
    """Rows of a report CSV with numeric cells parsed back to numbers."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: _parse_cell(v) for k, v in r.items()} for r in rows]


def _parse_cell(v: str):
    if v == "":
        return None
    if v in ("true", "false"):
        return v == "true"
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def is_nan(v) -> bool:
    return isinstance(v, float) and math.isnan(v)
