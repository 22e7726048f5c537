"""CSV ingestion and emission.

Missing values are empty fields; there are no NA tokens. Parse errors carry
``path:line:column`` positions (1-based, header is line 1).
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from collections.abc import Callable, Iterable, Sequence
from pathlib import Path

import numpy as np

from .core import AggregateMediationRecord, CorrelationRecord, IPDStudy, MetaResult
from .errors import ValidationError

AGGREGATE_COLUMNS = ("study_id", "theta_hat", "se_theta", "n", "a_hat", "se_a", "b_hat", "se_b")
AGGREGATE_REQUIRED = ("study_id", "theta_hat", "se_theta", "n")
CORRELATION_COLUMNS = ("study_id", "n", "r_xy", "r_xm", "r_my")
IPD_LEADING = ("x", "m", "y")
FOREST_COLUMNS = ("study_id", "estimate", "se", "ci_low", "ci_high", "weight")


class InputFormatError(ValidationError):
    """Ill-formed input file; the message starts with ``path:line:col``."""


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_table(path: str | Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        text = Path(path).read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise InputFormatError(f"{path}:0:0: cannot read file ({exc.strerror})") from None
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise InputFormatError(f"{path}:1:1: empty file, expected a header row") from None
    except csv.Error as exc:
        raise InputFormatError(f"{path}:1:1: {exc}") from None
    header = [h.strip() for h in header]
    for j, name in enumerate(header):
        if not name:
            raise InputFormatError(f"{path}:1:{j + 1}: empty column name")
        if name in header[:j]:
            raise InputFormatError(f"{path}:1:{j + 1}: duplicate column {name!r}")
    rows = []
    try:
        for fields in reader:
            line = reader.line_num
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) != len(header):
                raise InputFormatError(
                    f"{path}:{line}:{min(len(fields), len(header)) + 1}: expected "
                    f"{len(header)} fields, found {len(fields)}")
            rows.append((line, [f.strip() for f in fields]))
    except csv.Error as exc:
        raise InputFormatError(f"{path}:{reader.line_num}:1: {exc}") from None
    return header, rows


def _cell(path, line: int, col: int, name: str, raw: str, parse: Callable, required: bool):
    if raw == "":
        if required:
            raise InputFormatError(f"{path}:{line}:{col + 1}: missing value for {name!r}")
        return None
    try:
        value = parse(raw)
    except ValueError:
        raise InputFormatError(f"{path}:{line}:{col + 1}: cannot parse {raw!r} as {name}") from None
    if isinstance(value, float) and not math.isfinite(value):
        raise InputFormatError(f"{path}:{line}:{col + 1}: non-finite value {raw!r} for {name!r}")
    return value


def _int(raw: str) -> int:
    value = float(raw)
    if value != int(value):
        raise ValueError(raw)
    return int(value)


def _check_header(path, header: Sequence[str], allowed: Sequence[str], required: Sequence[str]) -> None:
    for j, name in enumerate(header):
        if name not in allowed:
            raise InputFormatError(f"{path}:1:{j + 1}: unexpected column {name!r}; allowed {list(allowed)}")
    for name in required:
        if name not in header:
            raise InputFormatError(f"{path}:1:1: required column {name!r} missing")


def _records(path, header, rows, parsers: dict, required: Sequence[str], build: Callable) -> list:
    out = []
    for line, fields in rows:
        values = {
            name: _cell(path, line, j, name, raw, parsers[name], name in required)
            for j, (name, raw) in enumerate(zip(header, fields))
        }
        try:
            out.append(build(values))
        except ValidationError as exc:
            raise InputFormatError(f"{path}:{line}:1: {exc}") from None
    if not out:
        raise InputFormatError(f"{path}:2:1: no data rows")
    return out


def read_aggregate_csv(path: str | Path) -> list[AggregateMediationRecord]:
    """Aggregate records; path columns (a_hat .. se_b) are optional."""
    header, rows = _read_table(path)
    _check_header(path, header, AGGREGATE_COLUMNS, AGGREGATE_REQUIRED)
    parsers = {name: float for name in AGGREGATE_COLUMNS}
    parsers.update(study_id=str, n=_int)
    return _records(path, header, rows, parsers, AGGREGATE_REQUIRED,
                    lambda v: AggregateMediationRecord(**v))


def read_correlation_csv(path: str | Path) -> list[CorrelationRecord]:
    """Correlation records; absent correlations are empty fields."""
    header, rows = _read_table(path)
    _check_header(path, header, CORRELATION_COLUMNS, ("study_id", "n"))
    parsers = {name: float for name in CORRELATION_COLUMNS}
    parsers.update(study_id=str, n=_int)
    return _records(path, header, rows, parsers, ("study_id", "n"),
                    lambda v: CorrelationRecord(**v))


def read_ipd_csv(
    path: str | Path, study_id: str | None = None, treatment_version: str = "",
    exposure: str = "binary",
) -> IPDStudy:
    """IPD with leading columns ``x, m`` and optional ``y``; the rest are covariates.

    An all-empty or absent ``y`` column marks an X-M-only study. ``study_id``
    defaults to the file stem.
    """
    header, rows = _read_table(path)
    if header[:2] != ["x", "m"]:
        raise InputFormatError(f"{path}:1:1: IPD files must start with columns x, m")
    has_y_col = len(header) > 2 and header[2] == "y"
    first_cov = 3 if has_y_col else 2
    names = header[first_cov:]
    for j, name in enumerate(names, start=first_cov):
        if name in IPD_LEADING:
            raise InputFormatError(f"{path}:1:{j + 1}: column {name!r} out of place")
    if not rows:
        raise InputFormatError(f"{path}:2:1: no data rows")
    y_present = has_y_col and any(fields[2] != "" for _, fields in rows)
    data = np.empty((len(rows), len(header)))
    for i, (line, fields) in enumerate(rows):
        for j, raw in enumerate(fields):
            if j == 2 and has_y_col and not y_present:
                data[i, j] = np.nan
                continue
            data[i, j] = _cell(path, line, j, header[j], raw, float, True)
    try:
        return IPDStudy(
            study_id=study_id if study_id is not None else Path(path).stem,
            x=data[:, 0],
            m=data[:, 1],
            y=data[:, 2] if y_present else None,
            l=data[:, first_cov:],
            covariate_names=tuple(names),
            treatment_version=treatment_version,
            exposure=exposure,
        )
    except ValidationError as exc:
        raise InputFormatError(f"{path}:2:1: {exc}") from None


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_aggregate_csv(path: str | Path, records: Sequence[AggregateMediationRecord]) -> None:
    _write(path, AGGREGATE_COLUMNS,
           ([getattr(r, c) for c in AGGREGATE_COLUMNS] for r in records))


def write_correlation_csv(path: str | Path, records: Sequence[CorrelationRecord]) -> None:
    _write(path, CORRELATION_COLUMNS,
           ([getattr(r, c) for c in CORRELATION_COLUMNS] for r in records))


def write_ipd_csv(path: str | Path, study: IPDStudy) -> None:
    columns = ["x", "m"] + (["y"] if study.has_outcome else []) + list(study.covariate_names)
    blocks = [study.x[:, None], study.m[:, None]]
    if study.has_outcome:
        blocks.append(study.y[:, None])
    blocks.append(study.l)
    _write(path, columns, np.hstack(blocks).tolist())


def forest_rows(result: MetaResult, z: float) -> list[tuple]:
    """Per-study rows plus a final ``pooled`` row with weight 1."""
    rows = []
    for sid, est, var, w in zip(result.study_ids, result.study_estimates,
                                result.study_variances, result.weights):
        se = math.sqrt(var)
        rows.append((sid, est, se, est - z * se, est + z * se, w))
    rows.append(("pooled", result.estimate, result.se, result.ci_low, result.ci_high, 1.0))
    return rows


def write_forest_csv(path: str | Path, result: MetaResult, z: float) -> None:
    _write(path, FOREST_COLUMNS, forest_rows(result, z))
