"""
Dataset ingestion, run manifests and result persistence.

Results are JSON Lines files: the first line is the run manifest
(``{"type": "manifest", ...}``), every following line one record.  A
``<name>.schema.json`` sidecar names the schema version and record fields.
Text tables carry the manifest as ``#`` comment lines above aligned columns.
"""
import datetime as _dt
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd

from . import __version__
from .errors import PreconditionError
from .model import DataBlocks

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class IngestReport(NamedTuple):
    n_read: int
    n_filtered_out: int
    n_rejected: int


def _delimiter(path):
    # tab or semicolon if the header uses one, otherwise comma
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
    if "\t" in header:
        return "\t"
    if ";" in header and "," not in header:
        return ";"
    return ","


def read_blocks(path, x_columns, y_columns, filter=None, standardize=False):
    """
    Load ``x`` and ``y`` blocks from a delimited text file with a header row.

    The delimiter is a tab or semicolon when the header contains one and a
    comma otherwise.

    Parameters
    ----------
    path : str or Path
    x_columns, y_columns : list of str
        Column names in block order.
    filter : str, optional
        ``"column=value"``; rows whose cell (compared as text) differs are dropped.
    standardize : bool
        Center and scale each selected column to unit sample variance.

    Returns
    -------
    (DataBlocks, IngestReport)
        Rows with too many fields, or a missing or non-numeric entry in a
        selected column, are rejected and counted in ``n_rejected``.
    """
    x_columns, y_columns = list(x_columns), list(y_columns)
    if not x_columns or not y_columns:
        raise PreconditionError("both x and y column lists must be nonempty")
    overlap = sorted(set(x_columns) & set(y_columns))
    if overlap:
        raise PreconditionError(f"columns used in both blocks: {', '.join(overlap)}")
    path = Path(path)
    if not path.is_file():
        raise PreconditionError(f"no such file: {path}")
    bad = []

    def _bad_line(fields):
        bad.append(fields)
        return None

    df = pd.read_csv(
        path, sep=_delimiter(path), dtype=str, keep_default_na=False, skipinitialspace=True,
        engine="python", on_bad_lines=_bad_line,
    )
    df.columns = [c.strip() for c in df.columns]
    n_read = len(df) + len(bad)
    for col in x_columns + y_columns:
        if col not in df.columns:
            raise PreconditionError(f"column {col!r} not found in {path.name}")
    n_filtered = 0
    if filter:
        if "=" not in filter:
            raise PreconditionError(f"filter must look like column=value, got {filter!r}")
        col, val = (s.strip() for s in filter.split("=", 1))
        if col not in df.columns:
            raise PreconditionError(f"filter column {col!r} not found in {path.name}")
        keep = df[col].str.strip() == val
        n_filtered = int((~keep).sum())
        df = df[keep]
    num = df[x_columns + y_columns].apply(lambda s: pd.to_numeric(s.str.strip(), errors="coerce"))
    good = np.isfinite(num.to_numpy(dtype=float)).all(axis=1)
    n_rejected = int((~good).sum()) + len(bad)
    if n_rejected:
        logger.warning("rejected %d row(s) with missing or non-numeric entries", n_rejected)
    num = num[good]
    if len(num) < 4:
        raise PreconditionError(f"need at least 4 usable rows, got {len(num)}")
    if standardize:
        sd = num.std(ddof=1)
        flat = sorted(c for c in num.columns if not sd[c] > 0)
        if flat:
            raise PreconditionError(f"cannot standardize constant columns: {', '.join(flat)}")
        num = (num - num.mean()) / sd
    data = DataBlocks(num[x_columns].to_numpy(dtype=float), num[y_columns].to_numpy(dtype=float))
    return data, IngestReport(n_read, n_filtered, n_rejected)


def ingest_csv(path, x_columns, y_columns, filter=None, standardize=False):
    """:func:`read_blocks` without the report."""
    return read_blocks(path, x_columns, y_columns, filter, standardize)[0]


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _timestamp():
    # SOURCE_DATE_EPOCH pins the clock so reruns are byte-identical
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        t = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        t = _dt.datetime.now(tz=_dt.timezone.utc).replace(microsecond=0)
    return t.isoformat()


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int
    version: str = __version__
    input_digest: Optional[str] = None
    created: str = field(default_factory=_timestamp)

    def to_dict(self):
        return {"type": "manifest", **asdict(self)}

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "type"}
        return cls(**d)


def to_jsonable(obj):
    """Recursively convert numpy scalars/arrays and tuples into JSON-ready values."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _dumps(obj):
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def write_records(path, manifest, records, record_type):
    """Write the manifest line plus one line per record, and the schema sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [dict(r, type=record_type) for r in records]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(manifest.to_dict()) + "\n")
        for r in rows:
            fh.write(_dumps(r) + "\n")
    fields = sorted({k for r in rows for k in r})
    schema = {"schema_version": SCHEMA_VERSION, "record_type": record_type, "fields": fields}
    with open(schema_path(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(schema, indent=2, sort_keys=True) + "\n")
    return path


def schema_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".schema.json")


def read_records(path):
    """Return ``(RunManifest, list of dict)`` from a file written by :func:`write_records`."""
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("type") != "manifest":
        raise PreconditionError(f"{path} does not start with a manifest record")
    return RunManifest.from_dict(lines[0]), lines[1:]


def format_table(header, rows, floatfmt="{:.4f}"):
    """Right-aligned plain-text table; ``None`` cells print as ``-``."""
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return floatfmt.format(v)
        return str(v)

    body = [[cell(v) for v in row] for row in rows]
    widths = [max([len(str(h))] + [len(r[k]) for r in body]) for k, h in enumerate(header)]
    fmt = lambda r: "  ".join(s.rjust(w) for s, w in zip(r, widths)).rstrip()
    lines = [fmt([str(h) for h in header]), fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in body]
    return "\n".join(lines)


def write_table(path, manifest, title, header, rows, floatfmt="{:.4f}"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = manifest.to_dict()
    head = [f"# {title}"] + [f"# {k}: {_dumps(meta[k])}" for k in sorted(meta) if k != "type"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(head) + "\n" + format_table(header, rows, floatfmt) + "\n")
    return path
