"""CSV ingestion and JSON output helpers.

Node file columns: ``id,subnet,group,x1..xK[,y]``. Edge file columns:
``src,dst`` (``dst`` is a friend of ``src``). External ids, subnetwork and
group labels are remapped to dense 0-based indices; the mappings travel with
the loaded data so outputs can be translated back.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NODE_SCHEMA = "id,subnet,group,x1..xK[,y]"
EDGE_SCHEMA = "src,dst"


class InputError(ValueError):
    """Malformed input file; the message names the file and line."""


@dataclass
class NodeTable:
    ids: list
    subnet: np.ndarray
    groups: np.ndarray
    X: np.ndarray
    y: np.ndarray | None
    names: list
    subnet_labels: list
    group_labels: list

    @property
    def n(self) -> int:
        return len(self.ids)

    def index(self) -> dict:
        return {k: i for i, k in enumerate(self.ids)}


def _dense_labels(raw: list) -> tuple[np.ndarray, list]:
    def key(v):
        try:
            return (0, float(v), v)
        except ValueError:
            return (1, 0.0, v)
    labels = sorted(set(raw), key=key)
    pos = {v: i for i, v in enumerate(labels)}
    return np.array([pos[v] for v in raw], dtype=int), labels


def read_nodes(path, require_y: bool = False) -> NodeTable:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file, expected columns {NODE_SCHEMA}") from None
        if header[:3] != ["id", "subnet", "group"]:
            raise InputError(f"{path}:1: unexpected columns {header}; expected {NODE_SCHEMA}")
        rest = header[3:]
        has_y = bool(rest) and rest[-1] == "y"
        xcols = rest[:-1] if has_y else rest
        for c in xcols:
            if not (c.startswith("x") and c[1:].isdigit()):
                raise InputError(f"{path}:1: unknown column '{c}'; expected {NODE_SCHEMA}")
        if not xcols:
            raise InputError(f"{path}:1: no covariate columns; expected {NODE_SCHEMA}")
        if require_y and not has_y:
            raise InputError(f"{path}:1: outcome column 'y' is required; expected {NODE_SCHEMA}")
        ids, sub_raw, grp_raw, xs, ys = [], [], [], [], []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            row = [c.strip() for c in row]
            if row[0] in seen:
                raise InputError(f"{path}:{lineno}: duplicate id '{row[0]}'")
            seen.add(row[0])
            try:
                x = [float(v) for v in row[3:3 + len(xcols)]]
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-numeric covariate") from None
            if not all(np.isfinite(x)):
                raise InputError(f"{path}:{lineno}: non-finite covariate")
            if has_y:
                try:
                    yv = float(row[-1])
                except ValueError:
                    raise InputError(f"{path}:{lineno}: non-numeric outcome '{row[-1]}'") from None
                if yv < 0 or yv != int(yv):
                    raise InputError(f"{path}:{lineno}: outcome must be a nonnegative integer")
                ys.append(int(yv))
            ids.append(row[0])
            sub_raw.append(row[1])
            grp_raw.append(row[2])
            xs.append(x)
    if not ids:
        raise InputError(f"{path}: no data rows")
    subnet, sub_labels = _dense_labels(sub_raw)
    groups, grp_labels = _dense_labels(grp_raw)
    return NodeTable(ids=ids, subnet=subnet, groups=groups, X=np.array(xs, dtype=float),
                     y=np.array(ys, dtype=int) if has_y else None, names=xcols,
                     subnet_labels=sub_labels, group_labels=grp_labels)


def read_edges(path, index: dict) -> np.ndarray:
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            return np.empty((0, 2), dtype=int)
        if header != ["src", "dst"]:
            raise InputError(f"{path}:1: unexpected columns {header}; expected {EDGE_SCHEMA}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise InputError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            a, b = row[0].strip(), row[1].strip()
            for v in (a, b):
                if v not in index:
                    raise InputError(f"{path}:{lineno}: unknown node id '{v}'")
            out.append((index[a], index[b]))
    return np.array(out, dtype=int).reshape(-1, 2)


def write_nodes(path, subnet, groups, X, y=None, ids=None) -> None:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, K = X.shape
    ids = range(n) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "subnet", "group"] + [f"x{k + 1}" for k in range(K)]
                   + (["y"] if y is not None else []))
        for i, ident in enumerate(ids):
            row = [ident, int(subnet[i]) + 1, int(groups[i]) + 1] + [repr(float(v)) for v in X[i]]
            if y is not None:
                row.append(int(y[i]))
            w.writerow(row)


def write_edges(path, edges, ids=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst"])
        for i, j in np.asarray(edges, dtype=int).reshape(-1, 2):
            w.writerow([ids[i], ids[j]] if ids is not None else [i, j])


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, default=_default, indent=2, sort_keys=True, allow_nan=True)


def write_json(path, obj) -> None:
    """Write JSON atomically (temporary file then rename)."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        fh.write(dumps(obj) + "\n")
    os.replace(tmp, path)


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=_default).encode()).hexdigest()
