"""CSV/JSON/npz serialisation.

CSV files start with ``#`` comment lines echoing the resolved
configuration, followed by a header row and the body.  Floats are written
with ``repr`` so equal numbers always give equal bytes.
"""
from __future__ import annotations

import csv
import io
import json
import math
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .bundle import FrameTrajectory
from .stochastics import Ensemble


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
    raise TypeError(f"not serialisable: {type(o).__name__}")


def to_json(obj) -> str:
    return json.dumps(obj, default=_default, sort_keys=True)


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def csv_text(columns, rows, config: dict | None = None, timestamp: bool = False) -> str:
    buf = io.StringIO()
    if config is not None:
        buf.write(f"# config: {to_json(config)}\n")
    if timestamp:
        buf.write(f"# created: {datetime.now(timezone.utc).isoformat()}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows([format_value(v) for v in row] for row in rows)
    return buf.getvalue()


def write_csv(path, columns, rows, config: dict | None = None, timestamp: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(columns, rows, config, timestamp))
    return path


def csv_body(text: str) -> str:
    """Everything after the comment header; the part that must be reproducible."""
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith("#"))


def read_csv(path):
    """Returns ``(config, columns, data)`` with ``data`` a float array."""
    config, columns, data = {}, None, []
    lines = Path(path).read_text().splitlines()
    for line in lines:
        if line.startswith("# config: "):
            config = json.loads(line[len("# config: "):])
    for row in csv.reader(line for line in lines if line.strip() and not line.startswith("#")):
        if columns is None:
            columns = row
        else:
            data.append([float(v) for v in row])
    return config, columns, np.array(data, dtype=float).reshape(-1, len(columns or []))


def trajectory_columns(n: int) -> list:
    return ["t"] + [f"x{i + 1}" for i in range(n)] + [f"e{i + 1}{j + 1}" for i in range(n) for j in range(n)]


def write_trajectory(traj: FrameTrajectory, path, config: dict | None = None) -> Path:
    """One row per time: ``t, x1..xn, e`` row-major."""
    n = traj.x.shape[1]
    rows = np.column_stack([traj.times, traj.x, traj.e.reshape(len(traj.times), n * n)])
    return write_csv(path, trajectory_columns(n), rows.tolist(), config)


def read_trajectory(path) -> FrameTrajectory:
    _, columns, data = read_csv(path)
    n = sum(1 for c in columns if c.startswith("x"))
    return FrameTrajectory(data[:, 0], data[:, 1:1 + n], data[:, 1 + n:].reshape(-1, n, n))


def write_ensemble(ens: Ensemble, path) -> Path:
    """``.npz`` keeps paths as well; any other suffix writes endpoint CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".npz":
        arrays = {"endpoints": ens.endpoints, "x0": ens.x0, "config": np.array(to_json(ens.config()))}
        if ens.paths is not None:
            arrays["paths"] = ens.paths
            arrays["times"] = ens.times
        with path.open("wb") as fh:
            np.savez_compressed(fh, **arrays)
        return path
    n = ens.endpoints.shape[1]
    rows = [[i, *row] for i, row in enumerate(ens.endpoints.tolist())]
    return write_csv(path, ["index"] + [f"x{i + 1}" for i in range(n)], rows, ens.config())


def read_ensemble(path) -> Ensemble:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            cfg = json.loads(str(z["config"]))
            paths = z["paths"] if "paths" in z else None
            times = z["times"] if "times" in z else None
            ends = z["endpoints"]
    else:
        cfg, _, data = read_csv(path)
        ends, paths, times = data[:, 1:], None, None
    known = {"model", "eps", "N", "seed", "level", "horizon", "x0"}
    return Ensemble(cfg["model"], cfg["eps"], cfg["N"], cfg["seed"], cfg["level"], cfg["horizon"],
                    np.asarray(cfg["x0"], float), ends, times, paths,
                    {k: v for k, v in cfg.items() if k not in known})


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, default=_default, sort_keys=True, indent=2) + "\n")
    return path
