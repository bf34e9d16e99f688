"""File formats: TUM trajectories, PLY/JSON maps, serialized pose problems, TOML configs."""

from __future__ import annotations

import colorsys
import dataclasses
import json
import math
import typing
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .exceptions import ConfigError, ParseError
from .factors import Factor, PoseProblem, SolverSettings
from .geometry import PixelBox, Plane, RigidTransform

# --- TUM trajectories -------------------------------------------------------


def read_tum_trajectory(path):
    """Read ``timestamp tx ty tz qx qy qz qw`` lines into ``[(t, T_wc)]``."""
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.rstrip("\n")
            stripped = text.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = stripped.split()
            if len(fields) != 8:
                raise ParseError(f"expected 8 fields, got {len(fields)}", lineno,
                                 text.find(stripped) + 1)
            values = []
            col = text.find(stripped)
            for tok in fields:
                col = text.index(tok, col)
                try:
                    v = float(tok)
                except ValueError:
                    raise ParseError(f"not a number: {tok!r}", lineno, col + 1) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite value: {tok!r}", lineno, col + 1)
                values.append(v)
                col += len(tok)
            q = np.array(values[4:8])
            norm = float(np.linalg.norm(q))
            if not 0.999 <= norm <= 1.001:
                raise ParseError(f"quaternion norm {norm:.6f} outside [0.999, 1.001]",
                                 lineno, text.index(fields[4]) + 1)
            poses.append((values[0], RigidTransform.from_quaternion(q / norm, values[1:4])))
    return poses


def format_tum_line(t: float, T_wc: RigidTransform) -> str:
    q = T_wc.quaternion()
    p = T_wc.translation
    vals = " ".join(f"{v + 0.0:.7f}" if round(v, 7) != 0 else "0.0000000" for v in (*p, *q))
    return f"{t:.6f} {vals}"


def write_tum_trajectory(trajectory, path):
    """Write ``[(t, T_wc)]`` in TUM format, 6 decimals for time and 7 for values."""
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    lines += [format_tum_line(t, T) for t, T in trajectory]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- maps -------------------------------------------------------------------


def landmark_color(landmark_id: int):
    """Deterministic RGB color: hues follow the golden-ratio sequence."""
    hue = (landmark_id * 0.618033988749895) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.75, 0.95)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def write_map_ply(snapshot: dict, path):
    rows = []
    for rec in snapshot.get("landmarks", []):
        r, g, b = landmark_color(int(rec["id"]))
        for x, y, z in rec.get("cloud", []):
            rows.append(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}")
    header = ["ply", "format ascii 1.0", f"element vertex {len(rows)}",
              "property float x", "property float y", "property float z",
              "property uchar red", "property uchar green", "property uchar blue",
              "end_header"]
    Path(path).write_text("\n".join(header + rows) + "\n", encoding="utf-8")


def map_summary(snapshot: dict) -> dict:
    keys = ("id", "n", "d", "class_id", "vertices", "num_points")
    return {"landmarks": [{k: rec[k] for k in keys} for rec in snapshot.get("landmarks", [])]}


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_map_json(snapshot: dict, path):
    dump_json(map_summary(snapshot), path)


# --- pose problems ----------------------------------------------------------


def _pose_to_dict(T: RigidTransform) -> dict:
    return {"R": T.rotation.tolist(), "t": T.translation.tolist()}


def _pose_from_dict(d) -> RigidTransform:
    return RigidTransform(np.array(d["R"], dtype=float), np.array(d["t"], dtype=float))


def factor_to_dict(f: Factor) -> dict:
    out = {"kind": f.kind, "weight": f.weight, "huber_delta": f.huber_delta}
    for name in ("u_obs", "p_w", "vertices_w", "n_c", "n_w", "R_perp"):
        v = getattr(f, name)
        if v is not None:
            out[name] = np.asarray(v, dtype=float).tolist()
    for name in ("pi_c", "pi_w"):
        v = getattr(f, name)
        if v is not None:
            out[name] = {"n": v.n.tolist(), "d": v.d}
    if f.box_obs is not None:
        out["box_obs"] = f.box_obs.as_array().tolist()
    return out


def factor_from_dict(d: dict) -> Factor:
    kw = {"kind": d["kind"], "weight": float(d.get("weight", 1.0)),
          "huber_delta": float(d.get("huber_delta", 1.0))}
    for name in ("u_obs", "p_w", "vertices_w", "n_c", "n_w", "R_perp"):
        if name in d:
            kw[name] = np.array(d[name], dtype=float)
    for name in ("pi_c", "pi_w"):
        if name in d:
            kw[name] = Plane.from_canonical(d[name]["n"], d[name]["d"])
    if "box_obs" in d:
        kw["box_obs"] = PixelBox(*d["box_obs"])
    return Factor(**kw)


def problem_to_dict(problem: PoseProblem, K=None) -> dict:
    out = {"T_cw": _pose_to_dict(problem.T_cw),
           "factors": [factor_to_dict(f) for f in problem.factors],
           "solver": dataclasses.asdict(problem.solver)}
    if K is not None:
        out["intrinsics"] = dataclasses.asdict(K)
    return out


def problem_from_dict(d: dict):
    """Returns ``(PoseProblem, intrinsics dict or None)``."""
    try:
        solver = dataclass_from_dict(SolverSettings, d.get("solver", {}), "solver")
        problem = PoseProblem(_pose_from_dict(d["T_cw"]),
                              [factor_from_dict(f) for f in d["factors"]], solver)
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"malformed pose problem: {err}") from err
    return problem, d.get("intrinsics")


def write_problem(problem: PoseProblem, path, K=None):
    dump_json(problem_to_dict(problem, K), path)


def read_problem(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as err:
            raise ParseError(err.msg, err.lineno, err.colno) from err
    return problem_from_dict(data)


# --- strict config trees ----------------------------------------------------


def read_toml(path) -> dict:
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}") from err


def _coerce(value, tp, keypath):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{keypath}: expected a table")
        return dataclass_from_dict(tp, value, keypath)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], keypath)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{keypath}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{keypath}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{keypath}: expected true or false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{keypath}: expected a string")
        return value
    if origin in (list, tuple) or tp in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{keypath}: expected an array")
        return list(value)
    return value


def dataclass_from_dict(cls, data: dict, keypath: str = ""):
    """Build ``cls`` from ``data``, rejecting unknown keys by their full path."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        path = f"{keypath}.{key}" if keypath else key
        if key not in names:
            raise ConfigError(f"unknown key '{path}'")
        kwargs[key] = _coerce(value, hints[key], path)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as err:
        raise ConfigError(f"{keypath or 'config'}: {err}") from err


__all__ = ["read_tum_trajectory", "write_tum_trajectory", "format_tum_line",
           "write_map_ply", "write_map_json", "landmark_color", "map_summary",
           "write_problem", "read_problem", "problem_to_dict", "problem_from_dict",
           "read_toml", "dataclass_from_dict", "dump_json"]
