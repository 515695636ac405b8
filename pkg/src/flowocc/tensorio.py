"""Tensor files: one JSON header line, then raw little-endian float32 data.

Header: ``{"shape": [...], "dtype": "f32", "order": "row-major"}``. Boolean
masks and label grids are written as float32 values. Voxel grids carry a
sidecar ``<name>.json`` with the voxel spec and, for label grids, class names.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from flowocc.errors import InputError

_LE_F32 = np.dtype("<f4")


def save_tensor(path: str | Path, array: np.ndarray) -> Path:
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(array), dtype=_LE_F32)
    header = {"shape": list(arr.shape), "dtype": "f32", "order": "row-major"}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(arr.tobytes(order="C"))
    return path


def load_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor file as float32 with the stored shape."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"missing tensor file: {path}")
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InputError(f"{path}: bad tensor header") from exc
        if header.get("dtype") != "f32" or header.get("order", "row-major") != "row-major":
            raise InputError(f"{path}: unsupported dtype/order {header}")
        shape = tuple(int(s) for s in header["shape"])
        data = np.frombuffer(fh.read(), dtype=_LE_F32)
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise InputError(f"{path}: expected {int(np.prod(shape))} values, found {data.size}")
    return data.reshape(shape).copy()


def save_mask(path: str | Path, mask: np.ndarray) -> Path:
    return save_tensor(path, np.asarray(mask, dtype=bool).astype(np.float32))


def load_mask(path: str | Path) -> np.ndarray:
    return load_tensor(path) > 0.5


def save_voxels(
    path: str | Path,
    grid: np.ndarray,
    spec: Any,
    class_names: list[str] | None = None,
) -> Path:
    """Write a voxel grid plus its ``.json`` sidecar (spec and optional class names)."""
    path = save_tensor(path, grid)
    meta: dict[str, Any] = {"voxel_spec": spec.to_dict()}
    if class_names is not None:
        meta["class_names"] = list(class_names)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path


def load_voxels(path: str | Path) -> tuple[np.ndarray, dict[str, Any]]:
    path = Path(path)
    grid = load_tensor(path)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return grid, meta


def load_labels(path: str | Path) -> tuple[np.ndarray, dict[str, Any]]:
    grid, meta = load_voxels(path)
    return np.rint(grid).astype(np.int64), meta
