"""Read and write ``.xyz`` text files and PLY (ascii / binary) point clouds."""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .geometry import PointCloud

__all__ = ["read_xyz", "write_xyz", "read_ply", "write_ply", "read_point_cloud", "write_point_cloud"]

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _cloud_from_columns(data: np.ndarray, path) -> PointCloud:
    if data.shape[1] not in (3, 6):
        raise ContractError(f"{path}: expected 3 or 6 columns, got {data.shape[1]}")
    normals = None
    if data.shape[1] == 6:
        normals = data[:, 3:6]
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(np.abs(lengths - 1.0) > 1e-6):
            # low-precision files (float32, few digits) drift past the unit tolerance
            normals = normals / np.where(lengths > 0, lengths, 1.0)
    return PointCloud(data[:, :3], normals)


def read_xyz(path) -> PointCloud:
    data = np.loadtxt(path, dtype=np.float64, ndmin=2, comments="#")
    if data.size == 0:
        raise ContractError(f"{path}: no points")
    return _cloud_from_columns(data, path)


def write_xyz(path, cloud: PointCloud) -> None:
    cols = cloud.positions if cloud.normals is None else np.hstack([cloud.positions, cloud.normals])
    np.savetxt(path, cols, fmt="%.17g")


def read_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ContractError(f"{path}: not a PLY file")
        fmt = None
        elements: list[tuple[str, int, list[tuple[str, str]]]] = []
        while True:
            line = fh.readline()
            if not line:
                raise ContractError(f"{path}: truncated PLY header")
            words = line.decode("ascii").split()
            if not words or words[0] in ("comment", "obj_info"):
                continue
            if words[0] == "format":
                fmt = words[1]
            elif words[0] == "element":
                elements.append((words[1], int(words[2]), []))
            elif words[0] == "property":
                if words[1] == "list":
                    elements[-1][2].append((words[4], "list:" + words[2] + ":" + words[3]))
                else:
                    elements[-1][2].append((words[2], _PLY_TYPES[words[1]]))
            elif words[0] == "end_header":
                break
        vertex = None
        for name, count, props in elements:
            if fmt == "ascii":
                rows = [fh.readline().split() for _ in range(count)]
                if name == "vertex":
                    arr = np.array(rows, dtype=np.float64).reshape(count, -1)
                    vertex = {p: arr[:, i] for i, (p, _) in enumerate(props)}
            else:
                order = "<" if fmt == "binary_little_endian" else ">"
                if any(t.startswith("list:") for _, t in props):
                    if name == "vertex":
                        raise ContractError(f"{path}: list properties on vertices are unsupported")
                    for _ in range(count):  # skip variable-length rows (faces)
                        for _, t in props:
                            _, ct, it = t.split(":")
                            n = int(np.frombuffer(fh.read(np.dtype(_PLY_TYPES[ct]).itemsize),
                                                  order + _PLY_TYPES[ct])[0])
                            fh.read(n * np.dtype(_PLY_TYPES[it]).itemsize)
                    continue
                dtype = np.dtype([(p, order + t) for p, t in props])
                arr = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)
                if name == "vertex":
                    vertex = {p: arr[p].astype(np.float64) for p, _ in props}
            if name == "vertex":
                break
    if vertex is None or not {"x", "y", "z"} <= set(vertex):
        raise ContractError(f"{path}: PLY has no vertex x/y/z properties")
    cols = [vertex["x"], vertex["y"], vertex["z"]]
    if {"nx", "ny", "nz"} <= set(vertex):
        cols += [vertex["nx"], vertex["ny"], vertex["nz"]]
    return _cloud_from_columns(np.stack(cols, 1), path)


def write_ply(path, cloud: PointCloud, binary: bool = False) -> None:
    has_n = cloud.normals is not None
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_n else [])
    fmt = f"binary_{sys.byteorder}_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(cloud)}"]
    header += [f"property double {p}" for p in props]
    header.append("end_header")
    cols = cloud.positions if not has_n else np.hstack([cloud.positions, cloud.normals])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(cols, dtype=np.float64).tobytes())
        else:
            np.savetxt(fh, cols, fmt="%.17g")


def read_point_cloud(path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix in (".xyz", ".txt", ".pts"):
        return read_xyz(path)
    raise ContractError(f"unsupported point cloud extension {suffix!r}")


def write_point_cloud(path, cloud: PointCloud) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        write_ply(path, cloud)
    elif suffix in (".xyz", ".txt", ".pts"):
        write_xyz(path, cloud)
    else:
        raise ContractError(f"unsupported point cloud extension {suffix!r}")
