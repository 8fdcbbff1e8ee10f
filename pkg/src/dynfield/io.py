"""File formats: a text header followed by a little-endian binary payload.

Header layout::

    DYNFIELD <kind> 1
    meta <key> <json value>
    array <name> <dtype> <dim0,dim1,...>
    end

The payload holds the arrays in header order, C-contiguous. Every file
carries the ``config_hash`` of the run that produced it.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .geometry import ImagingSystem
from .operators import Sinogram, SparseCrtOperator
from .phantom import GridImage

MAGIC = "DYNFIELD"
VERSION = 1


class FormatError(ValueError):
    pass


def write_container(path, kind: str, meta: dict, arrays: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{MAGIC} {kind} {VERSION}"]
    for key in sorted(meta):
        lines.append(f"meta {key} {json.dumps(meta[key], sort_keys=True)}")
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        arr = np.ascontiguousarray(arr, dtype=dt)
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"array {name} {dt.str} {shape}")
        blobs.append(arr.tobytes())
    lines.append("end")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return path


def read_container(path, kind: str | None = None):
    """Return ``(kind, meta, arrays)``."""
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii").split()
        if len(first) != 3 or first[0] != MAGIC:
            raise FormatError(f"{path}: not a {MAGIC} file")
        if kind is not None and first[1] != kind:
            raise FormatError(f"{path}: expected kind {kind!r}, found {first[1]!r}")
        meta, specs = {}, []
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: truncated header")
            line = line.decode("ascii").rstrip("\n")
            if line == "end":
                break
            tag, name, rest = line.split(" ", 2)
            if tag == "meta":
                meta[name] = json.loads(rest)
            elif tag == "array":
                dt, shape = rest.split(" ")
                shape = () if shape == "-" else tuple(int(s) for s in shape.split(","))
                specs.append((name, np.dtype(dt), shape))
            else:
                raise FormatError(f"{path}: bad header line {line!r}")
        arrays = {}
        for name, dt, shape in specs:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dt.itemsize)
            if len(buf) != count * dt.itemsize:
                raise FormatError(f"{path}: truncated payload for {name}")
            arrays[name] = np.frombuffer(buf, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return first[1], meta, arrays


# ----------------------------------------------------------------------------
# typed wrappers


def save_grid_image(path, img: GridImage, config_hash: str = "", **extra) -> Path:
    n = img.n_side
    meta = {"dims": [n, n, img.n_frames], "pixel_pitch": img.pixel_pitch, "config_hash": config_hash, **extra}
    return write_container(path, "grid_image", meta, {"values": img.values, "frame_times": img.frame_times})


def load_grid_image(path) -> tuple[GridImage, dict]:
    _, meta, arr = read_container(path, "grid_image")
    return GridImage(arr["values"], float(meta["pixel_pitch"]), arr["frame_times"]), meta


def save_sinogram(path, d: Sinogram, config_hash: str = "", **extra) -> Path:
    s = d.system
    meta = {
        "K": s.n_frames_K, "S": s.views_per_frame_S, "I": s.rings_per_view_I, "sigma": d.sigma,
        "system": s.to_dict(), "system_hash": s.digest(), "config_hash": config_hash, **extra,
    }
    return write_container(path, "sinogram", meta, {"frames": d.frames.astype("<f8")})


def load_sinogram(path) -> tuple[Sinogram, dict]:
    _, meta, arr = read_container(path, "sinogram")
    sys = ImagingSystem(**meta["system"])
    return Sinogram(arr["frames"], float(meta["sigma"]), sys), meta


def save_operator(path, op: SparseCrtOperator) -> Path:
    blocks = [b.tocsc() for b in op.blocks]
    arrays = {
        "nnz": np.array([b.nnz for b in blocks], dtype=np.int64),
        "indptr": np.concatenate([b.indptr.astype(np.int64) for b in blocks]),
        "indices": np.concatenate([b.indices.astype(np.int64) for b in blocks]),
        "data": np.concatenate([b.data for b in blocks]),
    }
    meta = {"system": op.system.to_dict(), "n_side": op.n_side, "shape": list(op.shape)}
    return write_container(path, "sparse_crt", meta, arrays)


def load_operator(path) -> SparseCrtOperator:
    _, meta, arr = read_container(path, "sparse_crt")
    m, n = meta["shape"]
    blocks, p0, z0 = [], 0, 0
    for nnz in arr["nnz"]:
        indptr = arr["indptr"][p0:p0 + n + 1]
        blocks.append(sp.csc_matrix((arr["data"][z0:z0 + nnz], arr["indices"][z0:z0 + nnz], indptr), shape=(m, n)))
        p0 += n + 1
        z0 += nnz
    return SparseCrtOperator(blocks, ImagingSystem(**meta["system"]), int(meta["n_side"]))


def cached_operator(cache_dir, sys: ImagingSystem, n_side: int, oversample: int = 4) -> SparseCrtOperator:
    """Build or load the sparse operator keyed by (system, grid)."""
    from .operators import build_sparse_crt

    path = Path(cache_dir) / f"crt_{sys.digest()}_{n_side}_{oversample}.bin"
    if path.exists():
        return load_operator(path)
    op = build_sparse_crt(sys, n_side, oversample)
    save_operator(path, op)
    return op


def save_pounet(path, xi, config_hash: str = "", **extra) -> Path:
    net = xi.partition
    meta = {
        "width": net.width, "depth": net.depth, "P": net.n_partitions, "M": xi.basis.M,
        "omega0": net.omega0, "omega_hidden": net.omega_hidden,
        "exponents": [list(e) for e in xi.basis.exponents],
        "domain": [xi.domain.half_width, xi.domain.duration], "config_hash": config_hash, **extra,
    }
    arrays = {f"a{i}": a.astype("<f8") for i, a in enumerate(net.arrays())}
    arrays["C"] = xi.coeffs.astype("<f8")
    return write_container(path, "pounet", meta, arrays)


def load_pounet(path):
    from .geometry import DomainBox
    from .pounet import PartitionNet, PolyBasis, PouNet

    _, meta, arr = read_container(path, "pounet")
    n = 2 * (meta["depth"] + 1)
    flat = [arr[f"a{i}"] for i in range(n)]
    net = PartitionNet(flat[0::2], flat[1::2], meta["omega0"], meta["omega_hidden"])
    basis = PolyBasis(tuple(tuple(e) for e in meta["exponents"]))
    return PouNet(net, arr["C"], basis, DomainBox(*meta["domain"])), meta
