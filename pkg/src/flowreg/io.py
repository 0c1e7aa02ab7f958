"""Point cloud files (PLY, XYZ), sample manifests and cached sampled views."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .curation import CurationSample
from .errors import InvalidTransform, MalformedHeader, NonFiniteValue, UnsupportedFormat
from .geometry import RigidTransform
from .sampling import SampledView

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_FLOAT_TYPES = {"f4", "f8"}


def read_point_cloud(path) -> np.ndarray:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".ply":
        return read_ply(path)
    if ext in (".xyz", ".txt"):
        return read_xyz(path)
    raise UnsupportedFormat(f"unsupported point cloud extension {ext!r}")


def write_point_cloud(cloud, path, binary: bool = True) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".ply":
        write_ply(cloud, path, binary=binary)
    elif ext in (".xyz", ".txt"):
        write_xyz(cloud, path)
    else:
        raise UnsupportedFormat(f"unsupported point cloud extension {ext!r}")


def _finite(points: np.ndarray, path) -> np.ndarray:
    if not np.all(np.isfinite(points)):
        raise NonFiniteValue(f"{path}: non-finite coordinate")
    return points


def _parse_ply_header(data: bytes, path):
    if not data.startswith(b"ply"):
        raise MalformedHeader(f"{path}: missing 'ply' magic", offset=0)
    end = data.find(b"end_header")
    if end < 0:
        raise MalformedHeader(f"{path}: no end_header line", offset=len(data))
    nl = data.find(b"\n", end)
    if nl < 0:
        raise MalformedHeader(f"{path}: end_header is not newline-terminated", offset=end)
    body_start = nl + 1
    fmt = None
    elements = []  # [name, count, [(prop_name, dtype or ('list', cnt, item))]]
    offset = 0
    for raw in data[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        tokens = line.split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            pass
        elif tokens[0] == "format":
            if len(tokens) < 2:
                raise MalformedHeader(f"{path}: bad format line", offset=offset)
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise MalformedHeader(f"{path}: bad element line {line!r}", offset=offset)
            elements.append([tokens[1], int(tokens[2]), []])
        elif tokens[0] == "property":
            if not elements:
                raise MalformedHeader(f"{path}: property before any element", offset=offset)
            if len(tokens) == 5 and tokens[1] == "list":
                if tokens[2] not in _PLY_TYPES or tokens[3] not in _PLY_TYPES:
                    raise MalformedHeader(f"{path}: unknown list type in {line!r}", offset=offset)
                elements[-1][2].append((tokens[4], ("list", _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]])))
            elif len(tokens) == 3 and tokens[1] in _PLY_TYPES:
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
            else:
                raise MalformedHeader(f"{path}: bad property line {line!r}", offset=offset)
        else:
            raise MalformedHeader(f"{path}: unexpected header line {line!r}", offset=offset)
        offset += len(raw) + 1
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormat(f"{path}: PLY format {fmt!r} is not supported")
    return fmt, elements, body_start


def read_ply(path) -> np.ndarray:
    """Vertex x/y/z of an ascii or binary-little-endian PLY file."""
    data = Path(path).read_bytes()
    fmt, elements, body = _parse_ply_header(data, path)
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise MalformedHeader(f"{path}: no vertex element", offset=0)
    v_index = names.index("vertex")
    _, count, props = elements[v_index]
    pnames = [p[0] for p in props]
    for axis in "xyz":
        if axis not in pnames:
            raise MalformedHeader(f"{path}: vertex element lacks property {axis!r}", offset=0)
        dtype = props[pnames.index(axis)][1]
        if dtype not in _FLOAT_TYPES:
            raise UnsupportedFormat(f"{path}: property {axis!r} must be float or double")
    if any(isinstance(p[1], tuple) for p in props):
        raise UnsupportedFormat(f"{path}: list properties on vertices are not supported")

    if fmt == "ascii":
        lines = data[body:].split(b"\n")
        skip = sum(e[1] for e in elements[:v_index])
        rows = lines[skip:skip + count]
        if len(rows) < count:
            raise MalformedHeader(f"{path}: expected {count} vertices, file is truncated", offset=len(data))
        cols = [pnames.index(a) for a in "xyz"]
        out = np.empty((count, 3))
        pos = body + sum(len(line) + 1 for line in lines[:skip])
        for i, row in enumerate(rows):
            fields = row.split()
            if len(fields) < len(props):
                raise MalformedHeader(f"{path}: vertex {i} has {len(fields)} fields", offset=pos)
            try:
                out[i] = [float(fields[c]) for c in cols]
            except ValueError:
                raise MalformedHeader(f"{path}: vertex {i} is not numeric", offset=pos) from None
            pos += len(row) + 1
        return _finite(out, path)

    pos = body
    for name, n, eprops in elements[:v_index]:
        if any(isinstance(p[1], tuple) for p in eprops):
            raise UnsupportedFormat(f"{path}: list element {name!r} before vertices")
        pos += n * sum(np.dtype(p[1]).itemsize for p in eprops)
    dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
    need = count * dtype.itemsize
    if pos + need > len(data):
        raise MalformedHeader(
            f"{path}: expected {need} bytes of vertex data, found {max(0, len(data) - pos)}", offset=len(data)
        )
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    out = np.stack([rec[a].astype(np.float64) for a in "xyz"], axis=1)
    return _finite(out, path)


def write_ply(cloud, path, binary: bool = True) -> None:
    P = np.ascontiguousarray(np.asarray(cloud, dtype=np.float64).reshape(-1, 3))
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {len(P)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "end_header\n"
    ).encode("ascii")
    if binary:
        body = P.astype("<f8").tobytes()
    else:
        body = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in P.tolist()).encode("ascii")
    Path(path).write_bytes(header + body)


def read_xyz(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) < 3:
            raise MalformedHeader(f"{path}: line {lineno} has fewer than 3 columns")
        try:
            rows.append([float(f) for f in fields[:3]])
        except ValueError:
            raise MalformedHeader(f"{path}: line {lineno} is not numeric") from None
    return _finite(np.array(rows, dtype=np.float64).reshape(-1, 3), path)


def write_xyz(cloud, path) -> None:
    P = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    Path(path).write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in P.tolist()))


# ---------------------------------------------------------------------------
# manifests

POSES_HEADER = (
    "# world_from_view poses: applying a pose to view-frame points gives world-frame points\n"
    "# one line per view: <view name> then the 4x4 matrix in row-major order; units are meters\n"
)


def write_poses(path, names, poses) -> None:
    lines = [POSES_HEADER]
    for name, T in zip(names, poses):
        M = T.as_matrix() if hasattr(T, "as_matrix") else np.asarray(T)
        lines.append(name + " " + " ".join(repr(float(v)) for v in M.reshape(-1)) + "\n")
    Path(path).write_text("".join(lines))


def read_poses(path) -> tuple[list, list]:
    names, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 17:
            raise MalformedHeader(f"{path}: line {lineno} needs a name and 16 numbers")
        try:
            M = np.array([float(f) for f in fields[1:]]).reshape(4, 4)
        except ValueError:
            raise MalformedHeader(f"{path}: line {lineno} is not numeric") from None
        try:
            poses.append(RigidTransform.from_matrix(M))
        except InvalidTransform as exc:
            raise InvalidTransform(f"{path}: line {lineno}: {exc}") from None
        names.append(fields[0])
    return names, poses


def write_manifest(directory, sample: CurationSample, extra_meta: Optional[dict] = None) -> Path:
    """Write ``views/view_XXX.ply``, ``poses.txt`` and ``meta.json`` under ``directory``."""
    d = Path(directory)
    (d / "views").mkdir(parents=True, exist_ok=True)
    names = [f"view_{i:03d}" for i in range(len(sample.views))]
    for name, P in zip(names, sample.views):
        write_ply(P, d / "views" / f"{name}.ply")
    write_poses(d / "poses.txt", names, sample.gt_poses)
    meta = {
        "n_views": len(sample.views),
        "overlap_edges": [[int(i), int(j), float(r)] for i, j, r in sample.overlap_edges],
        "provenance": sample.provenance,
    }
    meta.update(extra_meta or {})
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def read_manifest(directory) -> CurationSample:
    d = Path(directory)
    names, poses = read_poses(d / "poses.txt")
    files = sorted((d / "views").glob("view_*.ply"))
    if len(files) != len(names):
        raise MalformedHeader(f"{d}: poses.txt lists {len(names)} views but {len(files)} files exist")
    views = []
    for name in names:
        f = d / "views" / f"{name}.ply"
        if not f.exists():
            raise MalformedHeader(f"{d}: missing view file {f.name}")
        views.append(read_ply(f))
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    edges = [tuple(e) for e in meta.get("overlap_edges", [])]
    return CurationSample(views, poses, edges, meta.get("provenance", {}))


def list_manifests(root) -> list:
    root = Path(root)
    if (root / "poses.txt").exists():
        return [root]
    return sorted(p.parent for p in root.glob("*/poses.txt"))


def save_sampled_views(path, sampled) -> None:
    arrays = {}
    for i, sv in enumerate(sampled):
        arrays[f"keypoints_{i}"] = sv.keypoints
        arrays[f"descriptors_{i}"] = sv.descriptors
        arrays[f"reduced_{i}"] = sv.source_reduced
        arrays[f"indices_{i}"] = sv.keypoint_indices
    np.savez(path, n_views=len(sampled), **arrays)


def load_sampled_views(path) -> list:
    with np.load(path) as z:
        return [
            SampledView(z[f"keypoints_{i}"], z[f"descriptors_{i}"], z[f"reduced_{i}"], z[f"indices_{i}"])
            for i in range(int(z["n_views"]))
        ]



# ---------------------------------------------------------------------------
# posed sequences: frames/<name>.ply, poses.txt (sensor -> world), timestamps.txt


def write_sequence(directory, seq) -> Path:
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    names = [f"frame_{k:05d}" for k in range(len(seq.frames))]
    for name, f in zip(names, seq.frames):
        write_ply(f.points, d / "frames" / f"{name}.ply")
    write_poses(d / "poses.txt", names, [f.pose for f in seq.frames])
    (d / "timestamps.txt").write_text(
        "".join(f"{name} {float(f.timestamp)!r}\n" for name, f in zip(names, seq.frames)))
    return d


def read_sequence(directory):
    from .curation import Frame, SequenceData

    d = Path(directory)
    names, poses = read_poses(d / "poses.txt")
    stamps = {}
    for lineno, line in enumerate((d / "timestamps.txt").read_text().splitlines(), 1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if len(fields) != 2:
            raise MalformedHeader(f"{d / 'timestamps.txt'}: line {lineno} needs a name and a time")
        stamps[fields[0]] = float(fields[1])
    frames = []
    for name, pose in zip(names, poses):
        if name not in stamps:
            raise MalformedHeader(f"{d}: no timestamp for frame {name}")
        frames.append(Frame(read_point_cloud(d / "frames" / f"{name}.ply"), pose, stamps[name]))
    return SequenceData(tuple(frames), d.name)
