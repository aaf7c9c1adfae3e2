"""Point-cloud text input and OBJ / binary PLY mesh export."""
from __future__ import annotations

import os

import numpy as np


class PointCloudParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


def read_points(path: str | os.PathLike) -> np.ndarray:
    """One ``x y z`` triple per line (meters); blank lines and ``#`` comments skipped."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.replace(",", " ").split()
            if len(parts) != 3:
                raise PointCloudParseError(path, lineno, f"expected 3 values, found {len(parts)}")
            try:
                xyz = [float(v) for v in parts]
            except ValueError:
                raise PointCloudParseError(path, lineno, f"not a number in {text!r}") from None
            if not all(np.isfinite(xyz)):
                raise PointCloudParseError(path, lineno, "non-finite coordinate")
            rows.append(xyz)
    if not rows:
        raise PointCloudParseError(path, 0, "no points")
    return np.array(rows, dtype=np.float64)


def write_points(path: str | os.PathLike, points: np.ndarray, extra: np.ndarray | None = None) -> None:
    data = points if extra is None else np.column_stack([points, extra])
    np.savetxt(path, data, fmt="%.6f")


def write_obj(path: str | os.PathLike, vertices: np.ndarray, faces: np.ndarray) -> None:
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in np.asarray(faces, dtype=np.int64) + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def write_ply(path: str | os.PathLike, vertices: np.ndarray, faces: np.ndarray) -> None:
    verts = np.ascontiguousarray(vertices, dtype="<f4")
    faces = np.asarray(faces, dtype=np.int64)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(verts)}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {len(faces)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    rec = np.zeros(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    rec["n"] = 3
    rec["idx"] = faces
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(verts.tobytes())
        fh.write(rec.tobytes())


def read_ply(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Reader for the triangle-only binary PLY files written by :func:`write_ply`."""
    with open(path, "rb") as fh:
        buf = fh.read()
    end = buf.index(b"end_header\n") + len(b"end_header\n")
    header = buf[:end].decode("ascii").splitlines()
    nv = int(next(h for h in header if h.startswith("element vertex")).split()[-1])
    nf = int(next(h for h in header if h.startswith("element face")).split()[-1])
    verts = np.frombuffer(buf, dtype="<f4", count=3 * nv, offset=end).reshape(nv, 3)
    rec = np.frombuffer(buf, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=nf, offset=end + 12 * nv)
    return verts.astype(np.float64), rec["idx"].astype(np.int64)


def write_mesh(path: str | os.PathLike, vertices: np.ndarray, faces: np.ndarray) -> None:
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext == ".obj":
        write_obj(path, vertices, faces)
    elif ext == ".ply":
        write_ply(path, vertices, faces)
    else:
        raise ValueError(f"unsupported mesh extension {ext!r} (use .obj or .ply)")
