"""Binary PLY ingestion/export for 3D Gaussian Splatting assets.

The vertex payload is kept as a numpy structured array in its on-disk
little-endian layout, so subsetting and re-saving never touches the float
bits of surviving splats.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyScene, MissingProperty, TruncatedPayload, UnsupportedFormat

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_DTYPE_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
                 "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}

REQUIRED = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
            "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")

# number of f_rest_* properties -> SH degree
_REST_TO_DEGREE = {3 * ((L + 1) ** 2 - 1): L for L in range(4)}


def n_rest(sh_degree: int) -> int:
    return 3 * ((sh_degree + 1) ** 2 - 1)


def standard_properties(sh_degree: int, normals: bool = True) -> list[str]:
    """Property order written by the reference 3DGS exporter."""
    names = ["x", "y", "z"]
    if normals:
        names += ["nx", "ny", "nz"]
    names += ["f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(n_rest(sh_degree))]
    names += ["opacity", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def normalize_quaternions(q):
    """Unit-normalize (N, 4) wxyz quaternions; zero quaternions become identity."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    bad = norm[..., 0] == 0
    out = q / np.where(norm == 0, 1.0, norm)
    if np.any(bad):
        out[bad] = (1.0, 0.0, 0.0, 0.0)
    return out


def quaternion_to_matrix(q):
    """Rotation matrices (..., 3, 3) from unit wxyz quaternions (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class GaussianSplat:
    """One primitive in stored parameter form (float64 copies)."""

    position: np.ndarray
    scale_log: np.ndarray
    rotation: np.ndarray  # wxyz, unit-normalized at load
    opacity_logit: float
    sh_dc: np.ndarray
    sh_rest: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def sh_degree(self) -> int:
        return _REST_TO_DEGREE[len(self.sh_rest)]


def opacity_linear(splat: GaussianSplat) -> float:
    return float(sigmoid(np.array([splat.opacity_logit]))[0])


def covariances(rotations, scale_logs):
    """Batched R diag(exp(s))^2 R^T for (N, 4) quaternions and (N, 3) log-scales."""
    R = quaternion_to_matrix(normalize_quaternions(rotations))
    var = np.exp(2.0 * np.asarray(scale_logs, dtype=np.float64))
    cov = np.einsum("nij,nj,nkj->nik", R, var, R)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def covariance(splat: GaussianSplat) -> np.ndarray:
    return covariances(splat.rotation[None], splat.scale_log[None])[0]


class SplatScene:
    """Ordered splats backed by the raw vertex records of a PLY file.

    ``data`` is a structured array with the file's property order and
    little-endian dtypes.  Derived float64 views are computed on access.
    """

    def __init__(self, data: np.ndarray, comments: list[str] | None = None):
        names = data.dtype.names or ()
        for name in REQUIRED:
            if name not in names:
                raise MissingProperty(name)
        rest = [n for n in names if n.startswith("f_rest_")]
        if len(rest) not in _REST_TO_DEGREE:
            raise UnsupportedFormat(f"{len(rest)} f_rest properties do not match any SH degree")
        self.data = data
        self.sh_degree = _REST_TO_DEGREE[len(rest)]
        self.comments = list(comments or [])

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_arrays(cls, positions, scale_log, rotation, opacity_logit, sh_dc,
                    sh_rest=None, normals: bool = True) -> "SplatScene":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        if sh_rest is None:
            sh_rest = np.zeros((n, 0))
        sh_rest = np.asarray(sh_rest, dtype=np.float64).reshape(n, -1)
        if sh_rest.shape[1] not in _REST_TO_DEGREE:
            raise UnsupportedFormat(f"sh_rest width {sh_rest.shape[1]} is not 3*((L+1)^2-1)")
        degree = _REST_TO_DEGREE[sh_rest.shape[1]]
        names = standard_properties(degree, normals=normals)
        data = np.zeros(n, dtype=[(name, "<f4") for name in names])
        for axis, name in enumerate("xyz"):
            data[name] = positions[:, axis]
        columns = {
            "f_dc_": np.asarray(sh_dc, dtype=np.float64).reshape(n, 3),
            "f_rest_": sh_rest,
            "scale_": np.asarray(scale_log, dtype=np.float64).reshape(n, 3),
            "rot_": np.asarray(rotation, dtype=np.float64).reshape(n, 4),
        }
        for prefix, values in columns.items():
            for j in range(values.shape[1]):
                data[f"{prefix}{j}"] = values[:, j]
        data["opacity"] = np.asarray(opacity_logit, dtype=np.float64).reshape(n)
        return cls(data)

    # -- array views ----------------------------------------------------------

    def __len__(self) -> int:
        return len(self.data)

    @property
    def property_names(self) -> list[str]:
        return list(self.data.dtype.names)

    def _columns(self, names) -> np.ndarray:
        if not names:
            return np.zeros((len(self.data), 0))
        return np.stack([self.data[n].astype(np.float64) for n in names], axis=1)

    @property
    def positions(self) -> np.ndarray:
        return self._columns(["x", "y", "z"])

    @property
    def scale_log(self) -> np.ndarray:
        return self._columns(["scale_0", "scale_1", "scale_2"])

    @property
    def rotations(self) -> np.ndarray:
        return normalize_quaternions(self._columns(["rot_0", "rot_1", "rot_2", "rot_3"]))

    @property
    def opacity_logit(self) -> np.ndarray:
        return self.data["opacity"].astype(np.float64)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @property
    def sh_dc(self) -> np.ndarray:
        return self._columns(["f_dc_0", "f_dc_1", "f_dc_2"])

    @property
    def sh_rest(self) -> np.ndarray:
        return self._columns([f"f_rest_{i}" for i in range(n_rest(self.sh_degree))])

    def __getitem__(self, i: int) -> GaussianSplat:
        row = self.data[i:i + 1]
        sub = SplatScene(row)
        return GaussianSplat(
            position=sub.positions[0],
            scale_log=sub.scale_log[0],
            rotation=sub.rotations[0],
            opacity_logit=float(sub.opacity_logit[0]),
            sh_dc=sub.sh_dc[0],
            sh_rest=sub.sh_rest[0],
        )

    @property
    def splats(self) -> list[GaussianSplat]:
        return [self[i] for i in range(len(self))]

    def subset(self, ids) -> "SplatScene":
        """Scene of the given rows in the given order; records copied verbatim."""
        return SplatScene(self.data[np.asarray(ids, dtype=np.int64)], self.comments)


# -- PLY ------------------------------------------------------------------------

_PROPERTY_RE = re.compile(r"^property\s+(\S+)\s+(\S+)$")


def _read_header(buf: bytes) -> tuple[int, list[str], list[tuple[str, str]], int]:
    if not buf.startswith(b"ply"):
        raise UnsupportedFormat("not a PLY file (missing 'ply' magic)")
    end = buf.find(b"end_header")
    if end < 0:
        raise TruncatedPayload("header has no end_header line")
    nl = buf.find(b"\n", end)
    if nl < 0:
        raise TruncatedPayload("header not terminated by newline")
    lines = buf[:end].decode("ascii", errors="replace").splitlines()
    count = None
    comments: list[str] = []
    props: list[tuple[str, str]] = []
    fmt = None
    for line in lines[1:]:
        line = line.strip()
        if not line:
            continue
        if line.startswith("format"):
            fmt = line.split()[1:]
        elif line.startswith("comment") or line.startswith("obj_info"):
            comments.append(line)
        elif line.startswith("element"):
            parts = line.split()
            if parts[1] != "vertex" or count is not None:
                raise UnsupportedFormat(f"unsupported element {parts[1]!r}; only one 'vertex' element is allowed")
            count = int(parts[2])
        elif line.startswith("property"):
            m = _PROPERTY_RE.match(line)
            if m is None or m.group(1) not in PLY_TYPES:
                raise UnsupportedFormat(f"unsupported property declaration {line!r}")
            props.append((m.group(2), PLY_TYPES[m.group(1)]))
        else:
            raise UnsupportedFormat(f"unrecognized header line {line!r}")
    if fmt is None or fmt[0] != "binary_little_endian" or fmt[1:] != ["1.0"]:
        raise UnsupportedFormat(f"format {' '.join(fmt or ['<none>'])!r}; only binary_little_endian 1.0 is supported")
    if count is None:
        raise UnsupportedFormat("no vertex element")
    return count, comments, props, nl + 1


def load_ply(source) -> SplatScene:
    """Parse a binary little-endian 3DGS PLY from bytes, a path, or a binary file."""
    if isinstance(source, (bytes, bytearray, memoryview)):
        buf = bytes(source)
    elif hasattr(source, "read"):
        buf = source.read()
    else:
        with open(source, "rb") as fh:
            buf = fh.read()
    count, comments, props, offset = _read_header(buf)
    dtype = np.dtype([(name, "<" + code) for name, code in props])
    expected = count * dtype.itemsize
    if len(buf) - offset != expected:
        raise TruncatedPayload(f"vertex payload is {len(buf) - offset} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).copy()
    return SplatScene(data, comments)


def save_ply(scene: SplatScene, dest=None) -> bytes:
    """Serialize ``scene``; also write to ``dest`` (path or binary file) if given."""
    if len(scene) == 0:
        raise EmptyScene("cannot save a scene with no splats")
    header = ["ply", "format binary_little_endian 1.0", *scene.comments,
              f"element vertex {len(scene)}"]
    for name in scene.data.dtype.names:
        code = scene.data.dtype[name].str[1:]
        header.append(f"property {_DTYPE_TO_PLY[code]} {name}")
    header.append("end_header")
    out = ("\n".join(header) + "\n").encode("ascii") + scene.data.tobytes()
    if dest is not None:
        if hasattr(dest, "write"):
            dest.write(out)
        else:
            with open(dest, "wb") as fh:
                fh.write(out)
    return out


def vertex_payload(buf: bytes) -> bytes:
    """Raw vertex bytes following the header (for byte-level comparisons)."""
    _, _, _, offset = _read_header(buf)
    return buf[offset:]


__all__ = [
    "GaussianSplat", "SplatScene", "load_ply", "save_ply", "opacity_linear",
    "covariance", "covariances", "sigmoid", "normalize_quaternions",
    "quaternion_to_matrix", "standard_properties", "vertex_payload", "n_rest",
]
