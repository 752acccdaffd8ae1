"""Readers and writers for splat PLY files, camera rigs, change maps and score tables.

PLY layout follows the common 3DGS export: ``x y z`` position, optional
``nx ny nz``, ``f_dc_0..2`` DC colour, optional ``f_rest_*``, ``opacity``
(pre-sigmoid), ``scale_0..2`` (log axis lengths) and ``rot_0..3``
(quaternion, w first, not normalised).

Camera convention: ``x_cam = R @ x_world + t`` with +x right, +y down and
+z forward (OpenCV / COLMAP). Pixel ``(row, col)`` covers
``[col, col+1) x [row, row+1)`` in image coordinates, so its centre sits
at ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

import csv
import io
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .errors import FormatError, LengthError, UnsupportedModelError, ValidationError

PathLike = Union[str, os.PathLike]

REQUIRED_PROPERTIES = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

LABEL_UNCHANGED = 0
LABEL_STRUCTURAL = 1
LABEL_SURFACE = 2
LABEL_PALETTE = [0, 0, 0, 220, 40, 40, 40, 90, 220]

SCORE_COLUMNS = ("primitive_id", "delta_geo", "delta_app", "omega", "delta_combined")


# ---------------------------------------------------------------------------
# Splat records
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class RawSplatRecord:
    """One primitive exactly as stored on disk (no activations applied)."""

    position: np.ndarray
    rotation: np.ndarray  # (w, x, y, z), unnormalised
    log_scales: np.ndarray
    opacity_logit: float
    sh_dc: np.ndarray
    sh_rest: Optional[np.ndarray] = None


@dataclass(eq=False)
class SplatTable(Sequence):
    """Column-oriented container of raw splat records.

    Behaves like a read-only list of :class:`RawSplatRecord`; the column arrays
    are what the rest of the package consumes.
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scales: np.ndarray
    opacity_logit: np.ndarray
    sh_dc: np.ndarray
    sh_rest: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.position)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(n, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        self.sh_dc = np.asarray(self.sh_dc, dtype=np.float64).reshape(n, 3)
        if self.sh_rest is not None:
            self.sh_rest = np.asarray(self.sh_rest, dtype=np.float64).reshape(n, -1)
            if self.sh_rest.shape[1] == 0:
                self.sh_rest = None
        norms = np.linalg.norm(self.rotation, axis=1)
        if np.any(norms <= 0.0):
            bad = int(np.flatnonzero(norms <= 0.0)[0])
            raise ValidationError(f"record {bad}: zero quaternion")

    def __len__(self) -> int:
        return len(self.position)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return SplatTable.from_records(list(self)[i])
        return RawSplatRecord(
            position=self.position[i].copy(),
            rotation=self.rotation[i].copy(),
            log_scales=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logit[i]),
            sh_dc=self.sh_dc[i].copy(),
            sh_rest=None if self.sh_rest is None else self.sh_rest[i].copy(),
        )

    def __iter__(self) -> Iterator[RawSplatRecord]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_records(cls, records: Iterable[RawSplatRecord]) -> "SplatTable":
        records = list(records)
        if not records:
            return cls.empty()
        rest = None
        if all(r.sh_rest is not None for r in records):
            rest = np.stack([np.asarray(r.sh_rest, dtype=np.float64) for r in records])
        return cls(
            position=np.stack([r.position for r in records]),
            rotation=np.stack([r.rotation for r in records]),
            log_scales=np.stack([r.log_scales for r in records]),
            opacity_logit=np.array([r.opacity_logit for r in records]),
            sh_dc=np.stack([r.sh_dc for r in records]),
            sh_rest=rest,
        )

    @classmethod
    def empty(cls) -> "SplatTable":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))


def _read_source(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if hasattr(source, "read"):
        return source.read()
    return Path(source).read_bytes()


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file (missing 'ply' magic or 'end_header')")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise FormatError("unterminated PLY header")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body_offset = nl + 1

    fmt = None
    elements = []  # (name, count, [(prop_name, dtype or ('list', count_t, item_t))])
    for raw in header[1:]:
        line = raw.strip()
        if not line or line.startswith(("comment", "obj_info")):
            continue
        tok = line.split()
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise FormatError("property declared before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", tok[2], tok[3])))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise FormatError(f"unknown PLY property type {tok[1]!r}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body_offset


def parse_splat_ply(source) -> SplatTable:
    """Parse a 3DGS PLY (bytes, path or binary file object) into a :class:`SplatTable`.

    Property order inside the ``vertex`` element is irrelevant; elements other
    than ``vertex`` are skipped when they precede it and have fixed size.
    """
    data = _read_source(source)
    fmt, elements, offset = _parse_header(data)

    vertex = None
    skip_bytes = 0
    skip_lines = 0
    endian = ">" if fmt == "binary_big_endian" else "<"
    for name, count, props in elements:
        if name == "vertex":
            vertex = (count, props)
            break
        if any(isinstance(t, tuple) for _, t in props):
            raise FormatError(f"cannot skip list-valued element {name!r} preceding 'vertex'")
        skip_bytes += count * sum(np.dtype(t).itemsize for _, t in props)
        skip_lines += count
    if vertex is None:
        raise FormatError("PLY has no 'vertex' element")
    count, props = vertex
    if any(isinstance(t, tuple) for _, t in props):
        raise FormatError("list properties on 'vertex' are not supported")
    names = [p for p, _ in props]
    for req in REQUIRED_PROPERTIES:
        if req not in names:
            raise FormatError(f"missing property {req}")

    if fmt == "ascii":
        lines = data[offset:].decode("ascii").split("\n")
        rows = [ln.split() for ln in lines[skip_lines:] if ln.strip()]
        if len(rows) < count:
            raise LengthError(f"expected {count} vertex rows, found {len(rows)}")
        rows = rows[:count]
        if any(len(r) != len(props) for r in rows):
            raise LengthError("vertex row has wrong number of values")
        table = np.array(rows, dtype=np.float64).reshape(count, len(props))
        column = {n: table[:, k] for k, n in enumerate(names)}
    else:
        dtype = np.dtype([(n, endian + t) for n, t in props])
        start = offset + skip_bytes
        need = count * dtype.itemsize
        if len(data) - start < need:
            raise LengthError(f"vertex payload truncated: need {need} bytes, have {max(len(data) - start, 0)}")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=start)
        column = {n: arr[n].astype(np.float64) for n in names}

    def stack(keys):
        return np.stack([column[k] for k in keys], axis=1) if count else np.zeros((0, len(keys)))

    rest_keys = sorted(
        (n for n in names if re.fullmatch(r"f_rest_\d+", n)), key=lambda n: int(n.split("_")[-1])
    )
    return SplatTable(
        position=stack(["x", "y", "z"]),
        rotation=stack(["rot_0", "rot_1", "rot_2", "rot_3"]),
        log_scales=stack(["scale_0", "scale_1", "scale_2"]),
        opacity_logit=column["opacity"] if count else np.zeros(0),
        sh_dc=stack(["f_dc_0", "f_dc_1", "f_dc_2"]),
        sh_rest=stack(rest_keys) if rest_keys else None,
    )


def write_splat_ply(records, path: Optional[PathLike] = None, binary: bool = True) -> bytes:
    """Serialise records to a float32 3DGS PLY. Returns the bytes; also writes ``path`` if given."""
    table = records if isinstance(records, SplatTable) else SplatTable.from_records(records)
    n = len(table)
    n_rest = 0 if table.sh_rest is None else table.sh_rest.shape[1]
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{k}" for k in range(n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]

    cols = [table.position, np.zeros((n, 3)), table.sh_dc]
    if n_rest:
        cols.append(table.sh_rest)
    cols += [table.opacity_logit[:, None], table.log_scales, table.rotation]
    values = np.concatenate(cols, axis=1).astype(np.float32) if n else np.zeros((0, len(names)), np.float32)

    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0"]
    header.append(f"element vertex {n}")
    header += [f"property float {nm}" for nm in names]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        body = values.astype("<f4").tobytes()
    else:
        body = "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in values).encode("ascii")
    out = head + body
    if path is not None:
        Path(path).write_bytes(out)
    return out


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion, used as given (no normalisation)."""
    w, x, y, z = (float(v) for v in q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmats_to_quats(R) -> np.ndarray:
    """(N, 3, 3) orthonormal matrices -> (N, 4) unit (w, x, y, z) quaternions with w >= 0."""
    xyzw = Rotation.from_matrix(np.asarray(R, dtype=np.float64).reshape(-1, 3, 3)).as_quat()
    q = xyzw[:, [3, 0, 1, 2]]
    return np.where(q[:, :1] < 0, -q, q)


def rotmat_to_quat(R) -> np.ndarray:
    return rotmats_to_quats(R)[0]


def _orthonormality_error(R: np.ndarray) -> float:
    return float(np.max(np.abs(R @ R.T - np.eye(3))))


@dataclass(eq=False)
class CameraRecord:
    """Pinhole camera with a world-to-camera pose (``x_cam = R x_world + t``)."""

    id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"camera {self.id}: image size must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"camera {self.id}: focal lengths must be positive")
        if _orthonormality_error(self.R) > 1e-6:
            raise ValidationError(f"camera {self.id}: rotation is not orthonormal")

    @classmethod
    def from_quaternion(cls, id, width, height, fx, fy, cx, cy, q_wxyz, t, tol: float = 1e-4):
        q = np.asarray(q_wxyz, dtype=np.float64)
        if _orthonormality_error(quat_to_rotmat(q)) > tol:
            raise ValidationError(f"camera {id}: pose quaternion is not unit (non-orthonormal rotation)")
        R = quat_to_rotmat(q / np.linalg.norm(q))
        return cls(int(id), int(width), int(height), float(fx), float(fy), float(cx), float(cy), R, t)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    @property
    def world_to_camera(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def quaternion(self) -> np.ndarray:
        return rotmat_to_quat(self.R)

    def to_json(self) -> dict:
        return {
            "id": int(self.id), "width": int(self.width), "height": int(self.height),
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "q_wxyz": [float(v) for v in self.quaternion()],
            "t": [float(v) for v in self.t],
        }


def _cameras_from_json(doc: dict) -> list[CameraRecord]:
    if "cameras" not in doc:
        raise FormatError("pose JSON must contain a 'cameras' list")
    cams = []
    for entry in doc["cameras"]:
        try:
            args = (entry["id"], entry["width"], entry["height"], entry["fx"], entry["fy"], entry["cx"], entry["cy"])
            if "R" in entry:
                R = np.asarray(entry["R"], dtype=np.float64).reshape(3, 3)
                if _orthonormality_error(R) > 1e-4:
                    raise ValidationError(f"camera {entry['id']}: pose matrix is not orthonormal")
                u, _, vt = np.linalg.svd(R)
                cam = CameraRecord(*[int(a) for a in args[:3]], *[float(a) for a in args[3:]], R=u @ vt, t=entry["t"])
            else:
                cam = CameraRecord.from_quaternion(*args, entry["q_wxyz"], entry["t"])
        except KeyError as exc:
            raise FormatError(f"pose JSON camera entry missing field {exc.args[0]!r}") from None
        cams.append(cam)
    return cams


def _cameras_from_colmap(cameras_txt: str, images_txt: str) -> list[CameraRecord]:
    intrinsics = {}
    for line in cameras_txt.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        cam_id, model, w, h = int(tok[0]), tok[1], int(tok[2]), int(tok[3])
        p = [float(v) for v in tok[4:]]
        if model == "PINHOLE":
            intrinsics[cam_id] = (w, h, p[0], p[1], p[2], p[3])
        elif model == "SIMPLE_PINHOLE":
            intrinsics[cam_id] = (w, h, p[0], p[0], p[1], p[2])
        else:
            raise UnsupportedModelError(f"unsupported camera model {model} (only PINHOLE, SIMPLE_PINHOLE)")

    cams = []
    lines = [ln.strip() for ln in images_txt.splitlines()]
    lines = [ln for ln in lines if not ln.startswith("#")]
    # images.txt alternates a pose line with a (possibly empty) 2D-points line
    k = 0
    while k < len(lines):
        line = lines[k]
        if not line:
            k += 1
            continue
        tok = line.split()
        image_id = int(tok[0])
        q = [float(v) for v in tok[1:5]]
        t = [float(v) for v in tok[5:8]]
        cam_id = int(tok[8])
        if cam_id not in intrinsics:
            raise FormatError(f"image {image_id} references unknown camera {cam_id}")
        w, h, fx, fy, cx, cy = intrinsics[cam_id]
        cams.append(CameraRecord.from_quaternion(image_id, w, h, fx, fy, cx, cy, q, t))
        k += 2
    return sorted(cams, key=lambda c: c.id)


def parse_cameras(source) -> list[CameraRecord]:
    """Load a camera rig.

    ``source`` may be a pose-JSON path or bytes, a COLMAP text model directory
    (containing ``cameras.txt`` and ``images.txt``), or a pair
    ``(cameras_txt, images_txt)`` of text contents.
    """
    if isinstance(source, tuple):
        return _cameras_from_colmap(*source)
    if isinstance(source, (bytes, bytearray)):
        return _cameras_from_json(json.loads(bytes(source).decode("utf-8")))
    if isinstance(source, dict):
        return _cameras_from_json(source)
    path = Path(source)
    if path.is_dir():
        return _cameras_from_colmap((path / "cameras.txt").read_text(), (path / "images.txt").read_text())
    if path.name == "images.txt":
        return _cameras_from_colmap((path.parent / "cameras.txt").read_text(), path.read_text())
    return _cameras_from_json(json.loads(path.read_text()))


def cameras_to_json(cameras: Sequence[CameraRecord], path: Optional[PathLike] = None) -> str:
    text = json.dumps({"cameras": [c.to_json() for c in cameras]}, indent=1)
    if path is not None:
        Path(path).write_text(text)
    return text


def cameras_to_colmap(cameras: Sequence[CameraRecord]) -> tuple[str, str]:
    """Encode a rig as COLMAP ``(cameras.txt, images.txt)`` text, one PINHOLE camera per image."""
    cam_lines = ["# Camera list with one line of data per camera:"]
    img_lines = ["# Image list with two lines of data per image:"]
    for c in cameras:
        fx, fy, cx, cy = (repr(float(v)) for v in (c.fx, c.fy, c.cx, c.cy))
        cam_lines.append(f"{c.id} PINHOLE {c.width} {c.height} {fx} {fy} {cx} {cy}")
        pose = " ".join(repr(float(v)) for v in (*c.quaternion(), *c.t))
        img_lines.append(f"{c.id} {pose} {c.id} view_{c.id}.png")
        img_lines.append("")
    return "\n".join(cam_lines) + "\n", "\n".join(img_lines) + "\n"


# ---------------------------------------------------------------------------
# Maps and tables
# ---------------------------------------------------------------------------


def quantize_map(values: np.ndarray, bits: int = 16) -> np.ndarray:
    """Quantise a [0, 1] map to unsigned integers, rounding halves up."""
    values = np.asarray(values, dtype=np.float64)
    if values.size and (values.min() < 0.0 or values.max() > 1.0 or np.isnan(values).any()):
        raise ValidationError("change map values must lie in [0, 1]")
    if bits not in (8, 16):
        raise ValidationError("bits must be 8 or 16")
    scale = float(2 ** bits - 1)
    q = np.floor(values * scale + 0.5)
    return q.astype(np.uint8 if bits == 8 else np.uint16)


def write_change_map(values: np.ndarray, path: PathLike, bits: int = 16) -> None:
    q = quantize_map(values, bits)
    try:
        Image.fromarray(q).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write change map to {path}: {exc}") from exc


def read_change_map(path: PathLike) -> np.ndarray:
    """Read a grayscale PNG written by :func:`write_change_map` back into [0, 1]."""
    arr = np.array(Image.open(path))
    scale = 255.0 if arr.dtype == np.uint8 else 65535.0
    return arr.astype(np.float64) / scale


def write_label_map(labels: np.ndarray, path: PathLike) -> None:
    """Indexed PNG with 0 = unchanged, 1 = structural, 2 = surface."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 2):
        raise ValidationError("labels must be in {0, 1, 2}")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(LABEL_PALETTE)
    try:
        img.save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write label map to {path}: {exc}") from exc


def read_label_map(path: PathLike) -> np.ndarray:
    return np.array(Image.open(path)).astype(np.uint8)


def write_binary_map(mask: np.ndarray, path: PathLike) -> None:
    """Boolean mask as an 8-bit PNG (0 / 255)."""
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path, format="PNG")


def read_binary_map(path: PathLike) -> np.ndarray:
    return np.array(Image.open(path)) > 127


def write_score_table(scores, path: PathLike) -> None:
    """CSV with one row per retained primitive.

    ``scores`` is a mapping (or object with attributes) providing the
    :data:`SCORE_COLUMNS` as equal-length arrays. Floats are written with
    ``repr`` so the file is a lossless record of the computation.
    """
    get = scores.__getitem__ if isinstance(scores, dict) else lambda k: getattr(scores, k)
    cols = [np.asarray(get(k)) for k in SCORE_COLUMNS]
    n = len(cols[0])
    if any(len(c) != n for c in cols):
        raise ValidationError("score columns have different lengths")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORE_COLUMNS)
    for i in range(n):
        writer.writerow([int(cols[0][i])] + [repr(float(c[i])) for c in cols[1:]])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_score_table(path: PathLike) -> dict:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {"primitive_id": np.array([int(r["primitive_id"]) for r in rows], dtype=np.int64)}
    for k in SCORE_COLUMNS[1:]:
        out[k] = np.array([float(r[k]) for r in rows], dtype=np.float64)
    return out
