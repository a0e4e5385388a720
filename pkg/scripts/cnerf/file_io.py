"""On-disk formats for every artifact the pipeline reads or writes.

  PPM (P6, maxval 255)          color images
  PFM (Pf, scale -1.0)          depth maps, little-endian, rows bottom-to-top
  PLY (binary little-endian)    triangulated clouds: x y z confidence as doubles
  JSON lines                    correspondences, one record per line
  JSON                          cameras, scene description, augmentation maps, reports
  CSV                           metrics trace and ablation tables
  checkpoint                    b"CNRFCKPT", u32 version, u32 header length,
                                JSON header, then params, Adam m, Adam v as
                                little-endian float64

Every writer goes through _write_bytes (temp file + fsync + rename), so a
crashed run never leaves a half-written artifact under the final name.
Readers raise MissingInputError for absent files and InputFormatError with
a line number (0 for binary payload problems) for malformed ones.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, Union

import numpy as np

from cnerf.corres import Correspondence, PixelMap, PointCloud, Provenance
from cnerf.debug import debug_log
from cnerf.errors import CnerfError, InputFormatError, MissingInputError
from cnerf.field import AdamState, FieldArchitecture, FieldParams, PositionalEncoding
from cnerf.geometry import Camera, PixelCoord
from cnerf.synth.scene import AnalyticScene

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = b"CNRFCKPT"
CHECKPOINT_VERSION = 1
CORRESPONDENCE_FIELDS = ("image_q", "image_s", "u_q", "v_q", "u_s", "v_s", "confidence")


# ============================================================================
# Write primitive
# ============================================================================


def _write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write payload to a sibling temp file, fsync, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fp:
        fp.write(payload)
        fp.flush()
        os.fsync(fp.fileno())
    os.replace(tmp, path)
    debug_log(f"wrote {path} ({len(payload)} bytes)")
    return path


def _read_bytes(path: PathLike, what: str) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(path, what)
    return path.read_bytes()


def _read_json(path: PathLike, what: str) -> Any:
    text = _read_bytes(path, what).decode("utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputFormatError(path, exc.lineno, exc.msg) from None


def write_json(path: PathLike, data: Any) -> Path:
    """Sorted keys, 2-space indent, trailing newline."""
    return _write_bytes(path, (json.dumps(data, sort_keys=True, indent=2) + "\n").encode("utf-8"))


# ============================================================================
# Images
# ============================================================================


def _netpbm_header(data: bytes, path: PathLike, count: int) -> tuple[list[bytes], int]:
    """First `count` whitespace-separated header tokens (comments skipped) and the payload offset."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise InputFormatError(path, 1, "truncated header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def write_ppm(path: PathLike, image: np.ndarray) -> Path:
    """Color image in [0, 1], shape (h, w, 3), quantized to 8 bits."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise CnerfError(f"write_ppm expects (h, w, 3), got {image.shape}")
    h, w, _ = image.shape
    pixels = np.round(np.clip(np.nan_to_num(image), 0.0, 1.0) * 255.0).astype(np.uint8)
    return _write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_ppm(path: PathLike) -> np.ndarray:
    """(h, w, 3) float64 in [0, 1]."""
    data = _read_bytes(path, "PPM image")
    tokens, offset = _netpbm_header(data, path, 4)
    if tokens[0] != b"P6":
        raise InputFormatError(path, 1, f"expected P6 magic, got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise InputFormatError(path, 1, "non-integer size or maxval") from None
    if not 0 < maxval <= 255:
        raise InputFormatError(path, 1, f"maxval must lie in 1..255, got {maxval}")
    payload = data[offset:offset + w * h * 3]
    if len(payload) != w * h * 3:
        raise InputFormatError(path, 0, f"expected {w * h * 3} pixel bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / maxval


def write_pfm(path: PathLike, depth: np.ndarray) -> Path:
    """Single-channel float map (h, w); float32 little-endian, bottom row first."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise CnerfError(f"write_pfm expects (h, w), got {depth.shape}")
    h, w = depth.shape
    body = np.flipud(depth).astype("<f4").tobytes()
    return _write_bytes(path, f"Pf\n{w} {h}\n-1.0\n".encode("ascii") + body)


def read_pfm(path: PathLike) -> np.ndarray:
    data = _read_bytes(path, "PFM depth map")
    tokens, offset = _netpbm_header(data, path, 4)
    if tokens[0] not in (b"Pf", b"PF"):
        raise InputFormatError(path, 1, f"expected Pf/PF magic, got {tokens[0]!r}")
    channels = 1 if tokens[0] == b"Pf" else 3
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError:
        raise InputFormatError(path, 1, "malformed size or scale") from None
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * channels
    payload = data[offset:offset + 4 * n]
    if len(payload) != 4 * n:
        raise InputFormatError(path, 0, f"expected {4 * n} payload bytes, got {len(payload)}")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(np.frombuffer(payload, dtype=dtype).reshape(shape)).astype(np.float64)


# ============================================================================
# Point clouds
# ============================================================================

_PLY_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("confidence", "<f8")])


def write_ply(path: PathLike, cloud: PointCloud) -> Path:
    n = len(cloud.points)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        "property double confidence\n"
        "end_header\n"
    )
    rows = np.zeros(n, dtype=_PLY_DTYPE)
    if n:
        rows["x"], rows["y"], rows["z"] = cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]
        rows["confidence"] = cloud.confidence
    return _write_bytes(path, header.encode("ascii") + rows.tobytes())


def read_ply(path: PathLike) -> PointCloud:
    """Reads back the layout write_ply produces (and nothing more general)."""
    data = _read_bytes(path, "PLY point cloud")
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise InputFormatError(path, 1, "not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    count = None
    for lineno, line in enumerate(header, start=1):
        parts = line.split()
        if parts[:1] == ["format"] and parts[1:2] != ["binary_little_endian"]:
            raise InputFormatError(path, lineno, f"unsupported PLY format {line!r}")
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
    if count is None:
        raise InputFormatError(path, 1, "missing vertex element")
    body = data[end + len(b"end_header\n"):]
    if len(body) != count * _PLY_DTYPE.itemsize:
        raise InputFormatError(path, 0, f"expected {count} vertices, payload holds {len(body) / _PLY_DTYPE.itemsize}")
    rows = np.frombuffer(body, dtype=_PLY_DTYPE)
    points = np.stack([rows["x"], rows["y"], rows["z"]], axis=1) if count else np.zeros((0, 3))
    return PointCloud(points, rows["confidence"].astype(np.float64), skipped=0)


# ============================================================================
# Correspondences
# ============================================================================


def correspondence_to_record(c: Correspondence) -> dict[str, Any]:
    return {
        "image_q": c.image_q,
        "image_s": c.image_s,
        "u_q": c.p_q.u,
        "v_q": c.p_q.v,
        "u_s": c.p_s.u,
        "v_s": c.p_s.v,
        "confidence": c.confidence,
        "provenance": c.provenance.value,
    }


def write_correspondences(path: PathLike, corrs: Iterable[Correspondence]) -> Path:
    lines = [json.dumps(correspondence_to_record(c), sort_keys=True) for c in corrs]
    return _write_bytes(path, "".join(line + "\n" for line in lines).encode("utf-8"))


def read_correspondences(path: PathLike) -> list[Correspondence]:
    """Parse JSON lines; unknown extra fields are ignored, blank lines skipped."""
    text = _read_bytes(path, "correspondence file").decode("utf-8")
    out: list[Correspondence] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputFormatError(path, lineno, f"invalid JSON: {exc.msg}") from None
        if not isinstance(record, dict):
            raise InputFormatError(path, lineno, "record must be a JSON object")
        missing = [k for k in CORRESPONDENCE_FIELDS if k not in record]
        if missing:
            raise InputFormatError(path, lineno, f"missing field(s): {', '.join(missing)}")
        try:
            out.append(Correspondence(
                str(record["image_q"]),
                str(record["image_s"]),
                PixelCoord(float(record["u_q"]), float(record["v_q"])),
                PixelCoord(float(record["u_s"]), float(record["v_s"])),
                float(record["confidence"]),
                Provenance(record.get("provenance", Provenance.DIRECT.value)),
            ))
        except (TypeError, ValueError, CnerfError) as exc:
            raise InputFormatError(path, lineno, str(exc)) from None
    return out


def write_transforms(path: PathLike, transforms: Sequence[PixelMap]) -> Path:
    return write_json(path, {"transforms": [t.to_dict() for t in transforms]})


def read_transforms(path: PathLike) -> list[PixelMap]:
    data = _read_json(path, "transform list")
    try:
        return [PixelMap.from_dict(entry) for entry in data["transforms"]]
    except (KeyError, TypeError, ValueError, CnerfError) as exc:
        raise InputFormatError(path, 1, f"bad transform list: {exc}") from None


# ============================================================================
# Cameras and scenes
# ============================================================================


def camera_to_dict(camera: Camera) -> dict[str, Any]:
    return {
        "name": camera.name,
        "width": camera.width,
        "height": camera.height,
        "intrinsics": camera.intrinsics.tolist(),
        "rotation": camera.rotation.tolist(),
        "translation": camera.translation.tolist(),
    }


def write_cameras(path: PathLike, cameras: Sequence[Camera]) -> Path:
    return write_json(path, {"cameras": [camera_to_dict(c) for c in cameras]})


def read_cameras(path: PathLike) -> list[Camera]:
    data = _read_json(path, "camera file")
    if not isinstance(data, dict) or not isinstance(data.get("cameras"), list):
        raise InputFormatError(path, 1, "expected an object with a 'cameras' list")
    cameras = []
    for i, entry in enumerate(data["cameras"]):
        try:
            cameras.append(Camera(
                np.array(entry["intrinsics"], dtype=np.float64),
                np.array(entry["rotation"], dtype=np.float64),
                np.array(entry["translation"], dtype=np.float64),
                int(entry["width"]),
                int(entry["height"]),
                str(entry["name"]),
            ))
        except (KeyError, TypeError, ValueError, CnerfError) as exc:
            raise InputFormatError(path, 1, f"camera #{i}: {exc}") from None
    names = [c.name for c in cameras]
    if len(set(names)) != len(names):
        raise InputFormatError(path, 1, "camera names must be unique")
    return cameras


def write_scene(path: PathLike, scene: AnalyticScene) -> Path:
    return write_json(path, scene.to_dict())


def read_scene(path: PathLike) -> AnalyticScene:
    return AnalyticScene.from_dict(_read_json(path, "scene file"), source=str(path))


# ============================================================================
# CSV
# ============================================================================


def _csv_cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return str(value)


def write_csv(path: PathLike, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_csv_cell(row.get(c, "")) for c in columns])
    return _write_bytes(path, buf.getvalue().encode("utf-8"))


def read_csv(path: PathLike) -> list[dict[str, str]]:
    text = _read_bytes(path, "CSV file").decode("utf-8")
    return list(csv.DictReader(io.StringIO(text)))


# ============================================================================
# Checkpoints
# ============================================================================


def _architecture_to_dict(arch: FieldArchitecture) -> dict[str, Any]:
    return {
        "num_frequencies_position": arch.encoding.num_frequencies_position,
        "num_frequencies_direction": arch.encoding.num_frequencies_direction,
        "hidden_layers": arch.hidden_layers,
        "hidden_width": arch.hidden_width,
        "color_width": arch.color_width,
        "activation": arch.activation,
    }


def _architecture_from_dict(data: Mapping[str, Any]) -> FieldArchitecture:
    return FieldArchitecture(
        encoding=PositionalEncoding(int(data["num_frequencies_position"]), int(data["num_frequencies_direction"])),
        hidden_layers=int(data["hidden_layers"]),
        hidden_width=int(data["hidden_width"]),
        color_width=int(data["color_width"]),
        activation=str(data["activation"]),
    )


def write_checkpoint(path: PathLike, params: FieldParams, state: AdamState, iteration: int) -> Path:
    arch = params.architecture
    header = {
        "architecture": _architecture_to_dict(arch),
        "parameter_shapes": {k: list(v) for k, v in arch.parameter_shapes().items()},
        "parameter_count": params.size,
        "optimizer": {"name": "adam", "step": state.step},
        "iteration": int(iteration),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.asarray(a, dtype="<f8").tobytes() for a in (params.flatten(), state.m, state.v))
    prefix = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes))
    return _write_bytes(path, prefix + header_bytes + body)


def read_checkpoint(path: PathLike) -> tuple[FieldParams, AdamState, int]:
    """(params, optimizer state, iteration count)."""
    data = _read_bytes(path, "checkpoint")
    if not data.startswith(CHECKPOINT_MAGIC) or len(data) < len(CHECKPOINT_MAGIC) + 8:
        raise InputFormatError(path, 0, "not a cnerf checkpoint")
    version, header_len = struct.unpack_from("<II", data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise InputFormatError(path, 0, f"unsupported checkpoint version {version}")
    start = len(CHECKPOINT_MAGIC) + 8
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
        arch = _architecture_from_dict(header["architecture"])
        step = int(header["optimizer"]["step"])
        iteration = int(header["iteration"])
    except (KeyError, TypeError, ValueError, UnicodeDecodeError, CnerfError) as exc:
        raise InputFormatError(path, 0, f"bad checkpoint header: {exc}") from None
    n = sum(int(np.prod(s)) for s in arch.parameter_shapes().values())
    body = data[start + header_len:]
    if len(body) != 3 * 8 * n:
        raise InputFormatError(path, 0, f"expected {3 * n} float64 values, payload holds {len(body) // 8}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    params = FieldParams.unflatten(arch, values[:n])
    state = AdamState(values[n:2 * n].copy(), values[2 * n:].copy(), step)
    return params, state, iteration
