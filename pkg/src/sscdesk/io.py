"""Binary formats: DPM1 depth maps, VXG1 label grids, flat float64 checkpoints
and the CSV loss log.  Every writer/reader pair round-trips bit-exactly."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

LOSS_COLUMNS = ("step", "total", "ce", "scal_geo", "scal_sem", "depth")


def _read_header(raw: bytes, magic: str, n_fields: int):
    end = raw.find(b"\n")
    if end < 0:
        raise FormatError("missing header line")
    parts = raw[:end].decode("ascii", errors="replace").split()
    if not parts or parts[0] != magic or len(parts) != n_fields + 1:
        raise FormatError(f"expected a {magic} header with {n_fields} fields, got {raw[:end]!r}")
    try:
        values = [int(p) for p in parts[1:]]
    except ValueError as exc:
        raise FormatError(f"non-integer {magic} header field") from exc
    if any(v < 0 for v in values):
        raise FormatError(f"negative {magic} header field")
    return values, raw[end + 1:]


def write_dpm(path, depth):
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise FormatError("depth map must be 2-D")
    H, W = depth.shape
    Path(path).write_bytes(f"DPM1 {H} {W}\n".encode() + depth.astype("<f4").tobytes())


def read_dpm(path) -> np.ndarray:
    (H, W), body = _read_header(Path(path).read_bytes(), "DPM1", 2)
    if len(body) != 4 * H * W:
        raise FormatError(f"DPM1 payload has {len(body)} bytes, expected {4 * H * W}")
    return np.frombuffer(body, dtype="<f4").reshape(H, W).copy()


def write_vxg(path, labels, num_classes):
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise FormatError("label grid must be 3-D")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise FormatError("labels must fit in one byte")
    X, Y, Z = labels.shape
    Path(path).write_bytes(f"VXG1 {X} {Y} {Z} {int(num_classes)}\n".encode() + labels.astype(np.uint8).tobytes())


def read_vxg(path):
    """``(labels uint8 X x Y x Z, num_classes)``."""
    (X, Y, Z, K), body = _read_header(Path(path).read_bytes(), "VXG1", 4)
    if len(body) != X * Y * Z:
        raise FormatError(f"VXG1 payload has {len(body)} bytes, expected {X * Y * Z}")
    return np.frombuffer(body, dtype=np.uint8).reshape(X, Y, Z).copy(), K


def write_checkpoint(prefix, params):
    """``<prefix>.manifest`` lists ``name d0,d1,...`` per line; ``<prefix>.bin`` holds float64 LE values in that order."""
    prefix = Path(prefix)
    lines, blobs = [], []
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value))
        if any(c.isspace() for c in name):
            raise FormatError(f"parameter name {name!r} contains whitespace")
        lines.append(f"{name} {','.join(str(d) for d in arr.shape)}\n")
        blobs.append(arr.astype("<f8").tobytes())
    prefix.with_suffix(".manifest").write_text("".join(lines))
    prefix.with_suffix(".bin").write_bytes(b"".join(blobs))


def read_checkpoint(prefix) -> dict[str, np.ndarray]:
    prefix = Path(prefix)
    raw = prefix.with_suffix(".bin").read_bytes()
    out, pos = {}, 0
    for line in prefix.with_suffix(".manifest").read_text().splitlines():
        if not line.strip():
            continue
        try:
            name, dims = line.split(" ")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        except ValueError as exc:
            raise FormatError(f"bad manifest line {line!r}") from exc
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + n > len(raw):
            raise FormatError("checkpoint blob shorter than its manifest")
        out[name] = np.frombuffer(raw[pos:pos + n], dtype="<f8").reshape(shape).copy()
        pos += n
    if pos != len(raw):
        raise FormatError("checkpoint blob longer than its manifest")
    return out


def format_loss_row(step, row):
    return f"{step}," + ",".join(repr(float(v)) for v in row)


def write_loss_log(path, rows):
    """``rows``: iterable of ``(step, (total, ce, scal_geo, scal_sem, depth))``."""
    text = ",".join(LOSS_COLUMNS) + "\n" + "".join(format_loss_row(s, r) + "\n" for s, r in rows)
    Path(path).write_text(text)


def read_loss_log(path):
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split(",")) != LOSS_COLUMNS:
        raise FormatError("loss log header mismatch")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != len(LOSS_COLUMNS):
            raise FormatError(f"loss row has {len(parts)} columns")
        rows.append((int(parts[0]), tuple(float(p) for p in parts[1:])))
    return rows


def write_features(path, features):
    np.save(path, np.ascontiguousarray(features, dtype="<f8"), allow_pickle=False)


def read_features(path) -> np.ndarray:
    return np.load(path, allow_pickle=False)
