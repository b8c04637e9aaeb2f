"""Versioned, bit-faithful serialization of models, reports, and manifests.

JSON model files carry floats in shortest round-trip decimal form, so
save -> load -> save is byte-identical and loaded networks compute
bit-identical outputs. The binary container ("WFM1" magic, little-endian
float64) is preferred above ~1e6 parameters. All writes are atomic
(temp file + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from . import __version__
from .errors import (
    DimensionChainError,
    DimensionError,
    FormatVersionError,
    MalformedFileError,
    ManifestError,
    NonFiniteError,
    PersistError,
)
from .metrics import REPORT_COLUMNS
from .net import LinearMap, MeanFieldLayer, Network

MODEL_FORMAT_VERSION = 1
_MODEL_MAGIC = b"WFM1"
_ACT_CODES = {"tanh": 0, "sigmoid": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def atomic_write_bytes(path, data: bytes) -> None:
    path = str(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode("utf-8")
    ).hexdigest()


# --------------------------------------------------------------------------
# Model files


def model_to_dict(net: Network, provenance: dict | None = None) -> dict:
    blocks = []
    for b in net.blocks:
        if isinstance(b, MeanFieldLayer):
            blocks.append({
                "kind": "meanfield",
                "d_in": b.d_in,
                "d_out": b.d_out,
                "m": b.m,
                "theta0": b.theta0.ravel().tolist(),
                "theta1": b.theta1.ravel().tolist(),
            })
        else:
            blocks.append({
                "kind": "linear",
                "rows": b.rows,
                "cols": b.cols,
                "a": b.a.ravel().tolist(),
            })
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "activation": net.activation.name,
        "blocks": blocks,
        "provenance": dict(provenance or {}, tool_version=__version__),
    }


def _block_from_dict(d: dict, index: int):
    kind = d.get("kind")
    try:
        if kind == "meanfield":
            m, d_in, d_out = int(d["m"]), int(d["d_in"]), int(d["d_out"])
            theta0 = np.asarray(d["theta0"], dtype=np.float64)
            theta1 = np.asarray(d["theta1"], dtype=np.float64)
            if theta0.size != m * d_in or theta1.size != m * d_out:
                raise MalformedFileError(
                    f"block {index}: array lengths do not match declared dims"
                )
            return MeanFieldLayer(theta0.reshape(m, d_in), theta1.reshape(m, d_out))
        if kind == "linear":
            rows, cols = int(d["rows"]), int(d["cols"])
            a = np.asarray(d["a"], dtype=np.float64)
            if a.size != rows * cols:
                raise MalformedFileError(
                    f"block {index}: matrix length does not match {rows}x{cols}"
                )
            return LinearMap(a.reshape(rows, cols))
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedFileError(f"block {index}: {e}") from e
    except NonFiniteError as e:
        raise MalformedFileError(f"block {index}: {e}") from e
    raise MalformedFileError(f"block {index}: unknown kind {kind!r}")


def model_from_dict(doc: dict) -> Network:
    if not isinstance(doc, dict):
        raise MalformedFileError("model document must be a JSON object")
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise FormatVersionError(f"unsupported model format version {version!r}")
    act = doc.get("activation")
    if act not in _ACT_CODES:
        raise MalformedFileError(f"unknown activation {act!r}")
    raw_blocks = doc.get("blocks")
    if not isinstance(raw_blocks, list) or not raw_blocks:
        raise MalformedFileError("model must declare a non-empty block list")
    blocks = [_block_from_dict(b, i) for i, b in enumerate(raw_blocks)]
    try:
        return Network(blocks, act)
    except DimensionError as e:
        raise DimensionChainError(str(e)) from e
    except NonFiniteError as e:
        raise MalformedFileError(str(e)) from e


def model_to_bytes(net: Network, provenance: dict | None = None) -> bytes:
    prov = json.dumps(
        dict(provenance or {}, tool_version=__version__), sort_keys=True
    ).encode("utf-8")
    out = [
        _MODEL_MAGIC,
        struct.pack(
            "<IBI", MODEL_FORMAT_VERSION, _ACT_CODES[net.activation.name], len(net.blocks)
        ),
        struct.pack("<I", len(prov)),
        prov,
    ]
    for b in net.blocks:
        if isinstance(b, MeanFieldLayer):
            out.append(struct.pack("<BIII", 0, b.m, b.d_in, b.d_out))
            out.append(b.theta0.astype("<f8").tobytes())
            out.append(b.theta1.astype("<f8").tobytes())
        else:
            out.append(struct.pack("<BII", 1, b.rows, b.cols))
            out.append(b.a.astype("<f8").tobytes())
    return b"".join(out)


def model_from_bytes(buf: bytes) -> Network:
    if len(buf) < 17 or buf[:4] != _MODEL_MAGIC:
        raise MalformedFileError("not a WFM1 model container")
    version, act_code, n_blocks = struct.unpack_from("<IBI", buf, 4)
    if version != MODEL_FORMAT_VERSION:
        raise FormatVersionError(f"unsupported model format version {version}")
    if act_code not in _ACT_NAMES:
        raise MalformedFileError(f"unknown activation code {act_code}")
    off = 13
    (prov_len,) = struct.unpack_from("<I", buf, off)
    off += 4 + prov_len
    blocks = []

    def take(count):
        nonlocal off
        end = off + 8 * count
        if end > len(buf):
            raise MalformedFileError("model container truncated")
        arr = np.frombuffer(buf, "<f8", count, off).copy()
        off = end
        return arr

    try:
        for i in range(n_blocks):
            if off + 1 > len(buf):
                raise MalformedFileError("model container truncated")
            kind = buf[off]
            off += 1
            if kind == 0:
                m, d_in, d_out = struct.unpack_from("<III", buf, off)
                off += 12
                blocks.append(
                    MeanFieldLayer(take(m * d_in).reshape(m, d_in),
                                   take(m * d_out).reshape(m, d_out))
                )
            elif kind == 1:
                rows, cols = struct.unpack_from("<II", buf, off)
                off += 8
                blocks.append(LinearMap(take(rows * cols).reshape(rows, cols)))
            else:
                raise MalformedFileError(f"block {i}: unknown kind byte {kind}")
    except struct.error as e:
        raise MalformedFileError(f"model container truncated: {e}") from e
    except NonFiniteError as e:
        raise MalformedFileError(str(e)) from e
    if off != len(buf):
        raise MalformedFileError("trailing bytes after final block")
    if not blocks:
        raise MalformedFileError("model must declare a non-empty block list")
    try:
        return Network(blocks, _ACT_NAMES[act_code])
    except DimensionError as e:
        raise DimensionChainError(str(e)) from e
    except NonFiniteError as e:
        raise MalformedFileError(str(e)) from e


def save_model(net: Network, path, provenance: dict | None = None) -> None:
    """JSON for .json paths, WFM1 binary otherwise."""
    path = str(path)
    if path.endswith(".json"):
        atomic_write_text(path, json.dumps(model_to_dict(net, provenance)) + "\n")
    else:
        atomic_write_bytes(path, model_to_bytes(net, provenance))


def load_model(path) -> Network:
    path = str(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] == _MODEL_MAGIC:
        return model_from_bytes(buf)
    try:
        doc = json.loads(buf.decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedFileError(f"{path}: {e}") from e
    return model_from_dict(doc)


# --------------------------------------------------------------------------
# Reports


def csv_cell(v) -> str:
    """Floats in shortest round-trip form; numpy scalars normalized first."""
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def report_to_csv(report) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for row in report.to_rows():
        lines.append(",".join(csv_cell(row.get(col, "")) for col in REPORT_COLUMNS))
    return "\n".join(lines) + "\n"


def write_report(report, path, format: str = "csv") -> None:
    """Fixed-column CSV or a JSON rendering with identical numeric values."""
    if format == "csv":
        atomic_write_text(path, report_to_csv(report))
    elif format == "json":
        atomic_write_text(path, json.dumps(report.to_json_dict(), sort_keys=True) + "\n")
    else:
        raise PersistError(f"unknown report format {format!r}")


# --------------------------------------------------------------------------
# Run manifests


def write_manifest(path, master_seed: int, config: dict, artifacts: dict) -> dict:
    """Manifest with content hashes of every artifact (paths relative to
    the manifest's directory)."""
    path = str(path)
    base = os.path.dirname(os.path.abspath(path))
    entries = {}
    for name, rel in artifacts.items():
        entries[name] = {"path": rel, "sha256": sha256_file(os.path.join(base, rel))}
    doc = {
        "master_seed": master_seed,
        "config": config,
        "config_hash": config_hash(config),
        "artifacts": entries,
        "tool_version": __version__,
    }
    atomic_write_text(path, json.dumps(doc, sort_keys=True) + "\n")
    return doc


def verify_manifest(path) -> dict:
    """Recompute artifact hashes; raise ManifestError on any mismatch."""
    path = str(path)
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: {e}") from e
    for name, entry in doc.get("artifacts", {}).items():
        target = os.path.join(base, entry["path"])
        if not os.path.exists(target):
            raise ManifestError(f"artifact {name!r} missing: {entry['path']}")
        actual = sha256_file(target)
        if actual != entry["sha256"]:
            raise ManifestError(
                f"artifact {name!r} hash mismatch: {actual} != {entry['sha256']}"
            )
    return doc
