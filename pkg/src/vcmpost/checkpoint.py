"""Checkpoint archives: named float32 tensors plus structured metadata.

Layout is a zip file with stored (uncompressed) entries and frozen
timestamps, so identical content produces identical bytes:

    meta.json          metadata dictionary (sorted keys)
    tensors/0000.bin   one tensor per entry, in insertion order
    sha256.txt         hex digest over every other entry

Each tensor entry is a small binary record: magic, name, shape header,
then the raw little-endian float32 payload. Round-trips are bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, IngestionError
from .net import NetConfig, PostProcNet

_MAGIC = b"VCT1"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    header = _MAGIC
    header += struct.pack("<I", len(name_b)) + name_b
    header += struct.pack("<I", data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    return header + data.tobytes()


def _unpack_tensor(blob: bytes) -> tuple[str, np.ndarray]:
    if blob[:4] != _MAGIC:
        raise FormatError("tensor entry does not start with the expected magic")
    off = 4
    (name_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    name = blob[off:off + name_len].decode("utf-8")
    off += name_len
    (ndim,) = struct.unpack_from("<I", blob, off)
    off += 4
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    payload = blob[off:]
    if len(payload) != count * 4:
        raise FormatError(
            f"tensor {name!r} payload is {len(payload)} bytes, expected {count * 4}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return name, arr


def _digest(entries: list[tuple[str, bytes]]) -> str:
    h = hashlib.sha256()
    for name, data in entries:
        h.update(name.encode("utf-8"))
        h.update(b"\0")
        h.update(data)
    return h.hexdigest()


def write_archive(path, meta: dict, tensors: dict) -> Path:
    """Write an archive of ``tensors`` (name -> array) with ``meta`` attached."""
    path = Path(path)
    entries = [("meta.json", json.dumps(meta, indent=2, sort_keys=True).encode("utf-8"))]
    for i, (name, arr) in enumerate(tensors.items()):
        entries.append((f"tensors/{i:04d}.bin", _pack_tensor(name, arr)))
    entries.append(("sha256.txt", (_digest(entries) + "\n").encode("ascii")))
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, data in entries:
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    return path


def read_archive(path) -> tuple[dict, dict]:
    """Read an archive back into (meta, tensors). Verifies the checksum."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"checkpoint does not exist: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            names = zf.namelist()
            entries = [(n, zf.read(n)) for n in names if n != "sha256.txt"]
            if "sha256.txt" not in names:
                raise FormatError(f"{path}: missing sha256.txt entry")
            recorded = zf.read("sha256.txt").decode("ascii").strip()
    except zipfile.BadZipFile as exc:
        raise FormatError(f"{path}: not a checkpoint archive ({exc})") from exc
    if _digest(entries) != recorded:
        raise FormatError(f"{path}: checksum mismatch, archive is corrupt")
    meta = None
    tensors = {}
    for name, data in entries:
        if name == "meta.json":
            meta = json.loads(data.decode("utf-8"))
        elif name.startswith("tensors/"):
            tname, arr = _unpack_tensor(data)
            tensors[tname] = arr
        else:
            raise FormatError(f"{path}: unexpected entry {name!r}")
    if meta is None:
        raise FormatError(f"{path}: missing meta.json entry")
    return meta, tensors


def save_network(path, net: PostProcNet) -> Path:
    meta = {"format": "postprocnet", "config": net.config.to_dict()}
    tensors = {name: p.detach().cpu().numpy() for name, p in net.named_parameters()}
    return write_archive(path, meta, tensors)


def load_network(path) -> PostProcNet:
    meta, tensors = read_archive(path)
    if meta.get("format") != "postprocnet":
        raise FormatError(f"{path}: not a network checkpoint (format={meta.get('format')!r})")
    config = NetConfig(**meta["config"])
    net = PostProcNet(config)
    expected = dict(net.named_parameters())
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise FormatError(
            f"{path}: parameter names do not match the config "
            f"(missing {missing}, unexpected {extra})"
        )
    with torch.no_grad():
        for name, p in net.named_parameters():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise FormatError(
                    f"{path}: tensor {name!r} has shape {arr.shape}, expected {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr))
    return net
