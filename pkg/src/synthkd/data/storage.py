"""On-disk containers: SKDS synthetic datasets and parameter checkpoints.

SKDS layout (little-endian)::

    b"SKDS" | version u32 | count u32 | channels u8 | height u16 | width u16 | classes u16
    count x ( label u16 | channels*height*width pixel bytes )

The sidecar ``<name>.meta.json`` carries provenance plus the file digest.

Checkpoint layout (little-endian)::

    b"SKCK" | version u32 | records u32
    records x ( name_len u16 | name utf-8 | ndim u8 | dims u32[ndim] | nbytes u32 | float32 payload )

The manifest ``<name>.manifest.json`` lists names, shapes and per-record digests.
"""

from __future__ import annotations

import contextlib
import fcntl
import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import DigestError, FormatError, VersionError
from .datasets import SyntheticDataset

SKDS_MAGIC = b"SKDS"
SKDS_VERSION = 1
CKPT_MAGIC = b"SKCK"
CKPT_VERSION = 1
_SKDS_HEADER = struct.Struct("<4sIIBHHH")


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


@contextlib.contextmanager
def _locked(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path.with_name(path.name + ".lock"), "w") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(lock, fcntl.LOCK_UN)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# synthetic datasets

def encode_skds(ds: SyntheticDataset) -> bytes:
    n, c, h, w = ds.pixels.shape
    buf = io.BytesIO()
    buf.write(_SKDS_HEADER.pack(SKDS_MAGIC, SKDS_VERSION, n, c, h, w, ds.num_classes))
    rec = np.zeros(n, dtype=[("label", "<u2"), ("pix", "u1", (c * h * w,))])
    rec["label"] = ds.labels
    rec["pix"] = ds.pixels.reshape(n, -1)
    buf.write(rec.tobytes())
    return buf.getvalue()


def decode_skds(raw: bytes) -> tuple[np.ndarray, np.ndarray, int]:
    if len(raw) < _SKDS_HEADER.size:
        raise FormatError("SKDS file shorter than its header")
    magic, version, n, c, h, w, k = _SKDS_HEADER.unpack_from(raw)
    if magic != SKDS_MAGIC:
        raise FormatError(f"not an SKDS file (magic {magic!r})")
    if version != SKDS_VERSION:
        raise VersionError(f"SKDS version {version} is not supported (reader handles {SKDS_VERSION}); "
                           "regenerate the dataset with this release")
    dt = np.dtype([("label", "<u2"), ("pix", "u1", (c * h * w,))])
    body = raw[_SKDS_HEADER.size:]
    if len(body) != n * dt.itemsize:
        raise FormatError(f"SKDS payload is {len(body)} bytes, expected {n * dt.itemsize}")
    rec = np.frombuffer(body, dtype=dt, count=n)
    return rec["pix"].reshape(n, c, h, w).copy(), rec["label"].astype(np.int64), k


def save_synthetic(ds: SyntheticDataset, path) -> Path:
    path = Path(path)
    raw = encode_skds(ds)
    meta = dict(ds.provenance, format="SKDS", version=SKDS_VERSION, count=len(ds),
                num_classes=ds.num_classes, file_sha256=sha256(raw))
    with _locked(path):
        _atomic_write(path, raw)
        _atomic_write(sidecar_path(path), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return path


def load_synthetic(path) -> SyntheticDataset:
    path = Path(path)
    raw = path.read_bytes()
    pixels, labels, k = decode_skds(raw)
    side = sidecar_path(path)
    if not side.exists():
        raise FormatError(f"missing sidecar {side}; the dataset cannot be verified")
    meta = json.loads(side.read_text())
    if meta.get("version") != SKDS_VERSION:
        raise VersionError(f"sidecar version {meta.get('version')} is not supported; regenerate the dataset")
    digest = sha256(raw)
    if meta.get("file_sha256") != digest:
        raise DigestError(f"{path}: digest {digest[:12]}... does not match sidecar "
                          f"{str(meta.get('file_sha256'))[:12]}...; the file is corrupt or was "
                          "modified, regenerate it with gen-data")
    prov = {key: v for key, v in meta.items()
            if key not in ("format", "version", "count", "num_classes", "file_sha256")}
    return SyntheticDataset(pixels, labels, k, prov)


# ---------------------------------------------------------------------------
# checkpoints

def encode_params(params: dict[str, np.ndarray]) -> tuple[bytes, list[dict]]:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(params)))
    entries = []
    for name, value in params.items():
        payload = np.ascontiguousarray(value, dtype="<f4").tobytes()
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(struct.pack("<I", len(payload)))
        buf.write(payload)
        entries.append({"name": name, "shape": list(value.shape), "sha256": sha256(payload)})
    return buf.getvalue(), entries


def decode_params(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"not a checkpoint (magic {raw[:4]!r})")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (reader handles "
                           f"{CKPT_VERSION}); retrain or convert the checkpoint")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            (nbytes,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            if nbytes != 4 * int(np.prod(shape)) or pos + nbytes > len(raw):
                raise FormatError(f"record {name!r}: payload length {nbytes} inconsistent")
            out[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from None
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after the last record")
    return out


def save_checkpoint(model, path, metadata: dict | None = None) -> Path:
    """Write ``model``'s parameters and a manifest that lets load rebuild it."""
    path = Path(path)
    raw, entries = encode_params(model.state_dict())
    manifest = {
        "format": "SKCK", "version": CKPT_VERSION, "kind": model.kind,
        "config": model.config(), "params": entries, "file_sha256": sha256(raw),
        "model_digest": model.digest(), "metadata": metadata or {},
    }
    with _locked(path):
        _atomic_write(path, raw)
        _atomic_write(manifest_path(path), (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return path


def read_manifest(path) -> dict:
    mpath = manifest_path(path)
    if not mpath.exists():
        raise FormatError(f"missing manifest {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("version") != CKPT_VERSION:
        raise VersionError(f"manifest version {manifest.get('version')} is not supported; retrain the model")
    return manifest


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, manifest)``."""
    from ..nets import Classifier, Denoiser

    path = Path(path)
    manifest = read_manifest(path)
    raw = path.read_bytes()
    digest = sha256(raw)
    if digest != manifest["file_sha256"]:
        raise DigestError(f"{path}: digest {digest[:12]}... does not match manifest; the checkpoint "
                          "is corrupt or was modified, retrain or restore it")
    params = decode_params(raw)
    for entry in manifest["params"]:
        got = sha256(np.ascontiguousarray(params[entry["name"]], dtype="<f4").tobytes())
        if got != entry["sha256"] or list(params[entry["name"]].shape) != entry["shape"]:
            raise DigestError(f"{path}: parameter {entry['name']!r} does not match its manifest entry")
    kinds = {"denoiser": Denoiser, "classifier": Classifier}
    if manifest["kind"] not in kinds:
        raise FormatError(f"unknown model kind {manifest['kind']!r}")
    model = kinds[manifest["kind"]](**manifest["config"])
    model.load_state_dict(params)
    return model, manifest
