"""Deterministic tensor archives for checkpoints and trajectories.

An archive is a zip holding manifest.json plus tensors.bin. The payload
is raw little-endian row-major data; the manifest records name, dtype,
shape, and byte offset for every tensor. Entries are stored uncompressed
with a fixed timestamp, so identical content yields identical bytes,
which is what the reproducibility checks hash.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import ArchitectureMismatch

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.bool: "bool",
}
_NP_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
    "bool": np.bool_,
}


def write_archive(path, manifest: dict, tensors: dict[str, torch.Tensor]) -> None:
    """Write manifest + tensors to `path`; same inputs give identical bytes."""
    records = []
    payload = io.BytesIO()
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().cpu()
        if t.dtype not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {t.dtype} for {name!r}")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<")).tobytes()
        records.append({
            "name": name,
            "dtype": _DTYPES[t.dtype],
            "shape": list(t.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        payload.write(raw)
        offset += len(raw)
    doc = {
        "format_version": FORMAT_VERSION,
        "manifest": manifest,
        "tensors": records,
    }
    blob = json.dumps(doc, indent=2, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, content in (("manifest.json", blob),
                              ("tensors.bin", payload.getvalue())):
            info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
            zf.writestr(info, content)


def read_archive(path) -> tuple[dict, dict[str, torch.Tensor]]:
    with zipfile.ZipFile(path, "r") as zf:
        doc = json.loads(zf.read("manifest.json"))
        blob = zf.read("tensors.bin")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported archive version {doc.get('format_version')}")
    tensors = {}
    for rec in doc["tensors"]:
        np_dtype = np.dtype(_NP_DTYPES[rec["dtype"]]).newbyteorder("<")
        arr = np.frombuffer(blob, dtype=np_dtype,
                            count=int(np.prod(rec["shape"], dtype=np.int64)) or 0,
                            offset=rec["offset"]).reshape(rec["shape"])
        tensors[rec["name"]] = torch.from_numpy(arr.copy())
    return doc["manifest"], tensors


def save_checkpoint(path, model, extra: dict | None = None) -> None:
    """Persist a denoiser: architecture, optimizer note, and all tensors."""
    manifest = {
        "kind": "model",
        "arch": model.config.to_manifest(),
        "extra": extra or {},
    }
    write_archive(path, manifest, dict(model.state_dict()))


def load_checkpoint(path):
    """Rebuild a denoiser bit-exactly from an archive. Returns (model, extra)."""
    from .model import Denoiser, ModelConfig

    manifest, tensors = read_archive(path)
    if manifest.get("kind") != "model":
        raise ValueError(f"archive at {path} is not a model checkpoint")
    config = ModelConfig.from_manifest(manifest["arch"])
    model = Denoiser(config, seed=0)
    try:
        model.load_state_dict(tensors, strict=True)
    except RuntimeError as exc:
        raise ArchitectureMismatch(str(exc)) from exc
    model.eval()
    return model, manifest.get("extra", {})
