"""Language-neutral checkpoint files.

Layout of a checkpoint file::

    bytes 0..7    magic  b"SEGADPT1"
    bytes 8..15   manifest length L, unsigned 64-bit little-endian
    next L bytes  manifest, UTF-8 JSON
    remainder     payload: raw little-endian tensors, back to back

The manifest holds ``format``, ``version``, ``components`` (name -> kind and
architecture descriptor), ``tensors`` (list of name, dtype, shape, offset,
nbytes, offsets relative to the payload start), ``payload_sha256`` and free
form ``metadata``.  Tensor names are ``<component>.<parameter>``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"SEGADPT1"
FORMAT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}

_BUILDERS = {}


def register_kind(kind, builder):
    """Register a callable ``builder(**arch) -> module`` for a component kind."""
    _BUILDERS[kind] = builder


def _component_tensors(module):
    return {k: v.detach().cpu().contiguous() for k, v in module.state_dict().items()}


def save_checkpoint(components, path, metadata=None):
    """Write ``components`` (name -> module with ``kind`` and ``arch``) to ``path``."""
    if not isinstance(components, dict):
        components = {"model": components}
    entries, blobs, offset = [], [], 0
    manifest_components = {}
    for cname, module in components.items():
        manifest_components[cname] = {"kind": module.kind, "arch": module.arch}
        for tname, t in _component_tensors(module).items():
            if t.dtype not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {t.dtype} for {cname}.{tname}")
            raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
            entries.append({
                "name": f"{cname}.{tname}", "dtype": _DTYPES[t.dtype],
                "shape": list(t.shape), "offset": offset, "nbytes": len(raw),
            })
            blobs.append(raw)
            offset += len(raw)
    payload = b"".join(blobs)
    manifest = {
        "format": "segadapt-checkpoint",
        "version": FORMAT_VERSION,
        "components": manifest_components,
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "metadata": metadata or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(head)) + head + payload)
    return path


def read_checkpoint(path):
    """Return ``(manifest, tensors)`` with tensors as numpy arrays keyed by full name."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        manifest = json.loads(data[16:16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON ({exc})") from None
    payload = data[16 + n:]
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('version')}")
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload hash does not match the manifest (file truncated or corrupt)")
    tensors = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']} extends past the payload")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = arr.copy()
    return manifest, tensors


def _state_for(cname, tensors):
    prefix = cname + "."
    return {k[len(prefix):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix)}


def load_into(module, path, component="model"):
    """Load a component into an existing module, checking the architecture first."""
    manifest, tensors = read_checkpoint(path)
    comp = manifest["components"].get(component)
    if comp is None:
        raise CheckpointError(f"{path}: no component {component!r}; has {sorted(manifest['components'])}")
    if comp["kind"] != module.kind or comp["arch"] != module.arch:
        raise CheckpointError(
            f"{path}: manifest mismatch for {component!r}: file has kind={comp['kind']} arch={comp['arch']}, "
            f"module has kind={module.kind} arch={module.arch}"
        )
    _load_state(module, _state_for(component, tensors), path, component)
    return module


def _load_state(module, state, path, component):
    own = module.state_dict()
    if set(own) != set(state):
        raise CheckpointError(
            f"{path}: manifest mismatch for {component!r}: tensor names differ "
            f"(missing {sorted(set(own) - set(state))}, unexpected {sorted(set(state) - set(own))})"
        )
    for k, v in state.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise CheckpointError(f"{path}: manifest mismatch for {component}.{k}: shape {tuple(v.shape)} vs {tuple(own[k].shape)}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in state.items()})


def load_checkpoint(path):
    """Rebuild every component of a checkpoint.  Returns ``(components, metadata)``."""
    manifest, tensors = read_checkpoint(path)
    out = {}
    for cname, comp in manifest["components"].items():
        builder = _BUILDERS.get(comp["kind"])
        if builder is None:
            raise CheckpointError(f"{path}: unknown component kind {comp['kind']!r}")
        module = builder(**comp["arch"])
        if any(e["dtype"] == "<f8" for e in manifest["tensors"] if e["name"].startswith(cname + ".")):
            module = module.double()
        _load_state(module, _state_for(cname, tensors), path, cname)
        out[cname] = module
    return out, manifest.get("metadata", {})


def _register_defaults():
    from .segnet import OutputDiscriminator, SegNet

    register_kind(SegNet.kind, SegNet)
    register_kind(OutputDiscriminator.kind, OutputDiscriminator)


_register_defaults()
