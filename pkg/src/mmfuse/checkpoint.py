"""Byte-stable checkpoint container.

Layout::

    b"MMFUSECKPT1\\n"
    uint64 little-endian header length
    header: UTF-8 JSON (sorted keys) with the model config, tensor table,
            count sketches, optimizer step and free-form metadata
    payload: every tensor as row-major little-endian float64, in table order

Identical state gives identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import from_dict, to_dict
from .errors import ParseError
from .fusion import SketchParams
from .nn import ModelConfig, OptimizerState, SharedModel

MAGIC = b"MMFUSECKPT1\n"


def save_checkpoint(path, model: SharedModel, opt_state: OptimizerState = None, meta=None):
    sketches = model.all_sketches()
    tensors = []
    chunks = []
    offset = 0

    def add(kind, name, arr):
        nonlocal offset
        a = np.ascontiguousarray(arr, dtype="<f8")
        tensors.append({"kind": kind, "name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes

    for name in sorted(model.params):
        add("param", name, model.params[name])
    if opt_state is not None:
        for name in sorted(opt_state.m):
            add("adam_m", name, opt_state.m[name])
            add("adam_v", name, opt_state.v[name])
    header = {
        "format": 1,
        "config": to_dict(model.config),
        "tensors": tensors,
        "sketches": [{"role": role, "nx": nx, "ny": ny, "x": px.to_dict(), "y": py.to_dict()}
                     for (role, nx, ny), (px, py) in sorted(sketches.items())],
        "step": None if opt_state is None else int(opt_state.step),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path):
    """Returns ``(model, opt_state_or_None, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ParseError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    header = json.loads(blob[pos:pos + hlen].decode())
    payload = memoryview(blob)[pos + hlen:]

    def read(t):
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=t["offset"])
        return a.reshape(t["shape"]).astype(np.float64)

    params, m, v = {}, {}, {}
    for t in header["tensors"]:
        {"param": params, "adam_m": m, "adam_v": v}[t["kind"]][t["name"]] = read(t)
    cfg = from_dict(ModelConfig, header["config"])
    model = SharedModel(cfg, params)
    for s in header["sketches"]:
        model.sketches[(s["role"], s["nx"], s["ny"])] = (SketchParams.from_dict(s["x"]),
                                                         SketchParams.from_dict(s["y"]))
    opt = OptimizerState(m, v, header["step"]) if header["step"] is not None else None
    return model, opt, header["meta"]
