"""Flat binary tensor format and checkpoint files.

Each record: magic "OVSG", version u32, rank u32, dims u32[rank], then
float32 data, all little-endian. A checkpoint is one file of concatenated
records in parameter order plus a JSON manifest sidecar (<path>.json) naming
them and echoing model metadata. Embedding files use a single record with a
sidecar list of class names.
"""

import json
import struct

import numpy as np

from .errors import CheckpointMismatch

MAGIC = b"OVSG"
VERSION = 1


def write_tensor(f, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def read_tensor(f):
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {MAGIC!r}")
    version, rank = struct.unpack("<II", f.read(8))
    if version != VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(f.read(4 * count), dtype="<f4", count=count)
    return data.reshape(dims).astype(np.float64) if rank else data.astype(np.float64)


def save_checkpoint(path, model, meta=None):
    names = []
    with open(path, "wb") as f:
        for name, p in model.named_parameters():
            write_tensor(f, p.data)
            names.append({"name": name, "shape": list(p.data.shape)})
    manifest = {"format": "ovsg-checkpoint", "version": VERSION,
                "tensors": names, "meta": meta or {}}
    with open(str(path) + ".json", "w") as f:
        json.dump(manifest, f, indent=1)


def load_checkpoint(path, model):
    try:
        with open(str(path) + ".json") as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise CheckpointMismatch(f"missing checkpoint manifest {path}.json") from e
    arrays = {}
    with open(path, "rb") as f:
        for entry in manifest["tensors"]:
            arrays[entry["name"]] = read_tensor(f)
    own = dict(model.named_parameters())
    if set(own) != set(arrays):
        extra = sorted(set(arrays) - set(own))
        missing = sorted(set(own) - set(arrays))
        raise CheckpointMismatch(
            f"checkpoint does not fit the model (extra {extra}, missing {missing})")
    for name, arr in arrays.items():
        if tuple(own[name].data.shape) != tuple(arr.shape):
            raise CheckpointMismatch(
                f"{name}: checkpoint shape {arr.shape} vs model {own[name].data.shape}")
    for name, arr in arrays.items():
        own[name].data = arr.astype(own[name].data.dtype)
    return manifest.get("meta", {})


def save_embeddings(path, arr, class_names=None):
    with open(path, "wb") as f:
        write_tensor(f, arr)
    if class_names is not None:
        with open(str(path) + ".json", "w") as f:
            json.dump({"class_names": list(class_names)}, f, indent=1)


def load_embeddings(path):
    with open(path, "rb") as f:
        arr = read_tensor(f)
    names = None
    try:
        with open(str(path) + ".json") as f:
            names = json.load(f).get("class_names")
    except FileNotFoundError:
        pass
    return arr, names
