"""Self-describing container of named arrays plus JSON metadata.

Layout::

    b"FCKPT1\\n" | u64 header length (LE) | UTF-8 JSON header | raw array bytes

The header holds ``meta`` (free-form JSON) and an ``arrays`` table of
``{name, dtype, shape, offset, nbytes}`` entries, offsets relative to the end of
the header. Arrays are written little-endian in table order.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import torch

MAGIC = b"FCKPT1\n"
_LEN = struct.Struct("<Q")


class CheckpointError(Exception):
    pass


def save_container(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict) -> None:
    table, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.array(arr, order="C", copy=True)  # ascontiguousarray would promote 0-d to 1-d
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def load_container(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an FCKPT1 checkpoint")
    pos = len(MAGIC)
    if len(data) < pos + _LEN.size:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    base = pos + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(data):
            raise CheckpointError(f"{path}: array {entry['name']} truncated")
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=start)
        arrays[entry["name"]] = arr.reshape(tuple(entry["shape"])).copy()
    return arrays, header["meta"]


def module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    plen = len(prefix) + 1
    state = {k[plen:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix + ".")}
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} tensors for {prefix!r}, e.g. {sorted(missing)[0]}")
    module.load_state_dict(state, strict=True)


def optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict[str, np.ndarray], list]:
    sd = opt.state_dict()
    arrays = {}
    for pid, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"{prefix}.{pid}.{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    groups = []
    for g in sd["param_groups"]:
        groups.append({k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()})
    return arrays, groups


def load_optimizer_arrays(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], groups: list,
                          prefix: str) -> None:
    state: dict = {}
    plen = len(prefix) + 1
    for name, arr in arrays.items():
        if not name.startswith(prefix + "."):
            continue
        pid, key = name[plen:].split(".", 1)
        state.setdefault(int(pid), {})[key] = torch.from_numpy(arr.copy())
    param_groups = []
    for g in groups:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        param_groups.append(g)
    opt.load_state_dict({"state": state, "param_groups": param_groups})


def generator_array(gen: torch.Generator) -> np.ndarray:
    return gen.get_state().numpy().copy()


def restore_generator(gen: torch.Generator, arr: np.ndarray) -> None:
    gen.set_state(torch.from_numpy(arr.copy()))
