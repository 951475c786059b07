"""Versioned checkpoint files for adapters and whole models.

Both formats share one envelope: a 4-byte magic, a u32 format version, a u64
JSON-header length, the UTF-8 JSON header, then one matrix container block
per tensor named by the header, in header order.  JSON carries everything
non-numeric (method tag, spec echo, shapes, scalar hyperparameters); every
array travels as a matrix block, with 1-D arrays shipped as single-row
matrices and restored to their recorded shapes.  Integer arrays (the column
permutation) ride as float64 and are cast back on load.

Loading rebuilds live objects byte-exactly: a trained adapter round-trips with
its coefficients, and a model checkpoint restores raw weights, the injected
spec, and every adapter's state without refactorizing anything.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .adapters import (
    FULL_FT,
    AdapterSpec,
    FullFtAdapter,
    LoraAdapter,
    QrLoraAdapter,
    SvdLoraAdapter,
    _frozen,
)
from .matio import MatrixFormatError, pack_matrix, unpack_matrix
from .model import TinyTransformer, TinyTransformerConfig

ADAPTER_MAGIC = b"QRAC"
MODEL_MAGIC = b"QRAM"
VERSION = 1
_ENVELOPE = struct.Struct("<4sIQ")


class CheckpointFormatError(ValueError):
    """The file is not a valid checkpoint of the expected kind."""


def _pack(magic: bytes, header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    header = dict(header)
    header["tensors"] = list(tensors)
    header["shapes"] = {k: list(v.shape) for k, v in tensors.items()}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_ENVELOPE.pack(magic, VERSION, len(blob)), blob]
    for arr in tensors.values():
        a = np.asarray(arr, dtype=np.float64)
        parts.append(pack_matrix(a.reshape(1, -1) if a.ndim != 2 else a))
    return b"".join(parts)


def _unpack(raw: bytes, magic: bytes, where: str) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < _ENVELOPE.size:
        raise CheckpointFormatError(f"{where}: truncated envelope ({len(raw)} bytes)")
    got_magic, version, hlen = _ENVELOPE.unpack_from(raw)
    if got_magic != magic:
        raise CheckpointFormatError(f"{where}: bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"{where}: unsupported checkpoint version {version}")
    end = _ENVELOPE.size + hlen
    if len(raw) < end:
        raise CheckpointFormatError(f"{where}: truncated header")
    try:
        header = json.loads(raw[_ENVELOPE.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{where}: unreadable header ({exc})") from exc
    tensors: dict[str, np.ndarray] = {}
    offset = end
    try:
        for name in header["tensors"]:
            a, offset = unpack_matrix(raw, offset, where=f"{where}:{name}")
            tensors[name] = a.reshape(header["shapes"][name])
    except (KeyError, MatrixFormatError, ValueError) as exc:
        raise CheckpointFormatError(f"{where}: bad tensor table ({exc})") from exc
    if offset != len(raw):
        raise CheckpointFormatError(f"{where}: {len(raw) - offset} trailing bytes")
    return header, tensors


# ---- adapters ------------------------------------------------------------

def _adapter_state(adapter) -> tuple[str, dict, dict[str, np.ndarray]]:
    if isinstance(adapter, QrLoraAdapter):
        return "qr_lora", {}, {
            "w0": adapter.w0, "q_r": adapter.q_r, "r_rows": adapter.r_rows,
            "perm": adapter.perm.astype(np.float64), "lam": adapter.lam,
        }
    if isinstance(adapter, SvdLoraAdapter):
        return "svd_lora", {"scaling": adapter.scaling}, {"w0": adapter.w0, "b": adapter.b, "a": adapter.a}
    if isinstance(adapter, LoraAdapter):
        return "lora", {"scaling": adapter.scaling}, {"w0": adapter.w0, "b": adapter.b, "a": adapter.a}
    if isinstance(adapter, FullFtAdapter):
        return "full_ft", {}, {"w0": adapter.w0, "w": adapter.w}
    raise TypeError(f"not an adapter: {type(adapter).__name__}")


def _adapter_from_state(method: str, scalars: dict, t: dict[str, np.ndarray]):
    if method == "qr_lora":
        return QrLoraAdapter(
            w0=_frozen(t["w0"]), q_r=_frozen(t["q_r"]), r_rows=_frozen(t["r_rows"]),
            perm=_frozen(np.rint(t["perm"]).astype(np.intp)), lam=t["lam"].copy(),
        )
    if method in ("lora", "svd_lora"):
        cls = SvdLoraAdapter if method == "svd_lora" else LoraAdapter
        return cls(w0=_frozen(t["w0"]), b=t["b"].copy(), a=t["a"].copy(), scaling=float(scalars["scaling"]))
    if method == "full_ft":
        return FullFtAdapter(w0=_frozen(t["w0"]), w=t["w"].copy())
    raise CheckpointFormatError(f"unknown adapter method tag {method!r}")


def save_adapter(path, adapter, spec_echo: str = "") -> None:
    method, scalars, tensors = _adapter_state(adapter)
    header = {"kind": "adapter", "method": method, "spec": spec_echo, "scalars": scalars}
    Path(path).write_bytes(_pack(ADAPTER_MAGIC, header, tensors))


def load_adapter(path):
    header, tensors = _unpack(Path(path).read_bytes(), ADAPTER_MAGIC, str(path))
    return _adapter_from_state(header["method"], header.get("scalars", {}), tensors)


# ---- whole models --------------------------------------------------------

def save_model(path, model: TinyTransformer) -> None:
    tensors: dict[str, np.ndarray] = {"embed": model.embed}
    for i, layer in enumerate(model.layers):
        for name, arr in layer.named_raw():
            tensors[f"layers.{i}.{name}"] = arr
    tensors["head.w"] = model.head_w
    tensors["head.b"] = model.head_b

    adapters = {}
    for i, layer in enumerate(model.layers):
        for p, slot in layer.slots.items():
            if slot.adapter is not None:
                method, scalars, state = _adapter_state(slot.adapter)
                adapters[f"{i}.{p}"] = {"method": method, "scalars": scalars}
                for name, arr in state.items():
                    tensors[f"adapters.{i}.{p}.{name}"] = arr

    cfg = model.config
    header = {
        "kind": "model",
        "config": {
            "vocab_size": cfg.vocab_size, "d_model": cfg.d_model, "n_heads": cfg.n_heads,
            "n_layers": cfg.n_layers, "d_ff": cfg.d_ff, "max_seq_len": cfg.max_seq_len,
            "n_classes": cfg.n_classes, "seed": cfg.seed,
        },
        "spec": model.spec.to_dict() if model.spec is not None else None,
        "adapters": adapters,
    }
    Path(path).write_bytes(_pack(MODEL_MAGIC, header, tensors))


def load_model(path) -> TinyTransformer:
    header, tensors = _unpack(Path(path).read_bytes(), MODEL_MAGIC, str(path))
    model = TinyTransformer(TinyTransformerConfig(**header["config"]))

    def put(dst: np.ndarray, name: str) -> None:
        src = tensors[name]
        if src.shape != dst.shape:
            raise CheckpointFormatError(f"{path}: tensor {name} has shape {src.shape}, expected {dst.shape}")
        dst[...] = src

    put(model.embed, "embed")
    for i, layer in enumerate(model.layers):
        for name, arr in layer.named_raw():
            put(arr, f"layers.{i}.{name}")
    put(model.head_w, "head.w")
    put(model.head_b, "head.b")

    spec_dict = header.get("spec")
    if spec_dict is not None:
        spec = AdapterSpec.from_dict(spec_dict)
        if spec.method != FULL_FT:
            for key, meta in header["adapters"].items():
                i, p = key.split(".")
                state = {
                    name.rsplit(".", 1)[1]: arr
                    for name, arr in tensors.items()
                    if name.startswith(f"adapters.{key}.")
                }
                model.layers[int(i)].slots[p].adapter = _adapter_from_state(
                    meta["method"], meta.get("scalars", {}), state
                )
            model.embed.setflags(write=False)
            for layer in model.layers:
                for _, arr in layer.named_raw():
                    arr.setflags(write=False)
        model.spec = spec
    return model
