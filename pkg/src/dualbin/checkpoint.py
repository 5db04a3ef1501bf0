"""Checkpoint file format.

Layout:
    magic   4 bytes  b"DBCK"
    header_len  uint32 little-endian
    header  JSON (utf-8, sorted keys): format_version, config, rng_seed,
            tensors: [{name, dtype, shape, offset}]
    payload raw little-endian tensor bytes, concatenated in header order

Quantized layers store their quantization payloads (integer codes and
scales, packed plane words, or scale pairs) rather than reconstructed
weights, so a load/save round trip is byte-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np
import torch

from .toymodel import ModelConfig, QuantLinear, TinyDecoder, build_model
from . import quantcore
from .bitplane import BitPlane
from .quantcore import QuantSpec, GroupedIntQuant

MAGIC = b"DBCK"
FORMAT_VERSION = 1

_DTYPES = {
    "f8": np.dtype("<f8"),
    "i8": np.dtype("int8"),
    "u8": np.dtype("uint8"),
    "u64": np.dtype("<u8"),
}


def _layer_arrays(name: str, layer: QuantLinear) -> dict[str, np.ndarray]:
    arrays = {}
    if layer.mode == "fp":
        arrays[f"{name}.weight"] = (
            layer.weight.detach().numpy()
            if "weight" in layer._parameters
            else layer.latent.numpy()
        )
        return arrays
    arrays[f"{name}.latent"] = layer.latent.numpy()
    if layer.mode == "rtn":
        q = layer.rtn_payload
        arrays[f"{name}.codes"] = q.codes
        arrays[f"{name}.scales"] = q.scales
    elif layer.mode == "sign":
        plane, scales = layer.sign_payload
        arrays[f"{name}.plane_words"] = plane.words
        arrays[f"{name}.scales"] = scales
    elif layer.mode == "fdb":
        arrays[f"{name}.alpha1"] = layer.alpha1.detach().numpy()
        arrays[f"{name}.alpha2"] = layer.alpha2.detach().numpy()
        arrays[f"{name}.init_scale"] = layer.init_scale.numpy()
    return arrays


def save_checkpoint(model: TinyDecoder, path: str, rng_seed: int = 0):
    arrays: dict[str, np.ndarray] = {}
    quant_names = set()
    for name, mod in model.named_modules():
        if isinstance(mod, QuantLinear):
            quant_names.add(name)
            arrays.update(_layer_arrays(name, mod))
    for name, tensor in model.state_dict().items():
        prefix = name.rsplit(".", 1)[0]
        if prefix in quant_names:
            continue
        arrays[name] = tensor.detach().numpy()

    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype == np.bool_:
            a = a.astype(np.uint8)
        if a.dtype == np.float64:
            code = "f8"
        elif a.dtype == np.int8:
            code = "i8"
        elif a.dtype == np.uint8:
            code = "u8"
        elif a.dtype == np.uint64:
            code = "u64"
        else:
            raise ValueError(f"unsupported dtype {a.dtype} for tensor {name}")
        blob = a.astype(_DTYPES[code]).tobytes()
        entries.append(
            {"name": name, "dtype": code, "shape": list(a.shape), "offset": len(payload)}
        )
        payload.extend(blob)

    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "config": asdict(model.config),
            "rng_seed": rng_seed,
            "tensors": entries,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(bytes(payload))


def _read_arrays(path: str):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        if header["format_version"] != FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported format version {header['format_version']}"
            )
        payload = f.read()
    arrays = {}
    for e in header["tensors"]:
        dt = _DTYPES[e["dtype"]]
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(
            payload, dtype=dt, count=n, offset=e["offset"]
        ).reshape(e["shape"])
        arrays[e["name"]] = a
    return header, arrays


def load_checkpoint(path: str) -> tuple[TinyDecoder, int]:
    """Rebuild the model from a checkpoint; returns (model, rng_seed)."""
    header, arrays = _read_arrays(path)
    config = ModelConfig(**header["config"])
    torch.manual_seed(0)
    model = TinyDecoder(config)

    for name, mod in model.named_modules():
        if not isinstance(mod, QuantLinear):
            continue
        mode = config.quant_mode
        if f"{name}.weight" in arrays and mode == "fp":
            with torch.no_grad():
                mod.weight.copy_(torch.from_numpy(arrays[f"{name}.weight"].copy()))
            continue
        latent = torch.from_numpy(arrays[f"{name}.latent"].copy())
        del mod._parameters["weight"]
        mod.register_buffer("latent", latent)
        mod.mode = mode
        g = config.group_size
        if mode == "rtn":
            spec = QuantSpec(
                bits=config.rtn_bits, group_size=g, range_mode=config.range_mode
            )
            q = GroupedIntQuant(
                codes=arrays[f"{name}.codes"].copy(),
                scales=arrays[f"{name}.scales"].copy(),
                spec=spec,
            )
            mod.rtn_payload = q
            mod.register_buffer("w_hat", torch.from_numpy(quantcore.dequantize(q)))
        elif mode == "sign":
            words = arrays[f"{name}.plane_words"].copy()
            plane = BitPlane(words=words, rows=mod.out_features, cols=mod.in_features)
            scales = arrays[f"{name}.scales"].copy()
            mod.sign_payload = (plane, scales)
            mod.register_buffer(
                "w_hat",
                torch.from_numpy(quantcore.sign_reconstruct(plane, scales, g)),
            )
        elif mode == "fdb":
            a1 = arrays[f"{name}.alpha1"].copy()
            a2 = arrays[f"{name}.alpha2"].copy()
            mod.alpha1 = torch.nn.Parameter(torch.from_numpy(a1))
            mod.alpha2 = torch.nn.Parameter(torch.from_numpy(a2))
            degenerate = (a1 == 0) & (a2 == 0)
            mod.register_buffer("degenerate", torch.from_numpy(degenerate))
            mod.register_buffer(
                "init_scale", torch.from_numpy(arrays[f"{name}.init_scale"].copy())
            )

    quant_names = {
        name for name, mod in model.named_modules() if isinstance(mod, QuantLinear)
    }
    state = model.state_dict()
    with torch.no_grad():
        for name, tensor in state.items():
            prefix = name.rsplit(".", 1)[0]
            if prefix in quant_names or name.split(".")[-1] in (
                "latent",
                "w_hat",
                "degenerate",
                "init_scale",
            ):
                continue
            if name in arrays:
                tensor.copy_(torch.from_numpy(arrays[name].copy()))
    return model, header["rng_seed"]
