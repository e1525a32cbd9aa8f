"""Checkpoint format shared by the encoder-policy and the denoiser.

Layout: 8-byte little-endian header length, JSON header, raw parameter
bytes. The header records named flat arrays {name, shape, dtype, offset}
(names are namespaced "policy.*" / "denoiser.*"), the module configs, and
a SHA-256 checksum of the data blob.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch


class CheckpointError(Exception):
    pass


def save_checkpoint(path, policy, denoiser, extra: dict | None = None):
    entries = []
    blob = bytearray()
    for ns, module in (("policy", policy), ("denoiser", denoiser)):
        for name, tensor in module.state_dict().items():
            arr = tensor.detach().cpu().numpy()
            entries.append({
                "name": f"{ns}.{name}",
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": len(blob),
            })
            blob.extend(arr.tobytes())
    header = {
        "params": entries,
        "encoder_config": policy.cfg.to_json(),
        "denoiser_config": denoiser.cfg.to_json(),
        "checksum": hashlib.sha256(bytes(blob)).hexdigest(),
    }
    if extra:
        header["extra"] = extra
    header_bytes = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(bytes(blob))


def load_checkpoint(path):
    """Returns (policy, denoiser, extra)."""
    from .diffusion import DenoiserConfig, DenoiserModel
    from .policy import EncoderConfig, TrackPolicy

    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise CheckpointError("truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8:8 + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"bad checkpoint header: {e}") from e
    blob = raw[8 + hlen:]
    if hashlib.sha256(blob).hexdigest() != header["checksum"]:
        raise CheckpointError("checkpoint checksum mismatch")
    policy = TrackPolicy(EncoderConfig.from_json(header["encoder_config"]))
    denoiser = DenoiserModel(DenoiserConfig.from_json(header["denoiser_config"]))
    states = {"policy": {}, "denoiser": {}}
    for e in header["params"]:
        ns, name = e["name"].split(".", 1)
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=n,
                            offset=e["offset"]).reshape(e["shape"])
        states[ns][name] = torch.as_tensor(arr.copy())
    policy.load_state_dict(states["policy"])
    denoiser.load_state_dict(states["denoiser"])
    return policy, denoiser, header.get("extra", {})
