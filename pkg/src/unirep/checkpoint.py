"""Versioned single-file checkpoint for a trained model bundle.

Layout: an 8-byte magic, a little-endian u32 format version, a u64 header
length, a JSON header, zero padding to an 8-byte boundary, then the raw
little-endian array payload. The header lists every array with its dtype,
shape and offset. Wall-clock time is not stored, so saving the same bundle
twice gives identical bytes.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .encoder import EncoderConfig, EncoderParams
from .losses import Discriminator, PrototypeBank
from .masks import MaskSet
from .trainer import ModelBundle, TrainConfig, TrainLog

MAGIC = b"UNIREPCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(bundle: ModelBundle):
    out = [(f"encoder/{k}", v) for k, v in bundle.encoder.arrays.items()]
    out.append(("bank/weights", bundle.bank.weights))
    out.append(("disc/weight", bundle.disc.weight))
    out.append(("disc/bias", bundle.disc.bias))
    out.append(("masks", bundle.masks.masks))
    return out


def to_bytes(bundle: ModelBundle) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in _arrays(bundle):
        arr = np.ascontiguousarray(arr)
        dtype = "<u1" if arr.dtype == np.uint8 else "<f8"
        raw = arr.astype(dtype).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
        pad = (-offset) % 8
        blobs.append(b"\0" * pad)
        offset += pad
    header = {
        "format_version": FORMAT_VERSION,
        "encoder_config": bundle.encoder.config.to_dict(),
        "train_config": bundle.train_config.to_dict(),
        "finetuned": bool(bundle.finetuned),
        "mask_seed": bundle.masks.seed,
        "log": bundle.log.epochs,
        "arrays": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    hbytes += b" " * ((-len(hbytes)) % 8)
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(data: bytes) -> ModelBundle:
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[20 : 20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    base = 20 + hlen
    arrays = {}
    for ent in header["arrays"]:
        dtype = np.dtype(ent["dtype"])
        count = int(np.prod(ent["shape"], dtype=np.int64))
        start = base + ent["offset"]
        end = start + count * dtype.itemsize
        if end > len(data):
            raise CheckpointError(f"array {ent['name']} runs past end of file")
        arrays[ent["name"]] = np.frombuffer(data[start:end], dtype=dtype).reshape(ent["shape"]).copy()

    enc_cfg = EncoderConfig(**{k: tuple(v) if k == "hidden" else v for k, v in header["encoder_config"].items()})
    enc = EncoderParams(enc_cfg, {k[len("encoder/"):]: v.astype(np.float64)
                                  for k, v in arrays.items() if k.startswith("encoder/")})
    tc = TrainConfig(**header["train_config"])
    log = TrainLog(epochs=header["log"])
    return ModelBundle(
        enc,
        PrototypeBank(arrays["bank/weights"]),
        MaskSet(arrays["masks"], header["mask_seed"]),
        Discriminator(arrays["disc/weight"], arrays["disc/bias"]),
        tc,
        log,
        header["finetuned"],
    )


def save(bundle: ModelBundle, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(bundle))


def load(path) -> ModelBundle:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
