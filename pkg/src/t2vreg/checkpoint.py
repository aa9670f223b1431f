"""Checkpoint container: named TTV1 tensors plus a JSON metadata block.

Byte layout (all integers little-endian)::

    b"T2VC"                          magic
    u32 version (= 1)
    u32 n                            number of tensors
    n x { u16 name_len, name (UTF-8), u64 offset, u64 length }   index
    tensor blobs                     each one TTV1 record, at its offset
    u64 meta_len, meta (UTF-8 JSON)  trailing metadata

Offsets are absolute from the start of the file.
"""

import json
import struct

import numpy as np

from .dsp import FeatureConfig, GvStats, NormStats
from .models import ModelConfig, build_model
from .pipeline import Enhancer
from .tensor import Rng, tensor_from_bytes, tensor_to_bytes
from .tt import TTCores
from .tucker import TuckerKernel

MAGIC = b"T2VC"
VERSION = 1


class Checkpoint:
    def __init__(self, tensors=None, metadata=None):
        self.tensors = dict(tensors or {})
        self.metadata = dict(metadata or {})

    def to_bytes(self):
        names = list(self.tensors)
        blobs = [tensor_to_bytes(self.tensors[k]) for k in names]
        encoded = [k.encode("utf-8") for k in names]
        index_size = sum(2 + len(e) + 16 for e in encoded)
        pos = 12 + index_size
        head = [MAGIC, struct.pack("<II", VERSION, len(names))]
        for e, blob in zip(encoded, blobs):
            head.append(struct.pack("<H", len(e)) + e + struct.pack("<QQ", pos, len(blob)))
            pos += len(blob)
        meta = json.dumps(self.metadata, sort_keys=True).encode("utf-8")
        return b"".join(head + blobs + [struct.pack("<Q", len(meta)), meta])

    @classmethod
    def from_bytes(cls, buf):
        if buf[:4] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, n = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 12
        tensors = {}
        end = 12
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + name_len].decode("utf-8")
            offset, length = struct.unpack_from("<QQ", buf, pos + 2 + name_len)
            pos += 2 + name_len + 16
            tensors[name], _ = tensor_from_bytes(buf, offset)
            end = max(end, offset + length)
        end = max(end, pos)
        (meta_len,) = struct.unpack_from("<Q", buf, end)
        metadata = json.loads(buf[end + 8:end + 8 + meta_len].decode("utf-8"))
        return cls(tensors, metadata)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def save_enhancer(path, enh, **metadata):
    meta = {"modelConfig": enh.model.config.to_json(), "featureConfig": enh.cfg.to_json()}
    meta.update(metadata)
    Checkpoint(enh.state_tensors(), meta).save(path)


def load_enhancer(path):
    """Rebuild an :class:`Enhancer` (model, norm and GV statistics) from a file."""
    ckpt = Checkpoint.load(path)
    t = ckpt.tensors
    config = ModelConfig.from_json(ckpt.metadata["modelConfig"])
    model = build_model(config, Rng(0))
    for name in model.params:
        model.set_param(name, t[name].copy())
    for name in model.buffers:
        model.set_buffer(name, t[f"buffer.{name}"].copy())
    in_stats = out_stats = gv = None
    if "norm.in.mean" in t:
        in_stats = NormStats(t["norm.in.mean"], t["norm.in.std"])
        out_stats = NormStats(t["norm.out.mean"], t["norm.out.std"])
    if "gv.ref_var" in t:
        gv = GvStats(t["gv.ref_var"], t["gv.est_var"], t["gv.est_mean"])
    cfg = FeatureConfig.from_json(ckpt.metadata["featureConfig"])
    return Enhancer(model, cfg, in_stats, out_stats, gv), ckpt.metadata


def save_tt(path, tt):
    Checkpoint(tt.named(), {"tt": tt.shape.to_json()}).save(path)


def load_tt(path):
    ckpt = Checkpoint.load(path)
    K = len(ckpt.metadata["tt"]["m"])
    return TTCores.from_cores([ckpt.tensors[f"tt.core.{k}"] for k in range(K)])


def save_tucker(path, tk):
    rank_in, rank_out = tk.ranks
    Checkpoint(tk.named(), {"tucker": {"rankIn": int(rank_in), "rankOut": int(rank_out)}}).save(path)


def load_tucker(path):
    t = Checkpoint.load(path).tensors
    return TuckerKernel(np.array(t["tucker.core"]), np.array(t["tucker.input_factor"]),
                        np.array(t["tucker.output_factor"]))
