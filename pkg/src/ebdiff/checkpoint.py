"""EBDF checkpoint codec.

Layout::

    b"EBDF" | u16 version | u32 header length | header JSON (utf-8, sorted keys)
    | float64 little-endian parameters | optional mask bytes (one 0/1 byte per unit)

The header carries the architecture descriptor, config hash, RNG state and
mask widths. Encoding is canonical, so decode followed by encode reproduces
the original bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import DenseLayer, Denoiser
from .pruning import ChannelMask

MAGIC = b"EBDF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def architecture(net):
    return {
        "input_dim": net.input_dim,
        "time_embed_dim": net.time_embed_dim,
        "layers": [[l.fan_in, l.fan_out, l.activation] for l in net.layers],
    }


@dataclass
class Checkpoint:
    arch: dict
    params: np.ndarray
    config_hash: str = ""
    rng_state: dict | None = None
    mask: ChannelMask | None = None

    @classmethod
    def from_net(cls, net, config_hash="", rng_state=None, mask=None):
        flat = np.concatenate([p.ravel() for p in net.params()])
        return cls(architecture(net), flat, config_hash, rng_state, mask)

    def to_net(self, expected_arch=None):
        if expected_arch is not None and expected_arch != self.arch:
            raise CheckpointError(
                f"architecture mismatch: checkpoint {self.arch} vs expected {expected_arch}")
        layers = []
        offset = 0
        for fan_in, fan_out, act in self.arch["layers"]:
            nw = fan_in * fan_out
            w = self.params[offset:offset + nw].reshape(fan_out, fan_in).copy()
            offset += nw
            b = self.params[offset:offset + fan_out].copy()
            offset += fan_out
            layers.append(DenseLayer(w, b, act))
        if offset != self.params.size:
            raise CheckpointError("parameter payload does not match architecture")
        return Denoiser(layers, self.arch["input_dim"], self.arch["time_embed_dim"])

    def encode(self):
        header = {
            "arch": self.arch,
            "config_hash": self.config_hash,
            "n_params": int(self.params.size),
            "rng_state": self.rng_state,
            "mask_widths": None if self.mask is None else self.mask.widths,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out = [MAGIC, struct.pack("<HI", VERSION, len(hbytes)), hbytes,
               np.asarray(self.params, dtype="<f8").tobytes()]
        if self.mask is not None:
            out.append(self.mask.flat().astype(np.uint8).tobytes())
        return b"".join(out)

    @classmethod
    def decode(cls, data):
        if data[:4] != MAGIC:
            raise CheckpointError("not an EBDF checkpoint")
        version, hlen = struct.unpack_from("<HI", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        n = header["n_params"]
        params = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        mask = None
        widths = header["mask_widths"]
        if widths is not None:
            bits = np.frombuffer(data, dtype=np.uint8, count=sum(widths), offset=pos)
            pos += sum(widths)
            mask = ChannelMask(tuple(np.split(bits.astype(bool), np.cumsum(widths)[:-1])))
        if pos != len(data):
            raise CheckpointError("trailing bytes in checkpoint")
        return cls(header["arch"], params, header["config_hash"], header["rng_state"], mask)


def save_checkpoint(ckpt, path):
    Path(path).write_bytes(ckpt.encode())


def load_checkpoint(path):
    return Checkpoint.decode(Path(path).read_bytes())
