"""Self-contained model files.

Layout: the line ``FUNW1\\n``, a little-endian u32 header length, a JSON
header with sorted keys, then every tensor as little-endian f32 in header
order. The header carries the architecture text, so a file is loadable
without any other input, and normalization statistics travel as buffers.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from funnet.arch.model import LefunFront, LefunModel, Model
from funnet.arch.spec import from_text, to_text
from funnet.dct_codec import FULL_SPEC, CompressionSpec

MAGIC = b"FUNW1\n"
FORMAT_VERSION = 1


@dataclass
class WeightsFile:
    model: Model | LefunModel
    compression: CompressionSpec = FULL_SPEC
    seed: int = 0

    def _tensors(self) -> list[tuple[str, str, np.ndarray]]:
        out = [(n, "param", p.data) for n, p in self.model.named_parameters()]
        out += [(n, "buffer", b) for n, b in self.model.named_buffers()]
        return out

    def to_bytes(self) -> bytes:
        m = self.model
        body = m.body if isinstance(m, LefunModel) else m
        tensors = self._tensors()
        header = {
            "version": FORMAT_VERSION,
            "arch": to_text(body.spec),
            "compression": str(self.compression),
            "seed": self.seed,
            "front": (
                {"per_plane": m.front.per_plane, "freeze_body": m.freeze_body}
                if isinstance(m, LefunModel) else None
            ),
            "tensors": [{"name": n, "kind": k, "shape": list(a.shape)} for n, k, a in tensors],
            "count": int(sum(a.size for _, _, a in tensors)),
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, _, a in tensors)
        return MAGIC + struct.pack("<I", len(head)) + head + blob

    @classmethod
    def from_bytes(cls, buf: bytes) -> "WeightsFile":
        if not buf.startswith(MAGIC):
            raise ValueError("not a weights file (bad magic)")
        pos = len(MAGIC)
        if len(buf) < pos + 4:
            raise ValueError("truncated weights header")
        (hlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        try:
            header = json.loads(buf[pos : pos + hlen])
        except json.JSONDecodeError as exc:
            raise ValueError(f"corrupt weights header: {exc}") from exc
        pos += hlen
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported weights version {header.get('version')}")
        body = Model(from_text(header["arch"]), seed=header["seed"])
        model: Model | LefunModel = body
        if header.get("front"):
            front = LefunFront(np.random.default_rng(0), per_plane=header["front"]["per_plane"])
            model = LefunModel(body, front, freeze_body=header["front"]["freeze_body"])
        params = dict(model.named_parameters())
        owners = {}
        for mod_name, mod in _named_modules(model):
            for k in mod._buffers:
                owners[f"{mod_name}{k}"] = (mod, k)
        expected = sum(int(np.prod(t["shape"])) for t in header["tensors"])
        if len(buf) - pos != 4 * expected:
            raise ValueError(f"weights payload is {len(buf) - pos} bytes, expected {4 * expected}")
        for t in header["tensors"]:
            shape = tuple(t["shape"])
            n = int(np.prod(shape))
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(shape)
            pos += 4 * n
            if t["kind"] == "param":
                target = params.get(t["name"])
                if target is None or target.shape != shape:
                    raise ValueError(f"weights tensor {t['name']} does not fit the architecture")
                target.data = arr
            else:
                if t["name"] not in owners:
                    raise ValueError(f"unknown buffer {t['name']}")
                mod, key = owners[t["name"]]
                if mod._buffers[key].shape != shape:
                    raise ValueError(f"buffer {t['name']} has shape {shape}")
                mod._buffers[key] = arr
        model.eval()
        return cls(model, CompressionSpec.parse(header["compression"]), header["seed"])


def _named_modules(module, prefix: str = ""):
    yield prefix, module
    for name, child in module._children():
        if not hasattr(child, "_buffers"):
            continue
        yield from _named_modules(child, f"{prefix}{name}.")


def save(path: str | os.PathLike, model, compression: CompressionSpec = FULL_SPEC,
         seed: int = 0) -> None:
    Path(path).write_bytes(WeightsFile(model, compression, seed).to_bytes())


def load(path: str | os.PathLike) -> WeightsFile:
    return WeightsFile.from_bytes(Path(path).read_bytes())
