"""LCRT checkpoints and key=value config files.

LCRT layout, little-endian throughout::

    b"LCRT"  u32 version  u32 record_count
    record_count x ( u32 name_len, name (utf-8), u32 rank, rank x u64 extent,
                     prod(extents) x f64 )

Network metadata travels as rank-0 records named ``meta.<key>``; string
valued settings are stored as their index in the allowed-values tuple.
"""
from __future__ import annotations

import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .network import HEAD_KINDS, POOL_KINDS, LipConvnetConfig, Network, build_lipconvnet

MAGIC = b"LCRT"
VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_ENUMS = {"pool": POOL_KINDS, "head": HEAD_KINDS}


class CheckpointError(ValueError):
    pass


def encode(records: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, _U32.pack(VERSION), _U32.pack(len(records))]
    for name, value in records.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        out += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        out += [_U64.pack(e) for e in arr.shape]
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode(raw: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}: "
                                  f"need {pos + n} bytes, file has {len(raw)}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = _U32.unpack(take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = _U32.unpack(take(4, "record count"))
    records = {}
    for _ in range(count):
        (nlen,) = _U32.unpack(take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = _U32.unpack(take(4, f"rank of {name}"))
        shape = tuple(_U64.unpack(take(8, f"extent of {name}"))[0] for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(8 * size, f"payload of {name}"), dtype="<f8")
        records[name] = data.astype(np.float64).reshape(shape)
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after last record")
    return records


def config_records(cfg: LipConvnetConfig) -> dict[str, np.ndarray]:
    out = {}
    for key, value in cfg.to_dict().items():
        if key in _ENUMS:
            value = _ENUMS[key].index(value)
        out[f"meta.{key}"] = np.asarray(value, dtype=np.float64)
    return out


def config_from_records(records: dict[str, np.ndarray]) -> LipConvnetConfig:
    kwargs = {}
    for f in fields(LipConvnetConfig):
        key = f"meta.{f.name}"
        if key not in records:
            raise CheckpointError(f"checkpoint lacks {key}")
        val = records[key]
        if f.name in _ENUMS:
            kwargs[f.name] = _ENUMS[f.name][int(val)]
        elif f.name == "in_shape":
            kwargs[f.name] = tuple(int(v) for v in val)
        elif f.name == "signed_pool":
            kwargs[f.name] = bool(val)
        elif f.name == "init_norm":
            kwargs[f.name] = float(val)
        else:
            kwargs[f.name] = int(val)
    return LipConvnetConfig(**kwargs)


def save_network(net: Network, path, extra: dict[str, float] | None = None) -> bytes:
    records = config_records(net.config)
    for key, value in (extra or {}).items():
        records[f"meta.{key}"] = np.asarray(value, dtype=np.float64)
    records.update(net.parameters())
    raw = encode(records)
    if path is not None:
        Path(path).write_bytes(raw)
    return raw


def load_network(path) -> tuple[Network, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    records = decode(path.read_bytes())
    net = build_lipconvnet(config_from_records(records))
    net.load_parameters({k: v for k, v in records.items() if not k.startswith("meta.")})
    meta = {k[5:]: v for k, v in records.items() if k.startswith("meta.")}
    return net, meta


# -- config files -----------------------------------------------------------

def parse_config(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"config line {lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def load_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text())
