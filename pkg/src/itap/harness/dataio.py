"""Binary persistence: trajectory datasets and model checkpoints.

Both formats are little-endian throughout, carry an ASCII magic plus a
version word, store all floats as 32-bit IEEE-754, and end with a CRC-32 of
every preceding byte, so any single corrupted byte is detected on read.

Dataset ("ITAP"): header (obs_dim, act_dim, gamma, episode count) then one
block per episode of (length, regime_label, step records), each step record
being observation, action, reward contiguously.

Checkpoint ("ITCK"): a directory of named blocks (name, offset, length);
tensor blocks hold shape-tagged float32 arrays, the config block holds the
resolved run configuration as UTF-8 text.
"""

from __future__ import annotations

import io
import struct
import zlib

import numpy as np

from ..core import Episode

__all__ = [
    "DataFormatError",
    "CorruptionError",
    "UnsupportedVersionError",
    "DATASET_MAGIC",
    "CHECKPOINT_MAGIC",
    "write_dataset",
    "read_dataset",
    "write_checkpoint",
    "read_checkpoint",
]

DATASET_MAGIC = b"ITAP"
CHECKPOINT_MAGIC = b"ITCK"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1


class DataFormatError(Exception):
    """File does not look like one of ours."""


class CorruptionError(DataFormatError):
    """Payload is truncated or fails its checksum."""


class UnsupportedVersionError(DataFormatError):
    """Recognized file with a version this build cannot read."""


def _u32(x: int) -> bytes:
    return struct.pack("<I", x)


def _u64(x: int) -> bytes:
    return struct.pack("<Q", x)


def _f32(x: float) -> bytes:
    return struct.pack("<f", x)


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(f"truncated {self.what}: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def f32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()


def _finish(buf: io.BytesIO) -> bytes:
    body = buf.getvalue()
    return body + _u32(zlib.crc32(body) & 0xFFFFFFFF)


def _check_crc(data: bytes, what: str) -> bytes:
    if len(data) < 4:
        raise CorruptionError(f"{what} too short to hold a checksum")
    body, stored = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise CorruptionError(f"{what} checksum mismatch")
    return body


def write_dataset(path: str, episodes: list[Episode], gamma: float) -> None:
    if not episodes:
        raise ValueError("refusing to write an empty dataset")
    obs_dim = episodes[0].observations.shape[1]
    act_dim = episodes[0].actions.shape[1]
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(_u32(DATASET_VERSION))
    buf.write(_u32(obs_dim))
    buf.write(_u32(act_dim))
    buf.write(_f32(gamma))
    buf.write(_u32(len(episodes)))
    for ep in episodes:
        if ep.observations.shape[1] != obs_dim or ep.actions.shape[1] != act_dim:
            raise ValueError("episodes disagree on observation/action dimensions")
        buf.write(_u32(len(ep)))
        buf.write(_f32(float(ep.regime_label)))
        step = np.concatenate(
            [
                ep.observations.astype("<f4"),
                ep.actions.astype("<f4"),
                ep.rewards.astype("<f4")[:, None],
            ],
            axis=1,
        )
        buf.write(step.tobytes())
    with open(path, "wb") as f:
        f.write(_finish(buf))


def read_dataset(path: str):
    """Returns (episodes, header dict)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != DATASET_MAGIC:
        raise DataFormatError(f"bad dataset magic: {raw[:4]!r}")
    body = _check_crc(raw, "dataset")
    r = _Reader(body, "dataset")
    r.take(4)  # magic
    version = r.u32()
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(f"dataset version {version} not supported")
    obs_dim = r.u32()
    act_dim = r.u32()
    gamma = r.f32()
    count = r.u32()
    episodes = []
    width = obs_dim + act_dim + 1
    for _ in range(count):
        length = r.u32()
        regime = r.f32()
        flat = r.f32_array(length * width).reshape(length, width)
        episodes.append(
            Episode(
                observations=flat[:, :obs_dim],
                actions=flat[:, obs_dim : obs_dim + act_dim],
                rewards=flat[:, -1],
                regime_label=regime,
            )
        )
    if r.pos != len(body):
        raise CorruptionError("dataset has trailing bytes after the declared episodes")
    return episodes, {"obs_dim": obs_dim, "act_dim": act_dim, "gamma": gamma, "episodes": count}


def _encode_tensor_block(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(_u32(len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(_u32(len(nb)))
        buf.write(nb)
        buf.write(_u32(arr.ndim))
        for d in arr.shape:
            buf.write(_u32(d))
        buf.write(arr.tobytes())
    return buf.getvalue()


def _decode_tensor_block(data: bytes, what: str) -> dict[str, np.ndarray]:
    r = _Reader(data, what)
    out = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        out[name] = r.f32_array(n).reshape(shape)
    if r.pos != len(data):
        raise CorruptionError(f"{what} block has trailing bytes")
    return out


def write_checkpoint(path: str, blocks: dict[str, dict[str, np.ndarray]], config_text: str) -> None:
    payloads = {name: _encode_tensor_block(t) for name, t in blocks.items()}
    payloads["config"] = config_text.encode("utf-8")
    names = list(payloads)
    header = io.BytesIO()
    header.write(CHECKPOINT_MAGIC)
    header.write(_u32(CHECKPOINT_VERSION))
    header.write(_u32(len(names)))
    dir_size = sum(4 + len(n.encode("utf-8")) + 16 for n in names)
    offset = header.tell() + dir_size
    for n in names:
        nb = n.encode("utf-8")
        header.write(_u32(len(nb)))
        header.write(nb)
        header.write(_u64(offset))
        header.write(_u64(len(payloads[n])))
        offset += len(payloads[n])
    buf = io.BytesIO()
    buf.write(header.getvalue())
    for n in names:
        buf.write(payloads[n])
    with open(path, "wb") as f:
        f.write(_finish(buf))


def read_checkpoint(path: str):
    """Returns (tensor blocks, config text)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"bad checkpoint magic: {raw[:4]!r}")
    body = _check_crc(raw, "checkpoint")
    r = _Reader(body, "checkpoint")
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} not supported")
    n_blocks = r.u32()
    directory = []
    for _ in range(n_blocks):
        name = r.take(r.u32()).decode("utf-8")
        off = r.u64()
        length = r.u64()
        directory.append((name, off, length))
    blocks, config_text = {}, ""
    for name, off, length in directory:
        if off + length > len(body):
            raise CorruptionError(f"block {name} extends past end of file")
        chunk = body[off : off + length]
        if name == "config":
            config_text = chunk.decode("utf-8")
        else:
            blocks[name] = _decode_tensor_block(chunk, f"checkpoint block {name}")
    return blocks, config_text
