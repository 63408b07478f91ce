"""Trajectory files and the dataset manifest.

Trajectory file (little-endian)::

    b"DMTJ"  u32 version  u32 n_steps  u32 header_len  header_json
    n_steps fixed-size records
    u32 CRC32 of every preceding byte

Each record is ``RECORD_SIZE`` bytes: the RGB image (12288 x u8), raw P/V/A
(18 x f32), cart pose x_t (3 x f32), normalized action (3 x f32), absolute
pose command (3 x f32), goal (2 x f32) and a status byte whose low bits are
the support code and whose bit 7 flags an obstacle collision, zero-padded to
a multiple of four bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..tasks import (SUPPORT_CODES, SUPPORT_FROM_CODE, ActionBounds, DynamicsState,
                     EpisodeConfig, GoalSpec, NormStats, PolicyAction, RandomizationSpec,
                     StepRecord, TaskId)

MAGIC = b"DMTJ"
VERSION = 1
IMAGE_SHAPE = (64, 64, 3)
COLLIDED_BIT = 0x80

_FIELDS = [
    ("image", "u1", IMAGE_SHAPE),
    ("dynamics", "<f4", (18,)),
    ("proprio", "<f4", (3,)),
    ("action", "<f4", (3,)),
    ("command", "<f4", (3,)),
    ("goal", "<f4", (2,)),
    ("status", "u1", ()),
]


def _record_dtype() -> np.dtype:
    names, formats, offsets, off = [], [], [], 0
    for name, fmt, shape in _FIELDS:
        dt = np.dtype((fmt, shape)) if shape else np.dtype(fmt)
        names.append(name)
        formats.append(dt)
        offsets.append(off)
        off += dt.itemsize
    size = (off + 3) // 4 * 4
    return np.dtype({"names": names, "formats": formats, "offsets": offsets, "itemsize": size})


RECORD_DTYPE = _record_dtype()
RECORD_SIZE = RECORD_DTYPE.itemsize
PAYLOAD_SIZE = RECORD_SIZE - int(np.prod(IMAGE_SHAPE))


class CorruptFileError(ValueError):
    """A file failed a structural or checksum check; ``field`` names which."""

    def __init__(self, path, field: str, detail: str):
        super().__init__(f"{path}: corrupt {field}: {detail}")
        self.field = field


def _layout() -> list:
    return [{"name": n, "dtype": f, "shape": list(s), "offset": RECORD_DTYPE.fields[n][1]}
            for n, f, s in _FIELDS]


@dataclass
class Trajectory:
    config: EpisodeConfig
    records: np.ndarray                      # RECORD_DTYPE array
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def images(self) -> np.ndarray:
        return self.records["image"]

    @property
    def dynamics(self) -> np.ndarray:
        return self.records["dynamics"].astype(np.float64)

    @property
    def actions(self) -> np.ndarray:
        return self.records["action"].astype(np.float64)

    @property
    def commands(self) -> np.ndarray:
        return self.records["command"].astype(np.float64)

    @property
    def goals(self) -> np.ndarray:
        return self.records["goal"].astype(np.float64)

    @property
    def support_codes(self) -> np.ndarray:
        return self.records["status"] & 0x7F

    @property
    def collided(self) -> np.ndarray:
        return (self.records["status"] & COLLIDED_BIT) != 0

    @classmethod
    def from_records(cls, config: EpisodeConfig, records, bounds: ActionBounds = ActionBounds(),
                     meta: dict | None = None) -> "Trajectory":
        arr = np.zeros(len(records), dtype=RECORD_DTYPE)
        for i, r in enumerate(records):
            arr["image"][i] = r.image
            arr["dynamics"][i] = r.dynamics.as_vector()
            arr["proprio"][i] = r.proprio
            arr["action"][i] = np.asarray(r.action.delta) / bounds.as_array()
            arr["command"][i] = r.command_pose
            arr["goal"][i] = r.goal.xy
            arr["status"][i] = SUPPORT_CODES[r.support] | (COLLIDED_BIT if r.collided else 0)
        return cls(config, arr, dict(meta or {}))

    def to_records(self, bounds: ActionBounds = ActionBounds()) -> list:
        out = []
        for rec in self.records:
            d = rec["dynamics"].astype(np.float64)
            a = rec["action"].astype(np.float64)
            out.append(StepRecord(
                image=rec["image"].copy(),
                dynamics=DynamicsState(d[:6], d[6:12], d[12:]),
                proprio=rec["proprio"].astype(np.float64),
                action=PolicyAction(tuple(a * bounds.as_array()), tuple(a)),
                command_pose=rec["command"].astype(np.float64),
                goal=GoalSpec(*(float(v) for v in rec["goal"])),
                support=SUPPORT_FROM_CODE[int(rec["status"]) & 0x7F],
                collided=bool(rec["status"] & COLLIDED_BIT),
            ))
        return out


def _header_bytes(traj: Trajectory) -> bytes:
    header = {"config": traj.config.to_dict(), "layout": _layout(), "record_size": RECORD_SIZE,
              "meta": traj.meta}
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def encode_trajectory(traj: Trajectory) -> bytes:
    header = _header_bytes(traj)
    # copy field by field into a zeroed buffer so padding bytes are always zero
    recs = np.zeros(len(traj.records), dtype=RECORD_DTYPE)
    for name in RECORD_DTYPE.names:
        recs[name] = traj.records[name]
    body = (MAGIC + struct.pack("<III", VERSION, len(recs), len(header)) + header + recs.tobytes())
    return body + struct.pack("<I", zlib.crc32(body))


def atomic_write(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_trajectory(path, traj: Trajectory) -> str:
    """Write ``traj`` atomically; returns the SHA-256 of the file."""
    data = encode_trajectory(traj)
    atomic_write(path, data)
    return hashlib.sha256(data).hexdigest()


def decode_trajectory(raw: bytes, path="<bytes>") -> Trajectory:
    if len(raw) < 20:
        raise CorruptFileError(path, "length", f"{len(raw)} bytes is shorter than the fixed header")
    if raw[:4] != MAGIC:
        raise CorruptFileError(path, "magic", f"expected {MAGIC!r}, found {raw[:4]!r}")
    version, n, hlen = struct.unpack("<III", raw[4:16])
    if version != VERSION:
        raise CorruptFileError(path, "version", f"unsupported version {version}")
    expected = 16 + hlen + n * RECORD_SIZE + 4
    if len(raw) != expected:
        raise CorruptFileError(path, "length", f"expected {expected} bytes, found {len(raw)}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CorruptFileError(path, "crc", "checksum mismatch")
    try:
        header = json.loads(raw[16:16 + hlen])
        config = EpisodeConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFileError(path, "header", str(exc)) from None
    if header.get("record_size") != RECORD_SIZE:
        raise CorruptFileError(path, "record_size", f"{header.get('record_size')} != {RECORD_SIZE}")
    recs = np.frombuffer(raw, dtype=RECORD_DTYPE, count=n, offset=16 + hlen).copy()
    return Trajectory(config, recs, header.get("meta", {}))


def read_trajectory(path) -> Trajectory:
    return decode_trajectory(Path(path).read_bytes(), path)


def trajectory_file_size(n_steps: int, header_len: int) -> int:
    return 16 + header_len + n_steps * RECORD_SIZE + 4


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- manifest

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class DatasetManifest:
    task: TaskId
    n_train: int
    n_eval: int
    steps: int
    randomization: RandomizationSpec
    norm_stats: NormStats
    trajectories: list          # dicts: split, file, sha256, config_digest, seed, expert
    creation_seed: int
    version: int = MANIFEST_VERSION
    extra: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [t for t in self.trajectories if t["split"] == name]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for t in self.trajectories:
            h.update(f"{t['split']}/{t['file']}:{t['sha256']}\n".encode())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "task": TaskId(self.task).value,
            "counts": {"train": self.n_train, "eval": self.n_eval, "steps": self.steps},
            "randomization": self.randomization.to_dict(),
            "norm_stats": self.norm_stats.to_dict(),
            "trajectories": self.trajectories,
            "creation_seed": self.creation_seed,
            "content_hash": self.content_hash(),
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("version") != MANIFEST_VERSION:
            raise CorruptFileError("manifest", "version", f"unsupported version {d.get('version')}")
        m = cls(TaskId(d["task"]), d["counts"]["train"], d["counts"]["eval"], d["counts"]["steps"],
                RandomizationSpec.from_dict(d["randomization"]), NormStats.from_dict(d["norm_stats"]),
                list(d["trajectories"]), int(d["creation_seed"]), d["version"], d.get("extra", {}))
        if d.get("content_hash") != m.content_hash():
            raise CorruptFileError("manifest", "content_hash", "does not match trajectory list")
        return m


def write_manifest(directory, manifest: DatasetManifest) -> Path:
    path = Path(directory) / MANIFEST_NAME
    atomic_write(path, (json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n").encode())
    return path


def read_manifest(directory) -> DatasetManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    try:
        d = json.loads(path.read_text())
    except ValueError as exc:
        raise CorruptFileError(path, "json", str(exc)) from None
    return DatasetManifest.from_dict(d)


class Dataset:
    """A dataset directory: manifest plus lazily loaded trajectory files."""

    def __init__(self, directory, verify: bool = False):
        self.directory = Path(directory)
        self.manifest = read_manifest(self.directory)
        self._cache = {}
        if verify:
            self.verify()

    @property
    def stats(self) -> NormStats:
        return self.manifest.norm_stats

    @property
    def task(self) -> TaskId:
        return self.manifest.task

    def entries(self, split: str) -> list:
        return self.manifest.split(split)

    def load(self, entry) -> Trajectory:
        key = entry["file"]
        if key not in self._cache:
            self._cache[key] = read_trajectory(self.directory / key)
        return self._cache[key]

    def trajectories(self, split: str) -> list:
        return [self.load(e) for e in self.entries(split)]

    def eval_configs(self) -> list:
        return [self.load(e).config for e in self.entries("eval")]

    def verify(self):
        for e in self.manifest.trajectories:
            digest = sha256_file(self.directory / e["file"])
            if digest != e["sha256"]:
                raise CorruptFileError(e["file"], "sha256", "file does not match manifest")
            traj = self.load(e)
            if traj.config.digest() != e["config_digest"]:
                raise CorruptFileError(e["file"], "config_digest", "episode config does not match manifest")

    def content_hash(self) -> str:
        return self.manifest.content_hash()
