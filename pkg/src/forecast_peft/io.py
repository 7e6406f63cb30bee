"""Length-prefixed little-endian binary containers.

Every container starts with a 4-byte magic, a version byte, and a u32 record
count. Each record is a u32 byte length followed by its payload.

* ``FPSC`` scenes
* ``FPPR`` prediction dumps (target agent, K trajectories + K confidences)
* ``FPPL`` plug-in checkpoints (see :mod:`forecast_peft.peft`)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .scene import AgentTrack, LanePolyline, Scene

VERSION = 1
SCENE_MAGIC = b"FPSC"
PRED_MAGIC = b"FPPR"


class _Reader:
    def __init__(self, buf: bytes, where: str):
        self.buf = buf
        self.pos = 0
        self.where = where

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError(f"truncated {self.where}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)

    def flags(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(n), dtype=np.uint8).astype(bool)


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _u8(a) -> bytes:
    return np.ascontiguousarray(a, dtype=np.uint8).tobytes()


def write_container(path, magic: bytes, records: list[bytes]) -> None:
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<BI", VERSION, len(records)))
        for rec in records:
            fh.write(struct.pack("<I", len(rec)))
            fh.write(rec)


def read_container(path, magic: bytes) -> list[bytes]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    r = _Reader(path.read_bytes(), str(path))
    got = r.take(4)
    if got != magic:
        raise DataError(f"{path}: expected magic {magic!r}, found {got!r}")
    version, count = r.unpack("<BI")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    records = []
    for _ in range(count):
        (n,) = r.unpack("<I")
        records.append(r.take(n))
    return records


# -- scenes --------------------------------------------------------------------
def encode_scene(scene: Scene) -> bytes:
    H = len(scene.agents[0].history)
    T = len(scene.agents[0].future)
    P = len(scene.lanes[0].points)
    tag = scene.dataset_tag.encode()
    parts = [struct.pack("<IHHHHHfH", scene.scene_id, len(scene.agents), len(scene.lanes),
                         H, T, P, scene.sample_rate_hz, len(tag)), tag]
    for ag in scene.agents:
        parts += [struct.pack("<B", ag.category), _f32(ag.history), _u8(ag.history_valid),
                  _f32(ag.future), _u8(ag.future_valid)]
    for ln in scene.lanes:
        parts += [struct.pack("<B", ln.category), _f32(ln.points), _u8(ln.point_valid)]
    return b"".join(parts)


def decode_scene(buf: bytes) -> Scene:
    r = _Reader(buf, "scene record")
    sid, n_agents, n_lanes, H, T, P, rate, tag_len = r.unpack("<IHHHHHfH")
    tag = r.take(tag_len).decode()
    agents, lanes = [], []
    for _ in range(n_agents):
        (cat,) = r.unpack("<B")
        h = r.floats((H, 2))
        hv = r.flags(H)
        f = r.floats((T, 2))
        fv = r.flags(T)
        agents.append(AgentTrack(h, f, hv, fv, cat))
    for _ in range(n_lanes):
        (cat,) = r.unpack("<B")
        pts = r.floats((P, 2))
        lanes.append(LanePolyline(pts, r.flags(P), cat))
    return Scene(agents, lanes, tag, float(rate), sid)


def save_scenes(path, scenes: list[Scene]) -> None:
    write_container(path, SCENE_MAGIC, [encode_scene(s) for s in scenes])


def load_scenes(path) -> list[Scene]:
    return [decode_scene(rec) for rec in read_container(path, SCENE_MAGIC)]


# -- prediction dumps ------------------------------------------------------------
def save_predictions(path, scene_ids, trajectories: np.ndarray, confidences: np.ndarray) -> None:
    """``trajectories`` is (S, K, T, 2) for the target agent, ``confidences`` (S, K)."""
    records = []
    for sid, traj, conf in zip(scene_ids, trajectories, confidences):
        K, T, _ = traj.shape
        records.append(struct.pack("<IHH", int(sid), K, T) + _f32(traj) + _f32(conf))
    write_container(path, PRED_MAGIC, records)


def load_predictions(path):
    ids, trajs, confs = [], [], []
    for rec in read_container(path, PRED_MAGIC):
        r = _Reader(rec, "prediction record")
        sid, K, T = r.unpack("<IHH")
        ids.append(sid)
        trajs.append(r.floats((K, T, 2)))
        confs.append(r.floats((K,)))
    if not ids:
        return np.zeros(0, np.int64), np.zeros((0, 0, 0, 2), np.float32), np.zeros((0, 0), np.float32)
    return np.array(ids, dtype=np.int64), np.stack(trajs), np.stack(confs)
