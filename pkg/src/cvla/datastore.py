"""Binary persistence: episode files, dataset manifests, batching with
observation/action horizons, and policy checkpoints.

All on-disk integers and floats are little-endian; round trips are bit-exact.
Formats are custom containers documented here:

episode file (ep_%06d.bin)
    magic "CVEP" | u32 version | u32 header_len | header JSON |
    T x [ image H*W*3 u8 | proprio 3xf32 | action 3xf32 |
          per mask: u32 n_runs | n_runs x (u32 start, u32 len) ]

checkpoint file (*.cvla)
    magic "CVLA" | u32 version | u64 header_len | header JSON |
    u32 n_tensors | per tensor (name-sorted):
    u16 name_len | name | u8 dtype | u8 ndim | ndim x u32 dims | payload
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, RolloutError, SchemaError
from .numerics import RngStream
from .objcentric import InstanceMask
from .policy import ArchConfig, GeneralPolicy, extend_to_expert
from .simworld import TabletopSim, TaskSpec, expert_action, tokenize

EPISODE_MAGIC = b"CVEP"
CHECKPOINT_MAGIC = b"CVLA"
FORMAT_VERSION = 1


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj)).hexdigest()[:16]


# ---------------------------------------------------------------------------
# run-length encoding for mask bitmaps
# ---------------------------------------------------------------------------


def rle_encode(bitmap: np.ndarray):
    flat = bitmap.ravel()
    padded = np.concatenate([[False], flat, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts = edges[0::2].astype(np.uint32)
    lengths = (edges[1::2] - edges[0::2]).astype(np.uint32)
    return starts, lengths


def rle_decode(starts, lengths, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    for s, l in zip(starts, lengths):
        flat[s : s + l] = True
    return flat.reshape(shape)


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    task: TaskSpec
    seed: int
    images: np.ndarray  # [T, H, W, 3] uint8
    proprios: np.ndarray  # [T, 3] f32
    actions: np.ndarray  # [T, 3] f32
    masks_rle: list  # per step: list of (starts, lengths) per relevant entity

    @property
    def length(self) -> int:
        return self.images.shape[0]

    def masks_at(self, t: int):
        hw = self.images.shape[1:3]
        return [
            InstanceMask(i, rle_decode(s, l, hw)) for i, (s, l) in enumerate(self.masks_rle[t])
        ]


def record_episode(task: TaskSpec, seed: int, actor=None) -> Episode:
    """Roll out an actor (default: the scripted expert), recording every
    (observation, action, masks) step; failed rollouts raise RolloutError."""
    sim = TabletopSim(task, seed)
    result = sim.reset()
    images, proprios, actions, masks = [], [], [], []
    while not result.done:
        if actor is None:
            a = expert_action(sim.state, task, sim.latched)
        else:
            a = actor(sim, result)
        images.append(result.obs.image)
        proprios.append(result.obs.proprio)
        actions.append(np.asarray(a, dtype=np.float32))
        masks.append([rle_encode(m.bitmap) for m in result.masks])
        result = sim.step(a)
    if not result.success:
        raise RolloutError(f"rollout failed on task {task.name} seed {seed} after {sim.step_count} steps")
    return Episode(
        task=task,
        seed=seed,
        images=np.stack(images),
        proprios=np.stack(proprios),
        actions=np.stack(actions),
        masks_rle=masks,
    )


def write_episode(ep: Episode, path) -> None:
    header = canonical_json(
        {
            "task": ep.task.to_dict(),
            "seed": ep.seed,
            "length": ep.length,
            "image_hw": int(ep.images.shape[1]),
            "n_masks": len(ep.masks_rle[0]) if ep.length else 0,
        }
    )
    with open(path, "wb") as f:
        f.write(EPISODE_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for t in range(ep.length):
            f.write(ep.images[t].tobytes())
            f.write(ep.proprios[t].astype("<f4").tobytes())
            f.write(ep.actions[t].astype("<f4").tobytes())
            for starts, lengths in ep.masks_rle[t]:
                f.write(struct.pack("<I", len(starts)))
                inter = np.empty(2 * len(starts), dtype="<u4")
                inter[0::2] = starts
                inter[1::2] = lengths
                f.write(inter.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated episode file while reading {what}")
    return data


def read_episode(path) -> Episode:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != EPISODE_MAGIC:
            raise FormatError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        header = json.loads(_read_exact(f, hlen, "header"))
        T = header["length"]
        hw = header["image_hw"]
        n_masks = header["n_masks"]
        images = np.empty((T, hw, hw, 3), dtype=np.uint8)
        proprios = np.empty((T, 3), dtype=np.float32)
        actions = np.empty((T, 3), dtype=np.float32)
        masks = []
        for t in range(T):
            images[t] = np.frombuffer(_read_exact(f, hw * hw * 3, "image"), dtype=np.uint8).reshape(hw, hw, 3)
            proprios[t] = np.frombuffer(_read_exact(f, 12, "proprio"), dtype="<f4")
            actions[t] = np.frombuffer(_read_exact(f, 12, "action"), dtype="<f4")
            step_masks = []
            for _ in range(n_masks):
                (n_runs,) = struct.unpack("<I", _read_exact(f, 4, "rle count"))
                inter = np.frombuffer(_read_exact(f, 8 * n_runs, "rle runs"), dtype="<u4")
                step_masks.append((inter[0::2].copy(), inter[1::2].copy()))
            masks.append(step_masks)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return Episode(
        task=TaskSpec.from_dict(header["task"]),
        seed=header["seed"],
        images=images,
        proprios=proprios,
        actions=actions,
        masks_rle=masks,
    )


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    episodes: list
    manifest: dict

    @property
    def total_steps(self) -> int:
        return sum(ep.length for ep in self.episodes)

    def families(self) -> set:
        return {ep.task.family for ep in self.episodes}

    def has_masks(self) -> bool:
        return all(len(ep.masks_rle[0]) > 0 for ep in self.episodes if ep.length)


def write_dataset(episodes: list, out_dir, extra_config=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ep in enumerate(episodes):
        fname = f"ep_{i:06d}.bin"
        write_episode(ep, out / fname)
        entries.append({"file": fname, "length": ep.length, "family": ep.task.family, "seed": ep.seed})
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": len(episodes),
        "episodes": entries,
        "config_hash": config_hash(extra_config or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_dataset(dataset_dir) -> Dataset:
    root = Path(dataset_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json under {dataset_dir}")
    manifest = json.loads(manifest_path.read_text())
    if manifest["count"] != len(manifest["episodes"]):
        raise FormatError("manifest count disagrees with episode list")
    episodes = []
    for entry in manifest["episodes"]:
        ep = read_episode(root / entry["file"])
        if ep.length != entry["length"]:
            raise FormatError(f"{entry['file']}: length mismatch against manifest")
        episodes.append(ep)
    return Dataset(episodes=episodes, manifest=manifest)


@dataclass
class Batch:
    images: np.ndarray  # [B, t_obs, H, W, 3] uint8
    instr: np.ndarray  # [B, L] int64
    proprio: np.ndarray  # [B, t_obs, 3] f32
    chunk: np.ndarray  # [B, t_act, 3] f32, raw env actions
    hist_pad: np.ndarray  # [B, t_obs] bool, True where the frame is a left-pad copy
    chunk_pad: np.ndarray  # [B, t_act] bool, True where the action is a right-pad copy
    cur_images: np.ndarray  # [B, H, W, 3] frame at the sampled t
    masks: list  # per sample: list[InstanceMask] at the sampled t


def sample_batch(dataset: Dataset, batch_size: int, stream: RngStream, t_obs: int, t_act: int,
                 with_masks: bool = False) -> Batch:
    """Uniform over (episode, t); history left-pads by repeating the first
    frame, the action chunk right-pads by repeating the final action."""
    if not dataset.episodes or dataset.total_steps == 0:
        raise ArgumentError("cannot sample from an empty dataset")
    lengths = np.array([ep.length for ep in dataset.episodes])
    cum = np.concatenate([[0], np.cumsum(lengths)])
    flat = stream.integers(batch_size, 0, int(cum[-1]))
    ep_idx = np.searchsorted(cum, flat, side="right") - 1
    t_idx = flat - cum[ep_idx]

    hw = dataset.episodes[0].images.shape[1]
    images = np.empty((batch_size, t_obs, hw, hw, 3), dtype=np.uint8)
    proprio = np.empty((batch_size, t_obs, 3), dtype=np.float32)
    instr = np.empty((batch_size, len(tokenize(dataset.episodes[0].task.instruction()))), dtype=np.int64)
    chunk = np.empty((batch_size, t_act, 3), dtype=np.float32)
    hist_pad = np.zeros((batch_size, t_obs), dtype=bool)
    chunk_pad = np.zeros((batch_size, t_act), dtype=bool)
    cur_images = np.empty((batch_size, hw, hw, 3), dtype=np.uint8)
    masks = []
    for b in range(batch_size):
        ep = dataset.episodes[int(ep_idx[b])]
        t = int(t_idx[b])
        for j in range(t_obs):
            src = t - (t_obs - 1 - j)
            if src < 0:
                hist_pad[b, j] = True
                src = 0
            images[b, j] = ep.images[src]
            proprio[b, j] = ep.proprios[src]
        instr[b] = tokenize(ep.task.instruction())
        for j in range(t_act):
            src = t + j
            if src >= ep.length:
                chunk_pad[b, j] = True
                src = ep.length - 1
            chunk[b, j] = ep.actions[src]
        cur_images[b] = ep.images[t]
        masks.append(ep.masks_at(t) if with_masks else [])
    return Batch(images, instr, proprio, chunk, hist_pad, chunk_pad, cur_images, masks)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_DTYPE_CODES = {"f32": 0, "f64": 1}
_DTYPE_NAMES = {0: np.float32, 1: np.float64}


def save_checkpoint(policy, path, meta: dict | None = None) -> None:
    params = policy.named_params()
    header = canonical_json(
        {
            "kind": "expert" if policy.is_expert else "general",
            "arch": policy.arch.to_dict(),
            "meta": meta or {},
        }
    )
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            p = params[name]
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_CODES[p.dtype], p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(np.ascontiguousarray(p.data).astype(p.data.dtype.newbyteorder("<")).tobytes())


def checkpoint_meta(path) -> dict:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", _read_exact(f, 8, "header length"))
        return json.loads(_read_exact(f, hlen, "header"))


def load_checkpoint(path):
    """Reconstruct a policy; the file must exactly cover the architecture's
    parameter set (no missing or extra tensors)."""
    with open(path, "rb") as f:
        raw = f.read()
    f = _Cursor(raw, path)
    if f.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<I", f.take(4))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", f.take(8))
    header = json.loads(f.take(hlen))
    arch = ArchConfig.from_dict(header["arch"])
    base = GeneralPolicy(arch, RngStream(0))
    policy = extend_to_expert(base, RngStream(0)) if header["kind"] == "expert" else base
    params = policy.named_params()
    (n_tensors,) = struct.unpack("<I", f.take(4))
    seen = set()
    loaded = {}
    for _ in range(n_tensors):
        (nlen,) = struct.unpack("<H", f.take(2))
        name = f.take(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", f.take(2))
        shape = struct.unpack(f"<{ndim}I", f.take(4 * ndim))
        dt = _DTYPE_NAMES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dt).itemsize
        payload = np.frombuffer(f.take(nbytes), dtype=np.dtype(dt).newbyteorder("<")).reshape(shape)
        if name not in params:
            raise SchemaError(f"{path}: unexpected tensor {name!r}")
        if params[name].data.shape != payload.shape:
            raise SchemaError(f"{path}: {name} shape {payload.shape} != {params[name].data.shape}")
        loaded[name] = payload.astype(dt)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise SchemaError(f"{path}: missing tensors {sorted(missing)[:4]}")
    if f.remaining():
        raise FormatError(f"{path}: trailing bytes")
    # commit only after the whole file validated
    for name, arr in loaded.items():
        params[name].data[:] = arr
    policy.train_meta = header.get("meta", {})
    return policy


class _Cursor:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def remaining(self) -> int:
        return len(self.buf) - self.off
