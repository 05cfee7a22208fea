"""Deterministic synthetic clips plus the two evaluation-time corruptions.

Each class is a square blob translating across a toroidal frame with a
class-specific direction and speed. Start positions are uniform, so a single
frame carries no class information: the label is recoverable only by
integrating motion over time.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

_DIRECTIONS = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1)]
# speeds are chosen so motion survives the model's stride-2 spatial
# downsampling: 1 px/frame is sub-pixel after pooling and nearly unlearnable
_SPEEDS = [2, 4]

BACKGROUND = 0.1
FOREGROUND = 0.9


@dataclass
class ClipDataset:
    clips: np.ndarray  # [num, T, 3, H, W] float32 in [0, 1]
    labels: np.ndarray  # [num] int64
    seed: int
    class_defs: list  # per class: {"direction": [dy, dx], "speed": px/frame}

    @property
    def num_classes(self):
        return len(self.class_defs)

    def __len__(self):
        return len(self.labels)


def class_definitions(classes):
    combos = [
        {"direction": list(d), "speed": s}
        for s in _SPEEDS
        for d in _DIRECTIONS
    ]
    if classes > len(combos):
        raise ValueError(f"at most {len(combos)} motion classes available")
    return combos[:classes]


def gen_moving_patterns(seed, classes=8, num=256, T=8, H=32, W=32, blob=6) -> ClipDataset:
    """Balanced dataset of translating-blob clips, fully determined by seed."""
    if T < 2:
        raise ValueError("need at least 2 frames for motion classes")
    if blob >= min(H, W):
        raise ValueError(f"pattern size {blob} does not fit {H}x{W} frame")
    defs = class_definitions(classes)
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = np.tile(np.arange(classes), -(-num // classes))[:num].astype(np.int64)
    rng.shuffle(labels)
    clips = np.full((num, T, 3, H, W), BACKGROUND, dtype=np.float32)
    ys = rng.integers(0, H, size=num)
    xs = rng.integers(0, W, size=num)
    for i, label in enumerate(labels):
        dy, dx = defs[label]["direction"]
        speed = defs[label]["speed"]
        y, x = int(ys[i]), int(xs[i])
        for t in range(T):
            rows = (np.arange(y, y + blob)) % H
            cols = (np.arange(x, x + blob)) % W
            frame = clips[i, t]
            frame[:, rows[:, None], cols[None, :]] = FOREGROUND
            y = (y + dy * speed) % H
            x = (x + dx * speed) % W
    return ClipDataset(clips=clips, labels=labels, seed=seed, class_defs=defs)


def shuffle_frames(dataset: ClipDataset, seed) -> ClipDataset:
    """Permute each clip's frames independently, destroying motion order."""
    rng = np.random.Generator(np.random.PCG64(seed))
    clips = dataset.clips.copy()
    for i in range(len(clips)):
        clips[i] = clips[i][rng.permutation(clips.shape[1])]
    return ClipDataset(clips=clips, labels=dataset.labels.copy(),
                       seed=dataset.seed, class_defs=dataset.class_defs)


# ---------------------------------------------------------------------------
# noise corruptions


def add_gaussian_noise(clips, a, seed):
    """Zero-mean noise with per-frame std a * std(frame); clamped to [0, 1]."""
    if a < 0:
        raise ValueError("noise level must be non-negative")
    clips = np.asarray(clips, dtype=np.float32)
    if a == 0:
        return clips.copy()
    rng = np.random.Generator(np.random.PCG64(seed))
    out = clips.copy()
    flat = out.reshape(-1, *out.shape[-3:])  # [frames, 3, H, W]
    for i in range(flat.shape[0]):
        sigma = a * float(flat[i].std())
        if sigma == 0:
            continue
        flat[i] += rng.normal(0.0, sigma, size=flat[i].shape).astype(np.float32)
    np.clip(out, 0.0, 1.0, out=out)
    return out


def add_salt_pepper(clips, p, seed):
    """Each pixel independently becomes the frame max or min with probability p."""
    if not 0 <= p <= 1:
        raise ValueError("probability must be in [0, 1]")
    clips = np.asarray(clips, dtype=np.float32)
    if p == 0:
        return clips.copy()
    rng = np.random.Generator(np.random.PCG64(seed))
    out = clips.copy()
    flat = out.reshape(-1, *out.shape[-3:])
    for i in range(flat.shape[0]):
        hi = float(flat[i].max())
        lo = float(flat[i].min())
        corrupt = rng.random(flat[i].shape) < p
        salt = rng.random(flat[i].shape) < 0.5
        flat[i][corrupt & salt] = hi
        flat[i][corrupt & ~salt] = lo
    return out


# ---------------------------------------------------------------------------
# container file

_MAGIC = b"CLIPSET1"
_VERSION = 1


class DatasetError(RuntimeError):
    pass


def save_dataset(dataset: ClipDataset, path):
    header = json.dumps({
        "shape": list(dataset.clips.shape),
        "seed": dataset.seed,
        "class_defs": dataset.class_defs,
    }, sort_keys=True).encode()
    clips = np.ascontiguousarray(dataset.clips, dtype="<f4")
    labels = np.ascontiguousarray(dataset.labels, dtype="<i8")
    body = struct.pack("<I", _VERSION)
    body += struct.pack("<I", len(header)) + header
    body += struct.pack("<Q", clips.nbytes) + clips.tobytes()
    body += struct.pack("<Q", labels.nbytes) + labels.tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + body + struct.pack("<I", zlib.crc32(body)))


def load_dataset(path) -> ClipDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 8 or blob[: len(_MAGIC)] != _MAGIC:
        raise DatasetError("not a clip dataset file (bad magic)")
    body, (crc,) = blob[len(_MAGIC):-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise DatasetError("dataset file corrupt (checksum mismatch)")
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(body):
            raise DatasetError("dataset file truncated")
        chunk = body[off:off + n]
        off += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode())
    shape = tuple(header["shape"])
    (nbytes,) = struct.unpack("<Q", take(8))
    clips = np.frombuffer(take(nbytes), dtype="<f4").reshape(shape).copy()
    (nbytes,) = struct.unpack("<Q", take(8))
    labels = np.frombuffer(take(nbytes), dtype="<i8").copy()
    return ClipDataset(clips=clips, labels=labels, seed=header["seed"],
                       class_defs=header["class_defs"])
