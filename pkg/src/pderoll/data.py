"""Trajectory persistence, dataset manifests, normalization, segmentation.

On-disk trajectory format (little-endian): magic "PDET", version u16=1,
dtype code u8 (1 = float32), dims u32 x4 (T+1, ny, nx, c), dt f64, seed i64,
spec_tag (u16 length + UTF-8), channel names (u16 count, then u16 length +
UTF-8 each), then the float32 payload in [time][y][x][channel] order.

Manifests are two tab-separated UTF-8 text files written atomically:
<name>            rows "path<TAB>spec_tag<TAB>seed<TAB>split"
<name>.meta.tsv   key/value rows: segment config (C, F) and per-channel
                  normalization mean/std.
"""

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateChannelError

TRAJ_MAGIC = b"PDET"
TRAJ_VERSION = 1
DTYPE_F32 = 1
_U32_MAX = 2 ** 32 - 1


@dataclass
class Trajectory:
    frames: np.ndarray          # (T+1, ny, nx, c)
    dt: float
    spec_tag: str
    seed: int
    channel_names: list

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be 4-D, got shape {self.frames.shape}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if len(self.channel_names) != self.frames.shape[3]:
            raise ValueError("channel_names length must match channel count")

    @property
    def horizon(self):
        return self.frames.shape[0] - 1


@dataclass(frozen=True)
class SegmentIndex:
    t_start: int
    C: int
    F: int


def save_trajectory(traj: Trajectory, path):
    """Write the binary trajectory file; float32 payload, bit-exact round trip."""
    frames = np.ascontiguousarray(traj.frames, dtype="<f4")
    if max(frames.shape) > _U32_MAX:
        raise DataError("dimension overflow: a dimension exceeds u32 range")
    tag = traj.spec_tag.encode("utf-8")
    with open(path, "wb") as f:
        f.write(TRAJ_MAGIC)
        f.write(struct.pack("<HB", TRAJ_VERSION, DTYPE_F32))
        f.write(struct.pack("<4I", *frames.shape))
        f.write(struct.pack("<dq", traj.dt, traj.seed))
        f.write(struct.pack("<H", len(tag)))
        f.write(tag)
        f.write(struct.pack("<H", len(traj.channel_names)))
        for name in traj.channel_names:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
        f.write(frames.tobytes())


def load_trajectory(path) -> Trajectory:
    with open(path, "rb") as f:
        blob = f.read()

    def take(fmt, off):
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise DataError(f"{path}: truncated header")
        return struct.unpack_from(fmt, blob, off), off + size

    if blob[:4] != TRAJ_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    (version, dtype_code), off = take("<HB", 4)
    if version != TRAJ_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if dtype_code != DTYPE_F32:
        raise DataError(f"{path}: unsupported dtype code {dtype_code}")
    dims, off = take("<4I", off)
    (dt, seed), off = take("<dq", off)
    (tag_len,), off = take("<H", off)
    if off + tag_len > len(blob):
        raise DataError(f"{path}: truncated spec tag")
    spec_tag = blob[off:off + tag_len].decode("utf-8")
    off += tag_len
    (n_names,), off = take("<H", off)
    names = []
    for _ in range(n_names):
        (ln,), off = take("<H", off)
        if off + ln > len(blob):
            raise DataError(f"{path}: truncated channel name")
        names.append(blob[off:off + ln].decode("utf-8"))
        off += ln
    count = int(np.prod(dims, dtype=np.int64))
    if off + 4 * count > len(blob):
        raise DataError(f"{path}: truncated payload "
                        f"(need {4 * count} bytes, have {len(blob) - off})")
    if off + 4 * count < len(blob):
        raise DataError(f"{path}: trailing bytes after payload")
    frames = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
    return Trajectory(frames=frames.copy(), dt=dt, spec_tag=spec_tag,
                      seed=int(seed), channel_names=names)


def chunk_trajectory(traj_or_len, C: int, F: int, stride: int = 1):
    """All segment placements t_start in {0, stride, ...} with t_start+C+F <= T+1."""
    if C < 1 or F < 1 or stride < 1:
        raise ValueError("C, F and stride must be positive integers")
    n_frames = traj_or_len if isinstance(traj_or_len, int) else traj_or_len.frames.shape[0]
    last = n_frames - (C + F)
    if last < 0:
        return []
    return [SegmentIndex(t, C, F) for t in range(0, last + 1, stride)]


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 1e-8):
            raise DegenerateChannelError(
                f"channel std {self.std.tolist()} at or below 1e-8")


def fit_normalization(trajectories) -> NormalizationStats:
    """Per-channel mean/std over all frames of the given trajectories."""
    n = 0
    s1 = None
    s2 = None
    for traj in trajectories:
        x = np.asarray(traj.frames, dtype=np.float64)
        flat = x.reshape(-1, x.shape[-1])
        if s1 is None:
            s1 = np.zeros(flat.shape[1])
            s2 = np.zeros(flat.shape[1])
        n += flat.shape[0]
        s1 += flat.sum(axis=0)
        s2 += (flat * flat).sum(axis=0)
    if n == 0:
        raise DataError("fit_normalization needs at least one trajectory")
    mean = s1 / n
    var = np.maximum(s2 / n - mean ** 2, 0.0)
    return NormalizationStats(mean=mean, std=np.sqrt(var))


def normalize(x, stats: NormalizationStats):
    return (x - stats.mean) / stats.std


def denormalize(x, stats: NormalizationStats):
    return x * stats.std + stats.mean


@dataclass
class ManifestEntry:
    path: str
    spec_tag: str
    seed: int
    split: str


@dataclass
class DatasetManifest:
    entries: list
    stats: NormalizationStats
    C: int
    F: int
    channel_names: list = field(default_factory=list)

    def __post_init__(self):
        train = {e.seed for e in self.entries if e.split == "train"}
        test = {e.seed for e in self.entries if e.split == "test"}
        if train & test:
            raise DataError(f"train/test seed sets overlap: {sorted(train & test)}")

    def split_entries(self, split):
        return [e for e in self.entries if e.split == split]


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".manifest-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def save_manifest(manifest: DatasetManifest, path):
    rows = [f"{e.path}\t{e.spec_tag}\t{e.seed}\t{e.split}" for e in manifest.entries]
    _atomic_write(path, "\n".join(rows) + "\n")
    meta = [f"C\t{manifest.C}", f"F\t{manifest.F}",
            f"channels\t{','.join(manifest.channel_names)}"]
    for i, (m, s) in enumerate(zip(manifest.stats.mean, manifest.stats.std)):
        meta.append(f"mean.{i}\t{float(m)!r}")
        meta.append(f"std.{i}\t{float(s)!r}")
    _atomic_write(str(path) + ".meta.tsv", "\n".join(meta) + "\n")


def load_manifest(path) -> DatasetManifest:
    entries = []
    try:
        with open(path, encoding="utf-8") as f:
            for ln, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise DataError(f"{path}:{ln}: expected 4 tab-separated fields")
                entries.append(ManifestEntry(parts[0], parts[1], int(parts[2]), parts[3]))
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    meta_path = str(path) + ".meta.tsv"
    kv = {}
    try:
        with open(meta_path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    k, v = line.rstrip("\n").split("\t", 1)
                    kv[k] = v
    except FileNotFoundError:
        raise DataError(f"manifest metadata not found: {meta_path}") from None
    names = kv.get("channels", "").split(",") if kv.get("channels") else []
    n_ch = len(names)
    mean = np.array([float(kv[f"mean.{i}"]) for i in range(n_ch)])
    std = np.array([float(kv[f"std.{i}"]) for i in range(n_ch)])
    return DatasetManifest(entries=entries, stats=NormalizationStats(mean, std),
                           C=int(kv["C"]), F=int(kv["F"]), channel_names=names)


class SegmentStore:
    """Normalized trajectories held in RAM plus the flat segment index.

    Batches are assembled on the fly; segment i is (trajectory ti, start t0).
    """

    def __init__(self, trajectories, stats: NormalizationStats, C: int, F: int,
                 stride: int = 1, dtype=np.float32):
        self.C, self.F = C, F
        self.frames = [normalize(t.frames.astype(np.float64), stats).astype(dtype)
                       for t in trajectories]
        self.index = []
        for ti, fr in enumerate(self.frames):
            for seg in chunk_trajectory(fr.shape[0], C, F, stride):
                self.index.append((ti, seg.t_start))

    def __len__(self):
        return len(self.index)

    def batch(self, idxs):
        T = self.C + self.F
        out = np.empty((len(idxs),) + (T,) + self.frames[0].shape[1:],
                       dtype=self.frames[0].dtype)
        for j, i in enumerate(idxs):
            ti, t0 = self.index[i]
            out[j] = self.frames[ti][t0:t0 + T]
        return out
