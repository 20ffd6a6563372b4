"""Heterogeneous trajectory datasets: storage, validation and sampling.

Trajectories live in a compact binary container (the TRAJ format, one
environment per file) with a JSON manifest sidecar carrying env specs,
counts and per-variate bin statistics. A weighted multi-source sampler
draws training windows, one environment per batch.

TRAJ byte layout (integers little-endian u32):
  magic "TRAJ" | version | env_id_len | env_id utf-8 | m | n | episode_count
  then per episode: T | states f32[T*m] | actions f32[(T-1)*n] | rewards f32[T-1]
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoding

TRAJ_MAGIC = b"TRAJ"
TRAJ_VERSION = 1

# Bin count is a config knob (the resolution of the categorical encoding);
# 128 balances resolution against head size at desk scale.
DEFAULT_NUM_BINS = 128


class DatasetError(ValueError):
    """Malformed file, spec mismatch or invalid trajectory contents."""


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    action_dim: int

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise DatasetError(f"{self.env_id}: dims must be positive")

    @property
    def num_variates(self):
        return self.state_dim + self.action_dim + 1


@dataclass
class TrajectoryRecord:
    """One episode: T states, T-1 actions and the T-1 rewards they earned."""

    env_id: str
    states: np.ndarray   # (T, m) f32
    actions: np.ndarray  # (T-1, n) f32
    rewards: np.ndarray  # (T-1,) f32

    def __post_init__(self):
        self.states = np.ascontiguousarray(self.states, dtype=np.float32)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float32)
        self.rewards = np.ascontiguousarray(self.rewards, dtype=np.float32)
        T = self.states.shape[0]
        if T < 2:
            raise DatasetError(f"{self.env_id}: episode length {T} < 2")
        if self.actions.shape[0] != T - 1 or self.rewards.shape[0] != T - 1:
            raise DatasetError(
                f"{self.env_id}: expected {T - 1} actions/rewards, got "
                f"{self.actions.shape[0]}/{self.rewards.shape[0]}")
        for name, arr in (("states", self.states), ("actions", self.actions),
                          ("rewards", self.rewards)):
            if not np.all(np.isfinite(arr)):
                raise DatasetError(f"{self.env_id}: non-finite value in {name}")

    @property
    def length(self):
        return self.states.shape[0]

    @property
    def num_transitions(self):
        return self.states.shape[0] - 1


@dataclass
class BinStats:
    """Per-variate uniform bin boundaries derived from training data.

    Variates follow the scalarized layout (states..., reward, actions...).
    """

    lo: np.ndarray  # (M,)
    hi: np.ndarray  # (M,)
    num_bins: int

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.num_bins < 2:
            raise DatasetError("num_bins must be >= 2")
        if not np.all(self.lo < self.hi):
            raise DatasetError("bin boundaries must be strictly increasing")

    @property
    def num_variates(self):
        return self.lo.shape[0]

    def variate(self, j) -> encoding.VariateBins:
        return encoding.VariateBins(float(self.lo[j]), float(self.hi[j]),
                                    self.num_bins)

    def to_json(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(),
                "num_bins": self.num_bins}

    @classmethod
    def from_json(cls, obj):
        return cls(lo=np.array(obj["lo"]), hi=np.array(obj["hi"]),
                   num_bins=int(obj["num_bins"]))


@dataclass
class ManifestEntry:
    env_spec: EnvSpec
    path: str
    episode_count: int
    step_count: int
    records: list = field(default_factory=list, repr=False)


@dataclass
class DatasetManifest:
    name: str
    entries: list
    bin_stats: dict = field(default_factory=dict)  # env_id -> BinStats

    @property
    def episode_count(self):
        return sum(e.episode_count for e in self.entries)

    @property
    def step_count(self):
        return sum(e.step_count for e in self.entries)

    def env_ids(self):
        return [e.env_spec.env_id for e in self.entries]

    def entry(self, env_id) -> ManifestEntry:
        for e in self.entries:
            if e.env_spec.env_id == env_id:
                return e
        raise KeyError(env_id)

    def all_records(self):
        for e in self.entries:
            yield from e.records


# ---------------------------------------------------------------------------
# TRAJ file IO


def write_traj(path, env_spec: EnvSpec, records):
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC)
        fh.write(struct.pack("<I", TRAJ_VERSION))
        encoded = env_spec.env_id.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<III", env_spec.state_dim, env_spec.action_dim,
                             len(records)))
        for rec in records:
            fh.write(struct.pack("<I", rec.length))
            fh.write(rec.states.astype("<f4").tobytes())
            fh.write(rec.actions.astype("<f4").tobytes())
            fh.write(rec.rewards.astype("<f4").tobytes())


def read_traj(path):
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(n):
        nonlocal off
        chunk = raw[off:off + n]
        if len(chunk) != n:
            raise DatasetError(f"{path}: truncated file")
        off += n
        return chunk

    if take(4) != TRAJ_MAGIC:
        raise DatasetError(f"{path}: bad magic, not a TRAJ file")
    (version,) = struct.unpack("<I", take(4))
    if version != TRAJ_VERSION:
        raise DatasetError(f"{path}: unsupported TRAJ version {version}")
    (id_len,) = struct.unpack("<I", take(4))
    env_id = take(id_len).decode("utf-8")
    m, n, count = struct.unpack("<III", take(12))
    spec = EnvSpec(env_id=env_id, state_dim=m, action_dim=n)
    records = []
    for ep in range(count):
        (T,) = struct.unpack("<I", take(4))
        if T < 2:
            raise DatasetError(f"{path}: episode {ep} has length {T} < 2")
        states = np.frombuffer(take(4 * T * m), dtype="<f4").reshape(T, m)
        actions = np.frombuffer(take(4 * (T - 1) * n), dtype="<f4").reshape(T - 1, n)
        rewards = np.frombuffer(take(4 * (T - 1)), dtype="<f4")
        try:
            records.append(TrajectoryRecord(env_id=env_id, states=states,
                                            actions=actions, rewards=rewards))
        except DatasetError as exc:
            raise DatasetError(f"{path}: episode {ep}: {exc}") from exc
    if off != len(raw):
        raise DatasetError(f"{path}: {len(raw) - off} trailing bytes")
    return spec, records


def ingest(path, name=None) -> DatasetManifest:
    """Load a TRAJ file (or a directory of them) into a validated manifest."""
    path = Path(path)
    files = sorted(path.glob("*.traj")) if path.is_dir() else [path]
    if not files:
        raise DatasetError(f"{path}: no .traj files found")
    entries = []
    for fp in files:
        spec, records = read_traj(fp)
        entries.append(ManifestEntry(
            env_spec=spec, path=str(fp), episode_count=len(records),
            step_count=sum(r.num_transitions for r in records),
            records=records))
    manifest = DatasetManifest(name=name or path.stem, entries=entries)
    sidecar = _sidecar_path(path)
    if sidecar.is_file():
        _load_sidecar(manifest, sidecar)
    return manifest


def _sidecar_path(path):
    path = Path(path)
    if path.is_dir():
        return path / "manifest.json"
    return path.with_suffix(".manifest.json")


def write_manifest(manifest: DatasetManifest, directory):
    """Write every entry's TRAJ file plus the JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sidecar = {"name": manifest.name, "entries": [], "bin_stats": {
        env_id: bs.to_json() for env_id, bs in manifest.bin_stats.items()}}
    for entry in manifest.entries:
        fp = directory / f"{entry.env_spec.env_id}.traj"
        write_traj(fp, entry.env_spec, entry.records)
        entry.path = str(fp)
        sidecar["entries"].append({
            "env_id": entry.env_spec.env_id,
            "state_dim": entry.env_spec.state_dim,
            "action_dim": entry.env_spec.action_dim,
            "path": fp.name,
            "episode_count": entry.episode_count,
            "step_count": entry.step_count,
        })
    with open(directory / "manifest.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return directory / "manifest.json"


def _load_sidecar(manifest, sidecar_path):
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    manifest.name = sidecar.get("name", manifest.name)
    for env_id, obj in sidecar.get("bin_stats", {}).items():
        manifest.bin_stats[env_id] = BinStats.from_json(obj)
    for meta in sidecar.get("entries", []):
        entry = manifest.entry(meta["env_id"])
        if (entry.episode_count != meta["episode_count"]
                or entry.step_count != meta["step_count"]):
            raise DatasetError(
                f"{meta['env_id']}: sidecar counts do not match file contents")


# ---------------------------------------------------------------------------
# bin statistics


def compute_bin_stats(manifest: DatasetManifest, num_bins=DEFAULT_NUM_BINS,
                      env_id=None) -> BinStats:
    """Per-variate min/max over all training records of one environment.

    Degenerate variates (min == max, e.g. a constant reward) are widened
    to [v - 0.5, v + 0.5] to avoid zero-width bins.
    """
    if num_bins < 2:
        raise DatasetError("num_bins must be >= 2")
    if not manifest.entries:
        raise DatasetError("empty dataset")
    if env_id is None:
        if len(manifest.entries) != 1:
            raise DatasetError("manifest has multiple envs; pass env_id")
        entry = manifest.entries[0]
    else:
        entry = manifest.entry(env_id)
    if not entry.records:
        raise DatasetError(f"{entry.env_spec.env_id}: no episodes")
    m, n = entry.env_spec.state_dim, entry.env_spec.action_dim
    lo = np.full(m + n + 1, np.inf)
    hi = np.full(m + n + 1, -np.inf)
    for rec in entry.records:
        lo[:m] = np.minimum(lo[:m], rec.states.min(axis=0))
        hi[:m] = np.maximum(hi[:m], rec.states.max(axis=0))
        lo[m] = min(lo[m], rec.rewards.min())
        hi[m] = max(hi[m], rec.rewards.max())
        lo[m + 1:] = np.minimum(lo[m + 1:], rec.actions.min(axis=0))
        hi[m + 1:] = np.maximum(hi[m + 1:], rec.actions.max(axis=0))
    degenerate = lo == hi
    lo[degenerate] -= 0.5
    hi[degenerate] += 0.5
    return BinStats(lo=lo, hi=hi, num_bins=num_bins)


def compute_all_bin_stats(manifest: DatasetManifest, num_bins=DEFAULT_NUM_BINS):
    """Compute and store BinStats for every environment in the manifest."""
    for entry in manifest.entries:
        manifest.bin_stats[entry.env_spec.env_id] = compute_bin_stats(
            manifest, num_bins, env_id=entry.env_spec.env_id)
    return manifest.bin_stats


# ---------------------------------------------------------------------------
# sampling


@dataclass
class Batch:
    """A batch of scalarized windows from a single environment."""

    values: np.ndarray  # (N, T, M)
    mask: np.ndarray    # (N, T) True where the row is real data
    env_spec: EnvSpec
    source: str


def choose_source(names, weights, rng):
    """Pick one source name with probability proportional to its weight."""
    w = np.array([float(weights.get(name, 0.0)) for name in names])
    if np.any(w < 0):
        raise DatasetError("sampling weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise DatasetError("all sampling weights are zero")
    return names[int(rng.choice(len(names), p=w / total))]


def sample_batch(sources, weights, batch_size, context_T, rng) -> Batch:
    """Draw one batch of windows: source ~ weights, then one environment
    within it, then ``batch_size`` uniform windows from that environment.

    Episodes shorter than ``context_T`` are left-padded with zeros and
    flagged invalid in the mask.
    """
    by_name = {s.name: s for s in sources}
    names = list(by_name)
    while True:
        source = by_name[choose_source(names, weights, rng)]
        candidates = [e for e in source.entries if e.records]
        if candidates:
            break
    entry = candidates[int(rng.integers(len(candidates)))]
    spec = entry.env_spec
    M = spec.num_variates
    values = np.zeros((batch_size, context_T, M))
    mask = np.zeros((batch_size, context_T), dtype=bool)
    for i in range(batch_size):
        rec = entry.records[int(rng.integers(len(entry.records)))]
        grid = encoding.scalarize(rec).values
        T = grid.shape[0]
        if T >= context_T:
            start = int(rng.integers(T - context_T + 1))
            values[i] = grid[start:start + context_T]
            mask[i] = True
        else:
            values[i, context_T - T:] = grid
            mask[i, context_T - T:] = True
    return Batch(values=values, mask=mask, env_spec=spec, source=source.name)


def split_train_val(manifest: DatasetManifest, ratio, rng):
    """Episode-level disjoint split, deterministic given the rng seed."""
    if not 0.0 < ratio < 1.0:
        raise DatasetError(f"ratio must be in (0, 1), got {ratio}")
    train_entries, val_entries = [], []
    for entry in manifest.entries:
        count = len(entry.records)
        if count < 2:
            raise DatasetError(
                f"{entry.env_spec.env_id}: need >= 2 episodes to split, "
                f"got {count}")
        # keep both splits non-empty regardless of rounding
        n_train = min(max(int(round(count * ratio)), 1), count - 1)
        perm = rng.permutation(count)
        for idx_set, bucket in ((perm[:n_train], train_entries),
                                (perm[n_train:], val_entries)):
            recs = [entry.records[i] for i in sorted(idx_set)]
            bucket.append(ManifestEntry(
                env_spec=entry.env_spec, path=entry.path,
                episode_count=len(recs),
                step_count=sum(r.num_transitions for r in recs),
                records=recs))
    train = DatasetManifest(name=f"{manifest.name}-train", entries=train_entries,
                            bin_stats=dict(manifest.bin_stats))
    val = DatasetManifest(name=f"{manifest.name}-val", entries=val_entries,
                          bin_stats=dict(manifest.bin_stats))
    return train, val


def manifest_from_records(name, env_spec, records) -> DatasetManifest:
    """Wrap in-memory records as a single-env manifest (no file backing)."""
    records = list(records)
    entry = ManifestEntry(
        env_spec=env_spec, path="", episode_count=len(records),
        step_count=sum(r.num_transitions for r in records), records=records)
    return DatasetManifest(name=name, entries=[entry])
