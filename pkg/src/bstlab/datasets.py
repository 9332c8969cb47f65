"""Offline transition datasets: containers, generators, and file format.

Storage precision is 32-bit float (datasets are bulky, parameters are not);
compute precision is 64-bit. The container quantizes its arrays through
float32 on construction so that a save/load round trip is an exact identity
for any dataset ever held in memory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError
from .validation import as_matrix, check_in_unit_box, check_same_rows

__all__ = [
    "Transition",
    "ReplayDataset",
    "four_mode_dataset",
    "permuted_actions",
    "save_dataset",
    "load_dataset",
    "FOUR_MODE_CENTERS",
    "FOUR_MODE_REWARDS",
]

DATASET_MAGIC = b"BSTD"
DATASET_VERSION = 1

# Mode centers with rewards assigned clockwise from the top mode, so the
# left mode is uniquely optimal and reward-seeking is distinguishable from
# mode-seeking.
FOUR_MODE_CENTERS = np.array(
    [[0.0, 0.8], [0.8, 0.0], [0.0, -0.8], [-0.8, 0.0]]
)
FOUR_MODE_REWARDS = np.array([0.25, 0.5, 0.75, 1.0])
FOUR_MODE_SIGMA = 0.05


@dataclass(frozen=True)
class Transition:
    """One environment step: state, action, reward, next state, terminal."""

    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool

    def __post_init__(self):
        object.__setattr__(self, "s", np.asarray(self.s, dtype=np.float64))
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.float64))
        object.__setattr__(self, "s_next", np.asarray(self.s_next, dtype=np.float64))
        if self.s.shape != self.s_next.shape:
            raise DimensionError("state and next state have different shapes")
        if not np.isfinite(self.r):
            raise ValueError(f"reward must be finite, got {self.r}")
        if np.any(np.abs(self.a) > 1.0):
            raise ValueError("action components must lie in [-1, 1]")


def _quantize(arr):
    """Snap to the float32 grid while keeping float64 compute precision."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


class ReplayDataset:
    """Immutable arrays of transitions plus provenance.

    ``episode_boundaries`` holds the exclusive end index of each episode in
    generation order; ``source_manifest`` is a JSON-serializable record of
    how the data was produced (generator, config, seed, and any measured
    statistics such as the end-to-end success fraction).
    """

    def __init__(
        self,
        states,
        actions,
        rewards,
        next_states,
        dones,
        episode_boundaries=(),
        source_manifest=None,
    ):
        self.states = _quantize(as_matrix(states, "states"))
        self.actions = _quantize(as_matrix(actions, "actions"))
        self.next_states = _quantize(as_matrix(next_states, "next states"))
        self.rewards = _quantize(np.asarray(rewards, dtype=np.float64).ravel())
        self.dones = np.asarray(dones, dtype=bool).ravel()
        check_same_rows(self.states, self.actions, "states", "actions")
        check_same_rows(self.states, self.next_states, "states", "next states")
        n = len(self.states)
        if self.rewards.shape != (n,) or self.dones.shape != (n,):
            raise DimensionError(
                f"rewards/dones lengths {self.rewards.shape[0]}/"
                f"{self.dones.shape[0]} do not match {n} transitions"
            )
        if self.states.shape[1] != self.next_states.shape[1]:
            raise DimensionError("state and next-state widths differ")
        check_in_unit_box(self.actions, "actions")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        bounds = np.asarray(episode_boundaries, dtype=np.uint64).ravel()
        if len(bounds) and (
            np.any(bounds < 1)
            or np.any(bounds > n)
            or np.any(np.diff(bounds.astype(np.int64)) <= 0)
        ):
            raise ValueError(
                "episode boundaries must be strictly increasing in [1, n]"
            )
        self.episode_boundaries = bounds
        self.source_manifest = dict(source_manifest or {})

    @classmethod
    def from_transitions(
        cls, transitions, episode_boundaries=(), source_manifest=None
    ) -> "ReplayDataset":
        if not transitions:
            raise ValueError("cannot build a dataset from zero transitions")
        return cls(
            states=np.stack([t.s for t in transitions]),
            actions=np.stack([t.a for t in transitions]),
            rewards=np.array([t.r for t in transitions]),
            next_states=np.stack([t.s_next for t in transitions]),
            dones=np.array([t.done for t in transitions]),
            episode_boundaries=episode_boundaries,
            source_manifest=source_manifest,
        )

    def __len__(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def minibatch(self, rng: np.random.Generator, size: int):
        """Uniform sample with replacement: (s, a, r, s', done) arrays."""
        idx = rng.integers(0, len(self), size=size)
        return (
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx],
            self.dones[idx],
        )

    def state_stats(self):
        """Per-dimension mean and std of states, std floored at 1e-6."""
        return self.states.mean(axis=0), np.maximum(self.states.std(axis=0), 1e-6)

    def __eq__(self, other):
        if not isinstance(other, ReplayDataset):
            return NotImplemented
        return (
            np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.next_states, other.next_states)
            and np.array_equal(self.dones, other.dones)
            and np.array_equal(self.episode_boundaries, other.episode_boundaries)
            and self.source_manifest == other.source_manifest
        )


def four_mode_dataset(n: int, seed: int) -> ReplayDataset:
    """Single-state bandit data: four Gaussian action modes, graded rewards.

    Every transition shares the zero state and terminates immediately.
    Actions cycle through the four modes (equal counts up to remainder)
    with isotropic noise of 0.05, clipped to the action box; the reward is
    the constant assigned to the sampled mode.
    """
    if n < 4:
        raise ValueError(f"need at least 4 samples to cover the modes, got {n}")
    rng = np.random.default_rng(seed)
    mode = np.arange(n) % 4
    actions = np.clip(
        FOUR_MODE_CENTERS[mode] + rng.normal(0.0, FOUR_MODE_SIGMA, size=(n, 2)),
        -1.0,
        1.0,
    )
    zeros = np.zeros((n, 2))
    return ReplayDataset(
        states=zeros,
        actions=actions,
        rewards=FOUR_MODE_REWARDS[mode],
        next_states=zeros,
        dones=np.ones(n, dtype=bool),
        episode_boundaries=np.arange(1, n + 1),
        source_manifest={
            "generator": "four_mode_bandit",
            "n": int(n),
            "seed": int(seed),
            "sigma": FOUR_MODE_SIGMA,
            "centers": FOUR_MODE_CENTERS.tolist(),
            "mode_rewards": FOUR_MODE_REWARDS.tolist(),
        },
    )


def permuted_actions(dataset: ReplayDataset, seed: int) -> np.ndarray:
    """Dataset actions under a uniform cyclic shuffle (no fixed points).

    Pairing each state with some other state's action gives the
    in-distribution-marginal / out-of-distribution-joint probe population.
    """
    n = len(dataset)
    if n < 2:
        raise ValueError(f"need at least 2 transitions to permute, got {n}")
    rng = np.random.default_rng(seed)
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i))
        perm[i], perm[j] = perm[j], perm[i]
    return dataset.actions[perm]


# -- file format ----------------------------------------------------------
#
# BSTD v1, little-endian:
#   magic "BSTD" | version u32 | state_dim u32 | action_dim u32
#   | n_transitions u64 | n_boundaries u64
#   | f32 arrays: states, actions, rewards, next_states
#   | dones as 0/1 bytes | boundaries u64 | manifest u64 length + JSON utf-8


def save_dataset(dataset: ReplayDataset, path) -> None:
    manifest = json.dumps(dataset.source_manifest, sort_keys=True).encode("utf-8")
    parts = [
        DATASET_MAGIC,
        struct.pack(
            "<IIIQQ",
            DATASET_VERSION,
            dataset.state_dim,
            dataset.action_dim,
            len(dataset),
            len(dataset.episode_boundaries),
        ),
        dataset.states.astype("<f4").tobytes(order="C"),
        dataset.actions.astype("<f4").tobytes(order="C"),
        dataset.rewards.astype("<f4").tobytes(),
        dataset.next_states.astype("<f4").tobytes(order="C"),
        dataset.dones.astype(np.uint8).tobytes(),
        dataset.episode_boundaries.astype("<u8").tobytes(),
        struct.pack("<Q", len(manifest)),
        manifest,
    ]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_dataset(path) -> ReplayDataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != DATASET_MAGIC:
        raise FormatError(
            f"bad magic bytes {buf[:4]!r}, expected {DATASET_MAGIC!r}", 0
        )
    offset = 4
    header = struct.calcsize("<IIIQQ")
    if offset + header > len(buf):
        raise FormatError("truncated file in header", offset)
    version, sdim, adim, n, nb = struct.unpack_from("<IIIQQ", buf, offset)
    offset += header
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)

    def read_f32(count, name):
        nonlocal offset
        size = count * 4
        if offset + size > len(buf):
            raise FormatError(f"truncated file in array '{name}'", offset)
        arr = np.frombuffer(buf[offset : offset + size], dtype="<f4")
        offset += size
        return arr.astype(np.float64)

    states = read_f32(n * sdim, "states").reshape(n, sdim)
    actions = read_f32(n * adim, "actions").reshape(n, adim)
    rewards = read_f32(n, "rewards")
    next_states = read_f32(n * sdim, "next_states").reshape(n, sdim)
    if offset + n > len(buf):
        raise FormatError("truncated file in array 'dones'", offset)
    dones = np.frombuffer(buf[offset : offset + n], dtype=np.uint8).astype(bool)
    offset += n
    if offset + nb * 8 > len(buf):
        raise FormatError("truncated file in array 'episode_boundaries'", offset)
    bounds = np.frombuffer(buf[offset : offset + nb * 8], dtype="<u8").copy()
    offset += nb * 8
    if offset + 8 > len(buf):
        raise FormatError("truncated file in manifest length", offset)
    (mlen,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    if offset + mlen > len(buf):
        raise FormatError("truncated file in manifest", offset)
    try:
        manifest = json.loads(buf[offset : offset + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON ({exc})", offset) from exc
    offset += mlen
    if offset != len(buf):
        raise FormatError("trailing bytes after manifest", offset)
    return ReplayDataset(
        states, actions, rewards, next_states, dones, bounds, manifest
    )
