"""Trained uncertainty model: a perturbation network under a Morse kernel.

The network f maps a (state, action) pair to a point in action space; the
certainty of the pair is the kernel evaluated between that point and the
action itself,

    M(s, a) = K(f(s, a), a).

Training pulls f(s, a) onto the dataset actions (raising their certainty
toward 1) while pushing certainty down on actions drawn uniformly over the
action box. Out-of-distribution actions therefore score low, which is what
the policy regularizer consumes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigError, DimensionError, FormatError, UnsupportedError
from .kernels import (
    KernelSpec,
    kernel_grad,
    kernel_log,
    kernel_log_grad,
    kernel_value,
)
from .nn import (
    AdamState,
    DenseNet,
    GradientTape,
    adam_step,
    net_from_bytes,
    net_to_bytes,
)
from .validation import as_matrix, check_fitted, check_in_unit_box, check_same_rows

__all__ = ["MorseBatch", "morse_loss", "MorseNet"]

MORSE_MAGIC = b"BSTM"
MORSE_VERSION = 1
_KIND_TAG = {"rbf": 0, "rq": 1}
_KIND_NAME = {v: k for k, v in _KIND_TAG.items()}


@dataclass
class MorseBatch:
    """One training minibatch: dataset pairs plus uniform contrast actions.

    ``uniform_actions`` has shape (n, u, k): u box-uniform draws per state.
    """

    states: np.ndarray
    actions: np.ndarray
    uniform_actions: np.ndarray

    def __post_init__(self):
        self.states = as_matrix(self.states, "states")
        self.actions = as_matrix(self.actions, "actions")
        check_same_rows(self.states, self.actions, "states", "actions")
        if len(self.states) == 0:
            raise ValueError("batch is empty")
        u = np.asarray(self.uniform_actions, dtype=np.float64)
        if u.ndim == 2:
            u = u[:, np.newaxis, :]
        if u.ndim != 3 or u.shape[0] != len(self.states) or u.shape[2] != self.actions.shape[1]:
            raise DimensionError(
                f"uniform actions shape {u.shape} does not align with "
                f"batch of {len(self.states)} states and "
                f"{self.actions.shape[1]}-dim actions"
            )
        check_in_unit_box(u.reshape(-1, u.shape[2]), "uniform actions")
        self.uniform_actions = u

    @classmethod
    def sample(
        cls,
        states,
        actions,
        rng: np.random.Generator,
        n_uniform: int = 1,
    ) -> "MorseBatch":
        states = as_matrix(states, "states")
        actions = as_matrix(actions, "actions")
        u = rng.uniform(
            -1.0, 1.0, size=(len(states), n_uniform, actions.shape[1])
        )
        return cls(states, actions, u)


def morse_loss(
    net: DenseNet, spec: KernelSpec, batch: MorseBatch
) -> tuple[float, GradientTape]:
    """Empirical training loss and its parameter gradients.

    loss = -(1/N) sum log K(f(s,a), a) + (1/NU) sum K(f(s,a_u), a_u)

    The first term is the log-certainty of dataset pairs, the second the
    raw certainty of uniform contrast actions; gradients flow through both.
    """
    n, u, k = batch.uniform_actions.shape
    if net.n_inputs != batch.states.shape[1] + k:
        raise DimensionError(
            f"net expects {net.n_inputs} inputs, batch supplies "
            f"{batch.states.shape[1] + k}"
        )

    x = np.concatenate([batch.states, batch.actions], axis=1)
    f = net.forward(x, record=True)
    term1 = -float(np.mean(kernel_log(spec, f, batch.actions)))
    tape, _ = net.backward(-kernel_log_grad(spec, f, batch.actions) / n)

    su = np.repeat(batch.states, u, axis=0)
    au = batch.uniform_actions.reshape(n * u, k)
    fu = net.forward(np.concatenate([su, au], axis=1), record=True)
    term2 = float(np.mean(kernel_value(spec, fu, au)))
    tape_u, _ = net.backward(kernel_grad(spec, fu, au) / (n * u))

    return term1 + term2, tape.add(tape_u)


class MorseNet(BaseEstimator):
    """Uncertainty model over (state, action) pairs, trained on a dataset.

    Follows the estimator convention: construction stores hyperparameters
    untouched, ``fit`` learns from arrays, learned attributes carry a
    trailing underscore. ``scale=None`` resolves to action_dim / 2 at fit
    time, the default sharpness that balances mode coverage against
    discrimination.
    """

    def __init__(
        self,
        kernel: str = "rq",
        scale: float | None = None,
        mixture: float = 1.0,
        hidden_layers: int = 4,
        hidden_units: int = 256,
        n_steps: int = 20000,
        batch_size: int = 256,
        learning_rate: float = 3e-4,
        n_uniform: int = 1,
        normalize_states: bool = True,
        seed: int = 0,
    ):
        self.kernel = kernel
        self.scale = scale
        self.mixture = mixture
        self.hidden_layers = hidden_layers
        self.hidden_units = hidden_units
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.n_uniform = n_uniform
        self.normalize_states = normalize_states
        self.seed = seed

    # -- training ----------------------------------------------------------

    def fit(self, states, actions) -> "MorseNet":
        states = as_matrix(states, "states")
        actions = as_matrix(actions, "actions")
        check_same_rows(states, actions, "states", "actions")
        check_in_unit_box(actions, "actions")
        if len(states) == 0:
            raise ValueError("cannot fit on an empty dataset")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.n_uniform < 1:
            raise ConfigError(f"n_uniform must be >= 1, got {self.n_uniform}")
        if self.hidden_layers < 1 or self.hidden_units < 1:
            raise ConfigError("hidden_layers and hidden_units must be >= 1")

        self.state_dim_ = states.shape[1]
        self.action_dim_ = actions.shape[1]
        scale = self.scale if self.scale is not None else self.action_dim_ / 2.0
        self.kernel_spec_ = KernelSpec(self.kernel, scale, self.mixture)

        if self.normalize_states:
            self.state_mean_ = states.mean(axis=0)
            self.state_std_ = np.maximum(states.std(axis=0), 1e-6)
        else:
            self.state_mean_ = np.zeros(self.state_dim_)
            self.state_std_ = np.ones(self.state_dim_)
        norm_states = (states - self.state_mean_) / self.state_std_

        init_seed, batch_seed = np.random.SeedSequence(self.seed).spawn(2)
        init_rng = np.random.default_rng(init_seed)
        batch_rng = np.random.default_rng(batch_seed)

        sizes = (
            self.state_dim_ + self.action_dim_,
            *([self.hidden_units] * self.hidden_layers),
            self.action_dim_,
        )
        self.net_ = DenseNet.create(sizes, init_rng, hidden_activation="relu")
        opt = AdamState.for_net(self.net_, learning_rate=self.learning_rate)

        n = len(states)
        history = np.empty(self.n_steps)
        for step in range(self.n_steps):
            idx = batch_rng.integers(0, n, size=min(self.batch_size, n))
            batch = MorseBatch.sample(
                norm_states[idx], actions[idx], batch_rng, self.n_uniform
            )
            loss, tape = morse_loss(self.net_, self.kernel_spec_, batch)
            adam_step(self.net_, tape, opt)
            history[step] = loss
        self.loss_history_ = history
        return self

    # -- queries -----------------------------------------------------------

    def _inputs(self, states, actions):
        check_fitted(self, ["net_"])
        states = as_matrix(states, "states", n_cols=self.state_dim_)
        actions = as_matrix(actions, "actions", n_cols=self.action_dim_)
        check_same_rows(states, actions, "states", "actions")
        norm = (states - self.state_mean_) / self.state_std_
        return np.concatenate([norm, actions], axis=1), actions

    def perturb(self, states, actions) -> np.ndarray:
        """Raw network output f(s, a) in action space."""
        x, _ = self._inputs(states, actions)
        return self.net_.forward(x)

    def certainty(self, states, actions) -> np.ndarray:
        """M(s, a) = K(f(s, a), a), elementwise over rows, in [0, 1]."""
        x, actions = self._inputs(states, actions)
        return kernel_value(self.kernel_spec_, self.net_.forward(x), actions)

    def uncertainty(self, states, actions) -> np.ndarray:
        """1 - certainty; the quantity the policy regularizer keys on."""
        return 1.0 - self.certainty(states, actions)

    def energy(self, states, actions) -> np.ndarray:
        """-log M(s, a), >= 0, zero exactly where certainty is 1.

        Evaluated in the log domain, so it stays exact even where the raw
        certainty underflows; no clamping floor is ever hit.
        """
        x, actions = self._inputs(states, actions)
        return -kernel_log(self.kernel_spec_, self.net_.forward(x), actions)

    def density_grid(self, state, resolution: int = 101) -> np.ndarray:
        """Certainty over a regular grid of 2-D actions for one state.

        Entry [i, j] is the certainty of action (axis[i], axis[j]) where
        axis linearly spans [-1, 1] with ``resolution`` points.
        """
        check_fitted(self, ["net_"])
        if self.action_dim_ != 2:
            raise UnsupportedError(
                f"density grids need 2-D actions, model has {self.action_dim_}"
            )
        if resolution < 2:
            raise ValueError(f"resolution must be >= 2, got {resolution}")
        axis = np.linspace(-1.0, 1.0, resolution)
        a1, a2 = np.meshgrid(axis, axis, indexing="ij")
        actions = np.column_stack([a1.ravel(), a2.ravel()])
        states = np.tile(np.asarray(state, dtype=np.float64), (len(actions), 1))
        return self.certainty(states, actions).reshape(resolution, resolution)

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        check_fitted(self, ["net_"])
        blob = net_to_bytes(self.net_)
        parts = [
            MORSE_MAGIC,
            struct.pack("<I", MORSE_VERSION),
            struct.pack("<B", _KIND_TAG[self.kernel_spec_.kind]),
            struct.pack("<dd", self.kernel_spec_.scale, self.kernel_spec_.mixture),
            struct.pack("<II", self.state_dim_, self.action_dim_),
            self.state_mean_.astype("<f8").tobytes(),
            self.state_std_.astype("<f8").tobytes(),
            struct.pack("<Q", len(blob)),
            blob,
        ]
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))

    @classmethod
    def load(cls, path) -> "MorseNet":
        with open(path, "rb") as fh:
            buf = fh.read()
        if buf[:4] != MORSE_MAGIC:
            raise FormatError(
                f"bad magic bytes {buf[:4]!r}, expected {MORSE_MAGIC!r}", 0
            )
        offset = 4

        def read(fmt, what):
            nonlocal offset
            size = struct.calcsize(fmt)
            if offset + size > len(buf):
                raise FormatError(f"truncated file while reading {what}", offset)
            vals = struct.unpack_from(fmt, buf, offset)
            offset += size
            return vals

        (version,) = read("<I", "version")
        if version != MORSE_VERSION:
            raise FormatError(f"unsupported model version {version}", 4)
        (kind_tag,) = read("<B", "kernel kind")
        if kind_tag not in _KIND_NAME:
            raise FormatError(f"unknown kernel tag {kind_tag}", offset - 1)
        scale, mixture = read("<dd", "kernel parameters")
        state_dim, action_dim = read("<II", "dims")
        stats_bytes = state_dim * 8
        if offset + 2 * stats_bytes > len(buf):
            raise FormatError("truncated file in normalization stats", offset)
        mean = np.frombuffer(buf[offset : offset + stats_bytes], dtype="<f8").copy()
        offset += stats_bytes
        std = np.frombuffer(buf[offset : offset + stats_bytes], dtype="<f8").copy()
        offset += stats_bytes
        (blob_len,) = read("<Q", "net blob length")
        if offset + blob_len > len(buf):
            raise FormatError("truncated file in net blob", offset)
        net = net_from_bytes(buf[offset : offset + blob_len])
        offset += blob_len
        if offset != len(buf):
            raise FormatError("trailing bytes after net blob", offset)

        model = cls(kernel=_KIND_NAME[kind_tag], scale=scale, mixture=mixture)
        model.kernel_spec_ = KernelSpec(_KIND_NAME[kind_tag], scale, mixture)
        model.state_dim_ = state_dim
        model.action_dim_ = action_dim
        model.state_mean_ = mean
        model.state_std_ = std
        model.net_ = net
        model.loss_history_ = np.empty(0)
        return model
