"""Minimal dense-network substrate on float64 numpy arrays.

Everything the learners need and nothing more: parameter containers,
batched forward passes with recorded activations, reverse-mode gradients,
an adaptive-moment optimizer, Polyak averaging for target networks, and a
little-endian binary checkpoint format. All math is float64 so identical
seeds give bit-identical parameter trajectories on one platform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError, NumericError, StateError

__all__ = [
    "Layer",
    "DenseNet",
    "GradientTape",
    "AdamState",
    "adam_step",
    "soft_update",
    "save_net",
    "load_net",
    "net_to_bytes",
    "net_from_bytes",
    "save_adam",
    "load_adam",
]

ACTIVATIONS = ("identity", "relu", "tanh")
_ACT_TAG = {name: i for i, name in enumerate(ACTIVATIONS)}

CHECKPOINT_MAGIC = b"BSTW"
OPTIMIZER_MAGIC = b"BSTO"
CHECKPOINT_VERSION = 1


@dataclass
class Layer:
    """One affine layer: y = act(x @ weights + bias)."""

    weights: np.ndarray  # (n_in, n_out), float64
    bias: np.ndarray  # (n_out,), float64
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise DimensionError("layer weights must be 2-D")
        if self.bias.shape != (self.weights.shape[1],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match "
                f"{self.weights.shape[1]} outputs"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.weights.shape[0]

    @property
    def n_out(self) -> int:
        return self.weights.shape[1]


def _apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(name: str, post: np.ndarray) -> np.ndarray:
    """Derivative expressed through the post-activation value."""
    if name == "relu":
        return (post > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - post * post
    return np.ones_like(post)


class DenseNet:
    """A plain multilayer perceptron with optional tanh output squashing.

    ``forward(x, record=True)`` stores the activations needed by
    ``backward``; evaluation-only calls skip the bookkeeping. Instances are
    mutated by the optimizer during training and treated as read-only
    afterwards.
    """

    def __init__(self, layers: list[Layer], squash_output: bool = False):
        if not layers:
            raise ValueError("a network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.n_out != nxt.n_in:
                raise DimensionError(
                    f"layer widths disagree: {prev.n_out} -> {nxt.n_in}"
                )
        self.layers = layers
        self.squash_output = bool(squash_output)
        self._cache = None

    # -- construction ----------------------------------------------------

    @classmethod
    def create(
        cls,
        sizes: tuple[int, ...] | list[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        squash_output: bool = False,
    ) -> "DenseNet":
        """Build a net with uniform fan-in initialization.

        ``sizes`` runs from input width to output width; hidden layers get
        ``hidden_activation``, the final layer is linear (squashing, when
        requested, is applied on top of it).
        """
        if len(sizes) < 2:
            raise ValueError("sizes must contain input and output widths")
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            bound = 1.0 / np.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
            b = rng.uniform(-bound, bound, size=(n_out,))
            act = hidden_activation if i < len(sizes) - 2 else "identity"
            layers.append(Layer(w, b, act))
        return cls(layers, squash_output=squash_output)

    # -- shape info ------------------------------------------------------

    @property
    def n_inputs(self) -> int:
        return self.layers[0].n_in

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].n_out

    def architecture(self) -> tuple:
        """Hashable signature used to detect mismatched nets."""
        return (
            tuple((l.n_in, l.n_out, l.activation) for l in self.layers),
            self.squash_output,
        )

    def copy(self) -> "DenseNet":
        layers = [
            Layer(l.weights.copy(), l.bias.copy(), l.activation)
            for l in self.layers
        ]
        return DenseNet(layers, squash_output=self.squash_output)

    # -- forward / backward ----------------------------------------------

    def forward(self, x, record: bool = False) -> np.ndarray:
        """Evaluate the net on a vector or a batch of row vectors."""
        arr = np.asarray(x, dtype=np.float64)
        single = arr.ndim == 1
        if single:
            arr = arr[np.newaxis, :]
        if arr.ndim != 2 or arr.shape[1] != self.n_inputs:
            raise DimensionError(
                f"input width {arr.shape[-1]} does not match "
                f"first layer width {self.n_inputs}"
            )
        inputs = []  # per-layer input
        posts = []  # per-layer post-activation
        h = arr
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weights + layer.bias
            h = _apply_activation(layer.activation, z)
            posts.append(h)
        squashed = None
        if self.squash_output:
            squashed = np.tanh(h)
            out = squashed
        else:
            out = h
        if record:
            self._cache = (inputs, posts, squashed)
        return out[0] if single else out

    def backward(self, grad_output) -> tuple["GradientTape", np.ndarray]:
        """Propagate d(loss)/d(output) back through the recorded forward.

        Returns the parameter tape and d(loss)/d(input); the latter is what
        lets a policy receive gradients through a critic's action input.
        """
        if self._cache is None:
            raise StateError("backward called with no recorded forward pass")
        inputs, posts, squashed = self._cache
        g = np.asarray(grad_output, dtype=np.float64)
        single = g.ndim == 1
        if single:
            g = g[np.newaxis, :]
        if g.shape != (inputs[0].shape[0], self.n_outputs):
            raise DimensionError(
                f"gradient shape {g.shape} does not match recorded "
                f"batch {(inputs[0].shape[0], self.n_outputs)}"
            )
        if self.squash_output:
            g = g * (1.0 - squashed * squashed)
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g = g * _activation_grad(layer.activation, posts[i])
            dw = inputs[i].T @ g
            db = g.sum(axis=0)
            grads[i] = (dw, db)
            g = g @ layer.weights.T
        tape = GradientTape(grads)
        return tape, (g[0] if single else g)


@dataclass
class GradientTape:
    """Per-parameter gradients, shape-aligned with a net's layers."""

    grads: list  # list of (dW, db) pairs

    @classmethod
    def zeros(cls, net: DenseNet) -> "GradientTape":
        return cls(
            [
                (np.zeros_like(l.weights), np.zeros_like(l.bias))
                for l in net.layers
            ]
        )

    def add(self, other: "GradientTape") -> "GradientTape":
        """Accumulate another tape in place (e.g. two loss terms)."""
        if len(self.grads) != len(other.grads):
            raise DimensionError("tapes have different layer counts")
        for (dw, db), (ow, ob) in zip(self.grads, other.grads):
            dw += ow
            db += ob
        return self

    def scale(self, factor: float) -> "GradientTape":
        for dw, db in self.grads:
            dw *= factor
            db *= factor
        return self

    def matches(self, net: DenseNet) -> bool:
        if len(self.grads) != len(net.layers):
            return False
        return all(
            dw.shape == l.weights.shape and db.shape == l.bias.shape
            for (dw, db), l in zip(self.grads, net.layers)
        )


@dataclass
class AdamState:
    """Adaptive-moment optimizer state for one net."""

    step: int
    m: list
    v: list
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: DenseNet, learning_rate: float = 3e-4, **kw) -> "AdamState":
        zeros = lambda: [
            (np.zeros_like(l.weights), np.zeros_like(l.bias))
            for l in net.layers
        ]
        return cls(step=0, m=zeros(), v=zeros(), learning_rate=learning_rate, **kw)


def adam_step(net: DenseNet, tape: GradientTape, state: AdamState) -> tuple[DenseNet, AdamState]:
    """One optimizer step in place; returns the updated (net, state).

    Raises NumericError naming the first layer whose gradient is not
    finite; parameters are checked after the update so the finiteness
    invariant holds at every step boundary.
    """
    if not tape.matches(net):
        raise DimensionError("gradient tape does not match net layout")
    for i, (dw, db) in enumerate(tape.grads):
        if not (np.isfinite(dw).all() and np.isfinite(db).all()):
            raise NumericError(f"non-finite gradient in layer {i}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for layer, (dw, db), (mw, mb), (vw, vb) in zip(
        net.layers, tape.grads, state.m, state.v
    ):
        for p, g, m, v in ((layer.weights, dw, mw, vw), (layer.bias, db, mb, vb)):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    for i, layer in enumerate(net.layers):
        if not (np.isfinite(layer.weights).all() and np.isfinite(layer.bias).all()):
            raise NumericError(f"non-finite parameters in layer {i} after update")
    return net, state


def soft_update(target: DenseNet, online: DenseNet, rho: float) -> DenseNet:
    """Polyak-average online parameters into the target net, in place."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    if target.architecture() != online.architecture():
        raise DimensionError("target and online architectures differ")
    for t_layer, o_layer in zip(target.layers, online.layers):
        t_layer.weights *= 1.0 - rho
        t_layer.weights += rho * o_layer.weights
        t_layer.bias *= 1.0 - rho
        t_layer.bias += rho * o_layer.bias
    return target


# -- checkpoint format ----------------------------------------------------
#
# BSTW v1, little-endian:
#   magic "BSTW" | version u32 | squash u8 | n_layers u32
#   per layer: n_in u32 | n_out u32 | activation tag u8
#   parameter blob: float64, per layer weights (row-major) then bias
#
# BSTO v1 reuses the layer table and stores step count, hyperparameters and
# both moment blobs for the matching net.


def _read(buf: bytes, offset: int, fmt: str, what: str):
    size = struct.calcsize(fmt)
    if offset + size > len(buf):
        raise FormatError(f"truncated file while reading {what}", offset)
    return struct.unpack_from(fmt, buf, offset), offset + size


def _read_array(buf: bytes, offset: int, count: int, what: str):
    size = count * 8
    if offset + size > len(buf):
        raise FormatError(f"truncated file in array '{what}'", offset)
    arr = np.frombuffer(buf[offset : offset + size], dtype="<f8").astype(np.float64)
    return arr, offset + size


def _layer_table(net: DenseNet) -> bytes:
    parts = [struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        parts.append(
            struct.pack("<IIB", layer.n_in, layer.n_out, _ACT_TAG[layer.activation])
        )
    return b"".join(parts)


def _parse_layer_table(buf: bytes, offset: int):
    (n_layers,), offset = _read(buf, offset, "<I", "layer count")
    dims = []
    for i in range(n_layers):
        (n_in, n_out, tag), offset = _read(buf, offset, "<IIB", f"layer {i} dims")
        if tag >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation tag {tag} in layer {i}", offset - 1)
        dims.append((n_in, n_out, ACTIVATIONS[tag]))
    return dims, offset


def net_to_bytes(net: DenseNet) -> bytes:
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<B", int(net.squash_output)),
        _layer_table(net),
    ]
    for layer in net.layers:
        parts.append(layer.weights.astype("<f8").tobytes(order="C"))
        parts.append(layer.bias.astype("<f8").tobytes())
    return b"".join(parts)


def save_net(net: DenseNet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(net_to_bytes(net))


def net_from_bytes(buf: bytes) -> DenseNet:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(
            f"bad magic bytes {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}", 0
        )
    offset = 4
    (version,), offset = _read(buf, offset, "<I", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (squash,), offset = _read(buf, offset, "<B", "squash flag")
    dims, offset = _parse_layer_table(buf, offset)
    layers = []
    for n_in, n_out, act in dims:
        w, offset = _read_array(buf, offset, n_in * n_out, "weights")
        b, offset = _read_array(buf, offset, n_out, "bias")
        layers.append(Layer(w.reshape(n_in, n_out), b, act))
    if offset != len(buf):
        raise FormatError("trailing bytes after parameter blob", offset)
    return DenseNet(layers, squash_output=bool(squash))


def load_net(path) -> DenseNet:
    with open(path, "rb") as fh:
        return net_from_bytes(fh.read())


def save_adam(state: AdamState, net: DenseNet, path) -> None:
    parts = [
        OPTIMIZER_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<Q", state.step),
        struct.pack(
            "<dddd", state.learning_rate, state.beta1, state.beta2, state.eps
        ),
        _layer_table(net),
    ]
    for moments in (state.m, state.v):
        for mw, mb in moments:
            parts.append(mw.astype("<f8").tobytes(order="C"))
            parts.append(mb.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_adam(path, net: DenseNet) -> AdamState:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != OPTIMIZER_MAGIC:
        raise FormatError(
            f"bad magic bytes {buf[:4]!r}, expected {OPTIMIZER_MAGIC!r}", 0
        )
    offset = 4
    (version,), offset = _read(buf, offset, "<I", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported optimizer version {version}", 4)
    (step,), offset = _read(buf, offset, "<Q", "step count")
    (lr, b1, b2, eps), offset = _read(buf, offset, "<dddd", "hyperparameters")
    dims, offset = _parse_layer_table(buf, offset)
    net_dims = [(l.n_in, l.n_out, l.activation) for l in net.layers]
    if dims != net_dims:
        raise FormatError("optimizer layer table does not match net", offset)
    moments = []
    for which in ("first moment", "second moment"):
        per_layer = []
        for n_in, n_out, _ in dims:
            mw, offset = _read_array(buf, offset, n_in * n_out, which)
            mb, offset = _read_array(buf, offset, n_out, which)
            per_layer.append((mw.reshape(n_in, n_out), mb))
        moments.append(per_layer)
    if offset != len(buf):
        raise FormatError("trailing bytes after moment blobs", offset)
    return AdamState(
        step=step, m=moments[0], v=moments[1],
        learning_rate=lr, beta1=b1, beta2=b2, eps=eps,
    )
