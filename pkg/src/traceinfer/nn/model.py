"""The convolutional-recurrent state classifier and its ablation variants.

Layer graph (``hybrid``)::

    conv stack (leaky ReLU, padded steps zeroed) -> GRU stack
      -> dense(hidden, leaky ReLU) -> dense(N_s, softmax)

``cnn_only`` drops the GRU stack, ``rnn_only`` the conv stack, ``rnn_full``
replaces both with two wide GRU layers and ``cnn_full`` with a deeper,
wider conv stack whose parameter count matches the hybrid's.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import layers
from .loss import dice_loss, one_hot

VARIANTS = ("hybrid", "cnn_only", "rnn_only", "cnn_full", "rnn_full")
FULL_CONV_STACK = ((64, 3), (64, 5), (64, 10), (64, 15), (64, 20))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 10
    n_states: int = 25
    conv_stack: tuple[tuple[int, int], ...] = FULL_CONV_STACK
    gru_stack: tuple[int, ...] = (128, 128)
    dense_hidden: int = 128
    leaky_alpha: float = 0.3
    variant: str = "hybrid"
    rnn_full_cells: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 80
    patience: int = 10
    seed: int = 0
    generalized_dice: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "conv_stack", tuple(tuple(int(v) for v in c) for c in self.conv_stack))
        object.__setattr__(self, "gru_stack", tuple(int(c) for c in self.gru_stack))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        kernels = [k for _, k in self.conv_stack]
        if kernels != sorted(kernels):
            raise ConfigError("conv kernel sizes must be non-decreasing")
        counts = [f for f, _ in self.conv_stack] + kernels + list(self.gru_stack)
        counts += [self.dense_hidden, self.n_channels, self.n_states, self.batch_size, self.max_epochs]
        if any(c < 1 for c in counts):
            raise ConfigError("all layer sizes and counts must be at least 1")
        if self.n_states < 2:
            raise ConfigError("need at least two states")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_stack"] = [list(c) for c in self.conv_stack]
        d["gru_stack"] = list(self.gru_stack)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "conv_stack" in known:
            known["conv_stack"] = tuple(tuple(c) for c in known["conv_stack"])
        if "gru_stack" in known:
            known["gru_stack"] = tuple(known["gru_stack"])
        return cls(**known)


@dataclass
class Layer:
    name: str
    kind: str  # conv, gru, dense
    params: dict = field(default_factory=dict)
    activation: str = "linear"


def _conv_params(conv_stack, n_in):
    total, cin = 0, n_in
    for f, k in conv_stack:
        total += k * cin * f + f
        cin = f
    return total, cin


def _gru_params(cells, n_in):
    total, cin = 0, n_in
    for h in cells:
        total += 3 * (cin * h + h * h + h)
        cin = h
    return total, cin


def _head_params(n_in, hidden, n_states):
    return n_in * hidden + hidden + hidden * n_states + n_states


def count_for(config: ModelConfig, conv_stack, gru_stack) -> int:
    c, out = _conv_params(conv_stack, config.n_channels)
    g, out = _gru_params(gru_stack, out)
    return c + g + _head_params(out, config.dense_hidden, config.n_states)


def architecture(config: ModelConfig) -> tuple[tuple[tuple[int, int], ...], tuple[int, ...]]:
    """(conv stack, GRU stack) actually used by ``config.variant``."""
    v = config.variant
    if v == "hybrid":
        return config.conv_stack, config.gru_stack
    if v == "cnn_only":
        return config.conv_stack, ()
    if v == "rnn_only":
        return (), config.gru_stack
    if v == "rnn_full":
        return (), (config.rnn_full_cells, config.rnn_full_cells)
    # cnn_full: one extra layer at the largest kernel, filter count chosen
    # to match the hybrid parameter count
    target = count_for(config, config.conv_stack, config.gru_stack)
    kernels = [k for _, k in config.conv_stack]
    kernels = kernels + [kernels[-1]] if kernels else [3, 5, 10, 15, 20, 20]
    best = min(range(1, 2049), key=lambda f: abs(count_for(config, tuple((f, k) for k in kernels), ()) - target))
    return tuple((best, k) for k in kernels), ()


class Model:
    def __init__(self, config: ModelConfig, layer_list: list[Layer]):
        self.config = config
        self.layers = layer_list
        self._caches = None

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.params.items()}

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def set_params(self, params: dict):
        for l in self.layers:
            for k in l.params:
                arr = np.asarray(params[f"{l.name}.{k}"])
                if arr.shape != l.params[k].shape:
                    raise ConfigError(f"{l.name}.{k}: expected shape {l.params[k].shape}, got {arr.shape}")
                l.params[k] = arr.astype(self.dtype, copy=True)

    def copy(self) -> "Model":
        clone = [Layer(l.name, l.kind, {k: v.copy() for k, v in l.params.items()}, l.activation)
                 for l in self.layers]
        return Model(self.config, clone)

    def astype(self, dtype) -> "Model":
        cfg = replace(self.config, dtype=np.dtype(dtype).name)
        clone = [Layer(l.name, l.kind, {k: v.astype(dtype) for k, v in l.params.items()}, l.activation)
                 for l in self.layers]
        return Model(cfg, clone)

    # -- forward / backward ----------------------------------------------------

    def forward(self, x, mask=None, keep_cache=False, start=0, stop=None):
        """Class probabilities of shape ``(batch, L, N_s)``.

        ``start``/``stop`` run only layers ``start:stop``; ``x`` is then the
        output of layer ``start - 1``.
        """
        x = np.asarray(x, dtype=self.dtype)
        if start == 0 and (x.ndim != 3 or x.shape[2] != self.config.n_channels):
            raise layers.ShapeError(f"expected input (batch, L, {self.config.n_channels}), got {x.shape}")
        if mask is None:
            mask = np.ones(x.shape[:2], dtype=bool)
        m = np.asarray(mask, dtype=bool)[..., None].astype(self.dtype)
        alpha = self.config.leaky_alpha
        caches = []
        h = x
        for l in self.layers[start:stop]:
            p = l.params
            if l.kind == "conv":
                a, cache = layers.conv1d_forward(h, p["W"], p["b"])
                # zeroing padded steps keeps valid outputs independent of padding
                h = layers.leaky_relu(a, alpha) * m
                caches.append((cache, a))
            elif l.kind == "gru":
                h, cache = layers.gru_forward(h, p["W"], p["U"], p["b"])
                caches.append(cache)
            else:
                h, cache = layers.dense_forward(h, p["W"], p["b"], l.activation, alpha)
                caches.append(cache)
        if keep_cache:
            self._caches = (caches, m, start)
        return h

    def backward(self, dprobs) -> dict[str, np.ndarray]:
        """Parameter gradients given d loss / d probabilities (after ``forward(keep_cache=True)``)."""
        if self._caches is None:
            raise RuntimeError("backward called without a cached forward pass")
        caches, m, start = self._caches
        alpha = self.config.leaky_alpha
        grads = {}
        d = dprobs
        for i, (l, cache) in enumerate(zip(reversed(self.layers[start:]), reversed(caches))):
            if l.kind == "conv":
                conv_cache, a = cache
                d = d * m * layers.leaky_relu_grad(a, alpha)
                first = i == len(caches) - 1
                d, dW, db = layers.conv1d_backward(d, conv_cache, need_input_grad=not first)
                grads[f"{l.name}.W"], grads[f"{l.name}.b"] = dW, db
            elif l.kind == "gru":
                d, dW, dU, db = layers.gru_backward(d, cache)
                grads[f"{l.name}.W"], grads[f"{l.name}.U"], grads[f"{l.name}.b"] = dW, dU, db
            else:
                d, dW, db = layers.dense_backward(d, cache)
                grads[f"{l.name}.W"], grads[f"{l.name}.b"] = dW, db
        self._caches = None
        return grads

    def loss_and_gradients(self, x, labels, mask, start=0):
        """Dice loss and parameter gradients (of layers ``start:``) for one padded batch."""
        probs = self.forward(x, mask, keep_cache=True, start=start)
        truth = one_hot(labels, self.config.n_states, dtype=self.dtype)
        loss, dprobs = dice_loss(probs, truth, mask, generalized=self.config.generalized_dice)
        return loss, self.backward(dprobs)


def _uniform(rng, shape, limit, dtype):
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build_model(config: ModelConfig, seed: int | None = None) -> Model:
    """Initialise a model; fan-in scaled uniform weights, zero biases."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dtype = np.dtype(config.dtype)
    conv_stack, gru_stack = architecture(config)
    built = []
    n_in = config.n_channels
    for i, (f, k) in enumerate(conv_stack):
        fan_in = k * n_in
        built.append(Layer(f"conv{i}", "conv", {
            "W": _uniform(rng, (k, n_in, f), np.sqrt(6.0 / fan_in), dtype),
            "b": np.zeros(f, dtype=dtype),
        }, "leaky_relu"))
        n_in = f
    for i, h in enumerate(gru_stack):
        built.append(Layer(f"gru{i}", "gru", {
            "W": _uniform(rng, (n_in, 3 * h), np.sqrt(3.0 / n_in), dtype),
            "U": _uniform(rng, (h, 3 * h), np.sqrt(3.0 / h), dtype),
            "b": np.zeros(3 * h, dtype=dtype),
        }))
        n_in = h
    built.append(Layer("dense_hidden", "dense", {
        "W": _uniform(rng, (n_in, config.dense_hidden), np.sqrt(6.0 / n_in), dtype),
        "b": np.zeros(config.dense_hidden, dtype=dtype),
    }, "leaky_relu"))
    built.append(Layer("dense_out", "dense", {
        "W": _uniform(rng, (config.dense_hidden, config.n_states), np.sqrt(3.0 / config.dense_hidden), dtype),
        "b": np.zeros(config.n_states, dtype=dtype),
    }, "softmax"))
    return Model(config, built)
