"""
nn
numpy MLP and LSTM classifiers with hand-written backward passes, Adam and
a self-describing checkpoint format

Parameters are plain dicts of float64 arrays. Inputs are (B, T, F) windows,
oldest timestep first; a single (T, F) window is accepted too.
"""

import dataclasses
import json
import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np

from pipeline_config import (
    N_CLASSES,
    N_FEATURES,
    WINDOW,
    CheckpointMismatchError,
    ConfigError,
    NonFiniteInputError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mlp", "lstm")
GATES = ("i", "f", "o", "g")
CHECKPOINT_MAGIC = b"HFTCKPT1"
DEFAULT_GRAD_CLIP = 5.0

Params = dict[str, np.ndarray]


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    arch: str = "mlp"
    window: int = WINDOW
    n_features: int = N_FEATURES
    n_classes: int = N_CLASSES
    mlp_hidden: tuple[int, ...] = (64, 64)
    hidden_dim: int = 64
    lstm_layers: int = 1
    negative_slope: float = 0.01
    # LeakyReLU on the MLP logits; monotone, so argmax is unchanged
    output_activation: bool = True

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown model {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.window < 1 or self.n_features < 1 or self.n_classes < 2:
            raise ConfigError(f"bad input geometry {self.window}x{self.n_features}")
        if self.hidden_dim < 1 or self.lstm_layers < 1 or any(w < 1 for w in self.mlp_hidden):
            raise ConfigError("layer sizes must be positive")

    @property
    def mlp_widths(self) -> list[int]:
        return [self.window * self.n_features, *self.mlp_hidden, self.n_classes]

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["mlp_hidden"] = list(self.mlp_hidden)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["mlp_hidden"] = tuple(data.get("mlp_hidden", (64, 64)))
        return cls(**data)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; the order is the checkpoint block order."""
    shapes = {}
    if config.arch == "mlp":
        widths = config.mlp_widths
        for k in range(len(widths) - 1):
            shapes[f"W{k + 1}"] = (widths[k], widths[k + 1])
            shapes[f"b{k + 1}"] = (widths[k + 1],)
        return shapes
    h = config.hidden_dim
    for layer in range(config.lstm_layers):
        n_in = config.n_features if layer == 0 else h
        for gate in GATES:
            shapes[f"l{layer}.W_{gate}"] = (n_in, h)
            shapes[f"l{layer}.U_{gate}"] = (h, h)
            shapes[f"l{layer}.b_{gate}"] = (h,)
    shapes["W_out"] = (h, config.n_classes)
    shapes["b_out"] = (config.n_classes,)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...], config: ModelConfig) -> int:
    if config.arch == "lstm" and name.startswith("l"):
        return config.hidden_dim
    if len(shape) == 2:
        return shape[0]
    # biases share their layer's fan-in
    if config.arch == "mlp":
        k = int(name[1:])
        return config.mlp_widths[k - 1]
    return config.hidden_dim


def init_params(config: ModelConfig, seed: int) -> Params:
    """Uniform in +-1/sqrt(fan_in), drawn in param_shapes order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        bound = 1.0 / np.sqrt(_fan_in(name, shape, config))
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def param_count(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


def check_params(params: Params, config: ModelConfig) -> None:
    expected = param_shapes(config)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeMismatchError(f"{config.arch} parameter names differ: "
                                 f"missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeMismatchError(f"{name}: expected {shape}, got {tuple(params[name].shape)}")


def _as_batch(x, config: ModelConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (config.window, config.n_features):
        raise ShapeMismatchError(
            f"expected windows of shape (B, {config.window}, {config.n_features}), got {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise NonFiniteInputError("input windows contain NaN or inf")
    return x


def leaky_relu(z, negative_slope: float):
    return np.where(z > 0, z, negative_slope * z)


def _leaky_grad(z, negative_slope: float):
    return np.where(z > 0, 1.0, negative_slope)


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# MLP


def mlp_forward(params: Params, x, config: ModelConfig | None = None,
                return_cache: bool = False):
    """
    Flatten each window row-major (780 inputs by default), LeakyReLU hidden
    layers, linear output optionally passed through LeakyReLU.
    """
    config = config or ModelConfig(arch="mlp")
    check_params(params, config)
    batch = _as_batch(x, config)
    a = batch.reshape(len(batch), -1)
    n_layers = len(config.mlp_widths) - 1
    cache = []
    for k in range(1, n_layers + 1):
        z = a @ params[f"W{k}"] + params[f"b{k}"]
        cache.append((a, z))
        last = k == n_layers
        a = z if last and not config.output_activation else leaky_relu(z, config.negative_slope)
    logits = a if np.ndim(x) == 3 else a[0]
    return (logits, cache) if return_cache else logits


def mlp_backward(params: Params, cache, dlogits, config: ModelConfig | None = None) -> Params:
    config = config or ModelConfig(arch="mlp")
    dz = np.atleast_2d(np.asarray(dlogits, dtype=np.float64))
    n_layers = len(cache)
    grads = {}
    for k in range(n_layers, 0, -1):
        a_in, z = cache[k - 1]
        if k < n_layers or config.output_activation:
            dz = dz * _leaky_grad(z, config.negative_slope)
        grads[f"W{k}"] = a_in.T @ dz
        grads[f"b{k}"] = dz.sum(axis=0)
        dz = dz @ params[f"W{k}"].T
    return grads


# LSTM


def _stacked(params: Params, layer: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    W = np.concatenate([params[f"l{layer}.W_{g}"] for g in GATES], axis=1)
    U = np.concatenate([params[f"l{layer}.U_{g}"] for g in GATES], axis=1)
    b = np.concatenate([params[f"l{layer}.b_{g}"] for g in GATES])
    return W, U, b


def lstm_forward(params: Params, x, config: ModelConfig | None = None,
                 return_cache: bool = False):
    """
    h_0 = c_0 = 0; per step i, f, o = sigmoid, g = tanh of x W + h U + b,
    c = f*c + i*g, h = o*tanh(c). Logits project the top layer's final h.
    """
    config = config or ModelConfig(arch="lstm")
    check_params(params, config)
    seq = _as_batch(x, config)
    batch, steps, _ = seq.shape
    h_dim = config.hidden_dim
    layers = []
    for layer in range(config.lstm_layers):
        W, U, b = _stacked(params, layer)
        h = np.zeros((batch, h_dim))
        c = np.zeros((batch, h_dim))
        hs = np.empty((batch, steps, h_dim))
        gates = np.empty((batch, steps, 4 * h_dim))
        cs = np.empty((batch, steps + 1, h_dim))
        cs[:, 0] = 0.0
        pre_x = seq @ W + b
        for t in range(steps):
            a = pre_x[:, t] + h @ U
            sig = _sigmoid(a[:, :3 * h_dim])
            g = np.tanh(a[:, 3 * h_dim:])
            i, f, o = sig[:, :h_dim], sig[:, h_dim:2 * h_dim], sig[:, 2 * h_dim:]
            c = f * c + i * g
            h = o * np.tanh(c)
            gates[:, t, :3 * h_dim] = sig
            gates[:, t, 3 * h_dim:] = g
            cs[:, t + 1] = c
            hs[:, t] = h
        layers.append((seq, hs, gates, cs))
        seq = hs
    h_last = seq[:, -1]
    logits = h_last @ params["W_out"] + params["b_out"]
    if np.ndim(x) == 2:
        logits = logits[0]
    return (logits, layers) if return_cache else logits


def lstm_backward(params: Params, cache, dlogits, config: ModelConfig | None = None) -> Params:
    """Backpropagation through time over every step of every layer."""
    config = config or ModelConfig(arch="lstm")
    dlogits = np.atleast_2d(np.asarray(dlogits, dtype=np.float64))
    h_dim = config.hidden_dim
    _, hs_top, _, _ = cache[-1]
    batch, steps, _ = hs_top.shape

    grads = {"W_out": hs_top[:, -1].T @ dlogits, "b_out": dlogits.sum(axis=0)}
    dhs = np.zeros_like(hs_top)
    dhs[:, -1] = dlogits @ params["W_out"].T

    for layer in range(len(cache) - 1, -1, -1):
        x_seq, hs, gates, cs = cache[layer]
        W, U, _ = _stacked(params, layer)
        da_all = np.empty((batch, steps, 4 * h_dim))
        dh_next = np.zeros((batch, h_dim))
        dc_next = np.zeros((batch, h_dim))
        for t in range(steps - 1, -1, -1):
            i = gates[:, t, :h_dim]
            f = gates[:, t, h_dim:2 * h_dim]
            o = gates[:, t, 2 * h_dim:3 * h_dim]
            g = gates[:, t, 3 * h_dim:]
            c, c_prev = cs[:, t + 1], cs[:, t]
            tanh_c = np.tanh(c)

            dh = dhs[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tanh_c ** 2)
            da = da_all[:, t]
            da[:, :h_dim] = dc * g * i * (1.0 - i)
            da[:, h_dim:2 * h_dim] = dc * c_prev * f * (1.0 - f)
            da[:, 2 * h_dim:3 * h_dim] = dh * tanh_c * o * (1.0 - o)
            da[:, 3 * h_dim:] = dc * i * (1.0 - g ** 2)
            dc_next = dc * f
            dh_next = da @ U.T

        h_prev = np.concatenate([np.zeros((batch, 1, h_dim)), hs[:, :-1]], axis=1)
        flat_da = da_all.reshape(-1, 4 * h_dim)
        dW = x_seq.reshape(-1, x_seq.shape[-1]).T @ flat_da
        dU = h_prev.reshape(-1, h_dim).T @ flat_da
        db = flat_da.sum(axis=0)
        for k, gate in enumerate(GATES):
            cols = slice(k * h_dim, (k + 1) * h_dim)
            grads[f"l{layer}.W_{gate}"] = dW[:, cols]
            grads[f"l{layer}.U_{gate}"] = dU[:, cols]
            grads[f"l{layer}.b_{gate}"] = db[cols]
        if layer > 0:
            dhs = da_all @ W.T
    return grads


def forward(params: Params, x, config: ModelConfig, return_cache: bool = False):
    fn = mlp_forward if config.arch == "mlp" else lstm_forward
    return fn(params, x, config, return_cache=return_cache)


def backward(params: Params, cache, dlogits, config: ModelConfig) -> Params:
    fn = mlp_backward if config.arch == "mlp" else lstm_backward
    return fn(params, cache, dlogits, config)


def predict_logits(params: Params, windows, config: ModelConfig,
                   batch_size: int = 4096) -> np.ndarray:
    windows = np.asarray(windows)
    if len(windows) == 0:
        return np.zeros((0, config.n_classes))
    return np.concatenate([
        forward(params, windows[s:s + batch_size], config)
        for s in range(0, len(windows), batch_size)
    ])


# optimisation


@dataclasses.dataclass
class AdamState:
    m: Params
    v: Params
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def zeros(cls, params: Params, **kwargs) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kwargs)


def adam_step(params: Params, grads: Params, state: AdamState, lr: float) -> bool:
    """
    In-place Adam update with bias correction. A non-finite gradient skips
    the step (moments and counter untouched) and returns False.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeMismatchError(f"gradient {name}: {g.shape} vs parameter {params[name].shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        logger.warning("non-finite gradient at step %d; update skipped", state.t + 1)
        return False

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return True


def global_norm(grads: Params) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


def clip_by_global_norm(grads: Params, max_norm: float = DEFAULT_GRAD_CLIP) -> tuple[Params, float]:
    norm = global_norm(grads)
    if not np.isfinite(norm) or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


# checkpoints


@dataclasses.dataclass
class Checkpoint:
    config: ModelConfig
    params: Params
    seed: int
    epoch: int
    normalization: dict | None = None
    meta: dict = dataclasses.field(default_factory=dict)

    def require_arch(self, arch: str) -> None:
        if arch != self.config.arch:
            raise CheckpointMismatchError(
                f"checkpoint holds a {self.config.arch} model, {arch} was requested"
            )


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """
    Layout, little-endian:

      8 bytes   magic b"HFTCKPT1"
      uint32    header length H
      H bytes   UTF-8 JSON: arch, config, blocks [[name, shape], ...], seed,
                epoch, normalization, meta
      ...       one float32 block per entry of 'blocks', row-major
    """
    check_params(checkpoint.params, checkpoint.config)
    shapes = param_shapes(checkpoint.config)
    header = {
        "arch": checkpoint.config.arch,
        "config": checkpoint.config.to_json(),
        "blocks": [[name, list(shape)] for name, shape in shapes.items()],
        "seed": int(checkpoint.seed),
        "epoch": int(checkpoint.epoch),
        "normalization": _jsonable(checkpoint.normalization),
        "meta": _jsonable(checkpoint.meta),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in shapes:
            f.write(np.ascontiguousarray(checkpoint.params[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointMismatchError(f"{path} is not a model checkpoint")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    config = ModelConfig.from_json(header["config"])
    offset = 12 + hlen
    params = {}
    for name, shape in header["blocks"]:
        count = int(np.prod(shape))
        block = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        params[name] = block.reshape(shape).astype(np.float64)
        offset += block.nbytes
    if offset != len(data):
        raise CheckpointMismatchError(f"{path}: {len(data) - offset} trailing bytes after blocks")
    check_params(params, config)
    return Checkpoint(config, params, header["seed"], header["epoch"],
                      header.get("normalization"), header.get("meta", {}))
