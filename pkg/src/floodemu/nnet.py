"""From-scratch 1D convolutional regression network.

Topology: the feature row is treated as a single-channel sequence, passed
through stride-1 same-padded convolutions (each followed by a rectifier and,
optionally, batch normalisation and dropout), flattened, then through a
stack of rectified dense layers onto a linear output of one node per cell.

Everything (forward, backprop, Adam, batchnorm, dropout, early stopping)
is implemented directly on numpy arrays; training is deterministic under a
fixed seed in single-threaded mode.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FeatureMatrix, TargetMatrix, threshold_depths, unflatten
from .errors import DivergenceError, ManifestError, ModelIOError

_MODEL_MAGIC = b"FCNN"
_MODEL_VERSION = 1
_BN_EPS = 1e-5
_BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class NetSpec:
    input_len: int
    output_dim: int
    conv_filters: tuple[int, ...] = (32, 128)
    kernel_size: int = 3
    dense_units: tuple[int, ...] = (32, 256, 512)
    use_batchnorm: bool = False
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.output_dim < 1 or self.input_len < 1:
            raise ValueError("input_len and output_dim must be positive")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if not self.conv_filters or not self.dense_units:
            raise ValueError("conv_filters and dense_units must be non-empty")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        object.__setattr__(self, "conv_filters", tuple(int(v) for v in self.conv_filters))
        object.__setattr__(self, "dense_units", tuple(int(v) for v in self.dense_units))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 10
    min_delta: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1:
            raise ValueError("batch_size and patience must be >= 1")


# --- layers ------------------------------------------------------------

class _Conv1d:
    """Stride-1, zero same-padded 1D convolution. Weight shape (k, cin, cout)."""

    def __init__(self, k, cin, cout, rng):
        fan_in = k * cin
        limit = np.sqrt(6.0 / fan_in)
        self.w = rng.uniform(-limit, limit, size=(k, cin, cout))
        self.b = np.zeros(cout)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def params(self):
        return [("w", self.w, self.dw), ("b", self.b, self.db)]

    def _patches(self, x):
        B, L, cin = x.shape
        k = self.w.shape[0]
        pad = k // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        cols = np.stack([xp[:, i:i + L, :] for i in range(k)], axis=2)  # (B, L, k, cin)
        return cols.reshape(B, L, k * cin)

    def forward(self, x, train, rng):
        self.x_shape = x.shape
        self.patches = self._patches(x)
        B, L, _ = x.shape
        k, cin, cout = self.w.shape
        return self.patches @ self.w.reshape(k * cin, cout) + self.b

    def backward(self, dy):
        B, L, cin = self.x_shape
        k, _, cout = self.w.shape
        flat_p = self.patches.reshape(-1, k * cin)
        flat_dy = dy.reshape(-1, cout)
        self.dw[...] = (flat_p.T @ flat_dy).reshape(k, cin, cout)
        self.db[...] = flat_dy.sum(axis=0)
        dpatch = (flat_dy @ self.w.reshape(k * cin, cout).T).reshape(B, L, k, cin)
        pad = k // 2
        dxp = np.zeros((B, L + 2 * pad, cin))
        for i in range(k):
            dxp[:, i:i + L, :] += dpatch[:, :, i, :]
        return dxp[:, pad:pad + L, :]


class _Dense:
    def __init__(self, n_in, n_out, rng):
        limit = np.sqrt(6.0 / n_in)
        self.w = rng.uniform(-limit, limit, size=(n_in, n_out))
        self.b = np.zeros(n_out)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def params(self):
        return [("w", self.w, self.dw), ("b", self.b, self.db)]

    def forward(self, x, train, rng):
        self.x = x
        return x @ self.w + self.b

    def backward(self, dy):
        self.dw[...] = self.x.T @ dy
        self.db[...] = dy.sum(axis=0)
        return dy @ self.w.T


class _Relu:
    def params(self):
        return []

    def forward(self, x, train, rng):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, dy):
        return np.where(self.mask, dy, 0.0)


class _Flatten:
    def params(self):
        return []

    def forward(self, x, train, rng):
        self.shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self.shape)


class _BatchNorm:
    """Per-channel normalisation over (batch, length) for conv outputs."""

    def __init__(self, channels):
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.dgamma = np.zeros(channels)
        self.dbeta = np.zeros(channels)
        self.run_mean = np.zeros(channels)
        self.run_var = np.ones(channels)

    def params(self):
        return [("gamma", self.gamma, self.dgamma), ("beta", self.beta, self.dbeta)]

    def forward(self, x, train, rng):
        if train:
            mean = x.mean(axis=(0, 1))
            var = x.var(axis=(0, 1))
            self.run_mean = _BN_MOMENTUM * self.run_mean + (1 - _BN_MOMENTUM) * mean
            self.run_var = _BN_MOMENTUM * self.run_var + (1 - _BN_MOMENTUM) * var
        else:
            mean, var = self.run_mean, self.run_var
        self.inv_std = 1.0 / np.sqrt(var + _BN_EPS)
        self.xhat = (x - mean) * self.inv_std
        return self.gamma * self.xhat + self.beta

    def backward(self, dy):
        self.dgamma[...] = np.sum(dy * self.xhat, axis=(0, 1))
        self.dbeta[...] = np.sum(dy, axis=(0, 1))
        m = dy.shape[0] * dy.shape[1]
        dy_mean = dy.mean(axis=(0, 1))
        proj = (dy * self.xhat).mean(axis=(0, 1))
        return self.gamma * self.inv_std * (dy - dy_mean - self.xhat * proj)


class _Dropout:
    def __init__(self, rate):
        self.rate = rate

    def params(self):
        return []

    def forward(self, x, train, rng):
        if not train or self.rate == 0.0:
            self.mask = None
            return x
        self.mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self.mask

    def backward(self, dy):
        return dy if self.mask is None else dy * self.mask


class CnnModel:
    """Trained network state: layers, parameters, and training log."""

    def __init__(self, spec: NetSpec, layers, training_log=None):
        self.spec = spec
        self.layers = layers
        self.training_log = list(training_log or [])

    def parameters(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, batch: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 1:
            batch = batch[None, :]
        if batch.shape[1] != self.spec.input_len:
            raise ValueError(f"batch width {batch.shape[1]} != input_len {self.spec.input_len}")
        if train and rng is None:
            rng = np.random.default_rng(0)
        x = batch[:, :, None]  # single-channel sequence
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, dloss: np.ndarray) -> None:
        g = dloss
        for layer in reversed(self.layers):
            g = layer.backward(g)

    def state_arrays(self):
        """Ordered list of (name, array) for every parameter and running stat."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr, _ in layer.params():
                out.append((f"layer{i}.{name}", arr))
            if isinstance(layer, _BatchNorm):
                out.append((f"layer{i}.run_mean", layer.run_mean))
                out.append((f"layer{i}.run_var", layer.run_var))
        return out


def init_model(spec: NetSpec, seed: int = 0) -> CnnModel:
    """Fan-in-scaled uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    layers = []
    cin = 1
    for cout in spec.conv_filters:
        layers.append(_Conv1d(spec.kernel_size, cin, cout, rng))
        layers.append(_Relu())
        if spec.use_batchnorm:
            layers.append(_BatchNorm(cout))
        if spec.dropout_rate > 0:
            layers.append(_Dropout(spec.dropout_rate))
        cin = cout
    layers.append(_Flatten())
    width = spec.input_len * cin
    for units in spec.dense_units:
        layers.append(_Dense(width, units, rng))
        layers.append(_Relu())
        width = units
    layers.append(_Dense(width, spec.output_dim, rng))
    return CnnModel(spec, layers)


def loss_mse(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def loss_mse_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (pred - target) / pred.size


def backward(model: CnnModel, batch: np.ndarray, targets: np.ndarray,
             rng: np.random.Generator | None = None) -> float:
    """One train-mode forward + backprop; leaves gradients on the layers."""
    pred = model.forward(batch, train=True, rng=rng)
    loss = loss_mse(pred, targets)
    model.backward(loss_mse_grad(pred, targets))
    return loss


class _Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(arr) for _, arr, _ in params]
        self.v = [np.zeros_like(arr) for _, arr, _ in params]
        self.t = 0

    def step(self, params):
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.adam_beta1 ** self.t
        bc2 = 1 - c.adam_beta2 ** self.t
        for i, (_, arr, grad) in enumerate(params):
            self.m[i] = c.adam_beta1 * self.m[i] + (1 - c.adam_beta1) * grad
            self.v[i] = c.adam_beta2 * self.v[i] + (1 - c.adam_beta2) * grad ** 2
            arr -= c.learning_rate * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + c.adam_eps)


def train(model: CnnModel, train_pair, val_pair, cfg: TrainConfig) -> CnnModel:
    """Mini-batch Adam with early stopping on validation MSE.

    Returns the model restored to its best-validation-epoch parameters;
    training_log holds (train_loss, val_loss) per completed epoch.
    """
    x_tr, y_tr = _as_arrays(train_pair)
    x_va, y_va = _as_arrays(val_pair)
    rng = np.random.default_rng(cfg.seed)
    opt = _Adam(model.parameters(), cfg)

    best_val = np.inf
    best_state = _copy_state(model)
    stall = 0
    model.training_log = []

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(x_tr.shape[0])
        losses = []
        for start in range(0, x_tr.shape[0], cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = backward(model, x_tr[idx], y_tr[idx], rng=rng)
            if not np.isfinite(loss):
                raise DivergenceError(f"NaN/Inf loss at epoch {epoch}, batch {start // cfg.batch_size}")
            opt.step(model.parameters())
            losses.append(loss)
        val_loss = loss_mse(model.forward(x_va, train=False), y_va)
        model.training_log.append((float(np.mean(losses)), float(val_loss)))

        if val_loss < best_val - cfg.min_delta:
            best_val = val_loss
            best_state = _copy_state(model)
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break

    full_log = list(model.training_log)
    _restore_state(model, best_state)
    model.training_log = full_log
    return model


def predict_depth_maps(model: CnnModel, features: FeatureMatrix,
                       targets: TargetMatrix | None, tau: float = 0.3):
    """Inference over all rows: clamp negatives, threshold, unflatten."""
    if targets is None:
        raise ManifestError("cell map unavailable: pass the TargetMatrix from the dataset build")
    preds = model.forward(features.values, train=False)
    preds = threshold_depths(np.maximum(preds, 0.0), tau)
    return [unflatten(row, targets) for row in preds]


def training_log_csv(model: CnnModel) -> str:
    lines = ["epoch,train_mse,val_mse"]
    lines.extend(f"{i},{tr!r},{va!r}" for i, (tr, va) in enumerate(model.training_log))
    return "\n".join(lines) + "\n"


# --- persistence -------------------------------------------------------

def save_model(model: CnnModel, path) -> None:
    header = {
        "spec": {
            "input_len": model.spec.input_len,
            "output_dim": model.spec.output_dim,
            "conv_filters": list(model.spec.conv_filters),
            "kernel_size": model.spec.kernel_size,
            "dense_units": list(model.spec.dense_units),
            "use_batchnorm": model.spec.use_batchnorm,
            "dropout_rate": model.spec.dropout_rate,
        },
        "training_log": model.training_log,
        "arrays": [(name, list(arr.shape)) for name, arr in model.state_arrays()],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(_MODEL_MAGIC)
        f.write(struct.pack("<II", _MODEL_VERSION, len(blob)))
        f.write(blob)
        for _, arr in model.state_arrays():
            f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def load_model(path) -> CnnModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _MODEL_MAGIC:
        raise ModelIOError(f"{path}: not a model file (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _MODEL_VERSION:
        raise ModelIOError(f"{path}: unsupported model version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelIOError(f"{path}: corrupt header: {e}") from None
    spec = NetSpec(
        input_len=header["spec"]["input_len"],
        output_dim=header["spec"]["output_dim"],
        conv_filters=tuple(header["spec"]["conv_filters"]),
        kernel_size=header["spec"]["kernel_size"],
        dense_units=tuple(header["spec"]["dense_units"]),
        use_batchnorm=header["spec"]["use_batchnorm"],
        dropout_rate=header["spec"]["dropout_rate"],
    )
    model = init_model(spec, seed=0)
    model.training_log = [tuple(row) for row in header["training_log"]]
    offset = 12 + hlen
    for (name, arr), (saved_name, saved_shape) in zip(model.state_arrays(), header["arrays"]):
        if name != saved_name or list(arr.shape) != saved_shape:
            raise ModelIOError(
                f"{path}: shape mismatch at {saved_name}: file {saved_shape}, spec expects "
                f"{name} {list(arr.shape)}")
        nbytes = arr.size * 8
        if offset + nbytes > len(raw):
            raise ModelIOError(f"{path}: truncated at {name}")
        arr[...] = np.frombuffer(raw[offset:offset + nbytes], dtype=np.float64).reshape(arr.shape)
        offset += nbytes
    if offset != len(raw):
        raise ModelIOError(f"{path}: trailing bytes after parameters")
    return model


def _as_arrays(pair):
    x, y = pair
    x = x.values if hasattr(x, "values") else np.asarray(x, dtype=np.float64)
    y = y.values if hasattr(y, "values") else np.asarray(y, dtype=np.float64)
    return x, y


def _copy_state(model):
    return [(name, arr.copy()) for name, arr in model.state_arrays()]


def _restore_state(model, state):
    for (_, arr), (_, saved) in zip(model.state_arrays(), state):
        arr[...] = saved
