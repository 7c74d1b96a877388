"""
Deep ConvNet - rede convolucional profunda de quatro blocos

Motor de camadas em numpy (forward/backward explícitos), construtor da
arquitetura Deep4 (convolução temporal + espacial no primeiro bloco,
três blocos conv/batch-norm/ELU/max-pool e uma camada densa softmax),
treinamento com Adam, avaliação e serialização no formato de container.
"""

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.metrics import accuracy_score
from sklearn.model_selection import train_test_split

from container_io import PathLike, load_model_container, save_model_container, write_csv
from eeg_structures import ConfigurationError, ModelFitError, SignalShapeError, TrialSet

logger = logging.getLogger(__name__)

DESK_FILTERS = (8, 16, 32, 64)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class Deep4Config:
    """Arquitetura Deep4."""
    n_channels: int
    n_timepoints: int
    n_classes: int = 2
    block_filters: Tuple[int, int, int, int] = (25, 50, 100, 200)
    temporal_kernel: int = 10
    pool_size: int = 3
    pool_stride: int = 3
    dropout_p: float = 0.5
    batch_norm: bool = True

    def __post_init__(self):
        self.block_filters = tuple(int(f) for f in self.block_filters)
        if len(self.block_filters) != 4 or min(self.block_filters) < 1:
            raise ConfigurationError(f"block_filters must be 4 positive integers, got {self.block_filters}")
        if self.n_channels < 1 or self.n_timepoints < 1:
            raise ConfigurationError("n_channels and n_timepoints must be positive")
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.temporal_kernel < 1 or self.pool_size < 1 or self.pool_stride < 1:
            raise ConfigurationError("kernel, pool size and pool stride must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["block_filters"] = list(self.block_filters)
        return data


def desk_config(n_channels: int, n_timepoints: int, **overrides) -> Deep4Config:
    """Small-filter config for CI-sized runs."""
    overrides.setdefault("block_filters", DESK_FILTERS)
    return Deep4Config(n_channels=n_channels, n_timepoints=n_timepoints, **overrides)


@dataclass
class TrainConfig:
    """Adam + cross-entropy training.

    ``split_fraction`` sets the stratified train/test holdout (``holdout_split``);
    ``validation_fraction`` is then carved out of the training part for early stopping.
    """
    max_epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    split_fraction: float = 0.8
    validation_fraction: float = 0.2
    patience: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigurationError(f"split_fraction must lie in (0, 1), got {self.split_fraction}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigurationError(f"validation_fraction must lie in [0, 1), got {self.validation_fraction}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("max_epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    """Base: ``forward`` caches what ``backward`` needs; grads mirror params."""

    def __init__(self, name: str):
        self.name = name
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, need_input_grad: bool = True) -> Optional[np.ndarray]:
        raise NotImplementedError

    def astype(self, dtype) -> None:
        for store in (self.params, self.buffers):
            for key in store:
                store[key] = store[key].astype(dtype)


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _scatter_windows(grad_windows: np.ndarray, length: int) -> np.ndarray:
    """Adjoint of ``sliding_window_view`` along the last axis (stride 1)."""
    *lead, n_out, kernel = grad_windows.shape
    out = np.zeros((*lead, length), dtype=grad_windows.dtype)
    for k in range(kernel):
        out[..., k:k + n_out] += grad_windows[..., k]
    return out


class TemporalConv(Layer):
    """[n, C, T] -> [n, F, C, T-K+1], one kernel per map shared over channels."""

    def __init__(self, name: str, n_filters: int, kernel: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__(name)
        self.kernel = kernel
        self.params["weight"] = _uniform(rng, (n_filters, kernel), kernel)
        if bias:
            self.params["bias"] = np.zeros(n_filters)

    def forward(self, x, training):
        self._length = x.shape[2]
        self._windows = sliding_window_view(x, self.kernel, axis=2)
        out = np.einsum("nctk,fk->nfct", self._windows, self.params["weight"])
        if "bias" in self.params:
            out = out + self.params["bias"][None, :, None, None]
        return out

    def backward(self, grad, need_input_grad=True):
        self.grads["weight"] = np.einsum("nfct,nctk->fk", grad, self._windows)
        if "bias" in self.params:
            self.grads["bias"] = grad.sum(axis=(0, 2, 3))
        if not need_input_grad:
            return None
        return _scatter_windows(np.einsum("nfct,fk->nctk", grad, self.params["weight"]), self._length)


class SpatialConv(Layer):
    """[n, F_in, C, T] -> [n, F_out, T], kernel spans all channels."""

    def __init__(self, name: str, n_in: int, n_out: int, n_channels: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__(name)
        self.params["weight"] = _uniform(rng, (n_out, n_in, n_channels), n_in * n_channels)
        if bias:
            self.params["bias"] = np.zeros(n_out)

    def forward(self, x, training):
        self._input = x
        out = np.einsum("nict,oic->not", x, self.params["weight"])
        if "bias" in self.params:
            out = out + self.params["bias"][None, :, None]
        return out

    def backward(self, grad, need_input_grad=True):
        self.grads["weight"] = np.einsum("not,nict->oic", grad, self._input)
        if "bias" in self.params:
            self.grads["bias"] = grad.sum(axis=(0, 2))
        if not need_input_grad:
            return None
        return np.einsum("not,oic->nict", grad, self.params["weight"])


class Conv1D(Layer):
    """[n, F_in, T] -> [n, F_out, T-K+1]."""

    def __init__(self, name: str, n_in: int, n_out: int, kernel: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__(name)
        self.kernel = kernel
        self.params["weight"] = _uniform(rng, (n_out, n_in, kernel), n_in * kernel)
        if bias:
            self.params["bias"] = np.zeros(n_out)

    def forward(self, x, training):
        self._length = x.shape[2]
        self._windows = sliding_window_view(x, self.kernel, axis=2)
        out = np.einsum("nitk,oik->not", self._windows, self.params["weight"])
        if "bias" in self.params:
            out = out + self.params["bias"][None, :, None]
        return out

    def backward(self, grad, need_input_grad=True):
        self.grads["weight"] = np.einsum("not,nitk->oik", grad, self._windows)
        if "bias" in self.params:
            self.grads["bias"] = grad.sum(axis=(0, 2))
        if not need_input_grad:
            return None
        return _scatter_windows(np.einsum("not,oik->nitk", grad, self.params["weight"]), self._length)


class BatchNorm(Layer):
    """Per-map normalization over batch and time; running stats for inference."""

    def __init__(self, name: str, n_features: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__(name)
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(n_features)
        self.params["beta"] = np.zeros(n_features)
        self.buffers["running_mean"] = np.zeros(n_features)
        self.buffers["running_var"] = np.ones(n_features)

    def forward(self, x, training):
        gamma = self.params["gamma"][None, :, None]
        beta = self.params["beta"][None, :, None]
        if not training:
            mean = self.buffers["running_mean"][None, :, None]
            var = self.buffers["running_var"][None, :, None]
            return gamma * (x - mean) / np.sqrt(var + self.eps) + beta

        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        m = x.shape[0] * x.shape[2]
        unbiased = var * m / max(m - 1, 1)
        self.buffers["running_mean"] = (1 - self.momentum) * self.buffers["running_mean"] + self.momentum * mean
        self.buffers["running_var"] = (1 - self.momentum) * self.buffers["running_var"] + self.momentum * unbiased

        self._inv_std = 1.0 / np.sqrt(var + self.eps)[None, :, None]
        self._xhat = (x - mean[None, :, None]) * self._inv_std
        return gamma * self._xhat + beta

    def backward(self, grad, need_input_grad=True):
        xhat = self._xhat
        self.grads["gamma"] = (grad * xhat).sum(axis=(0, 2))
        self.grads["beta"] = grad.sum(axis=(0, 2))
        if not need_input_grad:
            return None
        m = grad.shape[0] * grad.shape[2]
        dxhat = grad * self.params["gamma"][None, :, None]
        sum_d = dxhat.sum(axis=(0, 2), keepdims=True)
        sum_dx = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
        return self._inv_std / m * (m * dxhat - sum_d - xhat * sum_dx)


class ELU(Layer):
    def forward(self, x, training):
        self._output = np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
        self._positive = x > 0
        return self._output

    def backward(self, grad, need_input_grad=True):
        return grad * np.where(self._positive, 1.0, self._output + 1.0).astype(grad.dtype)


class MaxPool(Layer):
    """Max over windows of ``size`` along time, moving by ``stride``."""

    def __init__(self, name: str, size: int, stride: int):
        super().__init__(name)
        self.size = size
        self.stride = stride
        self.selection: Optional[np.ndarray] = None

    def output_length(self, length: int) -> int:
        return (length - self.size) // self.stride + 1 if length >= self.size else 0

    def forward(self, x, training):
        self._shape = x.shape
        windows = sliding_window_view(x, self.size, axis=2)[:, :, ::self.stride]
        self.selection = windows.argmax(axis=3)
        return np.take_along_axis(windows, self.selection[..., None], axis=3)[..., 0]

    def backward(self, grad, need_input_grad=True):
        n, f, n_out = grad.shape
        positions = np.arange(n_out)[None, None, :] * self.stride + self.selection
        out = np.zeros(self._shape, dtype=grad.dtype)
        np.add.at(out, (np.arange(n)[:, None, None], np.arange(f)[None, :, None], positions), grad)
        return out


class Dropout(Layer):
    """Inverted dropout; masks come from ``mask_seed`` so they can be replayed."""

    def __init__(self, name: str, p: float):
        super().__init__(name)
        self.p = p
        self.mask_seed: Optional[np.random.SeedSequence] = None

    def forward(self, x, training):
        if not training or self.p == 0.0:
            self._mask = None
            return x
        rng = np.random.default_rng(self.mask_seed)
        self._mask = ((rng.random(x.shape) >= self.p) / (1.0 - self.p)).astype(x.dtype)
        return x * self._mask

    def backward(self, grad, need_input_grad=True):
        return grad if self._mask is None else grad * self._mask


class Dense(Layer):
    """Flatten then affine map to class scores.

    Initialized class-centred: the weights and the bias sum to zero across
    classes, and cross-entropy gradients keep that property.
    """

    def __init__(self, name: str, n_in: int, n_classes: int, rng: np.random.Generator):
        super().__init__(name)
        weight = _uniform(rng, (n_in, n_classes), n_in)
        self.params["weight"] = weight - weight.mean(axis=1, keepdims=True)
        self.params["bias"] = np.zeros(n_classes)

    def forward(self, x, training):
        self._shape = x.shape
        self._flat = x.reshape(x.shape[0], -1)
        return self._flat @ self.params["weight"] + self.params["bias"]

    def backward(self, grad, need_input_grad=True):
        self.grads["weight"] = self._flat.T @ grad
        self.grads["bias"] = grad.sum(axis=0)
        if not need_input_grad:
            return None
        return (grad @ self.params["weight"].T).reshape(self._shape)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


@dataclass
class GradientResult:
    loss: float
    logits: np.ndarray
    grads: Dict[str, np.ndarray]


@dataclass
class EvaluationResult:
    accuracy: float
    predictions: np.ndarray
    probabilities: np.ndarray


class ConvNetModel:
    """Pilha ordenada de camadas Deep4 com a configuração e a semente."""

    def __init__(self, config: Deep4Config, layers: List[Layer], seed: int, dtype=np.float32):
        self.config = config
        self.layers = layers
        self.seed = seed
        self.dtype = np.dtype(dtype)
        for layer in self.layers:
            layer.astype(self.dtype)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> Iterator[Tuple[str, Layer, str]]:
        for layer in self.layers:
            for key in layer.params:
                yield f"{layer.name}.{key}", layer, key

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Parameters and batch-norm buffers by qualified name."""
        state = {}
        for layer in self.layers:
            for key, value in {**layer.params, **layer.buffers}.items():
                state[f"{layer.name}.{key}"] = value
        return state

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for layer in self.layers:
            for store in (layer.params, layer.buffers):
                for key in store:
                    qualified = f"{layer.name}.{key}"
                    if qualified not in state:
                        raise ConfigurationError(f"missing array {qualified!r} in model state")
                    value = np.asarray(state[qualified], dtype=self.dtype)
                    if value.shape != store[key].shape:
                        raise ConfigurationError(
                            f"array {qualified!r} has shape {value.shape}, expected {store[key].shape}"
                        )
                    store[key] = value.copy()

    def astype(self, dtype) -> "ConvNetModel":
        clone = copy.deepcopy(self)
        clone.dtype = np.dtype(dtype)
        for layer in clone.layers:
            layer.astype(clone.dtype)
        return clone

    # -- passes -------------------------------------------------------------

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch)
        expected = (self.config.n_channels, self.config.n_timepoints)
        if batch.ndim != 3 or batch.shape[1:] != expected:
            raise SignalShapeError(f"batch shape {batch.shape} does not match [n x {expected[0]} x {expected[1]}]")
        return batch.astype(self.dtype, copy=False)

    def _set_dropout_seed(self, dropout_seed: int) -> None:
        dropouts = [layer for layer in self.layers if isinstance(layer, Dropout)]
        for layer, child in zip(dropouts, np.random.SeedSequence(dropout_seed).spawn(len(dropouts))):
            layer.mask_seed = child

    def run(self, batch: np.ndarray, training: bool, dropout_seed: int = 0) -> np.ndarray:
        x = self._check_batch(batch)
        if training:
            self._set_dropout_seed(dropout_seed)
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dlogits: np.ndarray) -> None:
        grad = dlogits.astype(self.dtype, copy=False)
        for i in range(len(self.layers) - 1, -1, -1):
            grad = self.layers[i].backward(grad, need_input_grad=i > 0)

    def pre_softmax(self, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Inference-mode class scores before softmax, [n x n_classes]."""
        batch = self._check_batch(batch)
        chunks = [self.run(batch[i:i + batch_size], training=False) for i in range(0, len(batch), batch_size)]
        return np.concatenate(chunks, axis=0).astype(np.float64)

    def forward(self, batch: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        logits = self.pre_softmax(batch)
        return softmax(logits), logits

    def pool_selection(self) -> np.ndarray:
        """Argmax pattern of every max-pool from the last pass."""
        return np.concatenate([
            layer.selection.ravel() for layer in self.layers if isinstance(layer, MaxPool)
        ])


def _layer_lengths(config: Deep4Config) -> List[int]:
    lengths = []
    length = config.n_timepoints
    for block in range(4):
        length = length - config.temporal_kernel + 1
        conv_length = length
        length = (length - config.pool_size) // config.pool_stride + 1 if length >= config.pool_size else 0
        if conv_length < 1 or length < 1:
            raise ConfigurationError(
                f"time axis collapses in block {block + 1}: {config.n_timepoints} samples are too short "
                f"for kernel {config.temporal_kernel} and pool {config.pool_size}/{config.pool_stride}"
            )
        lengths.append(length)
    return lengths


def build(config: Deep4Config, seed: int = 0, dtype=np.float32) -> ConvNetModel:
    """Instantiate Deep4 with fan-in scaled uniform weights drawn from ``seed``."""
    lengths = _layer_lengths(config)
    rng = np.random.default_rng(seed)
    f = config.block_filters
    use_bias = not config.batch_norm

    layers: List[Layer] = [
        TemporalConv("conv_time", f[0], config.temporal_kernel, rng, bias=use_bias),
        SpatialConv("conv_spat", f[0], f[0], config.n_channels, rng, bias=use_bias),
    ]
    if config.batch_norm:
        layers.append(BatchNorm("bnorm_1", f[0]))
    layers += [ELU("elu_1"), MaxPool("pool_1", config.pool_size, config.pool_stride)]

    for block in range(1, 4):
        tag = block + 1
        layers += [
            Dropout(f"drop_{tag}", config.dropout_p),
            Conv1D(f"conv_{tag}", f[block - 1], f[block], config.temporal_kernel, rng, bias=use_bias),
        ]
        if config.batch_norm:
            layers.append(BatchNorm(f"bnorm_{tag}", f[block]))
        layers += [ELU(f"elu_{tag}"), MaxPool(f"pool_{tag}", config.pool_size, config.pool_stride)]

    layers.append(Dense("classifier", f[3] * lengths[-1], config.n_classes, rng))
    model = ConvNetModel(config, layers, seed, dtype=dtype)
    logger.debug(f"[CONVNET] Built Deep4 {config.block_filters} with time lengths {lengths}")
    return model


def forward(model: ConvNetModel, batch: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Inference pass: ``(probabilities, pre_softmax)``."""
    return model.forward(batch)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    probs = softmax(logits.astype(np.float64))
    n = logits.shape[0]
    loss = -float(np.mean(np.log(np.maximum(probs[np.arange(n), labels], np.finfo(np.float64).tiny))))
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def gradients(model: ConvNetModel, batch: np.ndarray, labels: np.ndarray, dropout_seed: int = 0) -> GradientResult:
    """Mean cross-entropy and its exact parameter gradients (training mode)."""
    labels = np.asarray(labels, dtype=np.int64)
    logits = model.run(batch, training=True, dropout_seed=dropout_seed)
    loss, dlogits = _cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise ModelFitError("non-finite loss")
    model.backward(dlogits)
    grads = {name: layer.grads[key] for name, layer, key in model.named_parameters()}
    return GradientResult(loss=loss, logits=logits, grads=grads)


def check_gradients(model: ConvNetModel, batch: np.ndarray, labels: np.ndarray, step: float = 1e-4,
                    dropout_seed: int = 0) -> Dict[str, float]:
    """Worst-case relative error of analytic vs central-difference gradients.

    Runs on a float64 copy. Entries whose perturbation changes a max-pool
    selection are re-measured with a 100x smaller step.
    """
    net64 = model.astype(np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    buffers = {k: v.copy() for k, v in net64.state_arrays().items()}

    analytic = gradients(net64, batch, labels, dropout_seed).grads
    analytic = {name: grad.copy() for name, grad in analytic.items()}
    reference = net64.pool_selection()

    def loss_at() -> Tuple[float, bool]:
        logits = net64.run(batch, training=True, dropout_seed=dropout_seed)
        return _cross_entropy(logits, labels)[0], np.array_equal(net64.pool_selection(), reference)

    errors: Dict[str, float] = {}
    for name, layer, key in net64.named_parameters():
        values = layer.params[key]
        numeric = np.zeros_like(values)
        for idx in np.ndindex(values.shape):
            original = values[idx]
            h = step
            for _ in range(3):
                values[idx] = original + h
                plus, same_plus = loss_at()
                values[idx] = original - h
                minus, same_minus = loss_at()
                values[idx] = original
                if same_plus and same_minus:
                    break
                h /= 100.0
            numeric[idx] = (plus - minus) / (2.0 * h)
        diff = np.linalg.norm(numeric - analytic[name])
        scale = np.linalg.norm(numeric) + np.linalg.norm(analytic[name])
        errors[name] = float(diff / scale) if scale > 0 else 0.0

    net64.load_state(buffers)
    return errors


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def to_frame(self) -> pd.DataFrame:
        columns = ["epoch", "train_loss", "val_loss", "train_acc", "val_acc"]
        return pd.DataFrame([asdict(r) for r in self.records], columns=columns)


class AdamOptimizer:
    """Adaptive-moment updates over the model's named parameters."""

    def __init__(self, model: ConvNetModel, tc: TrainConfig):
        self.model = model
        self.tc = tc
        self.step_count = 0
        self.m = {name: np.zeros_like(layer.params[key]) for name, layer, key in model.named_parameters()}
        self.v = {name: np.zeros_like(layer.params[key]) for name, layer, key in model.named_parameters()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        tc = self.tc
        self.step_count += 1
        correction1 = 1.0 - tc.beta1 ** self.step_count
        correction2 = 1.0 - tc.beta2 ** self.step_count
        for name, layer, key in self.model.named_parameters():
            grad = grads[name]
            self.m[name] = tc.beta1 * self.m[name] + (1.0 - tc.beta1) * grad
            self.v[name] = tc.beta2 * self.v[name] + (1.0 - tc.beta2) * grad * grad
            update = tc.learning_rate * (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2) + tc.adam_eps)
            layer.params[key] = (layer.params[key] - update).astype(self.model.dtype)


def _loss_and_accuracy(model: ConvNetModel, trials: np.ndarray, labels: np.ndarray) -> Tuple[float, float]:
    logits = model.pre_softmax(trials)
    loss, _ = _cross_entropy(logits, labels)
    return loss, float(np.mean(logits.argmax(axis=1) == labels))


def holdout_split(ts: TrialSet, tc: Optional[TrainConfig] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Sorted train/test indices: a stratified ``split_fraction`` of the trials trains, the rest is held out."""
    tc = tc or TrainConfig()
    indices = np.arange(ts.n_trials)
    try:
        train_idx, test_idx = train_test_split(indices, train_size=tc.split_fraction, stratify=ts.labels,
                                               random_state=tc.seed)
    except ValueError as exc:
        raise ConfigurationError(f"cannot split {ts.n_trials} trials {tc.split_fraction:.0%}/rest: {exc}") from exc
    return np.sort(train_idx), np.sort(test_idx)


def train(model: ConvNetModel, ts: TrialSet, tc: Optional[TrainConfig] = None) -> Tuple[ConvNetModel, TrainingHistory]:
    """Train ``model`` in place on ``ts``.

    A stratified ``validation_fraction`` of the trials drives early
    stopping: the returned parameters are those of the epoch with the
    lowest validation loss. Without a validation split the last epoch wins.
    """
    tc = tc or TrainConfig()
    ts.require_both_classes("ConvNet training")
    trials = np.asarray(ts.trials, dtype=model.dtype)
    labels = np.asarray(ts.labels, dtype=np.int64)

    indices = np.arange(ts.n_trials)
    if tc.validation_fraction > 0:
        try:
            train_idx, val_idx = train_test_split(indices, test_size=tc.validation_fraction,
                                                  stratify=labels, random_state=tc.seed)
        except ValueError as exc:
            raise ConfigurationError(f"cannot split {ts.n_trials} trials for validation: {exc}") from exc
        train_idx, val_idx = np.sort(train_idx), np.sort(val_idx)
    else:
        train_idx, val_idx = indices, indices[:0]

    rng = np.random.default_rng(tc.seed)
    optimizer = AdamOptimizer(model, tc)
    history = TrainingHistory()
    best_loss = np.inf
    best_state = None
    stale = 0

    for epoch in range(tc.max_epochs):
        order = rng.permutation(train_idx)
        for start in range(0, len(order), tc.batch_size):
            batch_idx = order[start:start + tc.batch_size]
            dropout_seed = int(rng.integers(2 ** 31))
            try:
                result = gradients(model, trials[batch_idx], labels[batch_idx], dropout_seed)
            except ModelFitError as exc:
                raise ModelFitError(f"training diverged at epoch {epoch}: {exc}") from exc
            optimizer.step(result.grads)

        train_loss, train_acc = _loss_and_accuracy(model, trials[train_idx], labels[train_idx])
        if not np.isfinite(train_loss):
            raise ModelFitError(f"training diverged at epoch {epoch}: non-finite loss")
        if len(val_idx):
            val_loss, val_acc = _loss_and_accuracy(model, trials[val_idx], labels[val_idx])
        else:
            val_loss, val_acc = float("nan"), float("nan")
        history.records.append(EpochRecord(epoch, train_loss, val_loss, train_acc, val_acc))
        logger.debug(f"[CONVNET] epoch {epoch}: train {train_loss:.4f}/{train_acc:.3f} val {val_loss:.4f}/{val_acc:.3f}")

        if len(val_idx):
            if val_loss < best_loss:
                best_loss, stale = val_loss, 0
                best_state = {k: v.copy() for k, v in model.state_arrays().items()}
                history.best_epoch = epoch
            else:
                stale += 1
                if tc.patience is not None and stale > tc.patience:
                    logger.info(f"[CONVNET] Early stop at epoch {epoch} (best {history.best_epoch})")
                    break

    if best_state is not None:
        model.load_state(best_state)
    else:
        history.best_epoch = len(history.records) - 1
    logger.info(f"[CONVNET] Trained {len(history.records)} epochs, keeping epoch {history.best_epoch}")
    return model, history


def evaluate(model: ConvNetModel, ts: TrialSet) -> EvaluationResult:
    """Argmax accuracy and per-trial predictions."""
    probabilities, _ = model.forward(ts.trials)
    predictions = probabilities.argmax(axis=1).astype(np.int64)
    return EvaluationResult(accuracy=float(accuracy_score(ts.labels, predictions)),
                            predictions=predictions, probabilities=probabilities)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_convnet(model: ConvNetModel, path: PathLike, metadata: Optional[Dict[str, Any]] = None):
    meta = {"config": model.config.to_dict(), "seed": model.seed, "dtype": str(model.dtype), **(metadata or {})}
    return save_model_container(path, "convnet", meta, model.state_arrays())


def load_convnet(path: PathLike) -> Tuple[ConvNetModel, Dict[str, Any]]:
    kind, meta, arrays = load_model_container(path)
    if kind != "convnet":
        raise ConfigurationError(f"expected a convnet model, found {kind!r}")
    config = Deep4Config(**meta["config"])
    model = build(config, seed=int(meta["seed"]), dtype=np.dtype(meta.get("dtype", "float32")))
    model.load_state(arrays)
    return model, meta


def history_to_csv(history: TrainingHistory, path: PathLike):
    return write_csv(history.to_frame(), path)
