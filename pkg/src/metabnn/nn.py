"""Binarized multilayer perceptrons trained through hidden real weights.

Layers compute sign(BN(W_b @ x)) with W_b = sign(W_h); the output layer
omits the final sign. Gradients flow through both sign functions with
straight-through surrogates: identity for the weight binarization,
a |y| <= 1 window (hardtanh derivative) for the activation. Hidden weights
are never clipped — their unbounded growth is the consolidation signal the
rest of the package is built around.

Default precision is float32; pass dtype=numpy.float64 to `BnnModel.create`
for gradient-check work.
"""

from dataclasses import dataclass, field

import numpy as np

from . import backend

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

INIT_SALT = 201


class NumericError(RuntimeError):
    """A tensor left the finite-real domain (NaN or Inf)."""


def _require_finite(name, a):
    if not np.isfinite(a).all():
        raise NumericError(f"non-finite values in {name}")


def binarize(w: np.ndarray) -> np.ndarray:
    """Elementwise sign into {-1, +1}, with sign(0) = +1."""
    w = np.asarray(w)
    _require_finite("binarize input", w)
    return backend.binarize(np.ascontiguousarray(w))


def hardtanh(y: np.ndarray) -> np.ndarray:
    return np.clip(y, -1.0, 1.0)


@dataclass
class BinaryLinearLayer:
    wh: np.ndarray            # hidden real weights [fan_out, fan_in]
    bn_gamma: np.ndarray      # [fan_out]
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray

    @property
    def fan_in(self) -> int:
        return self.wh.shape[1]

    @property
    def fan_out(self) -> int:
        return self.wh.shape[0]

    @classmethod
    def initialize(cls, fan_in, fan_out, rng, dtype=np.float32):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        wh = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
        return cls(
            wh=wh,
            bn_gamma=np.ones(fan_out, dtype=dtype),
            bn_beta=np.zeros(fan_out, dtype=dtype),
            bn_running_mean=np.zeros(fan_out, dtype=dtype),
            bn_running_var=np.ones(fan_out, dtype=dtype),
        )


@dataclass
class BnnModel:
    sizes: tuple
    layers: list
    dtype: np.dtype

    @classmethod
    def create(cls, sizes, seed, dtype=np.float32):
        """Build a model with chained layer dimensions, e.g. (784, 512, 512, 10)."""
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"bad layer sizes {sizes}")
        rng = np.random.default_rng([seed, INIT_SALT])
        layers = [
            BinaryLinearLayer.initialize(sizes[k], sizes[k + 1], rng, dtype)
            for k in range(len(sizes) - 1)
        ]
        return cls(sizes=sizes, layers=layers, dtype=np.dtype(dtype))

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def hidden_weights(self):
        return [layer.wh for layer in self.layers]

    def save(self, path) -> None:
        arrays = {"sizes": np.asarray(self.sizes, dtype=np.int64)}
        for k, layer in enumerate(self.layers):
            arrays[f"l{k}_wh"] = layer.wh
            arrays[f"l{k}_gamma"] = layer.bn_gamma
            arrays[f"l{k}_beta"] = layer.bn_beta
            arrays[f"l{k}_rmean"] = layer.bn_running_mean
            arrays[f"l{k}_rvar"] = layer.bn_running_var
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            sizes = tuple(int(s) for s in data["sizes"])
            layers = []
            for k in range(len(sizes) - 1):
                layers.append(BinaryLinearLayer(
                    wh=data[f"l{k}_wh"],
                    bn_gamma=data[f"l{k}_gamma"],
                    bn_beta=data[f"l{k}_beta"],
                    bn_running_mean=data[f"l{k}_rmean"],
                    bn_running_var=data[f"l{k}_rvar"],
                ))
        return cls(sizes=sizes, layers=layers, dtype=layers[0].wh.dtype)


@dataclass
class LayerCache:
    x: np.ndarray         # layer input
    wb: np.ndarray        # weights used in the matmul (binarized unless surrogate)
    z: np.ndarray         # pre-normalization activations x @ wb.T
    xhat: np.ndarray      # normalized activations
    inv_std: np.ndarray   # 1/sqrt(var + eps) actually applied
    y: np.ndarray         # gamma * xhat + beta (logits for the last layer)


@dataclass
class ForwardCache:
    mode: str
    surrogate: bool
    layers: list = field(default_factory=list)
    logits: np.ndarray = None


def forward(model, batch, mode="train", wb_override=None, surrogate=False):
    """Run the network, returning (logits, cache).

    mode="train" normalizes with batch statistics and updates the running
    estimates; mode="eval" applies the stored running statistics.
    `wb_override` maps layer index -> weight matrix to use in place of
    sign(W_h) (used by the weight-flip study). `surrogate=True` swaps sign
    for identity on weights and hardtanh on activations, making the model
    differentiable for finite-difference validation.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.ascontiguousarray(np.asarray(batch, dtype=model.dtype))
    if x.ndim != 2 or x.shape[1] != model.sizes[0]:
        raise ValueError(
            f"batch shape {x.shape} incompatible with input size {model.sizes[0]}"
        )
    batch_n = x.shape[0]
    cache = ForwardCache(mode=mode, surrogate=surrogate)

    for k, layer in enumerate(model.layers):
        if wb_override is not None and k in wb_override:
            wb = wb_override[k]
        elif surrogate:
            wb = layer.wh
        else:
            wb = backend.binarize(layer.wh)
        z = x @ wb.T

        if mode == "train":
            mean = z.mean(axis=0)
            var = z.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mean) * inv_std
            if batch_n > 1:
                var_running = var * (batch_n / (batch_n - 1.0))
            else:
                var_running = var
            layer.bn_running_mean *= 1.0 - BN_MOMENTUM
            layer.bn_running_mean += BN_MOMENTUM * mean
            layer.bn_running_var *= 1.0 - BN_MOMENTUM
            layer.bn_running_var += BN_MOMENTUM * var_running
        else:
            inv_std = 1.0 / np.sqrt(layer.bn_running_var + BN_EPS)
            xhat = (z - layer.bn_running_mean) * inv_std
        y = layer.bn_gamma * xhat + layer.bn_beta

        cache.layers.append(LayerCache(x=x, wb=wb, z=z, xhat=xhat,
                                       inv_std=inv_std, y=y))
        if k < model.n_layers - 1:
            x = hardtanh(y) if surrogate else backend.binarize(y)
        else:
            x = y

    cache.logits = x
    return x, cache


def softmax_cross_entropy(logits, labels, mean_grad=True):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    Gradient rows are (softmax - onehot)/B, so each row sums to zero.
    With mean_grad=False the division by B is skipped and row i is example
    i's own gradient (the loss returned is still the mean).
    """
    labels = np.asarray(labels)
    batch_n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    norm = expz.sum(axis=1, keepdims=True)
    rows = np.arange(batch_n)
    log_p_true = shifted[rows, labels] - np.log(norm[:, 0])
    loss = float(-log_p_true.mean())
    dlogits = expz / norm
    dlogits[rows, labels] -= 1.0
    if mean_grad:
        dlogits /= batch_n
    return loss, dlogits


@dataclass
class Gradients:
    loss: float
    dwh: list
    dgamma: list
    dbeta: list


def _bn_backward(layer, lc, dy, mode):
    """Gradient through the normalization, returning (dz, dgamma, dbeta)."""
    dgamma = (dy * lc.xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * layer.bn_gamma
    if mode == "train":
        batch_n = dy.shape[0]
        s1 = dxhat.sum(axis=0)
        s2 = (dxhat * lc.xhat).sum(axis=0)
        dz = (lc.inv_std / batch_n) * (batch_n * dxhat - s1 - lc.xhat * s2)
    else:
        # running statistics are constants: the map is affine per feature
        dz = dxhat * lc.inv_std
    return dz, dgamma, dbeta


def _backward_signals(model, cache, labels, reduce_mean=True):
    """Shared backward pass.

    Returns (loss, signals) where signals[k] = (dz_k, dgamma_k, dbeta_k);
    the weight gradient of layer k is dz_k.T @ x_k. With reduce_mean=False
    the logit gradient is not divided by the batch size, so row i of dz_k
    is example i's own gradient signal (only meaningful in eval mode, where
    normalization does not couple examples).
    """
    loss, dy = softmax_cross_entropy(cache.logits, labels,
                                     mean_grad=reduce_mean)
    signals = [None] * model.n_layers
    for k in range(model.n_layers - 1, -1, -1):
        layer = model.layers[k]
        lc = cache.layers[k]
        if k < model.n_layers - 1:
            # gradient through sign / hardtanh on the BN output
            dy = backend.hardtanh_gate(np.ascontiguousarray(dy), lc.y)
        dz, dgamma, dbeta = _bn_backward(layer, lc, dy, cache.mode)
        signals[k] = (dz, dgamma, dbeta)
        if k > 0:
            dy = dz @ lc.wb
    return loss, signals


def backward(model, cache, labels):
    """Gradients of the mean cross-entropy w.r.t. W_h, gamma and beta.

    Requires a train-mode cache for the same batch: eval-mode normalization
    backward has different semantics and is rejected here.
    """
    if cache.mode != "train":
        raise ValueError("backward requires a train-mode forward cache")
    loss, signals = _backward_signals(model, cache, labels)
    grads = Gradients(loss=loss, dwh=[], dgamma=[], dbeta=[])
    for k in range(model.n_layers):
        dz, dgamma, dbeta = signals[k]
        grads.dwh.append(dz.T @ cache.layers[k].x)
        grads.dgamma.append(dgamma)
        grads.dbeta.append(dbeta)
    return grads


@dataclass
class AdamState:
    m1: np.ndarray
    m2: np.ndarray
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_param(cls, param):
        return cls(m1=np.zeros_like(param), m2=np.zeros_like(param))


def adam_direction(grad, state):
    """Bias-corrected Adam direction m1hat/(sqrt(m2hat)+eps), no learning
    rate; advances the moment state by one step."""
    if grad.shape != state.m1.shape:
        raise ValueError(
            f"gradient shape {grad.shape} does not match state {state.m1.shape}"
        )
    state.t += 1
    return backend.adam_step(state.m1, state.m2, np.ascontiguousarray(grad),
                             state.t, state.beta1, state.beta2, state.eps)


def forward_batch_stats(model, batch, wb_override=None):
    """Forward pass normalizing by the batch's own statistics without
    touching the stored running estimates (boundary-free evaluation:
    deterministic for a fixed batch, no task identity involved)."""
    x = np.ascontiguousarray(np.asarray(batch, dtype=model.dtype))
    if x.ndim != 2 or x.shape[1] != model.sizes[0]:
        raise ValueError(
            f"batch shape {x.shape} incompatible with input size {model.sizes[0]}"
        )
    for k, layer in enumerate(model.layers):
        if wb_override is not None and k in wb_override:
            wb = wb_override[k]
        else:
            wb = backend.binarize(layer.wh)
        z = x @ wb.T
        inv_std = 1.0 / np.sqrt(z.var(axis=0) + BN_EPS)
        y = layer.bn_gamma * ((z - z.mean(axis=0)) * inv_std) + layer.bn_beta
        x = backend.binarize(y) if k < model.n_layers - 1 else y
    return x


def evaluate(model, images, labels, batch_size=1000, bn="running"):
    """Top-1 accuracy. bn="running" applies the stored statistics
    (eval-mode forward); bn="batch" normalizes each evaluation chunk by its
    own statistics."""
    if bn not in ("running", "batch"):
        raise ValueError(f"bn must be 'running' or 'batch', got {bn!r}")
    correct = 0
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        if bn == "running":
            logits, _ = forward(model, chunk, mode="eval")
        else:
            logits = forward_batch_stats(model, chunk)
        correct += int((logits.argmax(axis=1) ==
                        labels[start:start + batch_size]).sum())
    return correct / len(images)
