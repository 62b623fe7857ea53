"""Hidden-weight consolidation.

The update rule treats the hidden real weight as a consolidation state:
whenever the applied change -eta*U would push a weight toward a sign
switch (U*W_h > 0), the change is attenuated by f_meta(m, W_h) =
1 - tanh^2(m*W_h), which decays exponentially in |W_h|. Changes that grow
the magnitude are applied in full. m = 0 reduces to the plain update
exactly (f_meta is identically 1), a property the tests pin down at the
trajectory level.
"""

from dataclasses import dataclass

import numpy as np

from . import backend
from .nn import NumericError, AdamState, adam_direction, backward, forward


@dataclass(frozen=True)
class MetaConfig:
    m: float              # consolidation strength, >= 0
    eta: float            # hidden-weight learning rate, > 0
    eta_bn: float = None  # normalization-parameter learning rate (default eta)
    update_rule: str = "adam"  # source of U_W: "adam" direction or "sgd" (raw gradient)

    def __post_init__(self):
        if not (self.m >= 0):
            raise ValueError(f"consolidation strength m must be >= 0, got {self.m}")
        if not (self.eta > 0):
            raise ValueError(f"learning rate eta must be > 0, got {self.eta}")
        if self.eta_bn is None:
            object.__setattr__(self, "eta_bn", self.eta)
        elif not (self.eta_bn > 0):
            raise ValueError(f"eta_bn must be > 0, got {self.eta_bn}")
        if self.update_rule not in ("adam", "sgd"):
            raise ValueError(f"update_rule must be 'adam' or 'sgd', got {self.update_rule!r}")


def f_meta(m, w):
    """Attenuation factor 1 - tanh^2(m*w), in (0, 1], even in w,
    strictly decreasing in |w| for m > 0."""
    th = np.tanh(m * np.asarray(w, dtype=float))
    out = 1.0 - th * th
    return out if out.ndim else float(out)


def metaplastic_step(wh, u, cfg: MetaConfig):
    """Apply one consolidated update in place and return wh.

    Elementwise: wh -= eta*u*f_meta(m, wh) where u*wh > 0, else
    wh -= eta*u. The factor is evaluated at the pre-update wh, and the
    u*wh == 0 boundary takes the plain branch.
    """
    if wh.shape != u.shape:
        raise ValueError(f"shape mismatch: {wh.shape} vs {u.shape}")
    if not np.isfinite(wh).all() or not np.isfinite(u).all():
        raise NumericError("non-finite values in metaplastic_step inputs")
    backend.metaplastic_update(wh, np.ascontiguousarray(u), cfg.m, cfg.eta)
    return wh


@dataclass
class TrainState:
    """Per-parameter Adam moments for one model."""
    wh: list
    gamma: list
    beta: list

    @classmethod
    def for_model(cls, model, adam_eps=None):
        def state(param, eps):
            s = AdamState.for_param(param)
            if eps is not None:
                s.eps = eps
            return s
        # the epsilon floor applies to the hidden weights only: it damps
        # noise-driven drift of low-signal weights; the few normalization
        # parameters keep the conventional floor
        return cls(
            wh=[state(l.wh, adam_eps) for l in model.layers],
            gamma=[state(l.bn_gamma, None) for l in model.layers],
            beta=[state(l.bn_beta, None) for l in model.layers],
        )


def train_step(model, batch, labels, opt: TrainState, cfg: MetaConfig,
               grad_hook=None):
    """One minibatch step: forward, backward, Adam directions, consolidated
    update on every W_h, plain update on the normalization parameters.

    `grad_hook(model, grads)` may adjust gradients in place before the
    optimizer runs (the EWC penalty uses this). Returns the batch loss.
    """
    _, cache = forward(model, batch, mode="train")
    grads = backward(model, cache, labels)
    if not np.isfinite(grads.loss):
        raise NumericError("training loss is not finite")
    if grad_hook is not None:
        grad_hook(model, grads)
    for k, layer in enumerate(model.layers):
        if cfg.update_rule == "adam":
            u = adam_direction(grads.dwh[k], opt.wh[k])
        else:
            u = grads.dwh[k]
        metaplastic_step(layer.wh, u, cfg)
        ug = adam_direction(grads.dgamma[k], opt.gamma[k])
        backend.plain_update(layer.bn_gamma, ug, cfg.eta_bn)
        ub = adam_direction(grads.dbeta[k], opt.beta[k])
        backend.plain_update(layer.bn_beta, ub, cfg.eta_bn)
    return grads.loss
