"""Optimizers, learning-rate schedules and the L1 penalty."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ADAM_EPS = 1e-8


@dataclass
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    # kind-specific: adam(beta1, beta2); sgd(momentum); rmsprop(alpha, momentum, eps)
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "weight_decay": self.weight_decay,
                "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerSpec":
        return cls(d["kind"], d["lr"], d.get("weight_decay", 0.0), dict(d.get("params", {})))


@dataclass
class SchedulerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    @property
    def per_batch(self) -> bool:
        return self.kind in ("cyclic", "one_cycle")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict | None) -> "SchedulerSpec | None":
        if d is None:
            return None
        return cls(d["kind"], dict(d.get("params", {})))


class Optimizer:
    """Base class; subclasses implement :meth:`_update` for one parameter."""

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state: list[dict] = [{} for _ in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p, st in zip(self.params, self.state):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            p.data -= self._update(g, st)

    def _update(self, g: np.ndarray, st: dict) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr, weight_decay=0.0, momentum=0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum

    def _update(self, g, st):
        if self.momentum:
            buf = st.get("buf")
            buf = g.copy() if buf is None else self.momentum * buf + g
            st["buf"] = buf
            g = buf
        return self.lr * g


class Adam(Optimizer):
    def __init__(self, params, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=ADAM_EPS):
        super().__init__(params, lr, weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def _update(self, g, st):
        t = st.get("t", 0) + 1
        m = self.beta1 * st.get("m", 0.0) + (1 - self.beta1) * g
        v = self.beta2 * st.get("v", 0.0) + (1 - self.beta2) * g * g
        st.update(t=t, m=m, v=v)
        mhat = m / (1 - self.beta1 ** t)
        vhat = v / (1 - self.beta2 ** t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


class RMSprop(Optimizer):
    def __init__(self, params, lr, weight_decay=0.0, alpha=0.99, momentum=0.0, eps=1e-8):
        super().__init__(params, lr, weight_decay)
        self.alpha, self.momentum, self.eps = alpha, momentum, eps

    def _update(self, g, st):
        sq = self.alpha * st.get("sq", 0.0) + (1 - self.alpha) * g * g
        st["sq"] = sq
        step = g / (np.sqrt(sq) + self.eps)
        if self.momentum:
            buf = self.momentum * st.get("buf", 0.0) + step
            st["buf"] = buf
            step = buf
        return self.lr * step


def make_optimizer(spec: OptimizerSpec, params: Iterable[Tensor]) -> Optimizer:
    p = spec.params
    if spec.kind == "adam":
        return Adam(params, spec.lr, spec.weight_decay, p.get("beta1", 0.9), p.get("beta2", 0.999))
    if spec.kind == "sgd":
        return SGD(params, spec.lr, spec.weight_decay, p.get("momentum", 0.0))
    if spec.kind == "rmsprop":
        return RMSprop(params, spec.lr, spec.weight_decay, p.get("alpha", 0.99),
                       p.get("momentum", 0.0), p.get("eps", 1e-8))
    raise ValueError(f"unknown optimizer {spec.kind!r}")


# -- schedules ---------------------------------------------------------------------

def step_lr(lr0, e, step_size, gamma):
    return lr0 * gamma ** (e // step_size)


def exponential_lr(lr0, e, gamma):
    return lr0 * gamma ** e


def polynomial_lr(lr0, e, total_iters, power):
    return lr0 * (1.0 - min(e, total_iters) / total_iters) ** power


def cosine_lr(lr0, e, t_max, eta_min):
    return eta_min + (lr0 - eta_min) * (1.0 + math.cos(math.pi * e / t_max)) / 2.0


def cyclic_lr(s, base_lr, max_lr, step_size_up):
    """Triangular cycle: up over ``step_size_up`` steps, then down again."""
    cycle = math.floor(1 + s / (2 * step_size_up))
    x = abs(s / step_size_up - 2 * cycle + 1)
    return base_lr + (max_lr - base_lr) * max(0.0, 1.0 - x)


def one_cycle_lr(s, max_lr, total_steps, pct_start, div_factor=25.0, final_div_factor=1e4):
    """Linear warm-up from ``max_lr/div_factor`` then cosine decay to the floor."""
    initial = max_lr / div_factor
    floor = initial / final_div_factor
    warm = pct_start * total_steps
    if s <= warm:
        return initial + (max_lr - initial) * (s / warm if warm > 0 else 1.0)
    p = min(1.0, (s - warm) / max(total_steps - warm, 1e-12))
    return floor + (max_lr - floor) * (1.0 + math.cos(math.pi * p)) / 2.0


class Scheduler:
    """Tracks the learning rate for one training run.

    Epoch-stepped kinds advance through :meth:`epoch_end`; ``cyclic`` and
    ``one_cycle`` advance through :meth:`batch_end`. ``plateau`` needs the
    observed validation loss at every epoch end.
    """

    def __init__(self, spec: SchedulerSpec | None, lr0: float, batches_per_epoch: int = 1):
        self.spec = spec
        self.lr0 = lr0
        self.epoch = 0
        self.step = 0
        self.batches_per_epoch = batches_per_epoch
        self._lr = lr0
        self._best = math.inf
        self._bad = 0
        if spec is not None and spec.kind in ("cyclic", "one_cycle"):
            self._lr = self.lr_at(0, 0)

    @property
    def lr(self) -> float:
        return self._lr

    def lr_at(self, epoch: int = 0, step: int = 0) -> float:
        if self.spec is None:
            return self.lr0
        k, p = self.spec.kind, self.spec.params
        if k == "step":
            return step_lr(self.lr0, epoch, p["step_size"], p["gamma"])
        if k == "exponential":
            return exponential_lr(self.lr0, epoch, p["gamma"])
        if k == "polynomial":
            return polynomial_lr(self.lr0, epoch, p["total_iters"], p["power"])
        if k == "cosine":
            return cosine_lr(self.lr0, epoch, p["t_max"], p["eta_min"])
        if k == "cyclic":
            return cyclic_lr(step, p["base_lr"], p["max_lr"], p["step_size_up"])
        if k == "one_cycle":
            total = p.get("total_steps") or self.batches_per_epoch * 1000
            return one_cycle_lr(step, p["max_lr"], total, p["pct_start"])
        if k == "plateau":
            return self._lr
        raise ValueError(f"unknown scheduler {k!r}")

    def batch_end(self) -> float:
        self.step += 1
        if self.spec is not None and self.spec.per_batch:
            self._lr = self.lr_at(self.epoch, self.step)
        return self._lr

    def epoch_end(self, metric: float | None = None) -> float:
        self.epoch += 1
        if self.spec is None or self.spec.per_batch:
            return self._lr
        if self.spec.kind == "plateau":
            if metric is None:
                raise ValueError("plateau scheduling needs the validation loss")
            self._plateau(metric)
        else:
            self._lr = self.lr_at(self.epoch, self.step)
        return self._lr

    def _plateau(self, metric: float) -> None:
        p = self.spec.params
        if metric < self._best * (1.0 - p["threshold"]):
            self._best = metric
            self._bad = 0
            return
        self._bad += 1
        if self._bad >= p["patience"]:
            new = self._lr * p["factor"]
            if self._lr - new > p.get("eps", 1e-8):
                self._lr = new
            self._bad = 0


def l1_penalty(params: Iterable[Tensor], lam: float) -> Tensor:
    """``lam * sum |w|`` over the given weight tensors."""
    params = list(params)
    if lam == 0 or not params:
        return Tensor(0.0)
    total = None
    for p in params:
        s = ad.tabs(p).sum()
        total = s if total is None else total + s
    return ad.scale(total, lam)
