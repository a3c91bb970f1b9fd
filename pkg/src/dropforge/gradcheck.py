"""Finite-difference verification of analytic gradients.

``grad_check`` probes a scalar-valued tensor function at sampled
coordinates and reports the worst relative error between the recorded
backward pass and central finite differences.  ``check_operations`` runs
the whole per-op and end-to-end table used by the ``gradcheck`` CLI
subcommand and the acceptance suite.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, recording, zero_grads


def _rel_err(analytic: float, fd: float) -> float:
    return abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)


def randomize_biases(params: dict[str, Tensor], seed: int = 0,
                     scale: float = 0.2) -> None:
    """Move bias tensors off zero before finite-difference probing.

    Zero biases park many relu pre-activations exactly on the kink, where
    central differences straddle the nondifferentiable point; small random
    biases put the network at a generic, differentiable state.
    """
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        if name.endswith(".b"):
            p.data = rng.uniform(-scale, scale, size=p.data.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               samples: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-FD gradients of ``f``.

    ``f`` must be scalar-valued and deterministic.  All coordinates are
    probed unless ``samples`` caps them (sampled without replacement).
    """
    x.grad = None
    with recording():
        out = f(x)
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    idxs = np.arange(flat.size)
    if samples is not None and samples < flat.size:
        gen = rng if rng is not None else np.random.default_rng(0)
        idxs = gen.choice(flat.size, size=samples, replace=False)

    worst = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(x).item()
        flat[i] = orig - eps
        f_minus = f(x).item()
        flat[i] = orig
        fd = (f_plus - f_minus) / (2.0 * eps)
        worst = max(worst, _rel_err(float(analytic.reshape(-1)[i]), fd))
    return worst


def grad_check_params(f: Callable[[], Tensor], params: Sequence[Tensor],
                      eps: float = 1e-5, samples_per_param: int = 10,
                      seed: int = 0) -> float:
    """FD-check a closure's gradient w.r.t. every parameter tensor.

    Probes ``samples_per_param`` random coordinates of each parameter.
    """
    rng = np.random.default_rng(seed)
    zero_grads(params)
    with recording():
        out = f()
    out.backward()

    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        count = min(samples_per_param, flat.size)
        idxs = rng.choice(flat.size, size=count, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            worst = max(worst, _rel_err(float(analytic.reshape(-1)[i]), fd))
    zero_grads(params)
    return worst


def _op_cases(seed: int) -> dict[str, tuple[Callable[[Tensor], Tensor], Tensor]]:
    """Scalar-valued probes for each differentiable primitive."""
    rng = np.random.default_rng(seed)
    a34 = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b34 = Tensor(rng.normal(size=(3, 4)))
    b14 = Tensor(rng.normal(size=(1, 4)))
    m45 = Tensor(rng.normal(size=(4, 5)))
    img = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
    img7 = Tensor(rng.normal(size=(2, 7, 7)), requires_grad=True)
    ker = Tensor(rng.normal(size=(3, 2, 3, 3)))
    prob = Tensor(rng.uniform(0.05, 0.95, size=(3, 4)), requires_grad=True)
    tgt = Tensor(rng.integers(0, 2, size=(3, 4)).astype(float))
    w35 = Tensor(rng.normal(size=(3, 5)))

    return {
        "add": (lambda x: T.tsum(T.mul(T.add(x, b34), b34)), a34),
        "add_broadcast": (lambda x: T.tsum(T.mul(T.add(x, b14), b34)), a34),
        "mul": (lambda x: T.tsum(T.mul(T.mul(x, b34), b34)), a34),
        "scale": (lambda x: T.tsum(T.scale(x, 1.7)), a34),
        "sigmoid": (lambda x: T.tsum(T.mul(T.sigmoid(x), b34)), a34),
        "relu": (lambda x: T.tsum(T.mul(T.relu(x), b34)), a34),
        "log": (lambda x: T.tsum(T.log(x)), prob),
        "matmul": (lambda x: T.tsum(T.mul(T.matmul(x, m45),
                                          Tensor(np.ones((3, 5))))), a34),
        "conv2d": (lambda x: T.tsum(T.conv2d(x, ker, stride=1, padding=1)), img),
        "conv2d_strided": (lambda x: T.tsum(T.conv2d(x, ker, stride=2,
                                                     padding=1)), img7),
        "softmax": (lambda x: T.tsum(T.mul(T.softmax(x, axis=1), b34)), a34),
        "reshape": (lambda x: T.tsum(T.mul(T.reshape(x, (4, 3)),
                                           Tensor(np.ones((4, 3))))), a34),
        "permute": (lambda x: T.tsum(T.mul(T.permute(x, (1, 0)),
                                           Tensor(np.ones((4, 3))))), a34),
        "concat": (lambda x: T.tsum(T.mul(T.concat([x, x], axis=0),
                                          Tensor(np.ones((6, 4))))), a34),
        "narrow": (lambda x: T.tsum(T.narrow(x, 1, 1, 2)), a34),
        "upsample": (lambda x: T.tsum(T.mul(
            T.upsample_nearest2x(x), Tensor(np.ones((2, 12, 12))))), img),
        "mean": (lambda x: T.tmean(T.mul(x, b34)), a34),
        "sum": (lambda x: T.tsum(T.mul(x, b34)), a34),
        "mse": (lambda x: T.mse(x, b34), a34),
        "l1": (lambda x: T.l1(x, b34), a34),
        "bce": (lambda x: T.bce(x, tgt), prob),
        "conv2d+mse": (lambda x: T.mse(T.conv2d(x, ker, padding=1),
                                       Tensor(np.ones((3, 6, 6)))), img),
        "softmax+matmul": (lambda x: T.tsum(T.mul(
            T.softmax(T.matmul(x, m45), axis=1), w35)), a34),
    }


def check_operations(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Relative-error table over every differentiable primitive."""
    return {name: grad_check(f, x, eps=eps)
            for name, (f, x) in _op_cases(seed).items()}
