"""Per-sample time derivatives of batched tensor functions.

The schedule maps a batch of times ``t`` of shape ``(B,)`` to an array of
shape ``(B, ...)`` in which every element depends only on its own sample's
time. Under that structure the full Jacobian collapses to one directional
derivative, which we extract with a forward-over-reverse pass so the result
stays differentiable with respect to any parameters captured by ``fn``.
"""

from __future__ import annotations

from typing import Callable

import torch

TimeFunction = Callable[[torch.Tensor], torch.Tensor]


def elementwise_time_grad(out: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """d(out)/dt, element by element, for out of shape (B, ...) and t of shape (B,).

    Equivalent to the JVP of the producing function with an all-ones tangent,
    implemented as a double vector-Jacobian product so it works with plain
    autograd graphs. The result carries a graph (``create_graph=True``), so it
    can be differentiated again or enter a training loss.
    """
    if not t.requires_grad:
        raise ValueError("t must require grad to differentiate through it")
    dummy = torch.zeros_like(out, requires_grad=True)
    vjp = torch.autograd.grad(out, t, grad_outputs=dummy, create_graph=True)[0]
    jvp = torch.autograd.grad(
        vjp, dummy, grad_outputs=torch.ones_like(vjp), create_graph=True
    )[0]
    return jvp


def time_derivative(fn: TimeFunction, t: torch.Tensor, order: int = 1) -> torch.Tensor:
    """Evaluate the order-th time derivative of ``fn`` at ``t`` by nested autodiff.

    ``fn`` must map times (B,) to a tensor (B, ...) whose elements each depend
    only on the matching sample time.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    t = t if t.requires_grad else t.detach().clone().requires_grad_(True)
    out = fn(t)
    for _ in range(order):
        out = elementwise_time_grad(out, t)
    return out


def time_derivative_fd(
    fn: TimeFunction, t: torch.Tensor, order: int = 1, step: float = 1e-3
) -> torch.Tensor:
    """Central-difference fallback for the same derivatives, graph-free.

    Shifted evaluation points are clamped into [0, 1] only by the caller;
    here we evaluate wherever asked, so callers near the boundary should
    choose ``step`` accordingly.
    """
    with torch.no_grad():
        if order == 1:
            return (fn(t + step) - fn(t - step)) / (2.0 * step)
        if order == 2:
            return (fn(t + step) - 2.0 * fn(t) + fn(t - step)) / step**2
    raise ValueError("finite differences implemented for orders 1 and 2 only")
