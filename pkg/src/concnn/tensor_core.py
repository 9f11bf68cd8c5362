"""Dense tensor operations for the Con-CNN branches.

Every layer the network needs is implemented here as a pure forward function
returning ``(output, LayerCache)`` plus a matching backward function that
consumes the cache. Convolution is cross-correlation (no kernel flip).
All functions accept a single sample (channel-first) or a leading batch axis.

Tests run at float64; training may use float32 for throughput.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

# A tensor is a dense row-major float array.
Tensor = np.ndarray


@dataclass
class LayerCache:
    """Forward-pass state consumed by exactly one matching backward call."""

    op: str
    saved: dict[str, Any] = field(default_factory=dict)

    def expect(self, op: str) -> None:
        if self.op != op:
            raise ValueError(
                f"cache mismatch: backward for {op!r} got cache from {self.op!r}"
            )


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    """Promote a single sample to a batch of one; report whether it was single."""
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ValueError(f"expected a rank-{rank} or rank-{rank + 1} tensor, got shape {x.shape}")


def _im2col(xp: Tensor, kh: int, kw: int, stride: int) -> tuple[Tensor, int, int]:
    """Unfold padded maps (N,C,H,W) into a (N*ho*wo, C*kh*kw) matrix."""
    n, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return windows.reshape(n * ho * wo, c * kh * kw), ho, wo


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Tensor,
    padding: int = 1,
    stride: int = 1,
) -> tuple[Tensor, LayerCache]:
    """3x3 cross-correlation, ``out[o] = bias[o] + sum_c x[c] * kernels[o, c]``.

    ``x`` is (C,H,W) or (N,C,H,W); output spatial size is
    ``(H + 2*padding - 3) // stride + 1`` and must be an exact division.
    """
    xb, single = _batched(x, 3)
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ValueError(f"kernels must be (C_out, C_in, 3, 3), got {kernels.shape}")
    n, c, h, w = xb.shape
    c_out, c_in = kernels.shape[:2]
    if c != c_in:
        raise ValueError(f"input has {c} channels but kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias must be ({c_out},), got {bias.shape}")
    if padding not in (0, 1):
        raise ValueError(f"padding must be 0 or 1, got {padding}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    span_h = h + 2 * padding - 3
    span_w = w + 2 * padding - 3
    if span_h < 0 or span_w < 0:
        raise ValueError(f"input {h}x{w} too small for a 3x3 kernel at padding {padding}")
    if span_h % stride or span_w % stride:
        raise ValueError(
            f"stride {stride} does not evenly cover input {h}x{w} at padding {padding}"
        )

    if padding:
        xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xb
    cols, ho, wo = _im2col(xp, 3, 3, stride)
    out = cols @ kernels.reshape(c_out, -1).T
    out += bias
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    cache = LayerCache(
        "conv2d",
        {
            "xp_shape": xp.shape,
            "cols": cols,
            "kernels": kernels,
            "padding": padding,
            "stride": stride,
            "in_shape": xb.shape,
            "out_shape": out.shape,
            "single": single,
        },
    )
    return (out[0] if single else out), cache


def conv2d_backward(
    grad_out: Tensor, cache: LayerCache, need_input_grad: bool = True
) -> tuple[Tensor | None, Tensor, Tensor]:
    """Gradients of conv2d w.r.t. input, kernels and bias.

    ``need_input_grad=False`` skips the input gradient (returned as None);
    the first layer of a network has no upstream consumer for it, and the
    column scatter it requires is the most expensive part of the backward
    pass.
    """
    cache.expect("conv2d")
    s = cache.saved
    gb_out, _ = _batched(grad_out, 3)
    if gb_out.shape != s["out_shape"]:
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match forward output {s['out_shape']}"
        )
    kernels = s["kernels"]
    stride, padding = s["stride"], s["padding"]
    n, c, h, w = s["in_shape"]
    c_out = kernels.shape[0]
    _, _, ho, wo = s["out_shape"]

    g_mat = gb_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
    grad_bias = g_mat.sum(axis=0)
    grad_kernels = (g_mat.T @ s["cols"]).reshape(kernels.shape)
    if not need_input_grad:
        return None, grad_kernels, grad_bias

    g_cols = (g_mat @ kernels.reshape(c_out, -1)).reshape(n, ho, wo, c, 3, 3)
    gxp = np.zeros(s["xp_shape"], dtype=gb_out.dtype)
    for a in range(3):
        for b in range(3):
            gxp[:, :, a : a + ho * stride : stride, b : b + wo * stride : stride] += (
                g_cols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            )
    grad_input = gxp[:, :, padding : padding + h, padding : padding + w]
    if s["single"]:
        grad_input = grad_input[0]
    return grad_input, grad_kernels, grad_bias


def maxpool2(x: Tensor) -> tuple[Tensor, LayerCache]:
    """2x2 max pooling with stride 2; spatial dims must be even.

    The cache records the argmax inside each window in row-major window
    order ((0,0), (0,1), (1,0), (1,1)); ties keep the first position.
    """
    xb, single = _batched(x, 3)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = xb.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    cache = LayerCache(
        "maxpool2",
        {"idx": idx, "in_shape": xb.shape, "single": single},
    )
    return (out[0] if single else out), cache


def maxpool2_backward(grad_out: Tensor, cache: LayerCache) -> Tensor:
    """Route gradient to each window's argmax position; zeros elsewhere."""
    cache.expect("maxpool2")
    s = cache.saved
    gb, _ = _batched(grad_out, 3)
    n, c, h, w = s["in_shape"]
    ho, wo = h // 2, w // 2
    if gb.shape != (n, c, ho, wo):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match pooled output ({c},{ho},{wo})"
        )
    g_windows = np.zeros((n, c, ho, wo, 4), dtype=gb.dtype)
    np.put_along_axis(g_windows, s["idx"][..., None], gb[..., None], axis=-1)
    gx = g_windows.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return gx[0] if s["single"] else gx


def relu(x: Tensor) -> tuple[Tensor, LayerCache]:
    """Elementwise max(0, x)."""
    out = np.maximum(x, 0)
    return out, LayerCache("relu", {"mask": x > 0})


def relu_backward(grad_out: Tensor, cache: LayerCache) -> Tensor:
    """Pass gradient where the input was strictly positive."""
    cache.expect("relu")
    mask = cache.saved["mask"]
    if grad_out.shape != mask.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match input {mask.shape}")
    return grad_out * mask


def fully_connected(x: Tensor, weights: Tensor, bias: Tensor) -> tuple[Tensor, LayerCache]:
    """Affine map ``weights @ x + bias``; ``x`` is (N,) or batched (B,N)."""
    xb, single = _batched(x, 1)
    m, n = weights.shape
    if xb.shape[1] != n:
        raise ValueError(f"input of size {xb.shape[1]} does not match weights {weights.shape}")
    if bias.shape != (m,):
        raise ValueError(f"bias must be ({m},), got {bias.shape}")
    out = xb @ weights.T + bias
    cache = LayerCache("fully_connected", {"x": xb, "weights": weights, "single": single})
    return (out[0] if single else out), cache


def fully_connected_backward(
    grad_out: Tensor, cache: LayerCache
) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of the affine map w.r.t. input, weights and bias."""
    cache.expect("fully_connected")
    s = cache.saved
    gb, _ = _batched(grad_out, 1)
    weights = s["weights"]
    if gb.shape != (s["x"].shape[0], weights.shape[0]):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match output")
    grad_input = gb @ weights
    grad_weights = gb.T @ s["x"]
    grad_bias = gb.sum(axis=0)
    if s["single"]:
        grad_input = grad_input[0]
    return grad_input, grad_weights, grad_bias


def sigmoid(x: Tensor) -> tuple[Tensor, LayerCache]:
    """Elementwise logistic function, computed overflow-free."""
    out = np.exp(-np.logaddexp(0.0, -x))
    return out, LayerCache("sigmoid", {"out": out})


def sigmoid_backward(grad_out: Tensor, cache: LayerCache) -> Tensor:
    cache.expect("sigmoid")
    s = cache.saved["out"]
    if grad_out.shape != s.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match input {s.shape}")
    return grad_out * s * (1.0 - s)


def softmax(logits: Tensor) -> Tensor:
    """Probability vector over the last axis, max-subtracted for stability."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(dist: Tensor, true_class: int) -> tuple[float, Tensor]:
    """Negative log-likelihood of ``true_class`` under a softmax distribution.

    Returns the loss and its gradient with respect to the logits that
    produced ``dist`` (``dist - one_hot``). A zero probability at the true
    class is clamped to 1e-12 and flagged with a warning.
    """
    if dist.ndim != 1:
        raise ValueError(f"expected a probability vector, got shape {dist.shape}")
    if not 0 <= true_class < dist.shape[0]:
        raise ValueError(f"true_class {true_class} out of range for {dist.shape[0]} classes")
    p = dist[true_class]
    if p <= 0.0:
        warnings.warn(
            f"probability of true class {true_class} is {p}; clamping to 1e-12",
            RuntimeWarning,
            stacklevel=2,
        )
        p = 1e-12
    loss = -float(np.log(p))
    grad_logits = dist.copy()
    grad_logits[true_class] -= 1.0
    return loss, grad_logits


def softmax_cross_entropy_batch(logits: Tensor, labels: Tensor) -> tuple[float, Tensor]:
    """Mean softmax cross-entropy over a batch of logits rows.

    Returns the mean loss and the gradient w.r.t. ``logits`` (already
    divided by the batch size).
    """
    if logits.ndim != 2:
        raise ValueError(f"expected (batch, classes) logits, got shape {logits.shape}")
    probs = softmax(logits)
    b = logits.shape[0]
    p_true = probs[np.arange(b), labels]
    if np.any(p_true <= 0.0):
        warnings.warn("zero probability at a true class; clamping to 1e-12", RuntimeWarning)
        p_true = np.maximum(p_true, 1e-12)
    loss = -float(np.log(p_true).mean())
    grad = probs
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad


def sgd_step(
    params: list[Tensor],
    grads: list[Tensor],
    learning_rate: float,
    momentum: float = 0.0,
    velocities: list[Tensor] | None = None,
) -> None:
    """In-place SGD update, optionally with classical momentum.

    With ``momentum`` zero this is ``p -= lr * g``. Otherwise ``velocities``
    must hold one buffer per parameter (updated in place) and the update is
    ``v = momentum * v - lr * g; p += v``.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if momentum and velocities is None:
        raise ValueError("momentum updates need velocity buffers")
    if velocities is not None and len(velocities) != len(params):
        raise ValueError(f"{len(params)} parameters but {len(velocities)} velocities")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter shape {p.shape} does not match gradient {g.shape}")
        if momentum:
            v = velocities[i]
            v *= momentum
            v -= learning_rate * g
            p += v
        else:
            p -= learning_rate * g


def grad_check(
    forward: Callable[..., tuple[Tensor, LayerCache]],
    backward: Callable[[Tensor, LayerCache], Any],
    inputs: tuple[Tensor, ...],
    epsilon: float = 1e-6,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central finite-difference grads.

    The forward output is scalarized as ``loss = sum(out * r)`` with a fixed
    random ``r``, so the analytic gradients are ``backward(r, cache)``. Every
    element of every input is perturbed by +/-epsilon. Inputs must be float64
    for the differences to be meaningful. Elements where both gradients are
    below 1e-9 in magnitude count as exact (zero error).
    """
    if not 1e-7 <= epsilon <= 1e-5:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-5], got {epsilon}")
    out, cache = forward(*inputs)
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(out.shape)
    analytic = backward(r, cache)
    if isinstance(analytic, np.ndarray):
        analytic = (analytic,)

    def loss() -> float:
        return float(np.sum(forward(*inputs)[0] * r))

    max_err = 0.0
    for x, g in zip(inputs, analytic):
        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = x[i]
            x[i] = orig + epsilon
            lp = loss()
            x[i] = orig - epsilon
            lm = loss()
            x[i] = orig
            numeric = (lp - lm) / (2.0 * epsilon)
            ana = float(g[i])
            denom = max(abs(ana), abs(numeric))
            if denom < 1e-9:
                continue
            max_err = max(max_err, abs(ana - numeric) / denom)
    return max_err
