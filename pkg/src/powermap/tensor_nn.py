"""Dense/convolutional network kernels with exact reverse-mode gradients.

Everything runs in 64-bit numpy.  Each forward function has a matching
backward that returns exact analytic gradients; ``grad_check`` verifies any
differentiable fragment against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


def he_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """He-style uniform init for layers feeding ReLU."""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# convolution (stride 1, zero 'same' padding, cross-correlation)

def _pad_same(x: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + w] = x
    return xp


@njit(cache=True)
def _gather_cols(xp: np.ndarray, h: int, w: int, k: int) -> np.ndarray:
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n * h * w, c * k * k))
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                row = (ni * h + i) * w + j
                idx = 0
                for ci in range(c):
                    for p in range(k):
                        for q in range(k):
                            cols[row, idx] = xp[ni, ci, i + p, j + q]
                            idx += 1
    return cols


@njit(cache=True)
def _scatter_cols(g: np.ndarray, n: int, c: int, h: int, w: int, k: int) -> np.ndarray:
    pad = k // 2
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                row = (ni * h + i) * w + j
                idx = 0
                for ci in range(c):
                    for p in range(k):
                        for q in range(k):
                            dxp[ni, ci, i + p, j + q] += g[row, idx]
                            idx += 1
    return dxp[:, :, pad : pad + h, pad : pad + w]


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Contiguous (N*H*W, C*k*k) patch matrix for a 'same' convolution."""
    return _gather_cols(_pad_same(x, k // 2), x.shape[2], x.shape[3], k)


def _col2im(cols_grad: np.ndarray, x_shape: tuple[int, ...], k: int) -> np.ndarray:
    """Scatter-add im2col gradients back onto the (padded, then cropped) input."""
    n, c, h, w = x_shape
    return _scatter_cols(np.ascontiguousarray(cols_grad), n, c, h, w, k)


def _check_conv_shapes(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> None:
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"expected 4D input/kernels, got {x.shape} and {kernels.shape}")
    k_out, c_k, kh, kw = kernels.shape
    if kh != kw or kh % 2 != 1:
        raise ShapeError(f"kernel must be odd and square, got {kh}x{kw}")
    if c_k != x.shape[1] or bias.shape != (k_out,):
        raise ShapeError(
            f"expected kernels (K,{x.shape[1]},{kh},{kh}) and bias (K,), "
            f"got {kernels.shape} and {bias.shape}"
        )


def conv2d_cols(
    x: np.ndarray, kernels: np.ndarray, bias: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """conv2d that also returns the patch matrix for reuse in the backward."""
    _check_conv_shapes(x, kernels, bias)
    n, c, h, w = x.shape
    k_out = kernels.shape[0]
    cols = _im2col(x, kernels.shape[2])
    y = cols @ kernels.reshape(k_out, -1).T + bias
    return np.ascontiguousarray(y.reshape(n, h, w, k_out).transpose(0, 3, 1, 2)), cols


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x (N,C,H,W) * kernels (K,C,k,k) + bias (K,) -> (N,K,H,W)."""
    return conv2d_cols(x, kernels, bias)[0]


def conv2d_backward_cols(
    cols: np.ndarray,
    x_shape: tuple[int, ...],
    kernels: np.ndarray,
    dy: np.ndarray,
    need_dx: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of conv2d given the forward's patch matrix.

    ``need_dx=False`` skips the input gradient (for input layers).
    """
    n, c, h, w = x_shape
    k_out = kernels.shape[0]
    k = kernels.shape[2]
    dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * h * w, k_out)
    db = dy_mat.sum(axis=0)
    dw = (dy_mat.T @ cols).reshape(kernels.shape)
    dx = _col2im(dy_mat @ kernels.reshape(k_out, -1), x_shape, k) if need_dx else None
    return dx, dw, db


def conv2d_backward(
    x: np.ndarray, kernels: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. input, kernels, and bias."""
    if dy.shape[0] != x.shape[0] or dy.shape[1] != kernels.shape[0]:
        raise ShapeError(f"dy shape {dy.shape} inconsistent with conv {x.shape}->{kernels.shape}")
    return conv2d_backward_cols(_im2col(x, kernels.shape[2]), x.shape, kernels, dy)


# ---------------------------------------------------------------------------
# batch normalization over (N, H, W) per channel

def batchnorm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
):
    """Returns (y, cache, new_running_mean, new_running_var).

    Train mode normalizes with batch statistics (N >= 2 required) and decays
    the running statistics; infer mode normalizes with the running ones and
    leaves them untouched.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects (N,C,H,W), got {x.shape}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm train mode requires a batch of at least 2")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
        new_rm = momentum * running_mean + (1.0 - momentum) * mu
        new_rv = momentum * running_var + (1.0 - momentum) * var
        cache = ("train", xhat, inv_std, gamma)
    elif mode == "infer":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        new_rm, new_rv = running_mean, running_var
        cache = ("infer", xhat, inv_std, gamma)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, cache, new_rm, new_rv


def batchnorm_backward(cache, dy: np.ndarray):
    """Gradients (dx, dgamma, dbeta) for either batchnorm mode."""
    mode, xhat, inv_std, gamma = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if mode == "infer":
        dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta
    n, _, h, w = dy.shape
    m = n * h * w
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
    dx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - sum_dxhat[None, :, None, None]
        - xhat * sum_dxhat_xhat[None, :, None, None]
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# relu / average pooling / dense / loss

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0.0)


def avgpool2(x: np.ndarray) -> np.ndarray:
    """2x2 mean pooling with stride 2; a trailing odd row/column is dropped."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool2 expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"avgpool2 input {h}x{w} too small")
    xc = x[:, :, : h2 * 2, : w2 * 2]
    return xc.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))


def avgpool2_backward(x_shape: tuple[int, ...], dy: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    h2, w2 = h // 2, w // 2
    dx = np.zeros(x_shape)
    spread = np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) * 0.25
    dx[:, :, : h2 * 2, : w2 * 2] = spread
    return dx


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x (N,D) @ weights (D,U) + bias (U,)."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense shapes {x.shape} @ {weights.shape} inconsistent")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias {bias.shape} != ({weights.shape[1]},)")
    return x @ weights + bias


def dense_backward(x: np.ndarray, weights: np.ndarray, dy: np.ndarray):
    dw = x.T @ dy
    db = dy.sum(axis=0)
    dx = dy @ weights.T
    return dx, dw, db


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. pred."""
    if pred.shape != target.shape or pred.ndim != 1:
        raise ShapeError(f"mse_loss shapes {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float((diff * diff).mean())
    grad = 2.0 * diff / pred.size
    return loss, grad


# ---------------------------------------------------------------------------
# Nadam

@dataclass
class OptimizerState:
    """Nesterov-Adam state across steps; moments are shaped like the params."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step: int = 0
    learning_rate: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def nadam_init(
    params: list[np.ndarray],
    learning_rate: float = 0.002,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    return OptimizerState(
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        step=0,
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def nadam_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState
) -> tuple[list[np.ndarray], OptimizerState]:
    """One Nesterov-Adam update; returns new params and state.

    With t counting steps from 1:
        m <- b1*m + (1-b1)*g           v <- b2*v + (1-b2)*g^2
        theta <- theta - lr * (b1 * m/(1-b1^(t+1)) + (1-b1) * g/(1-b1^t))
                          / (sqrt(v/(1-b2^t)) + eps)
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params/grads/state length mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param shape {p.shape} != grad shape {g.shape}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** (t + 1))
        v_hat = v / (1.0 - b2**t)
        lookahead = b1 * m_hat + (1.0 - b1) * g / (1.0 - b1**t)
        new_params.append(p - state.learning_rate * lookahead / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = OptimizerState(
        first_moment=new_m,
        second_moment=new_v,
        step=t,
        learning_rate=state.learning_rate,
        beta1=b1,
        beta2=b2,
        eps=state.eps,
    )
    return new_params, new_state


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradCheckReport:
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_tensor.values()) if self.per_tensor else 0.0


def grad_check(
    loss_and_grads,
    params: dict[str, np.ndarray],
    *,
    rng: np.random.Generator,
    max_per_tensor: int = 200,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_and_grads(params)`` must return ``(loss, grads)`` with grads keyed
    like params.  At most ``max_per_tensor`` randomly chosen entries are
    probed per tensor.
    """
    work = {k: v.copy() for k, v in params.items()}
    _, analytic = loss_and_grads(work)
    report = GradCheckReport()
    for name, p in work.items():
        flat = p.reshape(-1)
        count = min(max_per_tensor, flat.size)
        idx = rng.choice(flat.size, size=count, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = loss_and_grads(work)
            flat[i] = orig - h
            lm, _ = loss_and_grads(work)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        report.per_tensor[name] = worst
    return report
