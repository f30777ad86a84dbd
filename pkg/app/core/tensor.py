"""Dense float64 arrays and the primitives every layer is built from.

Arrays are plain ``numpy`` float64 ndarrays. Convolution follows the
correlation convention ``out(u, o) = sum_{c, u'} x(u + u', c) w(o, c, u')``
with no filter flipping.
"""

from collections.abc import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray
from scipy.special import softmax as _softmax

Tensor = NDArray[np.float64]


def _check_conv_shapes(x: Tensor, w: Tensor, padding: int) -> None:
    if w.ndim != 4:
        raise ValueError(f"Filter must be [C_out, C_in, kH, kW], got shape {w.shape}")
    if x.ndim not in (3, 4):
        raise ValueError(f"Input must be [C, H, W] or [B, C, H, W], got shape {x.shape}")
    if x.size == 0:
        raise ValueError(f"Input is empty (shape {x.shape})")
    k_h, k_w = w.shape[-2:]
    if k_h % 2 == 0 or k_w % 2 == 0:
        raise ValueError(f"Filter spatial size must be odd, got {k_h}x{k_w}")
    if padding < 0:
        raise ValueError(f"Padding must be non-negative, got {padding}")
    if x.shape[-3] != w.shape[1]:
        raise ValueError(
            f"Channel mismatch: input has {x.shape[-3]} channels, filter expects {w.shape[1]}"
        )
    if x.shape[-2] + 2 * padding < k_h or x.shape[-1] + 2 * padding < k_w:
        raise ValueError(
            f"Filter {k_h}x{k_w} larger than padded input {x.shape[-2:]} (padding {padding})"
        )


def _pad(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    return np.pad(x, widths)


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """Planar correlation of ``x`` ([C,H,W] or [B,C,H,W]) with ``w`` [C_out,C_in,kH,kW].

    Output spatial size is ``H + 2*padding - kH + 1``.
    """
    _check_conv_shapes(x, w, padding)
    k_h, k_w = w.shape[-2:]
    windows = sliding_window_view(_pad(x, padding), (k_h, k_w), axis=(-2, -1))
    if x.ndim == 3:
        return np.einsum("chwij,ocij->ohw", windows, w, optimize=True)
    return np.einsum("bchwij,ocij->bohw", windows, w, optimize=True)


def conv2d_backward(x: Tensor, w: Tensor, padding: int, grad_out: Tensor) -> tuple[Tensor, Tensor]:
    """Vector-Jacobian product of :func:`conv2d`; returns ``(grad_x, grad_w)``."""
    _check_conv_shapes(x, w, padding)
    k_h, k_w = w.shape[-2:]
    batched = x.ndim == 4
    xb = x if batched else x[None]
    gb = grad_out if batched else grad_out[None]

    windows = sliding_window_view(_pad(xb, padding), (k_h, k_w), axis=(-2, -1))
    grad_w = np.einsum("bchwij,bohw->ocij", windows, gb, optimize=True)

    # full correlation of the upstream gradient with the 180-degree flipped filter
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    spread = np.pad(gb, ((0, 0), (0, 0), (k_h - 1, k_h - 1), (k_w - 1, k_w - 1)))
    grad_padded = conv2d(spread, flipped, 0)
    if padding:
        grad_padded = grad_padded[..., padding:-padding, padding:-padding]
    grad_x = grad_padded if batched else grad_padded[0]
    return grad_x, grad_w


def rotate90(plane: Tensor, k: int = 1) -> Tensor:
    """Counter-clockwise rotation by ``k`` quarter turns of the last two (square) axes."""
    if plane.ndim < 2 or plane.shape[-1] != plane.shape[-2]:
        raise ValueError(f"rotate90 needs square planes, got shape {plane.shape}")
    return np.ascontiguousarray(np.rot90(plane, k % 4, axes=(-2, -1)))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    if x.size == 0 or x.shape[axis] == 0:
        raise ValueError("softmax of an empty tensor is undefined")
    return _softmax(x, axis=axis)


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-3) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x, flat_grad = x.reshape(-1), grad.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + eps
        upper = f(x)
        flat_x[i] = original - eps
        lower = f(x)
        flat_x[i] = original
        flat_grad[i] = (upper - lower) / (2.0 * eps)
    return grad


def relative_error(a: Tensor, b: Tensor) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b))) / scale
