"""Group-equivariant convolution and the pointwise / pooling blocks around it.

Feature maps are laid out (batch, group, channel, height, width). A group
convolution is evaluated as one planar correlation with an expanded filter bank
holding ``filter_transform(W, h)`` for every output group element ``h``:

    out(u, h, lam) = sum_{lam', h', u'} x(u + u', h', lam') * (L_h W)_{lam, lam'}(h', u')

where ``L_h`` rotates (and mirrors) the spatial support and moves group slot
``k`` to ``h . k``.
"""

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app.core.group import GroupElement, GroupKind, GroupSpec, act_on_input
from app.core.tensor import Tensor, conv2d, conv2d_backward


class FeatureMap(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    spec: GroupSpec

    @model_validator(mode="after")
    def check_group_axis(self) -> "FeatureMap":
        if self.data.ndim != 5:
            raise ValueError(f"FeatureMap data must be (B, G, C, H, W), got shape {self.data.shape}")
        if self.data.shape[1] != self.spec.group_size:
            raise ValueError(
                f"Group axis has length {self.data.shape[1]}, expected {self.spec.group_size}"
            )
        return self

    @classmethod
    def from_images(cls, images: Tensor) -> "FeatureMap":
        """Wrap [B, C, H, W] images as a map with a trivial group axis."""
        return cls(data=np.asarray(images, dtype=np.float64)[:, None], spec=GroupSpec.trans())

    @property
    def group_size(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


class GConvParams(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    filters: np.ndarray  # [out, in, G_in, k, k]
    bias: np.ndarray  # [out]

    @model_validator(mode="after")
    def check_shapes(self) -> "GConvParams":
        if self.filters.ndim != 5:
            raise ValueError(f"filters must be [out, in, G_in, k, k], got {self.filters.shape}")
        k_h, k_w = self.filters.shape[-2:]
        if k_h != k_w or k_h % 2 == 0:
            raise ValueError(f"filters must be square with odd size, got {k_h}x{k_w}")
        if self.bias.shape != (self.filters.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.filters.shape[0]} output channels"
            )
        return self

    @property
    def kernel_size(self) -> int:
        return self.filters.shape[-1]


def filter_transform(
    filters: np.ndarray, g: GroupElement, spec: GroupSpec, group_axis: bool | None = None
) -> Tensor:
    """Apply ``g`` to a filter: spatial lattice action, plus group-axis move ``k -> g.k``.

    ``filters`` is [..., kH, kW], or [..., G_in, kH, kW] when ``group_axis`` is set
    (inferred for 3-d input).
    """
    if filters.shape[-1] != filters.shape[-2]:
        raise ValueError(f"filter_transform needs square filters, got {filters.shape[-2:]}")
    if group_axis is None:
        group_axis = filters.ndim == 3
    out = act_on_input(g, filters, spec)
    if group_axis and spec.kind is not GroupKind.TRANS:
        if filters.shape[-3] != spec.group_size:
            raise ValueError(
                f"Filter group axis has length {filters.shape[-3]}, expected {spec.group_size}"
            )
        out = np.take(out, spec.axis_permutation(g), axis=-3)
    return out


def expand_filters(filters: Tensor, spec: GroupSpec, lifting: bool) -> Tensor:
    """Filter bank [G*out, G_in*in, k, k] with rows ordered (h, out) and columns (h', in)."""
    n_out, n_in, g_in, k, _ = filters.shape
    size = spec.group_size
    if lifting:
        if g_in != 1:
            raise ValueError(f"Lifting filters need G_in == 1, got {g_in}")
        bank = np.stack([filter_transform(filters[:, :, 0], h, spec, group_axis=False) for h in spec.elements])
        return bank.reshape(size * n_out, n_in, k, k)
    if g_in != size:
        raise ValueError(f"Filters have G_in={g_in}, input group has {size} elements")
    bank = np.stack(
        [filter_transform(filters, h, spec, group_axis=True).transpose(0, 2, 1, 3, 4) for h in spec.elements]
    )
    return bank.reshape(size * n_out, size * n_in, k, k)


def fold_filter_grad(grad_bank: Tensor, filters_shape: tuple[int, ...], spec: GroupSpec, lifting: bool) -> Tensor:
    """Adjoint of :func:`expand_filters`: sum each transformed copy back onto the base filter."""
    n_out, n_in, g_in, k, _ = filters_shape
    size = spec.group_size
    grad = np.zeros(filters_shape)
    if lifting:
        per_h = grad_bank.reshape(size, n_out, n_in, k, k)
        for h, block in zip(spec.elements, per_h):
            grad[:, :, 0] += filter_transform(block, spec.inverse(h), spec, group_axis=False)
        return grad
    per_h = grad_bank.reshape(size, n_out, size, n_in, k, k)
    for h, block in zip(spec.elements, per_h):
        grad += filter_transform(block.transpose(0, 2, 1, 3, 4), spec.inverse(h), spec, group_axis=True)
    return grad


def _flatten(fmap: FeatureMap) -> Tensor:
    b, g, c, h, w = fmap.data.shape
    return fmap.data.reshape(b, g * c, h, w)


def correlate(fmap: FeatureMap, filters: Tensor, spec: GroupSpec, padding: int, lifting: bool) -> FeatureMap:
    """Bias-free group correlation; the output carries ``spec``'s group axis."""
    if lifting and fmap.group_size != 1:
        raise ValueError(f"Lifting convolution needs a trivial group axis, got G={fmap.group_size}")
    if not lifting and fmap.spec != spec:
        raise ValueError(f"Input group {fmap.spec.kind.value} does not match layer group {spec.kind.value}")
    if fmap.channels != filters.shape[1]:
        raise ValueError(f"Input has {fmap.channels} channels, filters expect {filters.shape[1]}")
    out = conv2d(_flatten(fmap), expand_filters(filters, spec, lifting), padding)
    b, _, h, w = out.shape
    return FeatureMap(data=out.reshape(b, spec.group_size, filters.shape[0], h, w), spec=spec)


def correlate_backward(
    fmap: FeatureMap, filters: Tensor, spec: GroupSpec, padding: int, lifting: bool, grad_out: Tensor
) -> tuple[Tensor, Tensor]:
    """Returns ``(grad_input_data, grad_filters)``."""
    bank = expand_filters(filters, spec, lifting)
    b = grad_out.shape[0]
    grad_flat = grad_out.reshape(b, -1, *grad_out.shape[-2:])
    grad_x, grad_bank = conv2d_backward(_flatten(fmap), bank, padding, grad_flat)
    return grad_x.reshape(fmap.data.shape), fold_filter_grad(grad_bank, filters.shape, spec, lifting)


def add_bias(fmap: FeatureMap, bias: Tensor) -> FeatureMap:
    """Per-channel bias, shared across group elements and positions."""
    return fmap.model_copy(update={"data": fmap.data + bias[None, None, :, None, None]})


def lift_conv(image: FeatureMap, params: GConvParams, spec: GroupSpec, padding: int = 0) -> FeatureMap:
    out = correlate(image, params.filters, spec, padding, lifting=True)
    return add_bias(out, params.bias)


def group_conv(fmap: FeatureMap, params: GConvParams, padding: int = 0) -> FeatureMap:
    out = correlate(fmap, params.filters, fmap.spec, padding, lifting=False)
    return add_bias(out, params.bias)


def orientation_pool(fmap: FeatureMap) -> FeatureMap:
    """Maximum over the group axis; the result has a trivial group."""
    if fmap.group_size < 2:
        raise ValueError("orientation_pool needs a non-trivial group axis")
    return FeatureMap(data=fmap.data.max(axis=1, keepdims=True), spec=GroupSpec.trans())


def orientation_pool_backward(fmap: FeatureMap, grad_out: Tensor) -> Tensor:
    winner = np.argmax(fmap.data, axis=1)[:, None]
    grad = np.zeros_like(fmap.data)
    np.put_along_axis(grad, winner, grad_out, axis=1)
    return grad


def relu(fmap: FeatureMap) -> FeatureMap:
    return fmap.model_copy(update={"data": np.maximum(fmap.data, 0.0)})


def relu_backward(fmap: FeatureMap, grad_out: Tensor) -> Tensor:
    return grad_out * (fmap.data > 0)


def spatial_max_pool(fmap: FeatureMap, size: int = 2) -> FeatureMap:
    b, g, c, h, w = fmap.data.shape
    if h % size or w % size:
        raise ValueError(f"Spatial size {h}x{w} is not divisible by pool size {size}")
    blocks = fmap.data.reshape(b, g, c, h // size, size, w // size, size)
    return fmap.model_copy(update={"data": blocks.max(axis=(4, 6))})


def spatial_max_pool_backward(fmap: FeatureMap, grad_out: Tensor, size: int = 2) -> Tensor:
    b, g, c, h, w = fmap.data.shape
    blocks = fmap.data.reshape(b, g, c, h // size, size, w // size, size)
    blocks = blocks.transpose(0, 1, 2, 3, 5, 4, 6).reshape(b, g, c, h // size, w // size, size * size)
    winner = np.argmax(blocks, axis=-1)[..., None]
    grad = np.zeros_like(blocks)
    np.put_along_axis(grad, winner, grad_out[..., None], axis=-1)
    grad = grad.reshape(b, g, c, h // size, w // size, size, size).transpose(0, 1, 2, 3, 5, 4, 6)
    return grad.reshape(b, g, c, h, w)


def global_average_pool(fmap: FeatureMap) -> Tensor:
    """[B, G*C] averages over the spatial axes."""
    b = fmap.data.shape[0]
    return fmap.data.mean(axis=(-2, -1)).reshape(b, -1)


def global_average_pool_backward(fmap: FeatureMap, grad_out: Tensor) -> Tensor:
    b, g, c, h, w = fmap.data.shape
    return np.broadcast_to(grad_out.reshape(b, g, c, 1, 1) / (h * w), fmap.data.shape).copy()


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weights.T + bias`` for x [B, in] or [in], weights [out, in]."""
    if x.shape[-1] != weights.shape[1]:
        raise ValueError(f"dense input has {x.shape[-1]} features, weights expect {weights.shape[1]}")
    out = x @ weights.T
    return out if bias is None else out + bias


def dense_backward(x: Tensor, weights: Tensor, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(grad_x, grad_weights, grad_bias)``."""
    x2, g2 = np.atleast_2d(x), np.atleast_2d(grad_out)
    grad_x = grad_out @ weights
    return grad_x, g2.T @ x2, g2.sum(axis=0)
