"""Compact self-attention along the group axis and its cyclic equivariant forms.

For a group-axis vector ``x`` of length n and a matrix ``Atilde``:

    a       = x @ Atilde
    a_tilde = softmax(a / n)
    x_hat   = (a_tilde / max(a_tilde)) * x

``Atilde`` is either free (full attention), circulant in one defining vector
(``Atilde[i, j] = c[(i - j) mod n]``), or block-circulant over the rotation-mirror
group, ``[[C(c1), C(c2)], [C(c2).T, C(c1).T]]``. The structured forms commute
with every group-axis permutation, which is what makes the attention equivariant.
Every kind is stored as a flat parameter vector ``theta`` and materialized
through an integer tying map, so gradients fold back by summing tied entries.
"""

from enum import Enum
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.linalg import circulant

from app.core.gconv import FeatureMap
from app.core.group import GroupKind, GroupSpec
from app.core.tensor import Tensor, softmax


class AttentionKind(str, Enum):
    FULL = "full"
    CIRCULANT = "circulant"
    BLOCK_CIRCULANT = "block_circulant"


@lru_cache(maxsize=None)
def tying_index(kind: AttentionKind, n: int) -> NDArray[np.int64]:
    """Integer map with ``Atilde = theta[tying_index(kind, n)]``."""
    i, j = np.indices((n, n))
    if kind is AttentionKind.FULL:
        index = i * n + j
    elif kind is AttentionKind.CIRCULANT:
        index = (i - j) % n
    else:
        if n % 2:
            raise ValueError(f"Block-circulant attention needs an even size, got {n}")
        r = n // 2
        bi, bj = i // r, j // r
        ii, jj = i % r, j % r
        offset = np.where(bi == bj, 0, r)
        # lower blocks run in reversed rotation order: C(c).T[i, j] = c[(j - i) mod r]
        index = offset + np.where(bi == 0, (ii - jj) % r, (jj - ii) % r)
    index = np.ascontiguousarray(index, dtype=np.int64)
    index.setflags(write=False)
    return index


def parameter_count(kind: AttentionKind, n: int) -> int:
    match kind:
        case AttentionKind.FULL:
            return n * n
        case AttentionKind.CIRCULANT:
            return n
        case AttentionKind.BLOCK_CIRCULANT:
            return n
    raise ValueError(f"Unknown attention kind {kind}")


class AttentionParams(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: AttentionKind
    n: int
    theta: np.ndarray

    @model_validator(mode="after")
    def check_size(self) -> "AttentionParams":
        if self.n < 1:
            raise ValueError(f"Attention size must be positive, got {self.n}")
        if self.kind is AttentionKind.BLOCK_CIRCULANT and self.n % 2:
            raise ValueError(f"Block-circulant attention needs an even size, got {self.n}")
        expected = parameter_count(self.kind, self.n)
        if self.theta.shape != (expected,):
            raise ValueError(
                f"{self.kind.value} attention of size {self.n} needs {expected} parameters, "
                f"got shape {self.theta.shape}"
            )
        return self

    @classmethod
    def full(cls, atilde: Tensor) -> "AttentionParams":
        atilde = np.asarray(atilde, dtype=np.float64)
        return cls(kind=AttentionKind.FULL, n=atilde.shape[0], theta=atilde.reshape(-1).copy())

    @classmethod
    def circulant(cls, a_c: Tensor) -> "AttentionParams":
        a_c = np.asarray(a_c, dtype=np.float64)
        return cls(kind=AttentionKind.CIRCULANT, n=a_c.shape[0], theta=a_c.copy())

    @classmethod
    def block_circulant(cls, a_c1: Tensor, a_c2: Tensor) -> "AttentionParams":
        a_c1, a_c2 = np.asarray(a_c1, dtype=np.float64), np.asarray(a_c2, dtype=np.float64)
        if a_c1.shape != a_c2.shape:
            raise ValueError(f"Block vectors differ in length: {a_c1.shape} vs {a_c2.shape}")
        return cls(kind=AttentionKind.BLOCK_CIRCULANT, n=2 * a_c1.shape[0], theta=np.concatenate([a_c1, a_c2]))

    @classmethod
    def for_group(cls, spec: GroupSpec, theta: Tensor, full: bool = False) -> "AttentionParams":
        """Equivariant kind for ``spec`` (or full attention) over an existing parameter vector."""
        if full:
            kind = AttentionKind.FULL
        elif spec.kind is GroupKind.ROT_MIRROR:
            kind = AttentionKind.BLOCK_CIRCULANT
        else:
            kind = AttentionKind.CIRCULANT
        return cls(kind=kind, n=spec.group_size, theta=theta)

    @property
    def atilde(self) -> Tensor:
        return self.theta[tying_index(self.kind, self.n)]

    @property
    def a_c(self) -> Tensor:
        return self.theta

    @property
    def a_c1(self) -> Tensor:
        return self.theta[: self.n // 2]

    @property
    def a_c2(self) -> Tensor:
        return self.theta[self.n // 2 :]

    @property
    def num_parameters(self) -> int:
        return self.theta.size

    def fold(self, grad_atilde: Tensor) -> Tensor:
        """Gradient w.r.t. ``theta`` from a gradient w.r.t. the materialized matrix."""
        index = tying_index(self.kind, self.n)
        return np.bincount(index.ravel(), weights=grad_atilde.ravel(), minlength=self.theta.size)


class AttentionWorkspace(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    a: np.ndarray
    a_tilde: np.ndarray
    scale: float
    argmax: np.ndarray

    @property
    def weights(self) -> Tensor:
        peak = np.take_along_axis(self.a_tilde, self.argmax[..., None], axis=-1)
        return self.a_tilde / peak


def build_circulant(c: Tensor) -> Tensor:
    """Circulant matrix with first column ``c``: entry (i, j) is ``c[(i - j) mod n]``."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise ValueError(f"Circulant needs a non-empty vector, got shape {c.shape}")
    return circulant(c)


def build_block_circulant(c1: Tensor, c2: Tensor) -> Tensor:
    """Rotation-mirror attention matrix ``[[C(c1), C(c2)], [C(c2).T, C(c1).T]]``."""
    c1, c2 = np.asarray(c1, dtype=np.float64), np.asarray(c2, dtype=np.float64)
    if c1.shape != c2.shape:
        raise ValueError(f"Block vectors differ in length: {c1.shape} vs {c2.shape}")
    first, second = build_circulant(c1), build_circulant(c2)
    return np.block([[first, second], [second.T, first.T]])


def _workspace(a: Tensor) -> AttentionWorkspace:
    n = a.shape[-1]
    scale = 1.0 / n
    a_tilde = softmax(a * scale, axis=-1)
    return AttentionWorkspace(a=a, a_tilde=a_tilde, scale=scale, argmax=np.asarray(np.argmax(a_tilde, axis=-1)))


def _weights_backward(ws: AttentionWorkspace, grad_w: Tensor) -> Tensor:
    """Pull a gradient on ``a_tilde / max(a_tilde)`` back to ``a``."""
    peak = np.take_along_axis(ws.a_tilde, ws.argmax[..., None], axis=-1)
    grad_a_tilde = grad_w / peak
    # max(a_tilde) is treated as the entry at the lowest-index argmax
    spill = -(grad_w * ws.a_tilde).sum(axis=-1, keepdims=True) / peak**2
    np.put_along_axis(
        grad_a_tilde,
        ws.argmax[..., None],
        np.take_along_axis(grad_a_tilde, ws.argmax[..., None], axis=-1) + spill,
        axis=-1,
    )
    grad_z = ws.a_tilde * (grad_a_tilde - (grad_a_tilde * ws.a_tilde).sum(axis=-1, keepdims=True))
    return grad_z * ws.scale


def attend(x: Tensor, atilde: Tensor) -> tuple[Tensor, AttentionWorkspace]:
    """Compact self-attention over the last axis of ``x``; returns output and workspace."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("Attention needs a non-empty vector")
    if atilde.shape != (x.shape[-1], x.shape[-1]):
        raise ValueError(f"Attention matrix {atilde.shape} does not fit vectors of length {x.shape[-1]}")
    ws = _workspace(x @ atilde)
    return ws.weights * x, ws


def compact_attend(x: Tensor, atilde: Tensor) -> Tensor:
    return attend(x, atilde)[0]


def attend_backward(
    x: Tensor, atilde: Tensor | AttentionParams, upstream: Tensor
) -> tuple[Tensor, Tensor]:
    """Vector-Jacobian product of :func:`compact_attend`.

    Returns ``(grad_x, grad_params)``. With a raw matrix ``grad_params`` is the
    full-matrix gradient; with :class:`AttentionParams` it is folded onto ``theta``.
    Leading axes of ``x`` are batch axes and are summed in the parameter gradient.
    """
    params = atilde if isinstance(atilde, AttentionParams) else None
    matrix = params.atilde if params is not None else np.asarray(atilde, dtype=np.float64)
    _, ws = attend(x, matrix)
    weights = ws.weights
    grad_a = _weights_backward(ws, upstream * x)
    grad_x = upstream * weights + grad_a @ matrix.T
    grad_matrix = np.einsum("...i,...j->ij", x, grad_a)
    if params is not None:
        return grad_x, params.fold(grad_matrix)
    return grad_x, grad_matrix


def _stack(params: list[AttentionParams], fmap: FeatureMap) -> Tensor:
    if len(params) != fmap.channels:
        raise ValueError(f"Need one attention instance per channel: {len(params)} for {fmap.channels}")
    for p in params:
        if p.n != fmap.group_size:
            raise ValueError(f"Attention size {p.n} does not match group axis {fmap.group_size}")
    return np.stack([p.atilde for p in params])


def _attend_channels(fmap: FeatureMap, matrices: Tensor) -> tuple[Tensor, Tensor, AttentionWorkspace]:
    # group axis last: (B, C, H, W, G)
    x = np.moveaxis(fmap.data, 1, -1)
    a = np.einsum("bchwi,cij->bchwj", x, matrices, optimize=True)
    return x, a, _workspace(a)


def co_attentive_map(fmap: FeatureMap, params: list[AttentionParams]) -> FeatureMap:
    """Attend along the group axis at every position with one instance per channel."""
    x, _, ws = _attend_channels(fmap, _stack(params, fmap))
    return fmap.model_copy(update={"data": np.moveaxis(ws.weights * x, -1, 1)})


def attention_mask(fmap: FeatureMap, params: list[AttentionParams]) -> FeatureMap:
    """The normalized weights ``a_tilde / max(a_tilde)`` laid out like ``fmap``."""
    _, _, ws = _attend_channels(fmap, _stack(params, fmap))
    return fmap.model_copy(update={"data": np.moveaxis(ws.weights, -1, 1)})


def co_attentive_backward(
    fmap: FeatureMap, params: list[AttentionParams], grad_out: Tensor
) -> tuple[Tensor, list[Tensor]]:
    """Returns ``(grad_input_data, per-channel theta gradients)``."""
    matrices = _stack(params, fmap)
    x, _, ws = _attend_channels(fmap, matrices)
    upstream = np.moveaxis(grad_out, 1, -1)
    grad_a = _weights_backward(ws, upstream * x)
    grad_x = upstream * ws.weights + np.einsum("bchwj,cij->bchwi", grad_a, matrices, optimize=True)
    grad_matrices = np.einsum("bchwi,bchwj->cij", x, grad_a, optimize=True)
    grad_theta = [p.fold(g) for p, g in zip(params, grad_matrices)]
    return np.moveaxis(grad_x, -1, 1), grad_theta
