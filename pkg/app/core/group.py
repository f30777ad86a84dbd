"""Finite symmetry groups acting on images and on the group axis of feature maps.

An element ``g = (r, m)`` acts on an image by a horizontal flip (when ``m = 1``)
followed by ``r`` counter-clockwise quarter turns, so

    (r1, m1) . (r2, m2) = (r1 + (-1)**m1 * r2 mod r_max, m1 xor m2)

Group-axis index of ``(r, m)`` is ``m * r_max + r``. Every permutation of the group
axis is read off the composition table built from that rule.
"""

from enum import Enum
from functools import lru_cache
from itertools import product
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.tensor import Tensor, rotate90

if TYPE_CHECKING:
    from app.core.gconv import FeatureMap


class GroupKind(str, Enum):
    TRANS = "trans"
    ROT = "rot"
    ROT_MIRROR = "rotmirror"


class GroupElement(BaseModel):
    model_config = ConfigDict(frozen=True)

    r: int = Field(default=0, ge=0)
    m: int = Field(default=0, ge=0, le=1)


@lru_cache(maxsize=None)
def _composition_table(kind: GroupKind, r_max: int) -> NDArray[np.int64]:
    elements = _elements(kind, r_max)
    size = len(elements)
    table = np.empty((size, size), dtype=np.int64)
    for (i, (r1, m1)), (j, (r2, m2)) in product(enumerate(elements), repeat=2):
        r = (r1 + (-1) ** m1 * r2) % r_max
        table[i, j] = elements.index((r, m1 ^ m2))
    _verify_group_axioms(table)
    table.setflags(write=False)
    return table


def _elements(kind: GroupKind, r_max: int) -> list[tuple[int, int]]:
    if kind is GroupKind.TRANS:
        return [(0, 0)]
    mirrors = (0, 1) if kind is GroupKind.ROT_MIRROR else (0,)
    return [(r, m) for m in mirrors for r in range(r_max)]


def _verify_group_axioms(table: NDArray[np.int64]) -> None:
    size = table.shape[0]
    if not np.all((table >= 0) & (table < size)):
        raise ValueError("Composition table is not closed")
    identity = [e for e in range(size) if np.array_equal(table[e], np.arange(size))]
    if len(identity) != 1 or not np.array_equal(table[:, identity[0]], np.arange(size)):
        raise ValueError("Composition table has no two-sided identity")
    e = identity[0]
    for g in range(size):
        right_inverses = np.flatnonzero(table[g] == e)
        if len(right_inverses) != 1 or table[right_inverses[0], g] != e:
            raise ValueError(f"Element {g} has no two-sided inverse")
    # associativity: (a b) c == a (b c) for every triple
    left = table[table[:, :, None], np.arange(size)[None, None, :]]
    right = table[np.arange(size)[:, None, None], table[None, :, :]]
    if not np.array_equal(left, right):
        raise ValueError("Composition table is not associative")


class GroupSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: GroupKind
    r_max: int = Field(default=4, ge=1)

    @model_validator(mode="after")
    def build_table(self) -> "GroupSpec":
        _composition_table(self.kind, self.r_max)
        return self

    @classmethod
    def trans(cls) -> "GroupSpec":
        return cls(kind=GroupKind.TRANS, r_max=1)

    @classmethod
    def rot(cls, r_max: int = 4) -> "GroupSpec":
        return cls(kind=GroupKind.ROT, r_max=r_max)

    @classmethod
    def rot_mirror(cls, r_max: int = 4) -> "GroupSpec":
        return cls(kind=GroupKind.ROT_MIRROR, r_max=r_max)

    @classmethod
    def from_name(cls, name: str) -> "GroupSpec":
        """``z2``, ``p4`` or ``p4m``."""
        match name:
            case "z2":
                return cls.trans()
            case "p4":
                return cls.rot(4)
            case "p4m":
                return cls.rot_mirror(4)
        raise ValueError(f"Unknown group name: {name!r}")

    @property
    def group_size(self) -> int:
        return len(_elements(self.kind, self.r_max))

    @property
    def table(self) -> NDArray[np.int64]:
        return _composition_table(self.kind, self.r_max)

    @property
    def elements(self) -> list[GroupElement]:
        return [GroupElement(r=r, m=m) for r, m in _elements(self.kind, self.r_max)]

    def index(self, g: GroupElement) -> int:
        if g.r >= self.r_max or (g.m and self.kind is not GroupKind.ROT_MIRROR):
            raise ValueError(f"{g} is not an element of {self.kind.value}({self.r_max})")
        if self.kind is GroupKind.TRANS:
            return 0
        return g.m * self.r_max + g.r

    def element(self, index: int) -> GroupElement:
        r, m = _elements(self.kind, self.r_max)[index]
        return GroupElement(r=r, m=m)

    def compose(self, g: GroupElement, h: GroupElement) -> GroupElement:
        return self.element(int(self.table[self.index(g), self.index(h)]))

    def inverse(self, g: GroupElement) -> GroupElement:
        row = self.table[self.index(g)]
        return self.element(int(np.flatnonzero(row == 0)[0]))

    def axis_permutation(self, g: GroupElement) -> NDArray[np.int64]:
        """Source index per target slot: ``out[k] = x[perm[k]]`` moves slot h to g.h."""
        return self.table[self.index(self.inverse(g))]


def cyclic_shift(x: Tensor, i: int) -> Tensor:
    """``out[j] = x[(j + i) mod n]``."""
    if x.size == 0:
        raise ValueError("cyclic_shift needs a non-empty vector")
    return np.roll(x, -i)


def cyclic_shift_axis(stack: Tensor, i: int, axis: int) -> Tensor:
    """Cyclic shift along one named axis of ``stack``."""
    if not -stack.ndim <= axis < stack.ndim:
        raise ValueError(f"Axis {axis} out of range for a {stack.ndim}-d stack")
    return np.roll(stack, -i, axis=axis)


def _lattice_turns(g: GroupElement, spec: GroupSpec) -> int:
    if 4 % spec.r_max:
        raise ValueError(f"r_max={spec.r_max} has no exact action on the square lattice")
    return g.r * (4 // spec.r_max)


def act_on_input(g: GroupElement, image: Tensor, spec: GroupSpec) -> Tensor:
    """Lattice action on the last two axes: flip (if ``g.m``), then rotate by ``g.r``."""
    if spec.kind is GroupKind.TRANS:
        return image
    spec.index(g)
    if image.shape[-1] != image.shape[-2]:
        raise ValueError(f"Rotations need square images, got shape {image.shape}")
    out = np.flip(image, axis=-1) if g.m else image
    return rotate90(out, _lattice_turns(g, spec))


def act_on_feature(g: GroupElement, fmap: "FeatureMap | Tensor", spec: GroupSpec) -> "FeatureMap | Tensor":
    """Codomain action on a feature map: lattice action plus group-axis permutation.

    ``fmap`` is a :class:`~app.core.gconv.FeatureMap` or a raw array laid out
    (batch, group, channel, height, width).
    """
    data = fmap if isinstance(fmap, np.ndarray) else fmap.data
    if data.shape[1] != spec.group_size:
        raise ValueError(
            f"Group axis has length {data.shape[1]}, {spec.kind.value}({spec.r_max}) "
            f"needs {spec.group_size}"
        )
    out = act_on_input(g, data, spec)[:, spec.axis_permutation(g)]
    if isinstance(fmap, np.ndarray):
        return out
    return fmap.model_copy(update={"data": out})


def permutation_matrix(g: GroupElement, spec: GroupSpec) -> Tensor:
    """``P[k, l] = 1`` iff ``k = g . l``; ``P @ v`` permutes a group-axis vector like act_on_feature."""
    if spec.kind is GroupKind.TRANS:
        raise ValueError("Translations have no group-axis permutation")
    size = spec.group_size
    matrix = np.zeros((size, size))
    matrix[spec.table[spec.index(g)], np.arange(size)] = 1.0
    return matrix
