"""Layer stack, architectures and parameter initialization for the rotated-digit networks."""

import logging

import numpy as np

from app.core.attention import (
    AttentionKind,
    AttentionParams,
    attention_mask,
    co_attentive_backward,
    co_attentive_map,
    parameter_count,
)
from app.core.gconv import (
    FeatureMap,
    GConvParams,
    add_bias,
    correlate,
    correlate_backward,
    dense,
    dense_backward,
    global_average_pool,
    global_average_pool_backward,
    orientation_pool,
    orientation_pool_backward,
    relu,
    relu_backward,
    spatial_max_pool,
    spatial_max_pool_backward,
)
from app.core.group import GroupSpec
from app.core.models import ArchName, ArchSpec, AttentionInit, LayerSpec
from app.core.tensor import Tensor

logger = logging.getLogger(__name__)

NUM_CLASSES = 10

# name -> (group, attended)
ARCHITECTURES: dict[str, tuple[str, bool]] = {
    "z2cnn": ("z2", False),
    "p4cnn": ("p4", False),
    "a-p4cnn": ("p4", True),
    "p4mcnn": ("p4m", False),
    "a-p4mcnn": ("p4m", True),
}


class Module:
    def __init__(self):
        self.cache = None

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def gradients(self) -> dict[str, Tensor]:
        return {}


class ConvLayer(Module):
    """Lifting or group convolution, optionally followed by co-attention, then the per-channel bias.

    Attention parameters live in one [out, p] array so an optimizer can update them in place.
    """

    def __init__(
        self,
        params: GConvParams,
        spec: GroupSpec,
        lifting: bool,
        padding: int = 1,
        attention_kind: AttentionKind | None = None,
        theta: Tensor | None = None,
    ):
        super().__init__()
        self.params = params
        self.spec = spec
        self.lifting = lifting
        self.padding = padding
        self.attention_kind = attention_kind
        self.theta = theta
        if attention_kind is not None:
            expected = (params.filters.shape[0], parameter_count(attention_kind, spec.group_size))
            if theta is None or theta.shape != expected:
                raise ValueError(f"Attention parameters must have shape {expected}")
        self.grads: dict[str, Tensor] = {}

    @property
    def attended(self) -> bool:
        return self.attention_kind is not None

    def attention(self) -> list[AttentionParams]:
        if not self.attended:
            return []
        return [
            AttentionParams(kind=self.attention_kind, n=self.spec.group_size, theta=row) for row in self.theta
        ]

    def responses(self, fmap: FeatureMap) -> tuple[FeatureMap, FeatureMap, FeatureMap | None]:
        """Raw correlation, attended correlation and attention mask (the last two None without attention)."""
        pre = correlate(fmap, self.params.filters, self.spec, self.padding, self.lifting)
        if not self.attended:
            return pre, None, None
        params = self.attention()
        return pre, co_attentive_map(pre, params), attention_mask(pre, params)

    def forward(self, fmap: FeatureMap) -> FeatureMap:
        pre = correlate(fmap, self.params.filters, self.spec, self.padding, self.lifting)
        self.cache = fmap, pre
        out = co_attentive_map(pre, self.attention()) if self.attended else pre
        return add_bias(out, self.params.bias)

    def backward(self, dout: Tensor) -> Tensor:
        fmap, pre = self.cache
        self.grads = {"bias": dout.sum(axis=(0, 1, 3, 4))}
        if self.attended:
            dout, grad_theta = co_attentive_backward(pre, self.attention(), dout)
            self.grads["attention"] = np.stack(grad_theta)
        grad_x, self.grads["filters"] = correlate_backward(
            fmap, self.params.filters, self.spec, self.padding, self.lifting, dout
        )
        return grad_x

    def parameters(self) -> dict[str, Tensor]:
        params = {"filters": self.params.filters, "bias": self.params.bias}
        if self.attended:
            params["attention"] = self.theta
        return params

    def gradients(self) -> dict[str, Tensor]:
        return self.grads


class ReLU(Module):
    def forward(self, fmap: FeatureMap) -> FeatureMap:
        self.cache = fmap
        return relu(fmap)

    def backward(self, dout: Tensor) -> Tensor:
        return relu_backward(self.cache, dout)


class SpatialMaxPool(Module):
    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def forward(self, fmap: FeatureMap) -> FeatureMap:
        self.cache = fmap
        return spatial_max_pool(fmap, self.size)

    def backward(self, dout: Tensor) -> Tensor:
        return spatial_max_pool_backward(self.cache, dout, self.size)


class OrientationPool(Module):
    def forward(self, fmap: FeatureMap) -> FeatureMap:
        self.cache = fmap
        return orientation_pool(fmap)

    def backward(self, dout: Tensor) -> Tensor:
        return orientation_pool_backward(self.cache, dout)


class GlobalAveragePool(Module):
    def forward(self, fmap: FeatureMap) -> Tensor:
        self.cache = fmap
        return global_average_pool(fmap)

    def backward(self, dout: Tensor) -> Tensor:
        return global_average_pool_backward(self.cache, dout)


class Dense(Module):
    def __init__(self, weights: Tensor, bias: Tensor):
        super().__init__()
        self.weights = weights
        self.bias = bias
        self.grads: dict[str, Tensor] = {}

    def forward(self, x: Tensor) -> Tensor:
        self.cache = x
        return dense(x, self.weights, self.bias)

    def backward(self, dout: Tensor) -> Tensor:
        grad_x, grad_w, grad_b = dense_backward(self.cache, self.weights, dout)
        self.grads = {"weights": grad_w, "bias": grad_b}
        return grad_x

    def parameters(self) -> dict[str, Tensor]:
        return {"weights": self.weights, "bias": self.bias}

    def gradients(self) -> dict[str, Tensor]:
        return self.grads


class Model(Module):
    def __init__(self, arch: ArchSpec, spec: GroupSpec, layers: list[tuple[str, Module]]):
        super().__init__()
        self.arch = arch
        self.spec = spec
        self.layers = layers

    def forward(self, images: Tensor) -> Tensor:
        """Logits [B, 10] for images [B, 1, H, W]."""
        x = FeatureMap.from_images(images)
        for _, layer in self.layers:
            x = layer(x)
        return x

    def backward(self, dout: Tensor) -> Tensor:
        for _, layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def equivariant_prefix(self) -> list[Module]:
        """Layers up to (not including) orientation pooling."""
        prefix = []
        for _, layer in self.layers:
            if isinstance(layer, (OrientationPool, GlobalAveragePool)):
                break
            prefix.append(layer)
        return prefix

    def features(self, images: Tensor) -> FeatureMap:
        x = FeatureMap.from_images(images)
        for layer in self.equivariant_prefix():
            x = layer(x)
        return x

    def conv_layers(self) -> list[tuple[str, ConvLayer]]:
        return [(name, layer) for name, layer in self.layers if isinstance(layer, ConvLayer)]

    def parameters(self) -> dict[str, Tensor]:
        return {
            f"{name}.{key}": value for name, layer in self.layers for key, value in layer.parameters().items()
        }

    def gradients(self) -> dict[str, Tensor]:
        return {
            f"{name}.{key}": value for name, layer in self.layers for key, value in layer.gradients().items()
        }

    def attention_keys(self) -> set[str]:
        return {key for key in self.parameters() if key.endswith(".attention")}

    def load_parameters(self, values: dict[str, Tensor]) -> None:
        """Copy ``values`` into the live parameter arrays; names and shapes must match exactly."""
        params = self.parameters()
        if set(values) != set(params):
            missing, extra = set(params) - set(values), set(values) - set(params)
            raise ValueError(f"Parameter names differ (missing {sorted(missing)}, unexpected {sorted(extra)})")
        for key, target in params.items():
            if values[key].shape != target.shape:
                raise ValueError(f"{key}: expected shape {target.shape}, got {values[key].shape}")
            target[...] = values[key]


def arch_spec(name: str, channels: int = 8, attention_kind: AttentionKind | None = None) -> ArchSpec:
    """Desk-scale layout: lift, three group convolutions, max pool after the second, invariant head."""
    if name not in ARCHITECTURES:
        raise ValueError(f"Unknown architecture {name!r}; choose from {', '.join(ARCHITECTURES)}")
    group, attended = ARCHITECTURES[name]
    if attended and attention_kind is None:
        attention_kind = AttentionKind.BLOCK_CIRCULANT if group == "p4m" else AttentionKind.CIRCULANT
    if not attended:
        attention_kind = None

    def conv(kind: str) -> LayerSpec:
        return LayerSpec(kind=kind, channels=channels, attention=attended)

    layers = [conv("lift"), LayerSpec(kind="relu"), conv("group"), LayerSpec(kind="relu")]
    layers += [LayerSpec(kind="max_pool"), conv("group"), LayerSpec(kind="relu"), conv("group"), LayerSpec(kind="relu")]
    if group != "z2":
        layers.append(LayerSpec(kind="orientation_pool"))
    layers += [LayerSpec(kind="global_pool"), LayerSpec(kind="dense", channels=NUM_CLASSES)]
    return ArchSpec(name=name, group=group, channels=channels, layers=layers, attention_kind=attention_kind)


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _init_attention(
    rng: np.random.Generator, kind: AttentionKind, n: int, channels: int, fan_in: int, init: AttentionInit
) -> Tensor:
    """Same distribution as the layer's filters, with the materialized diagonal set to one.

    ``init="identity"`` zeroes everything off the diagonal: ``a_c = e_1`` (and ``a_c2 = 0`` for mirrors).
    """
    shape = (channels, parameter_count(kind, n))
    theta = np.zeros(shape) if init == "identity" else _he(rng, shape, fan_in)
    if kind is AttentionKind.FULL:
        theta.reshape(channels, n, n)[:, np.arange(n), np.arange(n)] = 1.0
    else:
        theta[:, 0] = 1.0
    return theta


def build_model(
    arch: ArchSpec | ArchName, seed: int, channels: int = 8, attention_init: AttentionInit = "random"
) -> Model:
    if isinstance(arch, str):
        arch = arch_spec(arch, channels)
    spec = GroupSpec.from_name(arch.group)
    size = spec.group_size
    weight_seq, attention_seq = np.random.SeedSequence(seed).spawn(2)
    rng, attention_rng = np.random.default_rng(weight_seq), np.random.default_rng(attention_seq)

    layers: list[tuple[str, Module]] = []
    in_channels, in_group, features, convs = 1, 1, 1, 0
    for layer in arch.layers:
        match layer.kind:
            case "lift" | "group":
                lifting = layer.kind == "lift"
                k = layer.kernel
                fan_in = in_channels * in_group * k * k
                params = GConvParams(
                    filters=_he(rng, (layer.channels, in_channels, in_group, k, k), fan_in),
                    bias=np.zeros(layer.channels),
                )
                theta = None
                if layer.attention:
                    theta = _init_attention(
                        attention_rng, arch.attention_kind, size, layer.channels, fan_in, attention_init
                    )
                name = "lift" if lifting else f"gconv{convs}"
                conv = ConvLayer(
                    params, spec, lifting, padding=k // 2,
                    attention_kind=arch.attention_kind if layer.attention else None, theta=theta,
                )
                layers.append((name, conv))
                convs += 1
                in_channels, in_group = layer.channels, size
            case "relu":
                layers.append((f"relu{len(layers)}", ReLU()))
            case "max_pool":
                layers.append((f"pool{len(layers)}", SpatialMaxPool(2)))
            case "orientation_pool":
                layers.append(("orientation_pool", OrientationPool()))
                in_group = 1
            case "global_pool":
                layers.append(("global_pool", GlobalAveragePool()))
                features = in_channels * in_group
            case "dense":
                out = layer.channels or NUM_CLASSES
                layers.append(("dense", Dense(_he(rng, (out, features), features), np.zeros(out))))
            case _:
                raise ValueError(f"Unknown layer kind {layer.kind!r}")

    model = Model(arch, spec, layers)
    logger.debug(f"Built {arch.name} with {count_parameters(model)} parameters")
    return model


def count_parameters(model: Model) -> int:
    return sum(value.size for value in model.parameters().values())


def parameter_breakdown(model: Model) -> dict[str, int]:
    return {key: value.size for key, value in model.parameters().items()}
