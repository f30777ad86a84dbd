"""Executable equivariance laws for attention, layers and whole networks.

Every check draws its inputs from its own generator and returns a :class:`CheckReport`
whose ``passed`` flag is ``max_dev <= tol``. Negative controls are checks that are
expected to fail; the suite treats them as ok when they do.
"""

import logging
from collections.abc import Sequence
from typing import Any

import numpy as np

from app.core.attention import (
    AttentionKind,
    AttentionParams,
    build_block_circulant,
    build_circulant,
    compact_attend,
)
from app.core.gconv import FeatureMap, GConvParams, correlate
from app.core.group import GroupElement, GroupKind, GroupSpec, act_on_feature, act_on_input, permutation_matrix
from app.core.models import CheckReport, GroupName, SuiteReport
from app.core.network import ConvLayer, Model, Module, ReLU, build_model
from app.core.tensor import Tensor

logger = logging.getLogger(__name__)

ALGEBRA_TOL = 1e-12
LAYER_TOL = 1e-10
NETWORK_TOL = 1e-6
BREAKAGE_TOL = 1e-3

Rng = np.random.Generator | int | np.random.SeedSequence


def _element(g: GroupElement) -> dict[str, int]:
    return {"r": g.r, "m": g.m}


def _require_rotations(spec: GroupSpec) -> None:
    if spec.kind is GroupKind.TRANS:
        raise ValueError("Equivariance checks need a rotation group")


# Attention algebra
def check_attention_equivariance(
    params: AttentionParams, spec: GroupSpec, trials: int = 100, tol: float = ALGEBRA_TOL, rng: Rng = 0,
    negative_control: bool = False,
) -> CheckReport:
    """compact_attend(P_g x) against P_g compact_attend(x) for random x and every g."""
    _require_rotations(spec)
    if params.n != spec.group_size:
        raise ValueError(f"Attention size {params.n} does not match group size {spec.group_size}")
    rng = np.random.default_rng(rng)
    x = rng.normal(size=(trials, params.n))
    matrix = params.atilde
    reference = compact_attend(x, matrix)

    max_dev, worst = 0.0, None
    for g in spec.elements:
        perm = spec.axis_permutation(g)
        deviation = np.abs(compact_attend(x[:, perm], matrix) - reference[:, perm]).max(axis=-1)
        trial = int(np.argmax(deviation))
        if deviation[trial] > max_dev:
            max_dev, worst = float(deviation[trial]), {"g": _element(g), "x": x[trial].tolist()}
    return CheckReport(
        check=f"attention:{params.kind.value}:n={params.n}",
        trials=trials * spec.group_size,
        max_dev=max_dev,
        tol=tol,
        negative_control=negative_control,
        counterexample=worst if max_dev > tol else None,
    )


def check_commutation(atilde: Tensor, spec: GroupSpec, tol: float = ALGEBRA_TOL, name: str = "commutation",
                      negative_control: bool = False) -> CheckReport:
    """P_g Atilde == Atilde P_g for every group element."""
    _require_rotations(spec)
    if atilde.shape != (spec.group_size, spec.group_size):
        raise ValueError(f"Matrix {atilde.shape} does not fit group size {spec.group_size}")
    max_dev, worst = 0.0, None
    for g in spec.elements:
        perm = permutation_matrix(g, spec)
        deviation = float(np.abs(perm @ atilde - atilde @ perm).max())
        if deviation > max_dev:
            max_dev, worst = deviation, {"g": _element(g)}
    return CheckReport(
        check=name,
        trials=spec.group_size,
        max_dev=max_dev,
        tol=tol,
        negative_control=negative_control,
        counterexample=worst if max_dev > tol else None,
    )


def merge_reports(check: str, reports: Sequence[CheckReport]) -> CheckReport:
    worst = max(reports, key=lambda report: report.max_dev)
    return worst.model_copy(update={"check": check, "trials": sum(report.trials for report in reports)})


# Layers
class UntiedBiasConv(Module):
    """Group convolution whose bias differs per group element; breaks equivariance on purpose."""

    def __init__(self, params: GConvParams, spec: GroupSpec, bias: Tensor, lifting: bool = False, padding: int = 1):
        super().__init__()
        if bias.shape != (spec.group_size, params.filters.shape[0]):
            raise ValueError(f"Untied bias must be [G, out], got {bias.shape}")
        self.params, self.spec, self.bias = params, spec, bias
        self.lifting, self.padding = lifting, padding

    def forward(self, fmap: FeatureMap) -> FeatureMap:
        out = correlate(fmap, self.params.filters, self.spec, self.padding, self.lifting)
        return out.model_copy(update={"data": out.data + self.bias[None, :, :, None, None]})


def _transform(g: GroupElement, data: Tensor, spec: GroupSpec) -> Tensor:
    """Domain or codomain action: spatial only on a trivial group axis, else the full feature action."""
    if data.shape[1] == 1:
        return act_on_input(g, data, spec)
    return act_on_feature(g, data, spec)


def _input_for(layer: Module, spec: GroupSpec, trials: int, size: int, channels: int,
               rng: np.random.Generator) -> FeatureMap:
    lifting = getattr(layer, "lifting", False)
    params = getattr(layer, "params", None)
    if params is not None:
        channels = params.filters.shape[1]
    if lifting:
        return FeatureMap(data=rng.normal(size=(trials, 1, channels, size, size)), spec=GroupSpec.trans())
    return FeatureMap(data=rng.normal(size=(trials, spec.group_size, channels, size, size)), spec=spec)


def check_layer_equivariance(
    layer: Module, spec: GroupSpec, trials: int = 100, tol: float = LAYER_TOL, rng: Rng = 0,
    size: int = 9, channels: int = 3, name: str | None = None, negative_control: bool = False,
) -> CheckReport:
    """layer(T_g x) against T_g layer(x) on random inputs, every g; ``layer`` must preserve spatial size."""
    _require_rotations(spec)
    rng = np.random.default_rng(rng)
    x = _input_for(layer, spec, trials, size, channels, rng)
    reference = layer(x).data

    max_dev, worst = 0.0, None
    for g in spec.elements:
        moved = layer(x.model_copy(update={"data": _transform(g, x.data, spec)}))
        deviation = np.abs(moved.data - _transform(g, reference, spec)).reshape(trials, -1).max(axis=-1)
        trial = int(np.argmax(deviation))
        if deviation[trial] > max_dev:
            max_dev, worst = float(deviation[trial]), {"g": _element(g), "trial": trial}
    return CheckReport(
        check=name or f"layer:{type(layer).__name__}",
        trials=trials * spec.group_size,
        max_dev=max_dev,
        tol=tol,
        negative_control=negative_control,
        counterexample=worst if max_dev > tol else None,
    )


# Networks
def check_network_equivariance(
    model: Model, spec: GroupSpec, tol: float = NETWORK_TOL, trials: int = 100, rng: Rng = 0, size: int = 8,
    negative_control: bool = False,
) -> CheckReport:
    """Equivariance of the feature stack before orientation pooling and invariance of the logits."""
    _require_rotations(spec)
    rng = np.random.default_rng(rng)
    images = rng.normal(size=(trials, 1, size, size))
    features = model.features(images).data
    logits = model(images)

    stack_dev = logit_dev = 0.0
    worst: dict[str, Any] | None = None
    for g in spec.elements:
        moved = act_on_input(g, images, spec)
        feature_gap = float(np.abs(model.features(moved).data - _transform(g, features, spec)).max())
        logit_gap = float(np.abs(model(moved) - logits).max())
        if max(feature_gap, logit_gap) > max(stack_dev, logit_dev):
            worst = {"g": _element(g), "stack_dev": feature_gap, "logit_dev": logit_gap}
        stack_dev, logit_dev = max(stack_dev, feature_gap), max(logit_dev, logit_gap)
    max_dev = max(stack_dev, logit_dev)
    return CheckReport(
        check=f"network:{model.arch.name}",
        trials=trials * spec.group_size,
        max_dev=max_dev,
        tol=tol,
        negative_control=negative_control,
        counterexample=worst if max_dev > tol else None,
    )


def _recover_shifts(reference: Tensor, response: Tensor, spec: GroupSpec) -> tuple[np.ndarray, np.ndarray]:
    """Best cyclic rotation-axis shift per (image, mirror block, channel) and an ambiguity flag."""
    b, _, c, h, w = reference.shape
    blocks = spec.group_size // spec.r_max
    ref = reference.reshape(b, blocks, spec.r_max, c, h, w)
    res = response.reshape(b, blocks, spec.r_max, c, h, w)
    ssd = np.stack(
        [((res - np.roll(ref, s, axis=2)) ** 2).sum(axis=(2, 4, 5)) for s in range(spec.r_max)], axis=-1
    )
    ordered = np.sort(ssd, axis=-1)
    scale = (ref**2).sum(axis=(2, 4, 5))
    ambiguous = ordered[..., 1] - ordered[..., 0] <= 1e-9 * (scale + 1e-300)
    return np.argmin(ssd, axis=-1), ambiguous


def check_synchrony(prefix: Model | Sequence[Module], images: Tensor, spec: GroupSpec) -> CheckReport:
    """Every channel's group-axis response moves by the same shift i under input rotation by i.

    Checked on the raw correlation, the attended response and the attention mask of every
    convolution in ``prefix``. Degenerate (shift-ambiguous) responses are counted as inconclusive.
    """
    _require_rotations(spec)
    layers = prefix.equivariant_prefix() if isinstance(prefix, Model) else list(prefix)
    max_dev, inconclusive, conclusive, worst = 0, 0, 0, None

    for i in range(spec.r_max):
        g = GroupElement(r=i)
        back = spec.inverse(g)
        x = FeatureMap.from_images(images)
        xr = FeatureMap.from_images(act_on_input(g, images, spec))
        for depth, layer in enumerate(layers):
            if isinstance(layer, ConvLayer):
                stages = zip(("conv", "attended", "mask"), layer.responses(x), layer.responses(xr))
                for stage, reference, rotated in stages:
                    if reference is None:
                        continue
                    shifts, ambiguous = _recover_shifts(
                        reference.data, act_on_input(back, rotated.data, spec), spec
                    )
                    distance = np.minimum((shifts - i) % spec.r_max, (i - shifts) % spec.r_max)
                    distance = np.where(ambiguous, 0, distance)
                    inconclusive += int(ambiguous.sum())
                    conclusive += int((~ambiguous).sum())
                    if distance.max() > max_dev:
                        max_dev = int(distance.max())
                        worst = {"rotation": i, "layer": depth, "stage": stage, "shifts": shifts.tolist()}
            x, xr = layer(x), layer(xr)
    return CheckReport(
        check="synchrony",
        trials=conclusive,
        max_dev=float(max_dev),
        tol=0.0,
        inconclusive=inconclusive,
        counterexample=worst,
    )


# Suite
def _random_attention(
    kind: AttentionKind, spec: GroupSpec, draws: int, per_draw: int, streams: list[np.random.SeedSequence]
) -> CheckReport:
    reports = []
    for stream in streams[:draws]:
        rng = np.random.default_rng(stream)
        n = spec.group_size
        if kind is AttentionKind.CIRCULANT:
            params = AttentionParams.circulant(rng.normal(size=n))
        else:
            params = AttentionParams.block_circulant(rng.normal(size=n // 2), rng.normal(size=n // 2))
        reports.append(check_attention_equivariance(params, spec, per_draw, rng=rng))
    return merge_reports(f"attention:{kind.value}:n={spec.group_size}", reports)


def run_suite(
    group: GroupName,
    seed: int = 0,
    attention_trials: int = 10_000,
    layer_trials: int = 100,
    network_trials: int = 100,
    synchrony_images: int = 50,
    channels: int = 8,
) -> SuiteReport:
    spec = GroupSpec.from_name(group)
    _require_rotations(spec)
    streams = iter(np.random.SeedSequence(seed).spawn(64))

    def rng() -> np.random.Generator:
        return np.random.default_rng(next(streams))

    draws = max(1, int(np.sqrt(attention_trials)))
    per_draw = max(1, attention_trials // draws)
    attention_streams = np.random.SeedSequence(seed + 1).spawn(draws)
    checks: list[CheckReport] = []

    # attention algebra
    if spec.kind is GroupKind.ROT_MIRROR:
        checks.append(_random_attention(AttentionKind.BLOCK_CIRCULANT, spec, draws, per_draw, attention_streams))
        equivariant = build_block_circulant(rng().normal(size=spec.r_max), rng().normal(size=spec.r_max))
    else:
        for n in (4, 8):
            checks.append(_random_attention(AttentionKind.CIRCULANT, GroupSpec.rot(n), draws, per_draw, attention_streams))
        equivariant = build_circulant(rng().normal(size=spec.group_size))
    full = AttentionParams.full(rng().normal(size=(spec.group_size, spec.group_size)))
    checks.append(
        check_attention_equivariance(full, spec, 100, BREAKAGE_TOL, rng(), negative_control=True)
    )
    checks.append(check_commutation(equivariant, spec, name=f"commutation:{group}"))
    perturbed = equivariant.copy()
    perturbed[0, 1] += 1e-2
    checks.append(check_commutation(perturbed, spec, name="commutation:perturbed", negative_control=True))

    # layers
    model = build_model(f"a-{group}cnn", seed, channels)
    (_, lift), (_, gconv) = model.conv_layers()[:2]
    plain = ConvLayer(gconv.params, spec, lifting=False)
    checks.append(check_layer_equivariance(plain, spec, layer_trials, rng=rng(), name="layer:group_conv"))
    lift_plain = ConvLayer(lift.params, spec, lifting=True)
    checks.append(check_layer_equivariance(lift_plain, spec, layer_trials, rng=rng(), name="layer:lift_conv"))
    checks.append(check_layer_equivariance(gconv, spec, layer_trials, rng=rng(), name="layer:co_attentive"))
    checks.append(check_layer_equivariance(ReLU(), spec, layer_trials, rng=rng(), name="layer:relu"))
    untied = UntiedBiasConv(gconv.params, spec, rng().normal(size=(spec.group_size, channels)))
    checks.append(
        check_layer_equivariance(untied, spec, layer_trials, rng=rng(), name="layer:untied_bias", negative_control=True)
    )

    # networks
    checks.append(check_network_equivariance(model, spec, trials=network_trials, rng=rng()))
    base = build_model(f"{group}cnn", seed, channels)
    checks.append(check_network_equivariance(base, spec, trials=network_trials, rng=rng()))
    z2 = build_model("z2cnn", seed, channels)
    checks.append(check_network_equivariance(z2, spec, trials=network_trials, rng=rng(), negative_control=True))

    # synchrony
    images = rng().normal(size=(synchrony_images, 1, 12, 12))
    checks.append(check_synchrony(model, images, spec))

    for check in checks:
        status = "ok" if check.ok else "FAILED"
        logger.info(f"{check.check}: max_dev={check.max_dev:.3e} tol={check.tol:.0e} {status}")
    return SuiteReport(group=group, seed=seed, checks=checks)
