"""Backbone definitions, weight init and the teacher output transforms.

Two fully convolutional map-regression backbones are provided, both with a
fixed x8 spatial reduction (three 2x2 max-pools), so a 256x256 input yields
a 32x32 single-channel map and a 64x64 input an 8x8 map:

* ``fas_dr_light``: stem conv, three (conv, conv, pool) blocks, head conv.
* ``fas_dr``: stem conv, three (conv x3, pool) blocks whose outputs are
  nearest-resized to the final resolution and channel-concatenated before
  two head convs.

Filter counts are configuration, not constants: ``base_widths`` holds the
per-block widths before scaling (defaults: 8/16/16 light, 16/32/64 full)
and ``width_scale`` multiplies every layer except the final 1-channel head.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import (ShapeError, Tape, Tensor, Var, WeightBundle, dtype_for)

log = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-6

# counts min-max normalizations that hit a constant map and fell back to zeros
_degenerate_maps = 0


def degenerate_map_count() -> int:
    return _degenerate_maps


@dataclass(frozen=True)
class LayerDesc:
    name: str
    kind: str                      # conv | relu | pool | resize | concat
    inputs: tuple[str, ...]
    out_channels: int = 0
    kernel: int = 3
    target_hw: tuple[int, int] | None = None


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    width_scale: int
    input_shape: tuple[int, int, int]
    output_shape: tuple[int, int, int]
    layers: tuple[LayerDesc, ...]

    def param_layout(self) -> list[tuple[str, tuple[int, ...]]]:
        layout: list[tuple[str, tuple[int, ...]]] = []
        shapes = propagate_shapes(self.layers, self.input_shape)
        for layer in self.layers:
            if layer.kind != "conv":
                continue
            cin = shapes[layer.inputs[0]][0]
            layout.append((f"{layer.name}.w",
                           (layer.out_channels, cin, layer.kernel, layer.kernel)))
            layout.append((f"{layer.name}.b", (layer.out_channels,)))
        return layout

    def weight_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_layout())

    def to_text(self) -> str:
        lines = [
            f"kind = {self.kind}",
            f"width_scale = {self.width_scale}",
            f"input_shape = {'x'.join(str(d) for d in self.input_shape)}",
            f"output_shape = {'x'.join(str(d) for d in self.output_shape)}",
        ]
        for layer in self.layers:
            desc = f"{layer.name} {layer.kind} from={','.join(layer.inputs)}"
            if layer.kind == "conv":
                desc += f" filters={layer.out_channels} kernel={layer.kernel}"
            if layer.kind == "resize":
                desc += f" target={layer.target_hw[0]}x{layer.target_hw[1]}"
            lines.append(f"layer = {desc}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()


def propagate_shapes(layers: Sequence[LayerDesc],
                     input_shape: tuple[int, int, int]) -> dict[str, tuple[int, int, int]]:
    """Symbolic shape propagation; raises ShapeError on inconsistency."""
    shapes: dict[str, tuple[int, int, int]] = {"input": tuple(input_shape)}
    for layer in layers:
        missing = [n for n in layer.inputs if n not in shapes]
        if missing:
            raise ShapeError(f"layer {layer.name!r} consumes unknown inputs {missing}")
        src = [shapes[n] for n in layer.inputs]
        if layer.kind == "conv":
            c, h, w = src[0]
            shapes[layer.name] = (layer.out_channels, h, w)
        elif layer.kind == "relu":
            shapes[layer.name] = src[0]
        elif layer.kind == "pool":
            c, h, w = src[0]
            if h % 2 or w % 2:
                raise ShapeError(f"pool {layer.name!r} needs even dims, got {h}x{w}")
            shapes[layer.name] = (c, h // 2, w // 2)
        elif layer.kind == "resize":
            c, _, _ = src[0]
            shapes[layer.name] = (c, layer.target_hw[0], layer.target_hw[1])
        elif layer.kind == "concat":
            hws = {s[1:] for s in src}
            if len(hws) != 1:
                raise ShapeError(f"concat {layer.name!r} mixes spatial dims {hws}")
            shapes[layer.name] = (sum(s[0] for s in src),) + src[0][1:]
        else:
            raise ShapeError(f"unknown layer kind {layer.kind!r}")
    return shapes


def make_spec(layers: Sequence[LayerDesc], input_shape: tuple[int, int, int],
              kind: str = "custom", width_scale: int = 1) -> NetworkSpec:
    """Build a NetworkSpec from explicit layers (used for toy configurations)."""
    shapes = propagate_shapes(layers, input_shape)
    out = shapes[layers[-1].name]
    return NetworkSpec(kind, width_scale, tuple(input_shape), out, tuple(layers))


DEFAULT_WIDTHS = {"fas_dr_light": (8, 16, 16), "fas_dr": (16, 32, 64)}


def build_backbone(kind: str, width_scale: int, input_shape: tuple[int, int, int],
                   base_widths: tuple[int, int, int] | None = None) -> NetworkSpec:
    """Construct one of the two map-regression backbones.

    ``base_widths`` are the three block widths before scaling; the first
    also sets the stem width for ``fas_dr_light``, while ``fas_dr`` stems
    at its first block width. The final head conv always has one filter.
    """
    if kind not in DEFAULT_WIDTHS:
        raise ValueError(f"unknown backbone kind {kind!r}")
    if width_scale < 1:
        raise ValueError("width_scale must be a positive integer")
    c, h, w = input_shape
    if h % 8 or w % 8:
        raise ShapeError(f"input {h}x{w} not divisible by 8")
    widths = tuple(base_widths) if base_widths is not None else DEFAULT_WIDTHS[kind]
    if len(widths) != 3 or any(x < 1 for x in widths):
        raise ValueError("base_widths must be three positive block widths")
    s = width_scale
    layers: list[LayerDesc] = []

    def conv_relu(name: str, src: str, filters: int, with_relu: bool = True) -> str:
        layers.append(LayerDesc(name, "conv", (src,), out_channels=filters))
        if not with_relu:
            return name
        layers.append(LayerDesc(f"{name}_r", "relu", (name,)))
        return f"{name}_r"

    if kind == "fas_dr_light":
        prev = conv_relu("stem", "input", widths[0] * s)
        for bi, width in enumerate(widths, start=1):
            prev = conv_relu(f"b{bi}c1", prev, width * s)
            prev = conv_relu(f"b{bi}c2", prev, width * s)
            layers.append(LayerDesc(f"b{bi}p", "pool", (prev,)))
            prev = f"b{bi}p"
        conv_relu("head", prev, 1, with_relu=False)
        out_name = "head"
    else:
        prev = conv_relu("stem", "input", widths[0] * s)
        taps: list[str] = []
        for bi, width in enumerate(widths, start=1):
            for ci in (1, 2, 3):
                prev = conv_relu(f"b{bi}c{ci}", prev, width * s)
            layers.append(LayerDesc(f"b{bi}p", "pool", (prev,)))
            prev = f"b{bi}p"
            taps.append(prev)
        target = (h // 8, w // 8)
        fused: list[str] = []
        for bi, tap in enumerate(taps, start=1):
            if bi < 3:
                layers.append(LayerDesc(f"b{bi}rs", "resize", (tap,), target_hw=target))
                fused.append(f"b{bi}rs")
            else:
                fused.append(tap)
        layers.append(LayerDesc("fuse", "concat", tuple(fused)))
        prev = conv_relu("head1", "fuse", 32 * s)
        conv_relu("head2", prev, 1, with_relu=False)
        out_name = "head2"

    spec = make_spec(layers, input_shape, kind=kind, width_scale=s)
    expected = (1, h // 8, w // 8)
    if spec.output_shape != expected:
        raise ShapeError(
            f"{kind} propagated to {spec.output_shape}, declared {expected}")
    assert spec.layers[-1].name == out_name
    return spec


def init_weights(spec: NetworkSpec, seed, precision: str = "single") -> WeightBundle:
    """Fan-in-scaled uniform init, zero biases, deterministic in seed.

    Conv weights draw from U(-b, b) with b = sqrt(6 / fan_in) where
    fan_in = Cin * k * k. The generator is PCG64 seeded from ``seed``.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    dt = dtype_for(precision)
    parts = []
    for name, shape in spec.param_layout():
        if name.endswith(".b"):
            parts.append(np.zeros(int(np.prod(shape)), dtype=dt))
        else:
            cout, cin, k, _ = shape
            bound = float(np.sqrt(6.0 / (cin * k * k)))
            draw = rng.uniform(-bound, bound, size=int(np.prod(shape)))
            parts.append(draw.astype(dt))
    bundle = WeightBundle.from_layout(spec.param_layout(), precision)
    return bundle.with_flat(np.concatenate(parts))


# ---------------------------------------------------------------------------
# forward evaluation


def _check_weights(spec: NetworkSpec, weights: WeightBundle) -> None:
    if weights.layout() != spec.param_layout():
        raise ShapeError("weight bundle does not match the spec's parameter layout")


def _as_batch(spec: NetworkSpec, image: np.ndarray) -> tuple[np.ndarray, bool]:
    if image.ndim == 3:
        image = image[None]
        squeeze = True
    elif image.ndim == 4:
        squeeze = False
    else:
        raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got rank {image.ndim}")
    if tuple(image.shape[1:]) != spec.input_shape:
        raise ShapeError(
            f"input shape {tuple(image.shape[1:])} does not match spec {spec.input_shape}")
    return image, squeeze


def forward_raw(spec: NetworkSpec, weights: WeightBundle, image: np.ndarray) -> np.ndarray:
    """Unrecorded forward pass on raw arrays (no tape, no saved activations)."""
    _check_weights(spec, weights)
    x, squeeze = _as_batch(spec, np.asarray(image, dtype=weights.flat.data.dtype))
    values: dict[str, np.ndarray] = {"input": x}
    ops = ad.OPS
    for layer in spec.layers:
        src = [values[n] for n in layer.inputs]
        if layer.kind == "conv":
            out, _ = ops["conv2d"].forward(
                [src[0], weights.view(f"{layer.name}.w"), weights.view(f"{layer.name}.b")], {})
        elif layer.kind == "relu":
            out, _ = ops["relu"].forward(src, {})
        elif layer.kind == "pool":
            out, _ = ops["maxpool2"].forward(src, {})
        elif layer.kind == "resize":
            out, _ = ops["resize_nearest"].forward(src, {"target_hw": layer.target_hw})
        elif layer.kind == "concat":
            out, _ = ops["concat_channels"].forward(src, {})
        else:
            raise ShapeError(f"unknown layer kind {layer.kind!r}")
        values[layer.name] = out
    out = values[spec.layers[-1].name]
    return out[0] if squeeze else out


def forward_vars(spec: NetworkSpec, params: dict[str, Var], x: Var) -> Var:
    """Recorded forward pass over existing tape variables."""
    values: dict[str, Var] = {"input": x}
    for layer in spec.layers:
        src = [values[n] for n in layer.inputs]
        if layer.kind == "conv":
            out = ad.conv2d(src[0], params[f"{layer.name}.w"], params[f"{layer.name}.b"])
        elif layer.kind == "relu":
            out = ad.relu(src[0])
        elif layer.kind == "pool":
            out = ad.maxpool2(src[0])
        elif layer.kind == "resize":
            out = ad.resize_nearest(src[0], layer.target_hw)
        elif layer.kind == "concat":
            out = ad.concat_channels(src)
        else:
            raise ShapeError(f"unknown layer kind {layer.kind!r}")
        values[layer.name] = out
    return values[spec.layers[-1].name]


def bind_params(tape: Tape, spec: NetworkSpec, weights: WeightBundle,
                prefix: str = "") -> dict[str, Var]:
    """Create tape parameter leaves for every weight of ``spec``.

    With a ``prefix``, leaf names are prefixed on the tape but the returned
    mapping still uses plain layout names for forward_vars.
    """
    params: dict[str, Var] = {}
    for name, _ in spec.param_layout():
        params[name] = tape.param(prefix + name, weights.view(name))
    return params


def forward(spec: NetworkSpec, weights: WeightBundle, image: Tensor,
            record: bool = False) -> tuple[Tensor, Tape | None]:
    """Evaluate the network; optionally record a tape for differentiation.

    Accepts a single (C,H,W) image or a (B,C,H,W) batch; the output keeps
    the input's rank. The recorded tape declares the map as its output.
    """
    if not record:
        out = forward_raw(spec, weights, image.data)
        tensor = Tensor(np.ascontiguousarray(out))
        tensor.check_finite()
        return tensor, None
    _check_weights(spec, weights)
    x_arr, squeeze = _as_batch(spec, image.data.astype(weights.flat.data.dtype, copy=False))
    tape = Tape(weights.flat.data.dtype)
    params = bind_params(tape, spec, weights)
    out_var = forward_vars(spec, params, tape.const(x_arr))
    tape.outputs = [out_var]
    out = out_var.value[0] if squeeze else out_var.value
    tensor = Tensor(np.ascontiguousarray(out))
    tensor.check_finite()
    return tensor, tape


# ---------------------------------------------------------------------------
# teacher output transforms


@dataclass(frozen=True)
class SupervisionMap:
    """A pixel-wise target map together with its value regime."""

    values: Tensor
    regime: str  # constrained_0_2 | normalized_0_1 | binary


@dataclass(frozen=True)
class TeacherState:
    """Training-time teacher weights plus the momentum-averaged shadow copy."""

    spec: NetworkSpec
    omega: WeightBundle
    omega_hat: WeightBundle

    def __post_init__(self) -> None:
        if not self.omega.same_layout(self.omega_hat):
            raise ShapeError("omega and omega_hat must share one layout")


def constrained_spoof_maps(spec: NetworkSpec, omega: WeightBundle,
                           images: np.ndarray) -> np.ndarray:
    """Batched 2*sigmoid(g(x)) maps for spoof inputs, raw arrays in, raw out."""
    g = forward_raw(spec, omega, images)
    sig, _ = ad.OPS["sigmoid"].forward([g], {})
    return sig * sig.dtype.type(2.0)


def _zero_map(spec: NetworkSpec, precision: str) -> Tensor:
    return Tensor.zeros(spec.output_shape, precision)


def teacher_forward(state: TeacherState, which: str, sample) -> SupervisionMap:
    """Supervision target per the output constraint: live faces get the
    exact zero-map without touching the backbone; spoof faces get
    2*sigmoid of the backbone map, so every pixel stays inside (0, 2)."""
    if which not in ("mt_t", "mt_v"):
        raise ValueError("which must be 'mt_t' or 'mt_v'")
    omega = state.omega if which == "mt_t" else state.omega_hat
    if sample.label == "live":
        return SupervisionMap(_zero_map(state.spec, omega.precision), "constrained_0_2")
    maps = constrained_spoof_maps(state.spec, omega,
                                  sample.image.data[None].astype(omega.flat.data.dtype))
    return SupervisionMap(Tensor(maps[0]), "constrained_0_2")


def _minmax_normalize(raw: np.ndarray) -> np.ndarray | None:
    lo = float(raw.min())
    hi = float(raw.max())
    if hi - lo < DEGENERATE_EPS:
        return None
    return ((raw - lo) / (hi - lo)).astype(raw.dtype)


def _note_degenerate(tag: str) -> None:
    global _degenerate_maps
    _degenerate_maps += 1
    log.debug("degenerate constant map in %s; emitted zero-map (count=%d)",
              tag, _degenerate_maps)


def normalized_supervision(omega: WeightBundle, spec: NetworkSpec,
                           sample) -> SupervisionMap:
    """Deployment-time supervision: per-image min-max of sigmoid(g) for
    spoof faces, the zero-map for live faces. A constant map (range below
    1e-6) carries no spatial cue and falls back to the zero-map."""
    if sample.label == "live":
        return SupervisionMap(_zero_map(spec, omega.precision), "normalized_0_1")
    g = forward_raw(spec, omega, sample.image.data[None].astype(omega.flat.data.dtype))
    sig, _ = ad.OPS["sigmoid"].forward([g], {})
    normed = _minmax_normalize(sig[0])
    if normed is None:
        _note_degenerate("normalized_supervision")
        return SupervisionMap(_zero_map(spec, omega.precision), "normalized_0_1")
    return SupervisionMap(Tensor(normed), "normalized_0_1")


def baseline_teacher_output(omega: WeightBundle, spec: NetworkSpec,
                            sample) -> SupervisionMap:
    """Comparison-teacher transform: per-image min-max of the raw backbone
    map (no sigmoid) for spoof faces, zero-map for live faces."""
    if sample.label == "live":
        return SupervisionMap(_zero_map(spec, omega.precision), "normalized_0_1")
    g = forward_raw(spec, omega, sample.image.data[None].astype(omega.flat.data.dtype))
    normed = _minmax_normalize(g[0])
    if normed is None:
        _note_degenerate("baseline_teacher_output")
        return SupervisionMap(_zero_map(spec, omega.precision), "normalized_0_1")
    return SupervisionMap(Tensor(normed), "normalized_0_1")
