"""Declarative network/initialization description shared by every module.

Architectures are written as YAML documents (see ``docs/arch_schema.md``)
and parsed into immutable dataclasses.  Conv layers carry their spatial
site counts explicitly; :func:`conv_output_sites` computes them for the
usual valid-padding, square-kernel case.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

FC = "fc"
CONV = "conv"
RELU = "relu"
LINEAR = "linear"

_KINDS = {"fc": FC, "fully_connected": FC, "conv": CONV, "convolutional": CONV}
_ACTIVATIONS = {"relu": RELU, "linear": LINEAR}


class ConfigError(ValueError):
    """Raised when an architecture document cannot be turned into an ArchSpec."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class Diagnostic:
    layer: int | None
    rule: str
    message: str

    def __str__(self) -> str:
        where = "input" if self.layer is None else f"layer {self.layer}"
        return f"{where}: {self.message} [{self.rule}]"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int
    width: int
    batch_norm: bool = False
    gamma: float = 1.0
    beta: float = 0.0
    activation: str = RELU
    kernel_sites: int | None = None
    spatial_sites: int | None = None
    # geometry used only by the simulator; the recursions never look at it
    kernel_size: int | None = None
    stride: int | None = None

    @property
    def is_conv(self) -> bool:
        return self.kind == CONV

    @property
    def n_units(self) -> int:
        """Number of scalar outputs (width x sites for conv)."""
        return self.width * (self.spatial_sites or 1) if self.is_conv else self.width


@dataclass(frozen=True)
class InitSpec:
    sigma_w_sq: float = 2.0
    sigma_b_sq: float = 0.5
    momentum: float = 0.9


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[LayerSpec, ...]
    init: InitSpec = field(default_factory=InitSpec)
    # int for FC inputs, (channels, sites) for conv inputs
    input_dim: int | tuple[int, int] = 784
    name: str = ""

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_units(self) -> int:
        if isinstance(self.input_dim, tuple):
            return self.input_dim[0] * self.input_dim[1]
        return self.input_dim

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].n_units

    @property
    def has_batch_norm(self) -> bool:
        return any(lay.batch_norm for lay in self.layers)

    def with_gamma(self, gamma: float) -> ArchSpec:
        """Copy with ``gamma`` applied to every BN layer."""
        layers = tuple(replace(lay, gamma=float(gamma)) if lay.batch_norm else lay
                       for lay in self.layers)
        return replace(self, layers=layers)

    def vanilla(self) -> ArchSpec:
        """Same architecture with every BatchNorm module removed."""
        layers = tuple(replace(lay, batch_norm=False) for lay in self.layers)
        return replace(self, layers=layers)

    def with_init(self, **kwargs: float) -> ArchSpec:
        return replace(self, init=replace(self.init, **kwargs))

    def with_width(self, width: int) -> ArchSpec:
        """Copy with every hidden layer set to ``width`` units/channels.

        Fan-ins are recomputed; the output layer keeps its width.
        """
        layers = []
        prev_units = None
        for i, lay in enumerate(self.layers):
            w = lay.width if i == len(self.layers) - 1 else int(width)
            if i == 0:
                fan_in = lay.fan_in
            elif lay.is_conv:
                fan_in = layers[-1].width * (lay.kernel_sites or 1)
            else:
                fan_in = prev_units
            new = replace(lay, width=w, fan_in=fan_in)
            layers.append(new)
            prev_units = new.n_units
        return replace(self, layers=tuple(layers))


def conv_output_sites(in_side: int, kernel: int = 3, stride: int = 2) -> int:
    """Output site count of a square valid-padding convolution.

    >>> [conv_output_sites(s) for s in (32, 15, 7)]
    [225, 49, 9]
    """
    side = (in_side - kernel) // stride + 1
    if side < 1:
        raise ValueError(f"kernel {kernel} does not fit a {in_side}x{in_side} map")
    return side * side


def validate_dims(spec: ArchSpec) -> list[Diagnostic]:
    """Check every structural invariant; an empty list means the spec is valid."""
    out: list[Diagnostic] = []
    layers = spec.layers
    if len(layers) < 2:
        out.append(Diagnostic(None, "depth", f"need at least 2 layers, got {len(layers)}"))
    init = spec.init
    if not init.sigma_w_sq > 0:
        out.append(Diagnostic(None, "sigma_w_sq", "sigma_w_sq must be positive"))
    if not init.sigma_b_sq >= 0:
        out.append(Diagnostic(None, "sigma_b_sq", "sigma_b_sq must be nonnegative"))
    if not 0 <= init.momentum < 1:
        out.append(Diagnostic(None, "momentum", "momentum must lie in [0, 1)"))
    conv_input = isinstance(spec.input_dim, tuple)
    if conv_input:
        if len(spec.input_dim) != 2 or min(spec.input_dim) < 1:
            out.append(Diagnostic(None, "input_dim", "conv input needs positive (channels, sites)"))
    elif spec.input_dim < 1:
        out.append(Diagnostic(None, "input_dim", "input dimension must be positive"))

    for i, lay in enumerate(layers, start=1):
        last = i == len(layers)
        if lay.kind not in (FC, CONV):
            out.append(Diagnostic(i, "kind", f"unknown layer kind {lay.kind!r}"))
            continue
        if lay.width < 1 or lay.fan_in < 1:
            out.append(Diagnostic(i, "positive", "width and fan_in must be positive"))
        if lay.activation not in (RELU, LINEAR):
            out.append(Diagnostic(i, "activation", f"unknown activation {lay.activation!r}"))
        if last and (lay.activation != LINEAR or lay.batch_norm):
            out.append(Diagnostic(i, "final_linear", "final layer must be linear without BatchNorm"))
        if not last and lay.activation != RELU:
            out.append(Diagnostic(i, "hidden_relu", "hidden layers must use ReLU"))
        if lay.batch_norm and not lay.gamma > 0:
            out.append(Diagnostic(i, "gamma", "gamma must be positive when batch_norm is on"))
        has_sites = lay.kernel_sites is not None or lay.spatial_sites is not None
        if lay.is_conv:
            if lay.kernel_sites is None or lay.kernel_sites < 1:
                out.append(Diagnostic(i, "conv_sites", "conv layer missing kernel_sites"))
            if lay.spatial_sites is None or lay.spatial_sites < 1:
                out.append(Diagnostic(i, "conv_sites", "conv layer missing spatial_sites"))
        elif has_sites:
            out.append(Diagnostic(i, "conv_sites", "kernel_sites/spatial_sites only apply to conv layers"))

        # dimension compatibility with the previous layer (or the input)
        if i == 1:
            if lay.is_conv:
                if not conv_input:
                    out.append(Diagnostic(i, "dims", "conv first layer needs a (channels, sites) input"))
                    continue
                expected = spec.input_dim[0] * (lay.kernel_sites or 0)
                prev_desc = f"input channels ({spec.input_dim[0]})"
            else:
                expected = spec.input_units
                prev_desc = f"input size ({expected})"
        else:
            prev = layers[i - 2]
            if lay.is_conv:
                if not prev.is_conv:
                    out.append(Diagnostic(i, "dims", f"conv layer {i} cannot follow fc layer {i - 1}"))
                    continue
                expected = prev.width * (lay.kernel_sites or 0)
                prev_desc = f"layer {i - 1} width ({prev.width}) x kernel_sites"
            else:
                expected = prev.n_units
                prev_desc = f"layer {i - 1} output units ({expected})"
        if lay.fan_in != expected:
            out.append(Diagnostic(i, "dims",
                                  f"fan_in {lay.fan_in} of layer {i} does not match {prev_desc} = {expected}"))
        if lay.is_conv and lay.kernel_size is not None and lay.spatial_sites:
            in_sites = spec.input_dim[1] if i == 1 and conv_input else (
                layers[i - 2].spatial_sites if i > 1 else None)
            side = math.isqrt(in_sites or 0)
            if in_sites is None:
                pass  # already reported on the layer below
            elif side * side != in_sites:
                out.append(Diagnostic(i, "geometry", f"input map of {in_sites} sites is not square"))
            else:
                try:
                    k = conv_output_sites(side, lay.kernel_size, lay.stride or 1)
                except ValueError as exc:
                    out.append(Diagnostic(i, "geometry", str(exc)))
                else:
                    if k != lay.spatial_sites:
                        out.append(Diagnostic(i, "geometry",
                                              f"spatial_sites {lay.spatial_sites} != {k} from kernel/stride"))
                if lay.kernel_sites and lay.kernel_size ** 2 != lay.kernel_sites:
                    out.append(Diagnostic(i, "geometry", "kernel_sites must equal kernel_size squared"))
    return out


# ---------------------------------------------------------------------------
# YAML <-> ArchSpec

def _get(doc: dict, key: str, path: str, kind: type | tuple, default: Any = ...) -> Any:
    if key not in doc:
        if default is ...:
            raise ConfigError(f"{path}.{key}" if path else key, "required field missing")
        return default
    val = doc[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if not isinstance(val, kind) or (kind is int and isinstance(val, bool)):
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ConfigError(f"{path}.{key}" if path else key, f"expected {name}, got {type(val).__name__}")
    return val


_LAYER_KEYS = {"kind", "width", "fan_in", "batch_norm", "gamma", "beta", "activation",
               "kernel_sites", "spatial_sites", "kernel_size", "stride"}


def _parse_layer(doc: Any, path: str, is_last: bool, prev: LayerSpec | None,
                 input_dim: int | tuple[int, int]) -> LayerSpec:
    if not isinstance(doc, dict):
        raise ConfigError(path, "layer entry must be a mapping")
    unknown = set(doc) - _LAYER_KEYS
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    kind_raw = _get(doc, "kind", path, str, "fc").lower()
    if kind_raw not in _KINDS:
        raise ConfigError(f"{path}.kind", f"unknown layer kind {kind_raw!r}")
    kind = _KINDS[kind_raw]
    width = _get(doc, "width", path, int)
    act = _get(doc, "activation", path, str, LINEAR if is_last else RELU).lower()
    if act not in _ACTIVATIONS:
        raise ConfigError(f"{path}.activation", f"unknown activation {act!r}")
    kernel_size = _get(doc, "kernel_size", path, int, None)
    kernel_sites = _get(doc, "kernel_sites", path, int, None)
    if kind == CONV and kernel_sites is None and kernel_size is not None:
        kernel_sites = kernel_size * kernel_size
    if kind == CONV and kernel_size is None and kernel_sites is not None:
        side = math.isqrt(kernel_sites)
        kernel_size = side if side * side == kernel_sites else None
    spatial_sites = _get(doc, "spatial_sites", path, int, None)
    fan_in = _get(doc, "fan_in", path, int, None)
    if fan_in is None:
        # derive from the neighbour; validate_dims catches inconsistent input
        if kind == CONV:
            chans = prev.width if prev is not None else (
                input_dim[0] if isinstance(input_dim, tuple) else 0)
            fan_in = chans * (kernel_sites or 0)
        else:
            fan_in = prev.n_units if prev is not None else (
                input_dim[0] * input_dim[1] if isinstance(input_dim, tuple) else input_dim)
    return LayerSpec(
        kind=kind,
        fan_in=fan_in,
        width=width,
        batch_norm=_get(doc, "batch_norm", path, bool, False),
        gamma=_get(doc, "gamma", path, float, 1.0),
        beta=_get(doc, "beta", path, float, 0.0),
        activation=_ACTIVATIONS[act],
        kernel_sites=kernel_sites,
        spatial_sites=spatial_sites,
        kernel_size=kernel_size,
        stride=_get(doc, "stride", path, int, 1 if kind == CONV else None),
    )


def parse_arch(text: str) -> ArchSpec:
    """Parse and validate a YAML architecture document.

    Raises :class:`ConfigError` naming the offending field (schema errors)
    or the first failing layer (dimension/invariant errors).
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"not valid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("", "document must be a mapping")

    inp = doc.get("input")
    if not isinstance(inp, dict):
        raise ConfigError("input", "required mapping missing")
    if "channels" in inp or "sites" in inp:
        input_dim: int | tuple[int, int] = (_get(inp, "channels", "input", int),
                                            _get(inp, "sites", "input", int))
    else:
        input_dim = _get(inp, "dim", "input", int)

    init_doc = doc.get("init", {})
    if not isinstance(init_doc, dict):
        raise ConfigError("init", "expected a mapping")
    init = InitSpec(
        sigma_w_sq=_get(init_doc, "sigma_w_sq", "init", float, 2.0),
        sigma_b_sq=_get(init_doc, "sigma_b_sq", "init", float, 0.5),
        momentum=_get(init_doc, "momentum", "init", float, 0.9),
    )

    raw_layers = doc.get("layers")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ConfigError("layers", "expected a non-empty list")
    layers: list[LayerSpec] = []
    for i, ld in enumerate(raw_layers):
        prev = layers[-1] if layers else None
        layers.append(_parse_layer(ld, f"layers[{i}]", i == len(raw_layers) - 1, prev, input_dim))

    spec = ArchSpec(layers=tuple(layers), init=init, input_dim=input_dim,
                    name=str(doc.get("name", "")))
    diags = validate_dims(spec)
    if diags:
        d = diags[0]
        path = f"layers[{d.layer - 1}]" if d.layer is not None else d.rule
        raise ConfigError(path, d.message)
    return spec


def load_arch(path: str | Path) -> ArchSpec:
    return parse_arch(Path(path).read_text(encoding="utf-8"))


def to_document(spec: ArchSpec) -> dict:
    if isinstance(spec.input_dim, tuple):
        inp = {"channels": spec.input_dim[0], "sites": spec.input_dim[1]}
    else:
        inp = {"dim": spec.input_dim}
    layers = []
    for lay in spec.layers:
        d: dict[str, Any] = {"kind": lay.kind, "width": lay.width, "fan_in": lay.fan_in,
                             "activation": lay.activation, "batch_norm": lay.batch_norm,
                             "gamma": lay.gamma, "beta": lay.beta}
        for key in ("kernel_sites", "spatial_sites", "kernel_size", "stride"):
            val = getattr(lay, key)
            if val is not None:
                d[key] = val
        layers.append(d)
    doc = {"input": inp,
           "init": {"sigma_w_sq": spec.init.sigma_w_sq, "sigma_b_sq": spec.init.sigma_b_sq,
                    "momentum": spec.init.momentum},
           "layers": layers}
    if spec.name:
        doc = {"name": spec.name, **doc}
    return doc


def serialize(spec: ArchSpec) -> str:
    return yaml.safe_dump(to_document(spec), sort_keys=False)


def mnist_fc(gamma: float = 1.0, batch_norm: bool = True, width: int = 1000,
             input_dim: int = 784, n_out: int = 10, depth: int = 4) -> ArchSpec:
    """The fully connected architecture of the MNIST experiments."""
    layers = []
    fan_in = input_dim
    for i in range(depth):
        last = i == depth - 1
        w = n_out if last else width
        layers.append(LayerSpec(FC, fan_in, w, batch_norm=batch_norm and not last, gamma=gamma,
                                activation=LINEAR if last else RELU))
        fan_in = w
    return ArchSpec(tuple(layers), InitSpec(), input_dim, name="mnist-fc")


def cifar_conv(gamma: float = 1.0, batch_norm: bool = True, channels=(30, 60, 90),
               in_channels: int = 3, in_side: int = 32, n_out: int = 10) -> ArchSpec:
    """3x3/stride-2 valid conv stack followed by a linear FC head."""
    layers = []
    prev_c, side = in_channels, in_side
    for c in channels:
        sites = conv_output_sites(side, 3, 2)
        layers.append(LayerSpec(CONV, prev_c * 9, c, batch_norm=batch_norm, gamma=gamma,
                                kernel_sites=9, spatial_sites=sites, kernel_size=3, stride=2))
        prev_c, side = c, math.isqrt(sites)
    layers.append(LayerSpec(FC, prev_c * side * side, n_out, activation=LINEAR))
    return ArchSpec(tuple(layers), InitSpec(), (in_channels, in_side * in_side), name="cifar-conv")
