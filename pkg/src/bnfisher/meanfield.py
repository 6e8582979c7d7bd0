"""Mean-field order-parameter recursions for ReLU FC/Conv networks.

Forward quantities (per unit, averaged over the weight ensemble):

* ``gamma_cap``   -- mean squared pre-activation
* ``gamma_tilde`` -- pre-activation correlation between two independent inputs
* ``gamma_hat``   -- same, between two different spatial sites (conv only)
* ``h*``          -- the analogous statistics of the post-activations

Backward quantities ``delta*`` are the matching second moments of
``d f / d z`` for a single output component, so the output layer seeds
``delta = delta_tilde = 1``.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace

from .arch import ArchSpec, InitSpec, RELU

HAT_SEEDS = ("zero", "tilde")
BN_SCALES = ("second_moment", "centered")
SITE_NORMS = ("per_site", "flattened")
CLAMP_WARN = 1e-9


class DegenerateLayerError(ArithmeticError):
    def __init__(self, message: str, layer: int | None = None):
        self.layer = layer
        super().__init__(message if layer is None else f"layer {layer}: {message}")


@dataclass(frozen=True)
class LayerOrderParams:
    gamma_cap: float | None = None
    gamma_tilde: float | None = None
    gamma_hat: float | None = None
    h: float | None = None
    h_tilde: float | None = None
    h_hat: float | None = None
    delta: float | None = None
    delta_tilde: float | None = None
    delta_hat: float | None = None
    c_tilde: float | None = None
    c_hat: float | None = None

    def as_row(self) -> dict[str, float | None]:
        return {
            "Gamma": self.gamma_cap, "Gamma_tilde": self.gamma_tilde, "Gamma_hat": self.gamma_hat,
            "H": self.h, "H_tilde": self.h_tilde, "H_hat": self.h_hat,
            "Delta": self.delta, "Delta_tilde": self.delta_tilde, "Delta_hat": self.delta_hat,
        }


@dataclass(frozen=True)
class OrderParamProfile:
    per_layer: tuple[LayerOrderParams, ...]
    arch: ArchSpec = field(repr=False)

    def __len__(self) -> int:
        return len(self.per_layer)

    def __getitem__(self, l: int) -> LayerOrderParams:
        return self.per_layer[l]

    def column(self, name: str) -> list[float | None]:
        return [p.as_row()[name] for p in self.per_layer]


PROFILE_COLUMNS = ("layer", "Gamma", "Gamma_tilde", "Gamma_hat", "H", "H_tilde", "H_hat",
                   "Delta", "Delta_tilde", "Delta_hat")


def relu_bracket(c: float) -> float:
    """sqrt(1-c^2) + c*pi/2 + c*asin(c); runs from 1 at c=0 to pi at c=1."""
    return math.sqrt(max(0.0, 1.0 - c * c)) + c * math.pi / 2 + c * math.asin(c)


def _ratio(num: float, den: float, what: str) -> float:
    if den <= 0:
        raise DegenerateLayerError("degenerate layer: zero pre-activation variance")
    c = num / den
    if c < 0.0 or c > 1.0:
        if c < -CLAMP_WARN or c > 1.0 + CLAMP_WARN:
            warnings.warn(f"{what}={c!r} outside [0, 1]; clamped", RuntimeWarning, stacklevel=3)
        c = min(max(c, 0.0), 1.0)
    return c


def input_base_case(spec: ArchSpec) -> LayerOrderParams:
    """Order parameters of whitened inputs: E|x|^2 = N0, E x = 0."""
    conv = spec.layers[0].is_conv
    return LayerOrderParams(h=1.0, h_tilde=0.0, h_hat=0.0 if conv else None)


def _forward_gammas(prev: LayerOrderParams, init: InitSpec) -> tuple[float, float]:
    g = init.sigma_b_sq + init.sigma_w_sq * prev.h
    gt = init.sigma_b_sq + init.sigma_w_sq * prev.h_tilde
    return g, gt


def forward_step_fc_vanilla(prev: LayerOrderParams, init: InitSpec) -> LayerOrderParams:
    g, gt = _forward_gammas(prev, init)
    ct = _ratio(gt, g, "c_tilde")
    return LayerOrderParams(gamma_cap=g, gamma_tilde=gt, h=g / 2,
                            h_tilde=g / (2 * math.pi) * relu_bracket(ct), c_tilde=ct)


def forward_step_fc_bn(prev: LayerOrderParams, init: InitSpec, gamma: float) -> LayerOrderParams:
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    g, gt = _forward_gammas(prev, init)
    ct = _ratio(gt, g, "c_tilde")
    return LayerOrderParams(gamma_cap=g, gamma_tilde=gt, h=gamma ** 2 / 2,
                            h_tilde=gamma ** 2 / (2 * math.pi), c_tilde=ct)


def forward_step_conv(prev: LayerOrderParams, init: InitSpec, bn: bool,
                      gamma: float = 1.0) -> LayerOrderParams:
    if prev.h_hat is None:
        raise ValueError("conv forward step needs h_hat from the previous layer")
    g, gt = _forward_gammas(prev, init)
    gh = init.sigma_b_sq + init.sigma_w_sq * prev.h_hat
    ct = _ratio(gt, g, "c_tilde")
    ch = _ratio(gh, g, "c_hat")
    if bn:
        if not gamma > 0:
            raise ValueError("gamma must be positive")
        h, ht, hh = gamma ** 2 / 2, gamma ** 2 / (2 * math.pi), gamma ** 2 / (2 * math.pi)
    else:
        h = g / 2
        ht = g / (2 * math.pi) * relu_bracket(ct)
        hh = g / (2 * math.pi) * relu_bracket(ch)
    return LayerOrderParams(gamma_cap=g, gamma_tilde=gt, gamma_hat=gh, h=h, h_tilde=ht, h_hat=hh,
                            c_tilde=ct, c_hat=ch)


def _bn_scale(current: LayerOrderParams, bn_scale: str, cross: float | None) -> float:
    if bn_scale == "second_moment":
        s2 = current.gamma_cap
    elif bn_scale == "centered":
        # expected BN variance: second moment minus the cross-example part
        s2 = current.gamma_cap - (cross if cross is not None else current.gamma_tilde)
    else:
        raise ValueError(f"bn_scale must be one of {BN_SCALES}")
    if s2 <= 0:
        raise DegenerateLayerError("degenerate layer: zero pre-activation variance")
    return s2


def backward_step_fc(next_delta: tuple[float, float], current: LayerOrderParams, init: InitSpec,
                     bn: bool, gamma: float = 1.0,
                     bn_scale: str = "second_moment") -> tuple[float, float]:
    d_next, dt_next = next_delta
    sw = init.sigma_w_sq
    if bn:
        k = gamma ** 2 * sw / _bn_scale(current, bn_scale, current.gamma_tilde)
        return k / 2 * d_next, k / 4 * dt_next
    ct = _ratio(current.gamma_tilde, current.gamma_cap, "c_tilde")
    return sw / 2 * d_next, sw * dt_next / (2 * math.pi) * (math.pi / 2 + math.asin(ct))


def backward_step_conv(next_delta: tuple[float, float, float], current: LayerOrderParams,
                       init: InitSpec, bn: bool, gamma: float = 1.0,
                       bn_scale: str = "second_moment") -> tuple[float, float, float]:
    d_next, dt_next, dh_next = next_delta
    sw = init.sigma_w_sq
    if bn:
        k = gamma ** 2 * sw / _bn_scale(current, bn_scale, current.gamma_hat)
        return k / 2 * d_next, k / 4 * dt_next, k / 4 * dh_next
    ct = _ratio(current.gamma_tilde, current.gamma_cap, "c_tilde")
    ch = _ratio(current.gamma_hat, current.gamma_cap, "c_hat")
    return (sw / 2 * d_next,
            sw * dt_next / (2 * math.pi) * (math.pi / 2 + math.asin(ct)),
            sw * dh_next / (2 * math.pi) * (math.pi / 2 + math.asin(ch)))


def _check_supported(spec: ArchSpec) -> None:
    for i, lay in enumerate(spec.layers, start=1):
        if lay.beta != 0:
            raise ValueError(f"layer {i}: recursions assume beta = 0, got {lay.beta}")
        if i < spec.depth and lay.activation != RELU:
            raise ValueError(f"layer {i}: recursions are closed-form for ReLU only")


def run_profile(spec: ArchSpec, *, hat_seed: str = "zero", bn_scale: str = "second_moment",
                site_norm: str = "per_site") -> OrderParamProfile:
    """Forward pass l = 1..L then backward pass l = L-1..1.

    ``hat_seed`` sets the cross-site backward correlation entering the last
    conv layer from an FC layer above it: ``"zero"`` (what a random FC head
    produces) or ``"tilde"`` (copy of the same-site value).

    ``bn_scale`` chooses what the BN backward rules divide by:
    ``"second_moment"`` divides by Gamma (the default); ``"centered"`` uses the
    expected BN variance ``Gamma - Gamma_tilde`` instead.

    ``site_norm`` fixes what a conv layer's backward quantities measure.
    The step rules are run on site-summed values (which they propagate
    exactly for any stride); ``"per_site"`` then reports them averaged over
    the K_l output sites, matching the per-site forward quantities and the
    conv eigenvalue formula, while ``"flattened"`` leaves the sums.
    """
    if hat_seed not in HAT_SEEDS:
        raise ValueError(f"hat_seed must be one of {HAT_SEEDS}")
    if bn_scale not in BN_SCALES:
        raise ValueError(f"bn_scale must be one of {BN_SCALES}")
    if site_norm not in SITE_NORMS:
        raise ValueError(f"site_norm must be one of {SITE_NORMS}")
    _check_supported(spec)
    L = spec.depth
    init = spec.init
    params: list[LayerOrderParams] = [input_base_case(spec)]
    for l, lay in enumerate(spec.layers, start=1):
        prev = params[-1]
        try:
            if lay.is_conv:
                cur = forward_step_conv(prev, init, lay.batch_norm and l < L, lay.gamma)
            elif l < L and lay.batch_norm:
                cur = forward_step_fc_bn(prev, init, lay.gamma)
            else:
                cur = forward_step_fc_vanilla(prev, init)
        except DegenerateLayerError as exc:
            raise DegenerateLayerError(str(exc), l) from None
        if l == L:
            # linear output: h = z
            cur = replace(cur, h=cur.gamma_cap, h_tilde=cur.gamma_tilde,
                          h_hat=cur.gamma_hat if lay.is_conv else None)
        params.append(cur)

    params[L] = replace(params[L], delta=1.0, delta_tilde=1.0,
                        delta_hat=(0.0 if hat_seed == "zero" else 1.0) if spec.layers[-1].is_conv else None)
    for l in range(L - 1, 0, -1):
        lay = spec.layers[l - 1]
        up = params[l + 1]
        cur = params[l]
        try:
            if lay.is_conv:
                dh_next = up.delta_hat
                if dh_next is None:
                    dh_next = 0.0 if hat_seed == "zero" else up.delta_tilde
                d, dt, dh = backward_step_conv((up.delta, up.delta_tilde, dh_next), cur, init,
                                               lay.batch_norm, lay.gamma, bn_scale)
                params[l] = replace(cur, delta=d, delta_tilde=dt, delta_hat=dh)
            else:
                d, dt = backward_step_fc((up.delta, up.delta_tilde), cur, init,
                                         lay.batch_norm, lay.gamma, bn_scale)
                params[l] = replace(cur, delta=d, delta_tilde=dt)
        except DegenerateLayerError as exc:
            raise DegenerateLayerError(str(exc), l) from None
    if site_norm == "per_site":
        for l in range(1, L):
            lay = spec.layers[l - 1]
            if lay.is_conv:
                p, k = params[l], lay.spatial_sites
                params[l] = replace(p, delta=p.delta / k, delta_tilde=p.delta_tilde / k,
                                    delta_hat=p.delta_hat / k)
    return OrderParamProfile(tuple(params), spec)


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def profile_to_csv(profile: OrderParamProfile) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROFILE_COLUMNS)
    for l, p in enumerate(profile.per_layer):
        row = p.as_row()
        w.writerow([l] + [_fmt(row[c]) for c in PROFILE_COLUMNS[1:]])
    return buf.getvalue()


def profile_from_csv(text: str, spec: ArchSpec) -> OrderParamProfile:
    rows = list(csv.DictReader(io.StringIO(text)))
    keymap = dict(zip(PROFILE_COLUMNS[1:], ("gamma_cap", "gamma_tilde", "gamma_hat", "h", "h_tilde",
                                            "h_hat", "delta", "delta_tilde", "delta_hat")))
    out = []
    for r in rows:
        vals = {keymap[k]: (float(r[k]) if r[k] != "" else None) for k in keymap}
        out.append(LayerOrderParams(**vals))
    return OrderParamProfile(tuple(out), spec)
