"""Random FC/Conv ReLU networks with BatchNorm: sampling, forward, backward.

Activation layout is ``(batch, units)`` for FC layers and
``(batch, sites, channels)`` for conv layers; an FC layer following a conv
layer sees the conv output flattened site-major.

Convolutions are direct cross-correlations over an explicit table
``index[alpha, beta]`` giving the input site read by output site ``alpha``
at kernel offset ``beta`` (valid padding, square maps).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .arch import ArchSpec, LayerSpec

MIN_BN_BATCH = 256
MIN_STD = 1e-12
VANILLA = "vanilla"
POPULATION = "population"
FROZEN = "frozen"
FULL = "full"


class DegenerateStatisticsError(ArithmeticError):
    pass


class StructureError(ValueError):
    pass


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``; order of creation is irrelevant."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & (2 ** 64 - 1),
                                                        spawn_key=tuple(int(k) for k in key)))


@dataclass(frozen=True)
class ConvGeometry:
    in_side: int
    out_side: int
    kernel: int
    stride: int
    index: np.ndarray = field(repr=False)  # (out_sites, kernel_sites)

    @classmethod
    def build(cls, in_sites: int, kernel: int, stride: int) -> ConvGeometry:
        in_side = math.isqrt(in_sites)
        if in_side * in_side != in_sites:
            raise StructureError(f"input map of {in_sites} sites is not square")
        out_side = (in_side - kernel) // stride + 1
        if out_side < 1:
            raise StructureError(f"kernel {kernel} does not fit a {in_side}x{in_side} map")
        p = np.arange(out_side) * stride
        rows = (p[:, None, None, None] + np.arange(kernel)[None, None, :, None])
        cols = (p[None, :, None, None] + np.arange(kernel)[None, None, None, :])
        index = (rows * in_side + cols).reshape(out_side * out_side, kernel * kernel)
        index.setflags(write=False)
        return cls(in_side, out_side, kernel, stride, index)


@dataclass
class LayerParams:
    W: np.ndarray            # FC: (out, in); conv: (kernel_sites, C_in, C_out)
    b: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"W": self.W, "b": self.b}
        if self.gamma is not None:
            out["gamma"] = self.gamma
            out["beta"] = self.beta
        return out


@dataclass
class NetInstance:
    spec: ArchSpec
    layers: list[LayerParams]
    geometry: list[ConvGeometry | None]
    seed: int

    def copy(self) -> NetInstance:
        layers = [LayerParams(**{k: v.copy() for k, v in lp.arrays().items()}) for lp in self.layers]
        return NetInstance(self.spec, layers, self.geometry, self.seed)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for lp in self.layers for a in lp.arrays().values()])

    def set_flat_params(self, vec: np.ndarray) -> None:
        pos = 0
        for lp in self.layers:
            for a in lp.arrays().values():
                a[...] = vec[pos:pos + a.size].reshape(a.shape)
                pos += a.size

    @property
    def n_params(self) -> int:
        return sum(a.size for lp in self.layers for a in lp.arrays().values())


@dataclass
class BatchTape:
    """Forward (and optionally backward) state for one batch.

    ``h[0]`` is the input; for layer ``l`` (1-based) ``z[l]`` is the
    pre-activation, ``u[l]`` the normalized pre-activation (BN layers),
    ``a[l]`` the ReLU argument and ``h[l]`` the output.  ``delta[l]`` is the
    derivative of the seeded objective with respect to ``z[l]`` and
    ``da[l]`` the derivative with respect to ``a[l]``.
    """
    h: list[np.ndarray]
    z: list[np.ndarray | None]
    u: list[np.ndarray | None]
    a: list[np.ndarray | None]
    mu: list[np.ndarray | None]
    s: list[np.ndarray | None]
    mode: str
    delta: list[np.ndarray | None] | None = None
    da: list[np.ndarray | None] | None = None

    @property
    def output(self) -> np.ndarray:
        return self.h[-1]

    def stats(self) -> list[tuple[np.ndarray, np.ndarray] | None]:
        return [None if m is None else (m, s) for m, s in zip(self.mu, self.s)]


def _geometry(spec: ArchSpec) -> list[ConvGeometry | None]:
    geo: list[ConvGeometry | None] = []
    in_sites = spec.input_dim[1] if isinstance(spec.input_dim, tuple) else None
    for i, lay in enumerate(spec.layers, start=1):
        if not lay.is_conv:
            geo.append(None)
            continue
        kernel = lay.kernel_size or math.isqrt(lay.kernel_sites)
        g = ConvGeometry.build(in_sites, kernel, lay.stride or 1)
        if g.index.shape != (lay.spatial_sites, lay.kernel_sites):
            raise StructureError(f"layer {i}: geometry gives {g.index.shape[0]} sites, "
                                 f"spec says {lay.spatial_sites}")
        geo.append(g)
        in_sites = lay.spatial_sites
    return geo


def _sample_layer(lay: LayerSpec, spec: ArchSpec, rng: np.random.Generator, bn: bool) -> LayerParams:
    std_w = math.sqrt(spec.init.sigma_w_sq / lay.fan_in)
    if lay.is_conv:
        c_in = lay.fan_in // lay.kernel_sites
        W = rng.standard_normal((lay.kernel_sites, c_in, lay.width)) * std_w
    else:
        W = rng.standard_normal((lay.width, lay.fan_in)) * std_w
    if spec.init.sigma_b_sq > 0:
        b = rng.standard_normal(lay.width) * math.sqrt(spec.init.sigma_b_sq)
    else:
        b = np.zeros(lay.width)
    if bn:
        return LayerParams(W, b, np.full(lay.width, float(lay.gamma)), np.full(lay.width, float(lay.beta)))
    return LayerParams(W, b)


def sample_network(spec: ArchSpec, seed: int) -> NetInstance:
    """Draw weights N(0, sigma_w^2/fan_in) and biases N(0, sigma_b^2) for every layer."""
    geo = _geometry(spec)
    layers = []
    for i, lay in enumerate(spec.layers, start=1):
        rng = substream(seed, 0, i)
        layers.append(_sample_layer(lay, spec, rng, lay.batch_norm and i < spec.depth))
    return NetInstance(spec, layers, geo, int(seed))


def _prep_input(net: NetInstance, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    spec = net.spec
    if spec.layers[0].is_conv:
        c, k = spec.input_dim
        if x.ndim == 2:
            x = x.reshape(x.shape[0], k, c)
        if x.shape[1:] != (k, c):
            raise StructureError(f"conv input must be (m, {k}, {c}), got {x.shape}")
    elif x.ndim != 2 or x.shape[1] != spec.input_units:
        raise StructureError(f"input must be (m, {spec.input_units}), got {x.shape}")
    if x.shape[0] < 1:
        raise StructureError("empty batch")
    return x


def _affine(lay: LayerSpec, lp: LayerParams, geo: ConvGeometry | None, h: np.ndarray) -> np.ndarray:
    if lay.is_conv:
        z = np.zeros((h.shape[0], geo.index.shape[0], lay.width))
        for beta in range(geo.index.shape[1]):
            z += h[:, geo.index[:, beta], :] @ lp.W[beta]
        return z + lp.b
    if h.ndim == 3:
        h = h.reshape(h.shape[0], -1)
    return h @ lp.W.T + lp.b


def _affine_transpose(lay: LayerSpec, lp: LayerParams, geo: ConvGeometry | None,
                      delta: np.ndarray, prev_shape: tuple[int, ...]) -> np.ndarray:
    """Gradient with respect to the layer input given ``delta`` at its output."""
    if lay.is_conv:
        out = np.zeros(prev_shape)
        for beta in range(geo.index.shape[1]):
            # index[:, beta] is injective, so buffered += is exact
            out[:, geo.index[:, beta], :] += delta @ lp.W[beta].T
        return out
    return (delta @ lp.W).reshape(prev_shape)


def forward(net: NetInstance, x: np.ndarray, mode: str = POPULATION,
            stats: list | None = None, min_batch: int = MIN_BN_BATCH) -> BatchTape:
    """Run the batch through the network.

    ``mode="population"`` applies BatchNorm with statistics taken over the
    batch (and spatial sites for conv layers) unless ``stats`` (as returned by
    :meth:`BatchTape.stats`) is supplied; ``mode="vanilla"`` bypasses every
    BN module.
    """
    if mode not in (POPULATION, VANILLA):
        raise ValueError(f"unknown forward mode {mode!r}")
    h = _prep_input(net, x)
    spec = net.spec
    L = spec.depth
    uses_bn = mode == POPULATION and any(lp.gamma is not None for lp in net.layers)
    if uses_bn and stats is None and h.shape[0] < min_batch:
        raise ValueError(f"BatchNorm statistics need a batch of at least {min_batch}, got {h.shape[0]}")
    tape = BatchTape([h], [None], [None], [None], [None], [None], mode)
    for l, (lay, lp, geo) in enumerate(zip(spec.layers, net.layers, net.geometry), start=1):
        z = _affine(lay, lp, geo, h)
        u = mu = s = None
        if l == L:
            a = z
            h = z
        else:
            if mode == POPULATION and lp.gamma is not None:
                axes = (0, 1) if lay.is_conv else (0,)
                if stats is not None and stats[l] is not None:
                    mu, s = stats[l]
                else:
                    mu = z.mean(axis=axes)
                    s = np.sqrt(((z - mu) ** 2).mean(axis=axes))
                if np.any(s < MIN_STD):
                    raise DegenerateStatisticsError(f"layer {l}: BatchNorm std below {MIN_STD}")
                u = (z - mu) / s
                a = u * lp.gamma + lp.beta
            else:
                a = z
            h = np.maximum(a, 0.0)
        tape.z.append(z)
        tape.u.append(u)
        tape.a.append(a)
        tape.mu.append(mu)
        tape.s.append(s)
        tape.h.append(h)
    return tape


def backward(net: NetInstance, tape: BatchTape, seed_grad: np.ndarray,
             stats_mode: str = FROZEN) -> BatchTape:
    """Back-propagate ``seed_grad`` (d objective / d output) through the tape.

    ``stats_mode="frozen"`` treats the BN mean and std as constants;
    ``"full"`` differentiates through the batch statistics.
    """
    if stats_mode not in (FROZEN, FULL):
        raise ValueError(f"unknown stats mode {stats_mode!r}")
    spec = net.spec
    L = spec.depth
    seed_grad = np.asarray(seed_grad, dtype=np.float64)
    if seed_grad.shape != tape.h[L].shape:
        raise StructureError(f"seed gradient shape {seed_grad.shape} != output shape {tape.h[L].shape}")
    delta: list[np.ndarray | None] = [None] * (L + 1)
    da: list[np.ndarray | None] = [None] * (L + 1)
    delta[L] = seed_grad
    da[L] = seed_grad
    for l in range(L, 1, -1):
        lay, lp, geo = spec.layers[l - 1], net.layers[l - 1], net.geometry[l - 1]
        dh = _affine_transpose(lay, lp, geo, delta[l], tape.h[l - 1].shape)
        below = net.layers[l - 2]
        g = dh * (tape.a[l - 1] > 0)
        da[l - 1] = g
        if tape.u[l - 1] is None:
            delta[l - 1] = g
            continue
        du = g * below.gamma
        s = tape.s[l - 1]
        if stats_mode == FROZEN:
            dz = du / s
        else:
            axes = (0, 1) if spec.layers[l - 2].is_conv else (0,)
            u = tape.u[l - 1]
            dz = (du - du.mean(axis=axes) - u * (du * u).mean(axis=axes)) / s
        delta[l - 1] = dz
    tape.delta = delta
    tape.da = da
    return tape


def param_grads(net: NetInstance, tape: BatchTape) -> list[dict[str, np.ndarray]]:
    """Batch-summed parameter gradients, one dict per layer (keys as LayerParams)."""
    if tape.delta is None:
        raise StructureError("run backward() first")
    out = []
    for l, (lay, lp, geo) in enumerate(zip(net.spec.layers, net.layers, net.geometry), start=1):
        d = tape.delta[l]
        hp = tape.h[l - 1]
        if lay.is_conv:
            dW = np.stack([np.einsum("mkc,mkd->cd", hp[:, geo.index[:, b], :], d)
                           for b in range(geo.index.shape[1])])
            red = (0, 1)
        else:
            dW = d.T @ hp.reshape(hp.shape[0], -1)
            red = (0,)
        g = {"W": dW, "b": d.sum(axis=red)}
        if lp.gamma is not None:
            if tape.u[l] is not None:
                g["gamma"] = (tape.da[l] * tape.u[l]).sum(axis=red)
                g["beta"] = tape.da[l].sum(axis=red)
            else:
                g["gamma"] = np.zeros_like(lp.gamma)
                g["beta"] = np.zeros_like(lp.beta)
        out.append(g)
    return out


def weight_gradients(net: NetInstance, tape: BatchTape, l: int) -> np.ndarray:
    """Per-example gradient rows of layer ``l``'s weights, shape (m, n_weights)."""
    if tape.delta is None:
        raise StructureError("run backward() first")
    lay, geo = net.spec.layers[l - 1], net.geometry[l - 1]
    d = tape.delta[l]
    hp = tape.h[l - 1]
    m = d.shape[0]
    if lay.is_conv:
        rows = np.stack([np.einsum("mkc,mkd->mcd", hp[:, geo.index[:, b], :], d)
                         for b in range(geo.index.shape[1])], axis=1)
        return rows.reshape(m, -1)
    return np.einsum("mi,mj->mij", d, hp.reshape(m, -1)).reshape(m, -1)


def per_example_rows(net: NetInstance, tape: BatchTape) -> np.ndarray:
    """Per-example gradient of the seeded objective w.r.t. all parameters.

    Only meaningful with frozen statistics, where each example's objective
    depends on its own input alone.
    """
    m = tape.delta[-1].shape[0]
    blocks = []
    for l, (lay, lp) in enumerate(zip(net.spec.layers, net.layers), start=1):
        blocks.append(weight_gradients(net, tape, l))
        red = 1 if lay.is_conv else None
        d = tape.delta[l]
        blocks.append(d.sum(axis=red) if red else d.reshape(m, -1))
        if lp.gamma is not None:
            if tape.u[l] is not None:
                gu = tape.da[l] * tape.u[l]
                blocks.append(gu.sum(axis=red) if red else gu)
                blocks.append(tape.da[l].sum(axis=red) if red else tape.da[l])
            else:
                blocks.append(np.zeros((m, lp.gamma.size)))
                blocks.append(np.zeros((m, lp.beta.size)))
    return np.concatenate(blocks, axis=1)


def output_jacobian_tapes(net: NetInstance, tape: BatchTape, components=None, stats_mode: str = FROZEN):
    """Yield ``(k, tape_k)`` with deltas seeded by e_k for every example.

    With frozen statistics each example's delta is its own Jacobian row; with
    ``stats_mode="full"`` the deltas are those of the batch sum of f_k.
    """
    n_out = tape.output.shape[1]
    for k in (range(n_out) if components is None else components):
        seed = np.zeros_like(tape.output)
        seed[:, k] = 1.0
        t = BatchTape(tape.h, tape.z, tape.u, tape.a, tape.mu, tape.s, tape.mode)
        yield k, backward(net, t, seed, stats_mode)


# ---------------------------------------------------------------------------
# debugging dump: records of  b"TNSR" | u32 name_len | name | u32 rank |
# u64 dims[rank] | float64 data, all little-endian

_MAGIC = b"TNSR"


def write_tensors(stream: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        stream.write(_MAGIC + struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        stream.write(arr.tobytes())


def read_tensors(stream: BinaryIO) -> dict[str, np.ndarray]:
    out = {}
    while True:
        magic = stream.read(4)
        if not magic:
            return out
        if magic != _MAGIC:
            raise ValueError(f"bad tensor record magic {magic!r}")
        (n,) = struct.unpack("<I", stream.read(4))
        name = stream.read(n).decode("utf-8")
        (rank,) = struct.unpack("<I", stream.read(4))
        dims = struct.unpack(f"<{rank}Q", stream.read(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(stream.read(8 * count), dtype="<f8")
        out[name] = data.reshape(dims).copy()


def dump_tape(path: str | Path, tape: BatchTape) -> None:
    tensors = {}
    for key in ("h", "z", "u", "a", "delta"):
        seq = getattr(tape, key)
        for l, arr in enumerate(seq or []):
            if arr is not None:
                tensors[f"{key}{l}"] = arr
    with open(path, "wb") as fh:
        write_tensors(fh, tensors)
