"""Hypothesis strategies for random valid architectures."""
from hypothesis import strategies as st

from bnfisher.arch import ArchSpec, InitSpec, LayerSpec


@st.composite
def fc_specs(draw):
    depth = draw(st.integers(2, 6))
    n0 = draw(st.integers(1, 50))
    widths = draw(st.lists(st.integers(1, 64), min_size=depth, max_size=depth))
    layers, prev = [], n0
    for i, w in enumerate(widths):
        last = i == depth - 1
        bn = (not last) and draw(st.booleans())
        layers.append(LayerSpec("fc", prev, w, batch_norm=bn,
                                gamma=draw(st.floats(0.05, 5.0)),
                                activation="linear" if last else "relu"))
        prev = w
    init = InitSpec(draw(st.floats(0.1, 4.0)), draw(st.floats(0.0, 2.0)), draw(st.floats(0.0, 0.99)))
    return ArchSpec(tuple(layers), init, n0, draw(st.sampled_from(["", "net", "a-b"])))


@st.composite
def conv_specs(draw):
    side = draw(st.sampled_from([7, 9, 15, 32]))
    c0 = draw(st.integers(1, 4))
    n_conv = draw(st.integers(1, 3))
    layers, chans, sites = [], c0, side * side
    cur = side
    for _ in range(n_conv):
        if cur < 3:
            break
        stride = draw(st.sampled_from([1, 2]))
        out = (cur - 3) // stride + 1
        c = draw(st.integers(1, 16))
        layers.append(LayerSpec("conv", chans * 9, c, batch_norm=draw(st.booleans()),
                                gamma=draw(st.floats(0.1, 4.0)), kernel_sites=9,
                                spatial_sites=out * out, kernel_size=3, stride=stride))
        chans, cur = c, out
    layers.append(LayerSpec("fc", layers[-1].n_units, draw(st.integers(1, 10)), activation="linear"))
    init = InitSpec(draw(st.floats(0.1, 4.0)), draw(st.floats(0.0, 2.0)), draw(st.floats(0.0, 0.99)))
    return ArchSpec(tuple(layers), init, (c0, side * side))


any_spec = st.one_of(fc_specs(), conv_specs())


