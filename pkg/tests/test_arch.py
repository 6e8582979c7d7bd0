import pytest
from hypothesis import given

from bnfisher.arch import (ArchSpec, ConfigError, InitSpec, LayerSpec, conv_output_sites, load_arch,
                           cifar_conv, mnist_fc, parse_arch, serialize, validate_dims)
from conftest import CONFIGS
from strategies import any_spec


def test_mnist_fc_config_parses():
    spec = load_arch(CONFIGS / "mnist_fc_bn.yaml")
    assert spec.depth == 4
    assert [lay.width for lay in spec.layers] == [1000, 1000, 1000, 10]
    assert [lay.batch_norm for lay in spec.layers] == [True, True, True, False]
    assert spec.init == InitSpec(2.0, 0.5, 0.9)
    assert spec.layers[-1].activation == "linear"
    assert spec.layers == mnist_fc(1.0, True).layers


def test_bn_on_final_layer_rejected():
    doc = """
input: {dim: 4}
layers:
  - {kind: fc, width: 8, batch_norm: true}
  - {kind: fc, width: 2, batch_norm: true}
"""
    with pytest.raises(ConfigError, match="final layer must be linear without BatchNorm"):
        parse_arch(doc)


def test_cifar_conv_config_parses():
    spec = load_arch(CONFIGS / "cifar_conv_bn.yaml")
    convs = [lay for lay in spec.layers if lay.is_conv]
    assert [lay.width for lay in convs] == [30, 60, 90]
    assert [lay.spatial_sites for lay in convs] == [225, 49, 9]
    assert all(lay.kernel_sites == 9 for lay in convs)
    assert [lay.fan_in for lay in convs] == [27, 270, 540]
    assert spec.layers[-1].fan_in == 810
    assert validate_dims(spec) == []


def test_site_helper():
    assert [conv_output_sites(s) for s in (32, 15, 7)] == [225, 49, 9]
    with pytest.raises(ValueError):
        conv_output_sites(2)


def test_validate_valid_fc():
    assert validate_dims(mnist_fc()) == []


def test_validate_fan_in_mismatch():
    spec = mnist_fc()
    bad = list(spec.layers)
    bad[1] = LayerSpec("fc", 500, 1000, batch_norm=True)
    diags = validate_dims(ArchSpec(tuple(bad), spec.init, 784))
    assert len(diags) == 1
    assert diags[0].layer == 2 and diags[0].rule == "dims"
    assert "layer 1" in diags[0].message


def test_validate_conv_missing_sites():
    spec = cifar_conv()
    bad = list(spec.layers)
    bad[1] = LayerSpec("conv", 270, 60, batch_norm=True, kernel_sites=9, spatial_sites=None)
    diags = validate_dims(ArchSpec(tuple(bad), spec.init, spec.input_dim))
    assert len(diags) == 1 and diags[0].rule == "conv_sites"


def test_schema_error_names_field():
    with pytest.raises(ConfigError) as err:
        parse_arch("input: {dim: 4}\nlayers:\n  - {kind: fc, width: eight}\n  - {width: 2}\n")
    assert "layers[0].width" in str(err.value)


def test_unknown_field_rejected():
    with pytest.raises(ConfigError, match="colour"):
        parse_arch("input: {dim: 4}\nlayers:\n  - {width: 3, colour: red}\n  - {width: 2}\n")


def test_defaults_applied():
    spec = parse_arch("input: {dim: 4}\nlayers:\n  - {width: 3, batch_norm: true}\n  - {width: 2}\n")
    assert spec.init.momentum == 0.9
    assert spec.layers[0].beta == 0.0
    assert spec.layers[0].activation == "relu" and spec.layers[1].activation == "linear"


@pytest.mark.parametrize("name", ["mnist_fc_bn", "mnist_fc_vanilla", "cifar_conv_bn", "cifar_conv_vanilla"])
def test_shipped_configs_round_trip(name):
    spec = load_arch(CONFIGS / f"{name}.yaml")
    assert parse_arch(serialize(spec)) == spec


@given(any_spec)
def test_round_trip_identity(spec):
    assert validate_dims(spec) == []
    assert parse_arch(serialize(spec)) == spec


@given(any_spec)
def test_accepted_documents_validate_clean(spec):
    text = serialize(spec)
    assert validate_dims(parse_arch(text)) == []
