"""Model graphs: builders, forward, counting conventions, DPM1 serialization."""

import json
import struct

import numpy as np
import pytest

from dirichlet_pruning.errors import ContractError, FormatError, ShapeError
from dirichlet_pruning.models import (ChannelAffine, Conv2d, Flatten,
                                      FullyConnected, MaxPool2d, ModelGraph,
                                      Relu, Switch, TrainSchedule,
                                      build_lenet5, build_mlp, copy_model,
                                      count_flops, count_params, evaluate,
                                      forward, load_model, propagate_shapes,
                                      prunable_indices, prunable_widths,
                                      save_model, switch_layer_indices,
                                      train_model, validate_model)


def _fc_only(d_in=4, d_out=3):
    layers = [FullyConnected(d_in, d_out)]
    weights = {"layer0.weight": np.arange(d_in * d_out, dtype=np.float64).reshape(d_in, d_out),
               "layer0.bias": np.ones(d_out)}
    return ModelGraph(layers, weights, (d_in,))


def _conv_only(c_in, c_out, k, hw):
    layers = [Conv2d(c_in, c_out, k, k)]
    weights = {"layer0.weight": np.ones((c_out, c_in, k, k)),
               "layer0.bias": np.zeros(c_out)}
    return ModelGraph(layers, weights, (c_in, hw, hw))


# ---------------------------------------------------------------------------
# builders


def test_lenet_full_widths_builds_and_runs():
    model = build_lenet5([20, 50, 800, 500], rng=np.random.default_rng(0))
    validate_model(model)
    out = forward(model, np.zeros((1, 1, 28, 28)))
    assert out.shape == (1, 10)


def test_lenet_arch_string():
    model = build_lenet5([6, 8, 40, 20], rng=np.random.default_rng(0))
    assert model.arch_string == "6-8-40-20"
    assert prunable_widths(model) == [6, 8, 40, 20]


def test_lenet_minimum_widths():
    model = build_lenet5([1, 1, 1, 1], rng=np.random.default_rng(0))
    out = forward(model, np.zeros((2, 1, 28, 28)))
    assert out.shape == (2, 10)


def test_lenet_structure():
    model = build_lenet5([6, 8, 40, 20], rng=np.random.default_rng(0))
    kinds = [type(l) for l in model.layers]
    assert kinds == [Conv2d, Switch, Relu, MaxPool2d, Conv2d, Switch, Relu,
                     MaxPool2d, Flatten, FullyConnected, Switch, Relu,
                     FullyConnected, Switch, Relu, FullyConnected]
    assert prunable_indices(model) == [0, 4, 9, 12]
    assert switch_layer_indices(model) == [1, 5, 10, 13]
    no_sw = build_lenet5([6, 8, 40, 20], rng=np.random.default_rng(0), with_switches=False)
    assert switch_layer_indices(no_sw) == []


def test_lenet_bad_widths():
    with pytest.raises(ContractError):
        build_lenet5([6, 8, 40], rng=np.random.default_rng(0))
    with pytest.raises(ContractError):
        build_lenet5([0, 8, 40, 20], rng=np.random.default_rng(0))


def test_builders_deterministic_given_seeded_rng():
    a = build_lenet5([6, 8, 40, 20], rng=np.random.default_rng(42))
    b = build_lenet5([6, 8, 40, 20], rng=np.random.default_rng(42))
    for name in a.weights:
        assert np.array_equal(a.weights[name], b.weights[name])


def test_builder_seed_recorded():
    model = build_mlp(5, 4, 2, rng=np.random.default_rng(3), seed=17)
    assert model.metadata["seed"] == 17
    assert model.metadata["training_history"] == []


def test_mlp_configurations():
    for d_x, d_h in [(100, 20), (1000, 500)]:
        model = build_mlp(d_x, d_h, 2, rng=np.random.default_rng(0))
        assert prunable_widths(model) == [d_h]
        out = forward(model, np.zeros((3, d_x)))
        assert out.shape == (3, 2)


def test_mlp_zero_weights_uniform_logits():
    model = build_mlp(6, 5, 3, rng=np.random.default_rng(0))
    for name in model.weights:
        model.weights[name] = np.zeros_like(model.weights[name])
    out = forward(model, np.random.default_rng(1).standard_normal((4, 6)))
    assert np.array_equal(out.data, np.zeros((4, 3)))


def test_mlp_bad_dims():
    with pytest.raises(ContractError):
        build_mlp(0, 5, 2)


# ---------------------------------------------------------------------------
# shape propagation


def test_propagate_shapes_lenet():
    model = build_lenet5([6, 8, 40, 20], rng=np.random.default_rng(0))
    shapes = propagate_shapes(model.layers, (1, 28, 28))
    assert shapes[0] == (6, 24, 24)
    assert shapes[3] == (6, 12, 12)
    assert shapes[4] == (8, 8, 8)
    assert shapes[7] == (8, 4, 4)
    assert shapes[8] == (128,)
    assert shapes[-1] == (10,)


def test_propagate_shapes_errors_name_layer():
    with pytest.raises(ShapeError) as e:
        propagate_shapes([Conv2d(1, 1, 5, 5)], (1, 3, 3))
    assert "layer 0" in str(e.value)
    with pytest.raises(ShapeError) as e:
        propagate_shapes([Conv2d(1, 2, 3, 3), FullyConnected(10, 4)], (1, 8, 8))
    assert "layer 1" in str(e.value)
    with pytest.raises(ShapeError):
        propagate_shapes([Conv2d(3, 4, 3, 3)], (1, 8, 8))  # channel mismatch


def test_validate_model_missing_weight():
    model = _fc_only()
    del model.weights["layer0.bias"]
    with pytest.raises(ShapeError):
        validate_model(model)


# ---------------------------------------------------------------------------
# forward semantics


def test_switch_at_ones_is_identity():
    model = build_lenet5([3, 4, 10, 6], rng=np.random.default_rng(5))
    x = np.random.default_rng(6).standard_normal((2, 1, 28, 28))
    plain = forward(model, x).data
    ones = {i: np.ones(model.layers[i].d) for i in switch_layer_indices(model)}
    assert np.array_equal(forward(model, x, switches=ones).data, plain)
    # missing switch entries act as identity too
    assert np.array_equal(forward(model, x, switches={}).data, plain)


def test_forward_collect_preacts():
    model = build_mlp(5, 4, 2, rng=np.random.default_rng(7))
    x = np.random.default_rng(8).standard_normal((3, 5))
    out, preacts = forward(model, x, collect_preacts=True)
    assert set(preacts) == set(prunable_indices(model))
    for t in preacts.values():
        assert t.retain_grad
    assert out.shape == (3, 2)


def test_forward_rejects_bad_rank():
    model = build_mlp(5, 4, 2, rng=np.random.default_rng(9))
    with pytest.raises(ShapeError):
        forward(model, np.zeros(5))


# ---------------------------------------------------------------------------
# counting (convention: multiplicative weight elements; one MAC per element
# application, linear layers only)


def test_count_params_fc():
    assert count_params(_fc_only(4, 3)) == 12


def test_count_params_conv():
    assert count_params(_conv_only(3, 8, 5, 28)) == 600


def test_count_params_channel_affine_counts_scale_only():
    layers = [FullyConnected(4, 6), ChannelAffine(6)]
    weights = {"layer0.weight": np.zeros((4, 6)), "layer0.bias": np.zeros(6),
               "layer1.scale": np.ones(6), "layer1.shift": np.zeros(6)}
    model = ModelGraph(layers, weights, (4,))
    assert count_params(model) == 24 + 6


def test_count_params_enumeration_identity():
    model = build_lenet5([6, 8, 40, 20], rng=np.random.default_rng(10))
    total = sum(v.size for k, v in model.weights.items()
                if k.endswith(".weight") or k.endswith(".scale"))
    assert count_params(model) == total


def test_count_flops_fc():
    assert count_flops(_fc_only(4, 3)) == 12


def test_count_flops_conv_single():
    assert count_flops(_conv_only(1, 1, 3, 3)) == 9


def test_lenet_pinned_counts():
    small = build_lenet5([6, 8, 40, 20], rng=np.random.default_rng(11))
    assert count_params(small) == 7470
    assert count_flops(small) == 169_320
    parent = build_lenet5([20, 50, 800, 500], rng=np.random.default_rng(11))
    assert count_params(parent) == 1_070_500
    assert count_flops(parent) == 2_933_000


def test_count_flops_with_explicit_input_shape():
    model = build_lenet5([6, 8, 40, 20], rng=np.random.default_rng(12))
    assert count_flops(model, (1, 28, 28)) == count_flops(model)


# ---------------------------------------------------------------------------
# serialization


def test_save_load_round_trip(tmp_path):
    model = build_lenet5([3, 4, 10, 6], rng=np.random.default_rng(13), seed=13)
    train_x = np.random.default_rng(14).standard_normal((2, 1, 28, 28))
    before = forward(model, train_x).data
    p = tmp_path / "model.dpm1"
    save_model(model, p)
    loaded = load_model(p)
    assert [type(l) for l in loaded.layers] == [type(l) for l in model.layers]
    assert loaded.input_shape == model.input_shape
    assert loaded.metadata["seed"] == 13
    for name in model.weights:
        assert np.array_equal(loaded.weights[name], model.weights[name])
    assert np.array_equal(forward(loaded, train_x).data, before)


def test_save_load_save_identical_bytes(tmp_path):
    model = build_mlp(7, 5, 3, rng=np.random.default_rng(15), seed=15)
    p1 = tmp_path / "a.dpm1"
    p2 = tmp_path / "b.dpm1"
    save_model(model, p1)
    save_model(load_model(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_header_layout(tmp_path):
    model = build_mlp(3, 2, 2, rng=np.random.default_rng(16))
    p = tmp_path / "m.dpm1"
    save_model(model, p)
    raw = p.read_bytes()
    assert raw[:4] == b"DPM1"
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    assert header["version"] == 1
    assert header["arch_string"] == "2"
    names = [w["name"] for w in header["weights"]]
    assert names == sorted(names)
    blob_bytes = sum(int(np.prod(w["shape"])) * 8 for w in header["weights"])
    assert len(raw) == 8 + hlen + blob_bytes


def test_load_bad_magic(tmp_path):
    p = tmp_path / "bad.dpm1"
    p.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(FormatError) as e:
        load_model(p)
    assert "byte 0" in str(e.value)


def test_load_truncated(tmp_path):
    model = build_mlp(3, 2, 2, rng=np.random.default_rng(17))
    p = tmp_path / "m.dpm1"
    save_model(model, p)
    raw = p.read_bytes()
    for cut in (6, len(raw) // 2, len(raw) - 3):
        q = tmp_path / f"cut{cut}.dpm1"
        q.write_bytes(raw[:cut])
        with pytest.raises(FormatError) as e:
            load_model(q)
        assert "byte" in str(e.value)


def test_load_trailing_garbage(tmp_path):
    model = build_mlp(3, 2, 2, rng=np.random.default_rng(18))
    p = tmp_path / "m.dpm1"
    save_model(model, p)
    p.write_bytes(p.read_bytes() + b"xx")
    with pytest.raises(FormatError):
        load_model(p)


def test_load_bad_version(tmp_path):
    model = build_mlp(3, 2, 2, rng=np.random.default_rng(19))
    p = tmp_path / "m.dpm1"
    save_model(model, p)
    raw = bytearray(p.read_bytes())
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(bytes(raw[8:8 + hlen]))
    header["version"] = 9
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    p.write_bytes(raw[:4] + struct.pack("<I", len(blob)) + blob + bytes(raw[8 + hlen:]))
    with pytest.raises(FormatError):
        load_model(p)


# ---------------------------------------------------------------------------
# training / evaluation


def _blob_task(n=120, seed=20):
    rng = np.random.default_rng(seed)
    half = n // 2
    x0 = rng.standard_normal((half, 4)) + np.array([2.0, 2.0, 0.0, 0.0])
    x1 = rng.standard_normal((half, 4)) - np.array([2.0, 2.0, 0.0, 0.0])
    x = np.vstack([x0, x1])
    y = np.array([0] * half + [1] * half)
    perm = rng.permutation(n)
    return x[perm], y[perm]


def test_train_model_reduces_loss_and_error():
    x, y = _blob_task()
    model = build_mlp(4, 6, 2, rng=np.random.default_rng(21))
    err0 = evaluate(model, x, y)
    losses = train_model(model, x, y, TrainSchedule(epochs=5, batch_size=20, lr=0.1),
                         np.random.default_rng(22))
    assert losses[-1] < losses[0]
    assert evaluate(model, x, y) < err0
    assert evaluate(model, x, y) <= 5.0
    assert model.metadata["training_history"][-1]["epochs"] == 5


def test_train_model_contract_errors():
    model = build_mlp(4, 3, 2, rng=np.random.default_rng(23))
    with pytest.raises(ContractError):
        train_model(model, np.zeros((0, 4)), np.zeros(0, dtype=int),
                    TrainSchedule(), np.random.default_rng(0))
    with pytest.raises(ContractError):
        train_model(model, np.zeros((4, 4)), np.zeros(4, dtype=int),
                    TrainSchedule(epochs=0), np.random.default_rng(0))


def test_evaluate_perfect_and_empty():
    model = _fc_only(2, 2)
    model.weights["layer0.weight"] = np.array([[5.0, -5.0], [-5.0, 5.0]])
    model.weights["layer0.bias"] = np.zeros(2)
    x = np.array([[1.0, -1.0], [-1.0, 1.0], [2.0, 0.0]])
    y = np.array([0, 1, 0])
    assert evaluate(model, x, y) == 0.0
    with pytest.raises(ContractError):
        evaluate(model, np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_copy_model_is_independent():
    model = build_mlp(3, 2, 2, rng=np.random.default_rng(24))
    clone = copy_model(model)
    clone.weights["layer0.weight"][:] = 0.0
    clone.metadata["training_history"].append({"epochs": 1})
    assert not np.array_equal(model.weights["layer0.weight"], clone.weights["layer0.weight"])
    assert model.metadata["training_history"] == []
