import numpy as np
import pytest

from conftest import fd_check, make_micro_net
from dasnet import dataio
from dasnet import maxoutnet as mn
from dasnet.dataio import FormatError
from dasnet.numerics import DimensionError, NumericalError, RngStream, softmax


def test_gradients_match_finite_differences(micro_net):
    rng = RngStream(8)
    x, y = rng.normal((4, 2, 8, 8)), np.array([0, 1, 2, 1])
    assert fd_check(micro_net, x, y) <= 1.0


def test_gradients_with_dropout_mask():
    net = make_micro_net(seed=5, dropout=0.3)
    rng = RngStream(9)
    x, y = rng.normal((3, 2, 8, 8)), np.array([2, 0, 1])
    assert fd_check(net, x, y, mode="train", seed=17) <= 1.0


def test_gates_all_ones_bit_identical(toy_net, images):
    plain = mn.forward(toy_net, images)
    gated = mn.forward(toy_net, images, np.ones(toy_net.gate_dimension))
    for a, b in zip(plain.layers, gated.layers):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(plain.hidden, gated.hidden)
    np.testing.assert_array_equal(plain.probs, gated.probs)


def test_gates_all_zero(toy_net, images):
    tr = mn.forward(toy_net, images, np.zeros(toy_net.gate_dimension))
    assert all(not layer.any() for layer in tr.layers)
    p = toy_net.params
    hidden = p["cls.b"].reshape(toy_net.hidden, -1).max(axis=1)
    expected = softmax(p["out.w"] @ hidden + p["out.b"])
    for row in tr.probs:
        np.testing.assert_allclose(row, expected, rtol=1e-14)


def test_doubling_last_layer_gate(toy_net, images):
    j = 3
    gates = np.ones(toy_net.gate_dimension)
    sl = toy_net.gate_slices[-1]
    gates[sl.start + j] = 2.0
    base = mn.forward(toy_net, images)
    doubled = mn.forward(toy_net, images, gates)
    c, m, n = toy_net.layer_shapes()[-1]
    per_map = m * n
    a = base.flat.reshape(len(images), c, per_map)
    b = doubled.flat.reshape(len(images), c, per_map)
    np.testing.assert_array_equal(b[:, j], 2.0 * a[:, j])
    others = [i for i in range(c) if i != j]
    np.testing.assert_array_equal(b[:, others], a[:, others])


@pytest.mark.parametrize("layer", [0, 1])
def test_gate_linear_per_map(toy_net, images, layer):
    sl = toy_net.gate_slices[layer]
    gates = RngStream(3).uniform(0.5, 1.5, toy_net.gate_dimension)
    outs = []
    for value in (0.5, 1.0, 1.5):
        g = gates.copy()
        g[sl.start + 2] = value
        outs.append(mn.forward(toy_net, images, g).layers[layer][:, 2])
    np.testing.assert_allclose(outs[1] - outs[0], outs[2] - outs[1], atol=1e-12)
    np.testing.assert_allclose(outs[0] * 2.0, outs[1], rtol=1e-15)


def test_first_layer_cache_matches(toy_net, images):
    gates = RngStream(4).uniform(0.2, 2.0, (len(images), toy_net.gate_dimension))
    plain = mn.forward(toy_net, images)
    full = mn.forward(toy_net, images, gates)
    cached = mn.forward(toy_net, images, gates, first_layer=plain.layers[0])
    np.testing.assert_array_equal(full.probs, cached.probs)


def test_single_image_matches_batch(toy_net, images):
    batch = mn.forward(toy_net, images)
    single = mn.forward(toy_net, images[2])
    np.testing.assert_allclose(single.probs, batch.probs[2], rtol=1e-14)
    assert abs(single.probs.sum() - 1.0) < 1e-10


def test_eval_is_pure(toy_net, images):
    a = mn.forward(toy_net, images).probs
    b = mn.forward(toy_net, images).probs
    np.testing.assert_array_equal(a, b)


def test_train_mode_needs_rng(toy_net, images):
    with pytest.raises(ValueError):
        mn.forward(toy_net, images, mode="train")


def test_gate_length_mismatch(toy_net, images):
    with pytest.raises(DimensionError):
        mn.forward(toy_net, images, np.ones(toy_net.gate_dimension + 1))


def test_image_shape_mismatch(toy_net):
    with pytest.raises(DimensionError):
        mn.forward(toy_net, np.zeros((2, 1, 15, 16)))


def test_gate_dimension_counts_post_maxout_maps(toy_net):
    assert toy_net.gate_dimension == 8 + 8


def test_block_must_divide():
    with pytest.raises(DimensionError):
        mn.LayerSpec("conv", 1, 5, 2, kernel=3)


def test_lr_zero_leaves_weights(toy_net, toy_data):
    before = {k: v.copy() for k, v in toy_net.params.items()}
    mn.train_supervised(toy_net, toy_data, mn.SgdConfig(learning_rate=0.0, epochs=1), RngStream(1))
    for k in before:
        np.testing.assert_array_equal(before[k], toy_net.params[k])


def test_non_finite_loss_aborts(toy_net, toy_data):
    toy_net.params["out.b"][0] = np.nan
    with pytest.raises(NumericalError, match="epoch 0, batch 0"):
        mn.train_supervised(toy_net, toy_data, mn.SgdConfig(epochs=1), RngStream(1))


def test_training_is_deterministic(toy_data):
    runs = []
    for _ in range(2):
        net = mn.build_preset("toy", (1, 16, 16), 4, RngStream(2))
        mn.train_supervised(net, toy_data, mn.SgdConfig(epochs=1, learning_rate=0.02), RngStream(3))
        runs.append(net.params["out.w"])
    np.testing.assert_array_equal(*runs)


def test_toy_training_reaches_95_percent():
    data = dataio.make_toy_dataset(RngStream(0, 1), 2000, 4, 16)
    net = mn.build_preset(
        "toy", (1, 16, 16), 4, RngStream(0, 2),
        conv=[{**c, "dropout": 0.0} for c in mn.PRESETS["toy"]["conv"]], classifier_dropout=0.0,
    )
    log = mn.train_supervised(net, data, mn.SgdConfig(learning_rate=0.02, batch_size=32, epochs=20), RngStream(0, 3))
    assert len(log) <= 30
    assert mn.accuracy(net, data) >= 0.95


def test_save_load_round_trip(tmp_path, toy_net, images):
    mn.save(toy_net, tmp_path / "m.dnet")
    back = mn.load(tmp_path / "m.dnet")
    assert back.conv == toy_net.conv and back.classifier == toy_net.classifier
    for k in toy_net.params:
        np.testing.assert_array_equal(back.params[k], toy_net.params[k])
    np.testing.assert_array_equal(
        mn.forward(back, images, np.ones(back.gate_dimension)).probs,
        mn.forward(toy_net, images, np.ones(toy_net.gate_dimension)).probs,
    )


def test_load_bad_magic(tmp_path, toy_net):
    mn.save(toy_net, tmp_path / "m.dnet")
    blob = bytearray((tmp_path / "m.dnet").read_bytes())
    blob[:4] = b"XNET"
    (tmp_path / "bad.dnet").write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        mn.load(tmp_path / "bad.dnet")


def test_load_bad_version(tmp_path, toy_net):
    mn.save(toy_net, tmp_path / "m.dnet")
    blob = bytearray((tmp_path / "m.dnet").read_bytes())
    blob[4] = 9
    (tmp_path / "v.dnet").write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        mn.load(tmp_path / "v.dnet")


def test_load_truncated(tmp_path, toy_net):
    mn.save(toy_net, tmp_path / "m.dnet")
    (tmp_path / "t.dnet").write_bytes((tmp_path / "m.dnet").read_bytes()[:-16])
    with pytest.raises(FormatError, match="truncated"):
        mn.load(tmp_path / "t.dnet")


@pytest.mark.parametrize("name,shape,gates", [("desk", (3, 32, 32), 48), ("full", (3, 32, 32), 480)])
def test_presets_compose(name, shape, gates):
    net = mn.build_preset(name, shape, 10, RngStream(0))
    assert net.gate_dimension == gates
    assert net.classifier.in_maps == int(np.prod(net.layer_shapes()[-1]))
