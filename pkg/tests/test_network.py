import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import randomise
from oracles import direct_logits
from s1dcnn.errors import ConfigError, FormatError, ShapeError
from s1dcnn.frontend import concat_context
from s1dcnn.layers import Activation
from s1dcnn.network import (ModelConfig, build, count_macs, count_params, format_info, forward, from_bytes,
                            info, load, logits, output_delay, paper_config, receptive_field, save,
                            to_bytes, to_s1dcnn)
from s1dcnn.numerics import make_rng

TABLE = {0: (610, 50), 1: (540, 120), 2: (470, 190), 3: (400, 260), 4: (330, 330)}


def small(**kw):
    base = dict(feature_dim=3, context=1, depth=2, filters=4, memory=3)
    base.update(kw)
    return ModelConfig(**base)


def test_build_default_shapes():
    m = build(paper_config(), make_rng(0))
    assert m.blocks[0].layer.feature_weights.shape == (32, 143)
    assert all(b.layer.feature_weights.shape == (32, 32) for b in m.blocks[1:])
    assert m.head.weights.shape == (2, 32) and len(m.blocks) == 7


def test_build_deterministic():
    a = to_bytes(build(paper_config(), make_rng(5)))
    assert a == to_bytes(build(paper_config(), make_rng(5)))
    assert a != to_bytes(build(paper_config(), make_rng(6)))


def test_build_init_ranges():
    m = build(paper_config(), make_rng(1))
    u = m.blocks[0].layer
    assert np.abs(u.feature_weights).max() <= 1 / np.sqrt(143)
    assert np.abs(u.time_weights).max() <= 1 / 3
    assert np.abs(m.head.weights).max() <= 1 / np.sqrt(32)
    assert not u.feature_bias.any() and not u.time_bias.any()
    assert np.all(m.blocks[0].bn.gamma == 1) and not m.blocks[0].bn.beta_shift.any()


@pytest.mark.parametrize("kw", [dict(lookahead=9), dict(lookahead=-1), dict(filters=0),
                                dict(arch="svdf", lookahead=1), dict(arch="svdf", g1=Activation.RELU),
                                dict(arch="lstm")])
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_svdf_model_has_no_biases():
    m = build(paper_config(arch="svdf"), make_rng(0))
    assert not any("bias" in name for name, _ in m.named_parameters() if name.startswith("blocks"))


def test_forward_sums_to_one(rng):
    m = randomise(build(small(), make_rng(0)), rng)
    p = forward(m, rng.normal(size=(9, 20)).astype(np.float32))
    np.testing.assert_allclose(p.sum(axis=0), 1, atol=1e-6)


def test_forward_zero_input_uniform():
    m = build(small(), make_rng(0))
    np.testing.assert_allclose(forward(m, np.zeros((9, 5), np.float32)), 0.5, atol=1e-7)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        forward(build(small(), make_rng(0)), np.zeros((8, 5), np.float32))


@pytest.mark.parametrize("lookahead", [0, 1])
def test_forward_matches_loop_oracle(rng, lookahead):
    cfg = ModelConfig(feature_dim=2, context=1, depth=2, filters=2, memory=2, lookahead=lookahead)
    m = randomise(build(cfg, make_rng(3)), rng)
    x = rng.normal(size=(6, 7)).astype(np.float32)
    np.testing.assert_allclose(logits(m, x), direct_logits(m, x), atol=1e-6)


@pytest.mark.parametrize("lookahead", range(5))
def test_receptive_field_table(lookahead):
    assert receptive_field(paper_config(lookahead)) == TABLE[lookahead]
    assert output_delay(paper_config(lookahead)) == (7 * lookahead + 5) * 10


def test_delay_without_context():
    assert output_delay(small(context=0)) == 0


@given(st.integers(1, 10), st.integers(1, 9), st.integers(0, 6), st.data())
def test_receptive_window_independent_of_lookahead(k, d, c, data):
    lookahead = data.draw(st.integers(0, k - 1))
    cfg = ModelConfig(depth=d, memory=k, context=c, lookahead=lookahead)
    past, future = receptive_field(cfg)
    assert past // 10 + future // 10 + 1 == (k - 1) * d + 2 * c + 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 2))
def test_receptive_field_by_perturbation(seed, lookahead):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(feature_dim=2, context=1, depth=2, filters=3, memory=3, lookahead=lookahead,
                      g2=Activation.IDENTITY)
    m = randomise(build(cfg, make_rng(seed)), rng).astype(np.float64)
    past, future = (v // cfg.hop_ms for v in receptive_field(cfg))
    t_len = 30
    mf = rng.normal(size=(2, t_len))
    base = logits(m, concat_context(mf, cfg.context, pad="zero"))
    tp = int(rng.integers(0, t_len))
    moved = mf.copy()
    moved[:, tp] += 1.0
    changed = np.any(np.abs(logits(m, concat_context(moved, cfg.context, pad="zero")) - base) > 1e-12, axis=0)
    t = np.arange(t_len)
    inside = (tp - t <= future) & (t - tp <= past)
    assert not np.any(changed & ~inside)
    # linear network with random weights: every frame in range reacts
    assert np.all(changed == inside)


def test_param_difference_default():
    assert count_params(paper_config()).total - count_params(paper_config(arch="svdf")).total == 448
    assert count_params(paper_config()).total == 13698
    assert count_params(paper_config(arch="svdf")).total == 13250


@given(st.integers(1, 20), st.integers(0, 5), st.integers(1, 8), st.integers(1, 40), st.integers(1, 12))
def test_param_difference_general(f0, c, d, n, k):
    a = ModelConfig(feature_dim=f0, context=c, depth=d, filters=n, memory=k)
    b = ModelConfig(feature_dim=f0, context=c, depth=d, filters=n, memory=k, arch="svdf")
    assert count_params(a).total - count_params(b).total == 2 * n * d


def test_param_count_matches_tensors():
    for cfg in (paper_config(), paper_config(arch="svdf"), small(lookahead=2)):
        m = build(cfg, make_rng(0))
        assert count_params(m).total == sum(p.size for _, p in m.named_parameters())


def test_macs_default():
    expected = 143 * 32 + 9 * 32 + 6 * (32 * 32 + 9 * 32) + 7 * 32 + 32 * 2
    assert count_macs(paper_config()) == expected == 13024
    assert abs(count_macs(paper_config()) - 13000) / 13000 < 0.05
    assert count_macs(paper_config(arch="svdf")) == 13024


def test_macs_linear_only_share():
    cfg = ModelConfig(feature_dim=1, context=0, depth=1, filters=32, memory=1)
    assert count_macs(cfg) - (32 + 32 + 32) == 64


def test_macs_scale_with_filters():
    def upper(n):
        cfg = ModelConfig(feature_dim=4, context=0, depth=3, filters=n, memory=2, classes=2)
        first = n * 4 + n * 2 + n
        return count_macs(cfg) - first - 2 * n
    assert 3.5 < upper(64) / upper(32) < 4.0


def test_round_trip_bytes(tmp_path, rng):
    for cfg in (paper_config(2), paper_config(arch="svdf")):
        m = randomise(build(cfg, make_rng(4)), rng, biases=cfg.arch == "s1dcnn")
        save(m, tmp_path / "m.bin")
        again = load(tmp_path / "m.bin")
        assert to_bytes(again) == to_bytes(m)
        assert again.config == m.config
        x = rng.normal(size=(143, 40)).astype(np.float32)
        assert forward(again, x).tobytes() == forward(m, x).tobytes()


def test_file_layout():
    data = to_bytes(build(small(), make_rng(0)))
    assert data[:4] == b"S1DC" and data[4] == 1


@pytest.mark.parametrize("mutate,offset", [
    (lambda d: b"XXXX" + d[4:], "offset 0"),
    (lambda d: d[:4] + b"\x07" + d[5:], "offset 4"),
    (lambda d: d[:-3], "truncated"),
    (lambda d: d[:20], "truncated"),
    (lambda d: d + b"\0\0\0\0", "trailing"),
])
def test_corrupt_files(mutate, offset):
    data = to_bytes(build(small(), make_rng(0)))
    with pytest.raises(FormatError, match=offset):
        from_bytes(mutate(data))


def test_svdf_forward_equals_reduced_network(rng):
    m = randomise(build(paper_config(arch="svdf"), make_rng(9)), rng, biases=False)
    x = rng.normal(size=(143, 60)).astype(np.float32)
    red = to_s1dcnn(m)
    assert red.config.arch == "s1dcnn"
    assert np.abs(logits(red, x) - logits(m, x)).max() < 1e-5


def test_info_formats():
    d = info(paper_config(1))
    text = format_info(d)
    assert "receptive_field_past_ms=540" in text and "receptive_field_future_ms=120" in text
    assert "delay_ms=120" in text and "params=13698" in text and "macs=13024" in text
    assert json.loads(format_info(d, as_json=True)) == d
