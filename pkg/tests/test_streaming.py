import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import randomise
from s1dcnn.errors import ShapeError, StateError
from s1dcnn.layers import Linear
from s1dcnn.network import ModelConfig, build, paper_config
from s1dcnn.numerics import make_rng
from s1dcnn.streaming import (FrameRing, Stream, TriggerLogic, batch_scores, new_stream, smooth_scores,
                              trigger_frames)


def model_for(cfg, seed=0):
    return randomise(build(cfg, make_rng(seed)), np.random.default_rng(seed + 100))


def tiny(**kw):
    base = dict(feature_dim=13, context=2, depth=2, filters=4, memory=3)
    base.update(kw)
    return ModelConfig(**base)


def constant_model(p):
    """Model whose target posterior is ``p`` on every frame."""
    m = build(tiny(), make_rng(0))
    m.head = Linear(np.zeros_like(m.head.weights), np.array([0.0, np.log(p / (1 - p))], np.float32))
    return m


def test_ring_window_order():
    r = FrameRing(1, 3)
    for v in range(5):
        r.push([v])
    np.testing.assert_array_equal(r.window()[0], [2, 3, 4])


@pytest.mark.parametrize("lookahead", [0, 1, 3])
def test_parity_full_size(rng, lookahead):
    m = model_for(paper_config(lookahead))
    x = rng.normal(size=(13, 250)).astype(np.float32)
    s = Stream(m).run(x)
    b = batch_scores(m, x)
    assert len(s) == len(b) == 250
    assert np.abs(s - b).max() < 1e-5


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 120), st.integers(0, 2))
def test_parity_random_lengths(seed, t, lookahead):
    m = model_for(tiny(lookahead=lookahead), seed)
    x = np.random.default_rng(seed).normal(size=(13, t)).astype(np.float32)
    s = Stream(m).run(x)
    assert len(s) == t
    assert np.abs(s - batch_scores(m, x)).max() < 1e-5


@pytest.mark.parametrize("lookahead", [0, 1, 2])
def test_first_score_latency(rng, lookahead):
    cfg = tiny(lookahead=lookahead)
    st_ = Stream(model_for(cfg))
    n_push = cfg.context + lookahead * cfg.depth + 1
    results = [st_.push(f) for f in rng.normal(size=(n_push, 13))]
    assert all(r is None for r in results[:-1])
    assert results[-1][0] == 0


def test_warmup_single_push(rng):
    assert Stream(model_for(tiny())).push(rng.normal(size=13)) is None


def test_flush_accounting(rng):
    cfg = tiny(lookahead=2)
    s = Stream(model_for(cfg))
    emitted = [r for f in rng.normal(size=(20, 13)) if (r := s.push(f)) is not None]
    rest = s.flush()
    assert len(rest) == cfg.latency_frames
    assert [i for i, _ in emitted + rest] == list(range(20))


def test_flush_fresh_stream_empty():
    assert Stream(model_for(tiny())).flush() == []


def test_push_after_flush(rng):
    s = Stream(model_for(tiny()))
    s.flush()
    with pytest.raises(StateError):
        s.push(rng.normal(size=13))


def test_wrong_frame_dim():
    with pytest.raises(ShapeError):
        Stream(model_for(tiny())).push(np.zeros(12))


def test_constant_posterior_score():
    s = Stream(constant_model(0.3)).run(np.random.default_rng(0).normal(size=(13, 50)))
    np.testing.assert_allclose(s, 0.3, atol=1e-6)


def test_streams_are_independent(rng):
    m = model_for(tiny())
    x = rng.normal(size=(13, 40)).astype(np.float32)
    ref = Stream(m).run(x)
    a, b = new_stream(m), new_stream(m)
    out_a = []
    for f in x.T:
        b.push(rng.normal(size=13))
        if (r := a.push(f)) is not None:
            out_a.append(r[1])
    out_a += [v for _, v in a.flush()]
    np.testing.assert_array_equal(out_a, ref)


def test_deterministic(rng):
    m = model_for(tiny(lookahead=1))
    x = rng.normal(size=(13, 80)).astype(np.float32)
    assert Stream(m).run(x).tobytes() == Stream(m).run(x).tobytes()


@pytest.mark.slow
def test_memory_bound_million_pushes():
    cfg = ModelConfig(feature_dim=13, context=1, depth=1, filters=2, memory=2)
    s = Stream(model_for(cfg))
    before = s.buffer_sizes()
    frame = np.zeros(13, np.float32)
    for _ in range(1_000_000):
        s.push(frame)
    assert s.buffer_sizes() == before
    assert s.frames_seen == 1_000_000


def test_buffer_sizes_formula():
    cfg = paper_config()
    sizes = Stream(build(cfg, make_rng(0))).buffer_sizes()
    # every ring stores each column twice
    assert sizes == {"context": 2 * 13 * 11, "blocks": 2 * 7 * 32 * 9, "scores": 2 * 30}


def test_smooth_scores():
    np.testing.assert_allclose(smooth_scores(np.array([1.0, 0.0, 0.5])), [1.0, 0.5, 0.5])
    p = np.random.default_rng(1).random(100)
    expected = [p[max(0, t - 29):t + 1].mean() for t in range(100)]
    np.testing.assert_allclose(smooth_scores(p), expected)


def test_trigger_threshold_zero():
    fired = trigger_frames(np.zeros(250), 0.0, 100)
    np.testing.assert_array_equal(fired, [0, 100, 200])


def test_trigger_above_one_never_fires():
    assert len(trigger_frames(np.ones(50), 1.0 + 1e-9, 10)) == 0


def test_trigger_logic_matches_vectorised(rng):
    scores = rng.random(500)
    logic = TriggerLogic(0.8, 37)
    looped = [i for i, s in enumerate(scores) if logic.update(i, s)]
    np.testing.assert_array_equal(trigger_frames(scores, 0.8, 37), looped)


@given(st.lists(st.floats(0, 1), max_size=200), st.floats(0, 1), st.floats(0, 1), st.integers(1, 50))
def test_trigger_monotone_in_threshold(scores, a, b, sup):
    lo, hi = sorted((a, b))
    assert len(trigger_frames(np.array(scores), hi, sup)) <= len(trigger_frames(np.array(scores), lo, sup))


def test_detect_events_spaced(rng):
    m = constant_model(0.9)
    x = rng.normal(size=(13, 350)).astype(np.float32)
    events = list(Stream(m).detect(x.T, threshold=0.5, suppression_ms=1000))
    assert [e.frame_index for e in events] == [0, 100, 200, 300]
    assert events[1].time_ms == 1000
    assert all(e.score >= 0.5 for e in events)
