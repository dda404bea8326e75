import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from s1dcnn.errors import EmptyInputError, FormatError
from s1dcnn.frontend import (AudioBuffer, FrameSpec, StreamingFrontend, apply_gain, concat_context,
                             extract_mfcc, frame_signal, load_features, mel_filterbank, mfcc,
                             num_frames, read_wav, save_features, write_wav)

SR = 16000


def tone(hz, seconds=0.5, amp=0.5):
    t = np.arange(int(SR * seconds)) / SR
    return AudioBuffer((amp * np.sin(2 * np.pi * hz * t)).astype(np.float32))


def test_gain_unit():
    a = tone(300)
    np.testing.assert_array_equal(apply_gain(a, 0).samples, a.samples)


def test_gain_minus_20_db():
    a = tone(300)
    np.testing.assert_allclose(apply_gain(a, -20).samples, a.samples * 0.1, rtol=1e-6)


def test_gain_minus_32_db():
    a = AudioBuffer(np.ones(10, np.float32))
    np.testing.assert_allclose(apply_gain(a, -32).samples, 0.025118864, rtol=1e-6)


def test_gain_does_not_clip():
    assert apply_gain(AudioBuffer(np.full(4, 0.9, np.float32)), 20).samples.max() > 1


@given(st.floats(-40, 40))
def test_gain_inverse(p):
    a = tone(523, 0.05)
    np.testing.assert_allclose(apply_gain(apply_gain(a, p), -p).samples, a.samples, atol=1e-6)


def test_frame_count_single_window():
    assert frame_signal(AudioBuffer(np.zeros(400, np.float32))).shape == (1, 400)


def test_frame_count_one_second():
    assert frame_signal(AudioBuffer(np.zeros(16000, np.float32))).shape[0] == 98


def test_frame_too_short():
    with pytest.raises(EmptyInputError):
        frame_signal(AudioBuffer(np.zeros(399, np.float32)))


@given(st.integers(0, 5000))
def test_frame_count_formula(n):
    t = num_frames(n)
    assert (t >= 1) == (n >= 400)
    if n >= 400:
        assert t == (n - 400) // 160 + 1


def test_frames_are_hamming_windowed():
    frames = frame_signal(AudioBuffer(np.ones(560, np.float32)))
    np.testing.assert_allclose(frames[1], np.hamming(400), atol=1e-6)


def test_mfcc_silence_constant():
    feats = extract_mfcc(AudioBuffer(np.zeros(SR, np.float32)))
    assert feats.shape == (13, 98)
    assert np.all(feats == feats[:, :1])


def test_mfcc_tones_differ():
    a = extract_mfcc(tone(1000))[:, 5]
    b = extract_mfcc(tone(4000))[:, 5]
    assert np.linalg.norm(a - b) > 1.0


def test_mfcc_deterministic():
    a = tone(700)
    assert extract_mfcc(a).tobytes() == extract_mfcc(a).tobytes()


def test_mfcc_against_direct_dft(rng):
    # direct O(N^2) DFT and explicit cosine sums instead of fft/dct
    w = rng.normal(size=(2, 400))
    n = np.arange(512)
    basis = np.exp(-2j * np.pi * np.outer(np.arange(257), n) / 512)
    spec = np.pad(w, ((0, 0), (0, 112))) @ basis.T
    power = np.abs(spec) ** 2 / 512
    logmel = np.log(np.maximum(power @ mel_filterbank().T, 1e-10))
    k = np.arange(13)[:, None]
    m = np.arange(20)[None, :]
    cosines = np.cos(np.pi * k * (2 * m + 1) / 40) * np.where(k == 0, math.sqrt(1 / 20), math.sqrt(2 / 20))
    expected = cosines @ logmel.T
    np.testing.assert_allclose(mfcc(w), expected, rtol=1e-4, atol=1e-4)


def test_mel_filters_nonempty_and_bounded():
    fb = mel_filterbank()
    assert fb.shape == (20, 257)
    assert np.all(fb.max(axis=1) > 0) and fb.max() <= 1


def test_context_zero_is_identity(rng):
    x = rng.normal(size=(13, 7)).astype(np.float32)
    np.testing.assert_array_equal(concat_context(x, 0), x)


def test_context_eleven_frames(rng):
    assert concat_context(rng.normal(size=(13, 4)), 5).shape == (143, 4)


def test_context_single_frame_edge():
    x = np.arange(3.0)[:, None]
    np.testing.assert_array_equal(concat_context(x, 2), np.tile(x, (5, 1)))


def test_context_zero_pad_mode():
    x = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(concat_context(x, 1, pad="zero"), [[0, 1], [1, 2], [2, 0]])


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-5, 5, width=32)),
       st.integers(0, 4))
def test_context_middle_block_is_input(x, c):
    f = x.shape[0]
    out = concat_context(x, c)
    np.testing.assert_array_equal(out[c * f:(c + 1) * f], x)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 900), min_size=1, max_size=8))
def test_streaming_frontend_matches_batch(chunks):
    sig = np.random.default_rng(len(chunks)).normal(0, 0.1, sum(chunks)).astype(np.float32)
    fe = StreamingFrontend()
    parts, pos = [], 0
    for n in chunks:
        parts.append(fe.push(sig[pos:pos + n]))
        pos += n
    streamed = np.concatenate(parts, axis=1)
    np.testing.assert_allclose(streamed, extract_mfcc(AudioBuffer(sig)), atol=1e-5)


def test_wav_round_trip(tmp_path):
    a = tone(440, 0.1)
    write_wav(tmp_path / "a.wav", a)
    b = read_wav(tmp_path / "a.wav")
    assert b.sample_rate == SR
    np.testing.assert_allclose(b.samples, a.samples, atol=1 / 32768)


def test_wav_rejects_other_rates(tmp_path):
    import wave
    with wave.open(str(tmp_path / "x.wav"), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(8000)
        w.writeframes(b"\0\0" * 100)
    with pytest.raises(FormatError, match="8000"):
        read_wav(tmp_path / "x.wav")


def test_wav_rejects_garbage(tmp_path):
    (tmp_path / "g.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(FormatError):
        read_wav(tmp_path / "g.wav")


def test_feature_file_round_trip(tmp_path, rng):
    x = rng.normal(size=(13, 11)).astype(np.float32)
    save_features(tmp_path / "f.bin", x)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:4] == b"FTRS" and raw[4] == 1 and len(raw) == 13 + 4 * 13 * 11
    # frame-major: the first 13 floats are column 0
    np.testing.assert_array_equal(np.frombuffer(raw[13:13 + 52], "<f4"), x[:, 0])
    np.testing.assert_array_equal(load_features(tmp_path / "f.bin"), x)


def test_feature_file_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"XXXX\x01" + bytes(8))
    with pytest.raises(FormatError, match="offset 0"):
        load_features(tmp_path / "bad")
    save_features(tmp_path / "ok", np.ones((2, 3), np.float32))
    (tmp_path / "cut").write_bytes((tmp_path / "ok").read_bytes()[:-1])
    with pytest.raises(FormatError, match="truncated"):
        load_features(tmp_path / "cut")


def test_audio_buffer_validation():
    with pytest.raises(ValueError):
        AudioBuffer(np.array([np.nan], np.float32))
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros(3, np.float32), sample_rate=0)
    with pytest.raises(ValueError):
        FrameSpec(window_ms=5, hop_ms=10)
