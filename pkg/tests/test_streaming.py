import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpvad.audio_io import read_wav
from mpvad.models import MCModel, SCModel
from mpvad.streaming import StreamSession, VadPipeline, WindowNotReadyError

SR = 16000


@pytest.fixture(scope="module")
def pipeline():
    return VadPipeline(sc=SCModel(seed=1), mc=MCModel(seed=2))


def _audio(seed, seconds):
    rng = np.random.default_rng(seed)
    env = 0.1 + np.abs(np.sin(np.linspace(0, 3 * seconds, seconds * SR)))
    return 0.05 * rng.normal(size=(4, seconds * SR)) * env


def _stream(pipeline, audio, cuts):
    s = StreamSession(pipeline)
    out = []
    for a, b in zip([0] + cuts, cuts + [audio.shape[1]]):
        out += s.push_samples(audio[:, a:b])
    return s, out


def _same(d1, d2):
    return [(d.window_index, d.decisions.tolist(), d.probs.tolist()) for d in d1] == \
           [(d.window_index, d.decisions.tolist(), d.probs.tolist()) for d in d2]


def test_one_push_vs_many(pipeline):
    x = _audio(0, 1)
    _, one = _stream(pipeline, x, [])
    _, many = _stream(pipeline, x, list(range(100, SR, 100)))
    assert len(one) == len(many) == 1
    assert _same(one, many)


def test_boundary(pipeline):
    s = StreamSession(pipeline)
    assert s.push_samples(_audio(1, 1)[:, :15999]) == []
    assert s.buffered_samples == 15999
    assert len(s.push_samples(np.zeros((4, 1)))) == 1
    assert s.buffered_samples == 0
    assert s.push_samples(np.zeros((4, 0))) == []


@settings(max_examples=10, deadline=None)
@given(st.lists(st.integers(1, 3 * SR - 1), max_size=12))
def test_chunking_invariance(pipeline, cuts):
    x = _audio(2, 3)
    _, ref = _stream(pipeline, x, [])
    _, got = _stream(pipeline, x, sorted(set(cuts)))
    assert _same(ref, got)


def test_stream_matches_offline(pipeline, small_corpus):
    audio = read_wav(small_corpus.path(small_corpus.entries[0], "wav_path")).samples
    off = pipeline.infer_offline(audio)
    _, on = _stream(pipeline, audio, list(range(1600, audio.shape[1], 1600)))
    assert len(on) == len(off) == 20
    for a, b in zip(on, off):
        assert np.max(np.abs(a.probs - b.probs)) <= 1e-6
        assert np.array_equal(a.decisions, b.decisions)
        assert a.start_s == b.start_s


def test_single_model_pipelines():
    x = _audio(3, 2)
    for pipe in (VadPipeline(sc=SCModel(seed=1)), VadPipeline(mc=MCModel(seed=2))):
        _, dec = _stream(pipe, x, [5000])
        assert len(dec) == 2 and np.array_equal(dec[0].decisions, dec[0].probs >= 0.5)
    with pytest.raises(ValueError):
        VadPipeline()


def test_fused_decision_carries_both(pipeline):
    _, dec = _stream(pipeline, _audio(4, 1), [])
    d = dec[0]
    assert np.allclose(d.probs, 0.75 * d.p_mc + 0.25 * d.p_sc)
    assert set(d.to_dict()) == {"window", "start_s", "probs", "active", "p_sc", "p_mc"}


def test_lookup(pipeline):
    s, dec = _stream(pipeline, _audio(5, 2), [7000, 20000])
    assert s.lookup(1) is dec[-1]
    assert s.lookup(0) is s.lookup(0)
    with pytest.raises(WindowNotReadyError):
        s.lookup(2)
    with pytest.raises(IndexError):
        s.lookup(-1)
    assert not issubclass(WindowNotReadyError, IndexError)
    assert [d.window_index for d in s.lookup_interval(0.5, 1.5)] == [0, 1]


def test_channel_mismatch(pipeline):
    with pytest.raises(ValueError):
        StreamSession(pipeline).push_samples(np.zeros((3, 100)))


def test_bounded_buffer(pipeline):
    s = StreamSession(pipeline)
    s.push_samples(_audio(6, 3)[:, : 2 * SR + 500])
    assert s._buf.shape == (4, SR)
    assert s.windows_emitted == 2 and s.buffered_samples == 500


def test_sessions_share_pipeline(pipeline):
    a, b = _audio(7, 1), _audio(8, 1)
    s1, s2 = StreamSession(pipeline), StreamSession(pipeline)
    d1 = s1.push_samples(a)
    s2.push_samples(b)
    assert _same(d1, StreamSession(pipeline).push_samples(a))
