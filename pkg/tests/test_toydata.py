import numpy as np
import pytest

from e2easr.features import extract_logmel, read_wav
from e2easr.manifest import read_manifest
from e2easr.toydata import (ToyTaskSpec, corrupt, generate, generate_wav, nearest_template,
                            templates, tone_frequencies, write_corpus)


def test_clean_frames_recover_alignment():
    spec = ToyTaskSpec(noise=0.0, seed=3)
    for u in generate(spec, 20):
        assert np.array_equal(nearest_template(u.features.frames, spec), u.alignment)
        assert u.features.frames.shape[1] == 80
        chars = [spec.alphabet[c] for i, c in enumerate(u.alignment)
                 if c >= 0 and (i == 0 or u.alignment[i - 1] != c)]
        assert "".join(chars) == u.text


def test_templates_distinct():
    t = templates(ToyTaskSpec(vocab_size=28))
    assert len({tuple(r) for r in t}) == 28


def test_deterministic_per_seed():
    a, b = generate(ToyTaskSpec(seed=7), 5), generate(ToyTaskSpec(seed=7), 5)
    c = generate(ToyTaskSpec(seed=8), 5)
    assert all(np.array_equal(x.features.frames, y.features.frames) and x.text == y.text for x, y in zip(a, b))
    assert any(x.text != y.text for x, y in zip(a, c))


def test_invalid_spec():
    with pytest.raises(ValueError):
        ToyTaskSpec(vocab_size=29)
    with pytest.raises(ValueError):
        ToyTaskSpec(noise=-1)
    with pytest.raises(ValueError):
        generate(ToyTaskSpec(), 0)


def test_corrupt_zeroes_bands_and_spans():
    rng = np.random.default_rng(0)
    x = np.ones((40, 80))
    y = corrupt(x, rng, band_drops=2, time_drops=1, time_width=5)
    assert (y.sum(0) == 0).sum() == 20
    assert (y.sum(1) == 0).sum() >= 5
    assert np.array_equal(x, np.ones((40, 80)))


def test_write_corpus_roundtrip(tmp_path):
    utts = generate(ToyTaskSpec(seed=1), 3)
    entries = read_manifest(write_corpus(utts, tmp_path))
    assert [e.uid for e in entries] == [u.uid for u in utts]
    assert np.array_equal(np.load(tmp_path / entries[0].features), utts[0].features.frames)


def test_wav_variant_through_feature_extraction(tmp_path):
    spec = ToyTaskSpec(vocab_size=4, noise=0.0, seed=2)
    entries = read_manifest(generate_wav(spec, 3, tmp_path))
    freqs = tone_frequencies(spec)
    for e in entries:
        w = read_wav(tmp_path / e.audio)
        f = extract_logmel(w).frames
        assert f.shape[1] == 80 and f.shape[0] > 0
        loud = f.max(axis=1) > f.max() - 3.0
        assert loud.any() and not loud.all()
        assert np.all(np.diff(freqs) > 0)
