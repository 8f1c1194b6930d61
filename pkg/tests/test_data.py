from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unetslim.data import (
    GRID,
    KINDS,
    LATENT_SHAPE,
    PAD,
    SEQ_LEN,
    VOCAB,
    Primitive,
    batch_at,
    batch_iter,
    decode,
    encode,
    gen_dataset,
    render,
)
from unetslim.diffkit import ConfigError


def test_same_seed_same_dataset():
    a, b = gen_dataset(4, 20), gen_dataset(4, 20)
    for x, y in zip(a, b):
        assert x.latent.tobytes() == y.latent.tobytes() and x.tokens.tobytes() == y.tokens.tobytes()


def test_different_seed_different_dataset():
    a, b = gen_dataset(4, 5), gen_dataset(5, 5)
    assert any(not np.array_equal(x.latent, y.latent) for x, y in zip(a, b))


def test_shapes_and_ranges():
    for s in gen_dataset(0, 50):
        assert s.latent.shape == LATENT_SHAPE
        assert np.abs(s.latent).max() <= 1.0 and np.abs(s.latent).max() > 0
        assert s.tokens.shape == (SEQ_LEN,)
        assert ((s.tokens >= 1) & (s.tokens < VOCAB)).all()  # 0 is reserved for the null condition
        assert (s.tokens[-2:] == PAD).all()


def test_tokens_regenerate_latent():
    for s in gen_dataset(1, 30):
        assert render(decode(s.tokens)).tobytes() == s.latent.tobytes()


prims = st.builds(
    Primitive,
    st.integers(0, len(KINDS) - 1),
    st.integers(0, 1),
    st.integers(0, GRID - 1),
    st.integers(0, GRID - 1),
)


@given(st.lists(prims, min_size=1, max_size=3))
def test_encode_decode_roundtrip(ps):
    assert decode(encode(ps)) == ps


def test_decode_rejects_garbage():
    with pytest.raises(ValueError):
        decode([31, 31, 1, 1, 1, 1, 1, 1])


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        gen_dataset(0, 0)


def test_batch_size_zero_rejected():
    with pytest.raises(ConfigError):
        next(batch_iter(gen_dataset(0, 4), 0, 0))


def test_epoch_drops_partial_batch():
    ds = gen_dataset(0, 10)
    assert sum(1 for _ in batch_iter(ds, 3, 1, epochs=2)) == 2 * 3


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 1000))
def test_epoch_is_a_sample_without_replacement(n, b, seed):
    b = min(b, n)
    ds = gen_dataset(7, n)
    seen = Counter()
    for _, tokens in batch_iter(ds, b, seed, epochs=1):
        seen.update(t.tobytes() for t in tokens)
    everything = Counter(s.tokens.tobytes() for s in ds)
    assert sum(seen.values()) == (n // b) * b
    assert all(seen[k] <= everything[k] for k in seen)


def test_batch_at_matches_stream():
    ds = gen_dataset(2, 9)
    stream = batch_iter(ds, 2, 5)
    for i in range(12):
        a = next(stream)
        b = batch_at(ds, 2, 5, i)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_tokens_are_informative():
    """Tokens pin the latent down exactly; ignoring them leaves real error."""
    ds = gen_dataset(3, 400)
    lat = np.stack([s.latent for s in ds])
    uncond = np.mean((lat - lat.mean(axis=0)) ** 2)
    cond = np.mean([(s.latent - render(decode(s.tokens))) ** 2 for s in ds])
    assert cond == 0.0 and uncond > 0.01
