import numpy as np
import pytest
from hypothesis import strategies as st

from unetslim.data import gen_dataset, stack
from unetslim.unet import build_unet, desk_spec, make_spec


@pytest.fixture(scope="session")
def spec():
    return desk_spec()


@pytest.fixture(scope="session")
def teacher(spec):
    return build_unet(spec, seed=0)


@pytest.fixture(scope="session")
def batch():
    return stack(gen_dataset(123, 2))


def small_spec(**kw):
    """Three-level toy used where full desk size would only cost time."""
    args = dict(
        base_channels=16,
        channel_multipliers=(1, 2, 2),
        down_layers=(2, 2, 2),
        up_layers=(3, 3, 3),
        down_transformer=(True, True, False),
        up_transformer=(False, True, True),
        downsample=(True, True, False),
        head_dim=8,
        latent_size=8,
        cond_dim=16,
        time_embed_dim=32,
        norm_groups=4,
    )
    args.update(kw)
    return make_spec(**args)


@st.composite
def random_specs(draw):
    depth = draw(st.integers(1, 4))
    bools = st.lists(st.booleans(), min_size=depth, max_size=depth)
    counts = st.lists(st.integers(1, 3), min_size=depth, max_size=depth)
    down = draw(bools)[: depth - 1] + [False]
    return make_spec(
        base_channels=draw(st.sampled_from([8, 16])),
        channel_multipliers=(1, *draw(st.lists(st.integers(1, 3), min_size=depth - 1, max_size=depth - 1))),
        down_layers=tuple(draw(counts)),
        up_layers=tuple(draw(counts)),
        down_transformer=tuple(draw(bools)),
        up_transformer=tuple(draw(bools)),
        downsample=tuple(down),
        head_dim=draw(st.sampled_from([4, 8])),
        ff_mult=draw(st.integers(1, 3)),
        latent_size=16,
        cond_dim=draw(st.sampled_from([8, 12])),
        cond_seq_len=draw(st.integers(1, 4)),
        vocab_size=draw(st.integers(2, 9)),
        time_embed_dim=draw(st.sampled_from([8, 16])),
        norm_groups=4,
    )


def random_batch(spec, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, spec.latent_channels, spec.latent_size, spec.latent_size))
    t = rng.integers(0, spec.T_max, n)
    tokens = rng.integers(0, spec.vocab_size, (n, spec.cond_seq_len))
    return x, t, tokens


CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
