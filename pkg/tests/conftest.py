"""Session-scoped artifacts shared across test modules.

Training happens once per pytest session; individual tests only evaluate.
BUILD_SECONDS records how long each artifact took so the acceptance tests
can charge runtime budgets to the builds they actually depend on.
"""

import time

import numpy as np
import pytest

from semnet.adaptation import gather_observations, make_channel_gan, train_gan
from semnet.channel import ChannelModel
from semnet.codec import make_codec, train_codec
from semnet.data import Dataset, load_dataset, upscale2x
from semnet.lightweight import (
    make_canvas_classifier,
    make_patch_codec,
    pad_and_grid,
    patch_dataset,
    train_canvas_classifier,
)
from semnet.nn import named_stream


BUILD_SECONDS: dict[str, float] = {}


def _timed(key):
    class _Timer:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, *exc):
            BUILD_SECONDS[key] = time.perf_counter() - self.t0
            return False

    return _Timer()


@pytest.fixture(scope="session")
def dataset():
    return load_dataset(seed=0)


@pytest.fixture(scope="session")
def small_dataset(dataset):
    return Dataset(dataset.train_x[:2048], dataset.train_y[:2048],
                   dataset.test_x[:500], dataset.test_y[:500], dataset.source)


@pytest.fixture(scope="session")
def trained_codec(dataset):
    """Quarter-rate codec trained at 21 dB; the drift studies start from here."""
    with _timed("trained_codec"):
        codec = make_codec(196, named_stream(0, "fixture.codec.init"))
        ch = ChannelModel("awgn", 21.0)
        codec, rows = train_codec(codec, ch, dataset, epochs=12,
                                  rng=named_stream(0, "fixture.codec.train"))
    assert rows[-1].val_psnr > 15.0
    return codec


@pytest.fixture(scope="session")
def channel_gan(trained_codec, dataset):
    """Surrogate trained on real transmissions pooled over the drift SNRs."""
    with _timed("channel_gan"):
        obs = gather_observations(trained_codec, (21.0, 18.0, 15.0, 12.0, 9.0),
                                  dataset.train_x, blocks_per_snr=10,
                                  rng=named_stream(0, "fixture.gan.obs"))
        gan = make_channel_gan(trained_codec.n_symbols, named_stream(0, "fixture.gan.init"))
        gan, trace = train_gan(gan, obs, epochs=8, rng=named_stream(0, "fixture.gan.train"))
    assert all(np.isfinite(row.d_loss) and np.isfinite(row.g_loss) for row in trace)
    return gan


def _train_patch_codec(patch, n_symbols, hidden, snr_db, dataset):
    grid = pad_and_grid(28, patch)
    with _timed(f"patch_codec_{patch}_{n_symbols}"):
        crops = patch_dataset(dataset.train_x, grid,
                              named_stream(0, f"fixture.crops.{patch}.{n_symbols}"))
        codec = make_patch_codec(patch, named_stream(0, f"fixture.pc{patch}.{n_symbols}.init"),
                                 n_symbols=n_symbols, hidden=hidden)
        codec, rows = train_codec(codec, ChannelModel("awgn", snr_db), crops, epochs=8,
                                  rng=named_stream(0, f"fixture.pc{patch}.{n_symbols}.train"))
    assert rows[-1].val_psnr > 15.0
    return codec


@pytest.fixture(scope="session")
def patch_codec_p4(dataset):
    """Half-rate 4x4 patch codec trained at the 10 dB sampling operating point."""
    return _train_patch_codec(4, 8, 32, 10.0, dataset)


@pytest.fixture(scope="session")
def patch_codec_p8(dataset):
    """Half-rate 8x8 patch codec trained at the 10 dB sampling operating point."""
    return _train_patch_codec(8, 32, 64, 10.0, dataset)


@pytest.fixture(scope="session")
def patch_codec_p4_full(dataset):
    """Unit-rate 4x4 patch codec for the near-noiseless full-observation check."""
    return _train_patch_codec(4, 16, 32, 300.0, dataset)


def _train_classifier(grid, codec, coverage, epochs, dataset, tag, upscale=False):
    with _timed(f"canvas_{tag}"):
        tx = upscale2x(dataset.train_x) if upscale else dataset.train_x
        vx = upscale2x(dataset.test_x[:1000]) if upscale else dataset.test_x[:1000]
        cls = make_canvas_classifier(grid, named_stream(0, f"fixture.{tag}.init"))
        cls, rows = train_canvas_classifier(
            cls, codec, ChannelModel("awgn", 10.0), tx, dataset.train_y,
            vx, dataset.test_y[:1000], grid, epochs,
            named_stream(0, f"fixture.{tag}.train"), coverage=coverage)
    assert rows[-1].val_accuracy > 0.5
    return cls


@pytest.fixture(scope="session")
def canvas_cls_28_4(dataset, patch_codec_p4):
    return _train_classifier(pad_and_grid(28, 4), patch_codec_p4, (0.05, 1.0), 8,
                             dataset, "cls28x4")


@pytest.fixture(scope="session")
def canvas_cls_28_8(dataset, patch_codec_p8):
    return _train_classifier(pad_and_grid(28, 8), patch_codec_p8, (0.10, 1.0), 8,
                             dataset, "cls28x8")


@pytest.fixture(scope="session")
def canvas_cls_56_4(dataset, patch_codec_p4):
    return _train_classifier(pad_and_grid(56, 4), patch_codec_p4, (0.02, 0.35), 6,
                             dataset, "cls56x4", upscale=True)
