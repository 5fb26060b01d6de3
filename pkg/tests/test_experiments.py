"""Experiment plumbing: targets, dispatch, archive loading (fast checks)."""

import numpy as np
import pytest

from noiselab.errors import ConfigError
from noiselab.experiments import (
    EXPERIMENT_NAMES,
    Gaussian1DTarget,
    Poisson1DTarget,
    TukeyLambda1DTarget,
    default_toy_camera,
    load_archive_records,
    make_toy_clean_images,
    run_experiment,
)
from noiselab.physics import CameraSetting, tukey_lambda_variance
from noiselab.rng import Rng


def test_unknown_experiment_lists_names():
    with pytest.raises(ConfigError, match="poisson1d"):
        run_experiment("nope")
    assert set(EXPERIMENT_NAMES) == {
        "poisson1d", "tukey_lambda", "toy2d", "mmse", "schedule_dump"
    }


class TestTargets:
    def test_poisson_sample_shapes_and_moments(self, rng):
        target = Poisson1DTarget(ga=0.02)
        data = target.sample(2000, 32, rng)
        assert data["n0"].shape == (2000, 1, 32)
        assert data["levels"].min() >= 5 and data["levels"].max() <= 50
        # noise is zero-mean with pooled std near the closed form
        assert abs(data["n0"].mean()) < 4 * data["n0"].std() / np.sqrt(data["n0"].size)
        assert data["n0"].std() == pytest.approx(target.pooled_std(), rel=0.02)

    def test_tukey_pooled_std_matches_closed_form(self, rng):
        target = TukeyLambda1DTarget(sigma=0.1)
        x = target.noise_for(np.zeros((500, 1, 64)), rng)
        expected = 0.1 * np.sqrt(tukey_lambda_variance(0.1))
        assert target.pooled_std() == pytest.approx(expected)
        assert x.std() == pytest.approx(expected, rel=0.02)

    def test_gaussian_target(self, rng):
        target = Gaussian1DTarget(sigma=0.5)
        data = target.sample(100, 16, rng)
        assert data["clean"] is None
        assert data["n0"].std() == pytest.approx(0.5, rel=0.05)


def test_toy_clean_images_range_and_determinism():
    imgs_a = make_toy_clean_images(3, 128, Rng(9))
    imgs_b = make_toy_clean_images(3, 128, Rng(9))
    for a, b in zip(imgs_a, imgs_b):
        np.testing.assert_array_equal(a, b)
        assert a.shape == (2, 128, 128)
        assert a.min() >= 0.0 and a.max() <= 0.76


def test_load_archive_records(tmp_path, rng):
    from noiselab.pairs import PhysicsNoiseGenerator, generate_pairs
    from noiselab.tiling import plan_tiles

    camera = default_toy_camera()
    gen = PhysicsNoiseGenerator(camera)
    images = make_toy_clean_images(1, 128, rng)
    plan = plan_tiles(128, 128, 64, 0.0)
    settings = [CameraSetting(800, 100.0), CameraSetting(6400, 300.0)]
    manifest = generate_pairs(
        gen, images, settings, plan, rng.derive(1), tmp_path, white_level=1.0
    )
    records, loaded_settings, extent = load_archive_records(manifest)
    assert loaded_settings == settings
    assert extent == 128
    assert len(records) == 4 * 2
    rec = records[0]
    assert rec["noise"].shape == (2, 64, 64)
    assert rec["coords"].shape == (2, 64, 64)
    # absolute coordinates reflect the tile origin
    origins = {tuple(r["coords"][:, 0, 0]) for r in records}
    assert (0, 0) in origins and (64, 64) in origins
