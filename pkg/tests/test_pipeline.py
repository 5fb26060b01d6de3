"""Tiling, Bayer packing, pair generation, and balancing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noiselab.errors import ConfigError, ShapeError
from noiselab.fileio import load_nst
from noiselab.pairs import (
    PhysicsNoiseGenerator,
    ZeroNoiseGenerator,
    generate_pairs,
    load_manifest,
    resample_for_balance,
)
from noiselab.physics import (
    CameraSetting,
    FixedPatternConfig,
    PhysicsNoiseParams,
    SyntheticCameraModel,
)
from noiselab.rng import Rng
from noiselab.stats import fit_variance_line, per_clean_value_stats
from noiselab.tiling import pack_bayer, plan_tiles, stitch, unpack_bayer


class TestBayer:
    def test_two_by_two_phases(self):
        raw = np.array([[1.0, 2.0], [3.0, 4.0]])
        packed = pack_bayer(raw)
        np.testing.assert_array_equal(packed[:, 0, 0], [1.0, 2.0, 3.0, 4.0])

    def test_round_trip_bit_exact(self, rng):
        raw = rng.standard_normal((8, 8))
        np.testing.assert_array_equal(unpack_bayer(pack_bayer(raw)), raw)

    def test_dims_halved(self, rng):
        assert pack_bayer(rng.standard_normal((12, 16))).shape == (4, 6, 8)

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            pack_bayer(np.zeros((3, 4)))


class TestTiling:
    def test_single_patch(self):
        plan = plan_tiles(64, 64, 64, 0.25)
        assert plan.origins == [(0, 0)]

    def test_documented_stride_arithmetic(self):
        plan = plan_tiles(1416, 2120, 512, 0.25)
        assert plan.row_origins == (0, 384, 768, 904)
        assert plan.col_origins == (0, 384, 768, 1152, 1536, 1608)
        assert len(plan.row_origins) == 4

    def test_coords_are_absolute(self):
        plan = plan_tiles(128, 128, 64, 0.0)
        coords = plan.coords_for((64, 0))
        assert coords[0].min() == 64 and coords[0].max() == 127
        assert coords[1].min() == 0 and coords[1].max() == 63

    @settings(max_examples=200, deadline=None)
    @given(
        h=st.integers(8, 200),
        w=st.integers(8, 200),
        p=st.integers(4, 64),
        o=st.floats(0.0, 0.9),
    )
    def test_coverage(self, h, w, p, o):
        if p > min(h, w):
            return
        plan = plan_tiles(h, w, p, o)
        covered = np.zeros((h, w), dtype=bool)
        for r, c in plan.origins:
            covered[r : r + p, c : c + p] = True
        assert covered.all()

    def test_patch_exceeding_image_rejected(self):
        with pytest.raises(ConfigError):
            plan_tiles(32, 32, 64, 0.0)

    def test_stitch_first_writer_wins(self, rng):
        plan = plan_tiles(32, 32, 16, 0.5)
        patches = [np.full((1, 16, 16), i, dtype=float) for i in range(len(plan))]
        out = stitch(patches, plan, channels=1)
        assert not np.any(np.isnan(out))
        assert out[0, 0, 0] == 0.0


class TestGeneratePairs:
    @pytest.fixture
    def oracle(self):
        model = SyntheticCameraModel(
            params=PhysicsNoiseParams(g=0.004, alpha_qe=0.8, sigma_d=1.0, sigma_r=0.01),
            sensor_shape=(2, 64, 64),
            fixed_pattern=FixedPatternConfig(channel_factors=(1.0, 0.85)),
            black_level=0.0,
            white_level=1.0,
        )
        return PhysicsNoiseGenerator(model)

    def _cleans(self, rng, n=3):
        # Smooth-ish clean content in [0.05, 0.9].
        base = rng.uniform(0.05, 0.9, size=(n, 2, 8, 8))
        return [np.kron(b, np.ones((8, 8)))[:, :64, :64] for b in base]

    def test_zero_noise_stub_gives_identical_pairs(self, tmp_path, rng):
        plan = plan_tiles(64, 64, 32, 0.0)
        cleans = self._cleans(rng, 2)
        manifest = generate_pairs(
            ZeroNoiseGenerator(),
            cleans,
            [CameraSetting(100, 1.0)],
            plan,
            rng,
            tmp_path,
        )
        for rec in load_manifest(manifest):
            clean, _ = load_nst(tmp_path / rec.clean)
            noisy, _ = load_nst(tmp_path / rec.noisy)
            np.testing.assert_array_equal(clean, noisy)

    def test_manifest_count(self, tmp_path, rng):
        plan = plan_tiles(64, 64, 32, 0.25)
        cleans = self._cleans(rng, 3)
        settings = [CameraSetting(100, 1.0), CameraSetting(800, 2.0)]
        manifest = generate_pairs(
            ZeroNoiseGenerator(), cleans, settings, plan, rng, tmp_path
        )
        records = load_manifest(manifest)
        assert len(records) == 3 * len(plan) * 2

    def test_oracle_pairs_match_variance_line(self, tmp_path, oracle, rng):
        plan = plan_tiles(64, 64, 64, 0.0)
        cleans = [
            rng.derive(7, i).integers(0, 33, size=(2, 64, 64)) / 32.0
            for i in range(40)
        ]
        setting = CameraSetting(100, 1.0)
        manifest = generate_pairs(
            oracle, cleans, [setting], plan, rng, tmp_path, clip=False
        )
        base = tmp_path
        levels, noises = [], []
        for rec in load_manifest(manifest):
            clean, _ = load_nst(base / rec.clean)
            noise, _ = load_nst(base / rec.noise)
            levels.append(np.rint(clean * 32).astype(np.int64))
            noises.append(noise.astype(np.float64))
        st_ = per_clean_value_stats(np.stack(levels), np.stack(noises), max_level=32)
        slope, intercept = fit_variance_line(st_, level_scale=1 / 32.0)
        model = oracle.model
        assert slope == pytest.approx(model.shot_slope(setting), rel=0.05)
        assert intercept == pytest.approx(
            model.signal_independent_variance(setting), rel=0.05
        )

    def test_fixed_seed_bit_reproducible(self, tmp_path, oracle, rng):
        plan = plan_tiles(64, 64, 32, 0.25)
        cleans = self._cleans(rng, 2)
        m1 = generate_pairs(
            oracle, cleans, [CameraSetting(100, 1.0)], plan, Rng(99), tmp_path / "a"
        )
        m2 = generate_pairs(
            oracle, cleans, [CameraSetting(100, 1.0)], plan, Rng(99), tmp_path / "b"
        )
        recs1, recs2 = load_manifest(m1), load_manifest(m2)
        for r1, r2 in zip(recs1, recs2):
            n1, _ = load_nst(m1.parent / r1.noise)
            n2, _ = load_nst(m2.parent / r2.noise)
            np.testing.assert_array_equal(n1.view(np.uint32), n2.view(np.uint32))

    def test_patch_coords_match_origins(self, tmp_path, oracle, rng):
        # The fixed pattern is a pure function of absolute coordinates, so a
        # noise patch generated at origin (r, c) must carry the pattern of
        # that exact region.
        model = oracle.model
        quiet = SyntheticCameraModel(
            params=PhysicsNoiseParams(g=0.004, alpha_qe=0.8, sigma_d=0.0, sigma_r=0.0),
            sensor_shape=model.sensor_shape,
            fixed_pattern=FixedPatternConfig(
                ramp_amplitude=0.1, col_sigma=0.02, channel_factors=(1.0, 0.85),
                pattern_seed=4,
            ),
            black_level=0.0,
            white_level=1.0,
        )
        gen = PhysicsNoiseGenerator(quiet)
        plan = plan_tiles(64, 64, 32, 0.25)
        clean = [np.zeros((2, 64, 64))]
        setting = CameraSetting(100, 1.0)
        manifest = generate_pairs(
            gen, clean, [setting], plan, rng, tmp_path, clip=False
        )
        from noiselab.tiling import full_coords

        fp_full = quiet.fixed_pattern_at(full_coords(64, 64), setting)
        for rec in load_manifest(manifest):
            noise, _ = load_nst(tmp_path / rec.noise)
            r, c = rec.origin
            np.testing.assert_allclose(
                noise, fp_full[:, r : r + 32, c : c + 32].astype(np.float32), atol=1e-7
            )


class TestResample:
    def _records(self, n, iso=100):
        return [
            dict(iso=iso, exposure_ratio=1.0, image=i, clean=f"c{i}", noisy=f"n{i}",
                 noise=f"x{i}")
            for i in range(n)
        ]

    def test_full_group_unchanged(self):
        recs = self._records(100)
        assert resample_for_balance(recs, 100) == recs

    def test_thirty_to_hundred(self):
        out = resample_for_balance(self._records(30), 100)
        assert len(out) == 100
        from collections import Counter

        counts = Counter(r["image"] for r in out)
        assert all(c >= 3 for c in counts.values())
        assert sum(1 for c in counts.values() if c == 4) == 10

    def test_single_entry_repeated(self):
        out = resample_for_balance(self._records(1), 100)
        assert len(out) == 100
        assert all(r["image"] == 0 for r in out)

    def test_groups_are_independent(self):
        recs = self._records(100, iso=100) + self._records(5, iso=800)
        out = resample_for_balance(recs, 100)
        assert len(out) == 200
