"""Forward process, reverse-step algebra, samplers, and training loop."""

import numpy as np
import pytest

from noiselab import diffusion as dd
from noiselab import tensor as T
from noiselab.errors import ConfigError, NumericError
from noiselab.nets import Conditioning, Toy1DConfig, Toy1DNet
from noiselab.optim import Adam
from noiselab.rng import Rng
from noiselab.schedules import build_schedule, ddpm_coefficients
from noiselab.tensor import Tensor


class OracleNet:
    """Returns a fixed noise field: simulates a perfect predictor."""

    def __init__(self, eps):
        self.eps = np.asarray(eps, dtype=np.float64)

    def forward(self, n_t, t, cond):
        return Tensor(self.eps)

    def parameters(self):
        return []


class ZeroNet:
    def forward(self, n_t, t, cond):
        return Tensor(np.zeros(n_t.shape))


class TestQSample:
    def test_t_zero_boundary_is_identity(self, rng):
        s = build_schedule("cosine", 100)
        n0 = rng.standard_normal((4, 1, 8))
        n_t, eps = dd.q_sample(n0, 0, s, rng.derive(1))
        np.testing.assert_allclose(n_t, n0, atol=1e-12)

    def test_pure_noise_variance(self, rng):
        s = build_schedule("cosine", 1000)
        n0 = np.zeros(10**6)
        for t in (50, 300, 900):
            n_t, _ = dd.q_sample(n0, t, s, rng.derive(t))
            expected = 1.0 - s.alpha_bar[t]
            assert n_t.var() == pytest.approx(expected, rel=0.01)

    def test_mean_follows_signal(self, rng):
        s = build_schedule("sigmoid2", 1000)
        c = 3.0
        n0 = np.full(10**6, c)
        t = 600
        n_t, _ = dd.q_sample(n0, t, s, rng.derive(0))
        se = n_t.std() / 1000.0
        assert abs(n_t.mean() - np.sqrt(s.alpha_bar[t]) * c) < 4 * se

    def test_per_sample_timesteps(self, rng):
        s = build_schedule("cosine", 100)
        n0 = np.zeros((3, 1, 4))
        t = np.array([1, 50, 100])
        n_t, eps = dd.q_sample(n0, t, s, rng.derive(0))
        assert n_t.shape == n0.shape
        # later timesteps carry more noise on average
        assert np.abs(n_t[0]).mean() < np.abs(n_t[2]).mean()

    def test_moments_across_random_t(self, rng):
        # Forward-process moments within 1% at 1e6 scalars for random t.
        s = build_schedule("sigmoid2", 1000)
        c = 0.7
        n0 = np.full(10**6, c)
        for i, t in enumerate(rng.derive(7).integers(1, 1001, size=10)):
            t = int(t)
            n_t, _ = dd.q_sample(n0, t, s, rng.derive(8, i))
            mean_expected = np.sqrt(s.alpha_bar[t]) * c
            var_expected = 1.0 - s.alpha_bar[t]
            assert n_t.var() == pytest.approx(var_expected, rel=0.01)
            assert n_t.mean() == pytest.approx(mean_expected, abs=4 * n_t.std() / 1000)


class TestReverseAlgebra:
    def test_oracle_reverse_step_hits_posterior_mean(self, rng):
        # With the true eps, the reverse mean equals the forward posterior
        # mean q(x_{t-1} | x_t, x_0) exactly.
        s = build_schedule("cosine", 50)
        n0 = rng.standard_normal((2, 1, 8))
        for t in (2, 17, 50):
            eps = rng.derive(t).standard_normal(n0.shape)
            ab_t, ab_prev = s.alpha_bar[t], s.alpha_bar[t - 1]
            beta_t, alpha_t = s.beta[t - 1], s.alpha[t - 1]
            x_t = np.sqrt(ab_t) * n0 + np.sqrt(1 - ab_t) * eps
            co = ddpm_coefficients(s, t)
            mu_theta = co.mean_coef_x * x_t - co.mean_coef_eps * eps
            mu_post = (
                np.sqrt(ab_prev) * beta_t * n0
                + np.sqrt(alpha_t) * (1 - ab_prev) * x_t
            ) / (1 - ab_t)
            np.testing.assert_allclose(mu_theta, mu_post, atol=1e-12)

    def test_single_step_oracle_recovers_n0(self, rng):
        # T=1: the final reverse step is deterministic and exact.
        s = build_schedule("cosine", 2)
        n0 = rng.standard_normal((3, 1, 4)) * 0.3
        eps = rng.derive(1).standard_normal(n0.shape)

        class FixedEps:
            def forward(self, n_t, t, cond):
                return Tensor(eps)

        model = dd.DiffusionModel(schedule=s, net=FixedEps())
        # run the t=1 update by hand from x_1 built with known eps
        ab1 = s.alpha_bar[1]
        x1 = np.sqrt(ab1) * n0 + np.sqrt(1 - ab1) * eps
        co = ddpm_coefficients(s, 1)
        recovered = co.mean_coef_x * x1 - co.mean_coef_eps * eps
        np.testing.assert_allclose(recovered, n0, atol=1e-10)
        assert co.posterior_variance == 0.0


class TestSamplers:
    def test_ddim_deterministic(self, rng):
        s = build_schedule("sigmoid2", 100)
        model = dd.DiffusionModel(schedule=s, net=ZeroNet())
        a = dd.ddim_sample(model, Conditioning(), (4, 1, 8), 20, Rng(5))
        b = dd.ddim_sample(model, Conditioning(), (4, 1, 8), 20, Rng(5))
        np.testing.assert_array_equal(a, b)

    def test_ddim_subsequence_validation(self):
        s = build_schedule("cosine", 100)
        model = dd.DiffusionModel(schedule=s, net=ZeroNet())
        with pytest.raises(ConfigError):
            dd.ddim_sample(model, Conditioning(), (1, 1, 4), 0, Rng(0))
        with pytest.raises(ConfigError):
            dd.ddim_sample(model, Conditioning(), (1, 1, 4), 101, Rng(0))

    def test_ddpm_logs_requested_steps(self, rng):
        s = build_schedule("cosine", 30)
        model = dd.DiffusionModel(schedule=s, net=ZeroNet())
        out, logged = dd.ddpm_sample(
            model, Conditioning(), (2, 1, 4), rng, log_steps=(5, 0)
        )
        assert set(logged) == {5, 0}
        np.testing.assert_array_equal(logged[0], out)

    def test_nan_guard(self, rng):
        s = build_schedule("cosine", 10)

        class NanNet:
            def forward(self, n_t, t, cond):
                return Tensor(np.full(n_t.shape, np.nan))

        model = dd.DiffusionModel(schedule=s, net=NanNet())
        with pytest.raises(NumericError, match="t="):
            dd.ddpm_sample(model, Conditioning(), (1, 1, 4), rng)

    def test_normalization_round_trip(self):
        norm = dd.Normalization(offset=np.array([0.1, -0.2]), scale=np.array([2.0, 0.5]))
        x = np.linspace(-1, 1, 24).reshape(2, 1, 3, 4)
        idx = np.array([0, 1])
        back = norm.denormalize(norm.normalize(x, idx), idx)
        np.testing.assert_allclose(back, x, atol=1e-12)


class TestTrainingStep:
    def test_perfect_oracle_gives_zero_loss(self, rng):
        s = build_schedule("cosine", 50)

        class EchoNet:
            """Peeks at the injected noise via the shared rng stream."""

            def __init__(self):
                self.params = [Tensor(np.zeros(1), requires_grad=True)]

            def forward(self, n_t, t, cond):
                return Tensor(self.eps)

            def parameters(self):
                return self.params

        net = EchoNet()
        model = dd.DiffusionModel(schedule=s, net=net)
        # Reproduce the step's internal eps by replaying its derived stream.
        n0 = rng.standard_normal((2, 1, 8))
        step_rng = rng.derive(1)
        t = step_rng.derive(0).integers(1, s.T + 1, size=2)
        _, eps = dd.q_sample(n0, t, s, step_rng.derive(1))
        net.eps = eps
        adam = Adam(net.params, lr=1e-3)
        loss = dd.training_step(model, {"n0": n0}, rng.derive(1), adam)
        assert loss == pytest.approx(0.0, abs=1e-24)

    def test_loss_at_init_near_unit(self, rng):
        # Zero predictor on standardized data: E||eps||^2 = 1 per element.
        s = build_schedule("sigmoid2", 100)
        net = Toy1DNet(Toy1DConfig(hidden=8), rng)
        model = dd.DiffusionModel(schedule=s, net=net)
        adam = Adam(net.parameters(), lr=1e-9)
        losses = [
            dd.training_step(
                model,
                {"n0": rng.derive(3, i).standard_normal((16, 1, 16))},
                rng.derive(4, i),
                adam,
            )
            for i in range(10)
        ]
        assert 0.5 < np.mean(losses) < 2.0

    def test_nonfinite_loss_raises(self, rng):
        s = build_schedule("cosine", 10)

        class NanNet:
            def __init__(self):
                self.p = [Tensor(np.zeros(1), requires_grad=True)]

            def forward(self, n_t, t, cond):
                return Tensor(np.full(n_t.shape, np.nan))

            def parameters(self):
                return self.p

        net = NanNet()
        model = dd.DiffusionModel(schedule=s, net=net)
        with pytest.raises(NumericError):
            dd.training_step(
                model, {"n0": np.zeros((2, 1, 4))}, rng, Adam(net.p, lr=1e-3)
            )

    def test_loss_decreases_on_toy(self, rng):
        # Cosine injects enough mid-range noise that the attainable loss
        # floor sits well below half the untrained value.
        from noiselab.experiments import Gaussian1DTarget, train_toy1d_model

        target = Gaussian1DTarget(sigma=0.5)
        model, losses = train_toy1d_model(
            target, "cosine", Rng(42), T=100, steps=600, batch=32, length=16,
            hidden=8,
        )
        assert np.mean(losses[-50:]) < 0.5 * np.mean(losses[:10])


class TestTrainedToy:
    """Slower end-to-end checks on small trained 1D models."""

    @pytest.fixture(scope="class")
    def gaussian_model(self):
        from noiselab.experiments import Gaussian1DTarget, train_toy1d_model

        target = Gaussian1DTarget(sigma=0.5)
        model, _ = train_toy1d_model(
            target, "sigmoid2", Rng(7), T=200, steps=1500, batch=48, length=32,
            hidden=12,
        )
        return model

    def test_generated_std_matches_target(self, gaussian_model):
        from noiselab.experiments import Gaussian1DTarget, sample_toy1d

        res = sample_toy1d(
            gaussian_model, Gaussian1DTarget(sigma=0.5), 10**5, Rng(8),
            sampler="ddpm",
        )
        assert 0.45 <= res["generated"].std() <= 0.55

    def test_ddim_full_sequence_eta_one_matches_ddpm(self, gaussian_model):
        # With S=T and eta=1 the DDIM update reproduces DDPM's ancestral
        # marginals; a two-sample KS test should not distinguish them.
        from scipy.stats import ks_2samp

        s = gaussian_model.schedule
        n = (512, 1, 32)
        ddpm = dd.ddpm_sample(gaussian_model, Conditioning(), n, Rng(21))
        ddim = dd.ddim_sample(
            gaussian_model, Conditioning(), n, steps=s.T, rng=Rng(22), eta=1.0
        )
        stat = ks_2samp(ddpm.ravel(), ddim.ravel())
        assert stat.pvalue > 0.01


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path, rng):
        from noiselab.physics import CameraSetting

        net = Toy1DNet(Toy1DConfig(hidden=8), rng)
        s = build_schedule("sigmoid3", 64)
        norm = dd.Normalization(offset=np.array([0.05]), scale=np.array([0.3]))
        model = dd.DiffusionModel(schedule=s, net=net, normalization=norm)
        path = tmp_path / "toy.ndck"
        dd.save_model(path, model, "toy1d", net.cfg.to_dict(), [CameraSetting(100, 1.0)])
        loaded, settings = dd.load_model(path)
        assert loaded.schedule.name == "sigmoid3" and loaded.schedule.T == 64
        assert settings == [CameraSetting(100, 1.0)]
        x = rng.derive(9).standard_normal((2, 1, 16))
        t = np.array([3, 40])
        with T.no_grad():
            a = model.net.forward(Tensor(x), t, Conditioning()).data
            b = loaded.net.forward(Tensor(x), t, Conditioning()).data
        np.testing.assert_allclose(a, b, atol=1e-6)
        np.testing.assert_allclose(loaded.normalization.scale, [0.3], atol=1e-9)

    def test_two_branch_round_trip(self, tmp_path, rng):
        from noiselab.nets import TwoBranchConfig, TwoBranchNet
        from noiselab.physics import CameraSetting

        settings = [CameraSetting(800, 100.0), CameraSetting(6400, 300.0)]
        cfg = TwoBranchConfig(in_channels=2, base_channels=4, depth=1, emb_dim=8,
                              pe_channels=4, cam_embed_dim=4, cam_attn_dim=4,
                              mlp_hidden=6)
        net = TwoBranchNet(cfg, settings, rng)
        # randomize the zero-init heads so the round trip is non-trivial
        net.unet.out.w.data[:] = rng.derive(1).standard_normal(net.unet.out.w.shape)
        s = build_schedule("sigmoid2", 32)
        norm = dd.Normalization(offset=np.zeros(2), scale=np.array([0.1, 0.2]))
        model = dd.DiffusionModel(schedule=s, net=net, normalization=norm)
        path = tmp_path / "tb.ndck"
        dd.save_model(path, model, "two_branch", cfg.to_dict(), settings)
        loaded, loaded_settings = dd.load_model(path)
        assert loaded_settings == settings
        assert loaded.net.bank.lookup(settings[1]) == net.bank.lookup(settings[1])
        n_t = rng.derive(2).standard_normal((1, 2, 8, 8))
        clean = rng.derive(3).uniform(0, 1, (1, 2, 8, 8))
        coords = np.zeros((1, 2, 8, 8))
        cond = Conditioning(clean, coords, np.array([1]))
        with T.no_grad():
            a = model.net.forward(Tensor(n_t), np.array([5]), cond).data
            b = loaded.net.forward(Tensor(n_t), np.array([5]), cond).data
        # f32 checkpoint storage quantizes parameters
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)
