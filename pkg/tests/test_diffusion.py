import numpy as np
import pytest

import dpsynth.diffusion as diffusion_mod
from dpsynth import ImageTensor, InvalidArgumentError, RngSeed
from dpsynth.diffusion import (
    DenoiserParams,
    NoiseSchedule,
    ParamManifest,
    corrupt,
    denoiser_forward,
    forward_noise,
    init_params,
    load_checkpoint,
    loss_and_per_example_grads,
    sample,
    save_checkpoint,
    zero_params,
)

from oracles import clt_mean_bound, clt_variance_bound, finite_difference_gradient

TINY = ParamManifest(
    height=4, width=4, channels=1, hidden1=8, hidden2=7, time_dim=4, num_classes=3, label_dim=3
)


class TestNoiseSchedule:
    def test_hand_computed_alpha_bars(self):
        sched = NoiseSchedule(betas=(0.5, 0.5))
        assert np.allclose(sched.alpha_bars, [0.5, 0.25])

    def test_beta_range_enforced(self):
        with pytest.raises(InvalidArgumentError):
            NoiseSchedule(betas=(1.0,))
        with pytest.raises(InvalidArgumentError):
            NoiseSchedule(betas=(-0.1,))

    def test_alpha_bars_strictly_decreasing(self):
        sched = NoiseSchedule.linear(100)
        bars = sched.alpha_bars
        assert np.all(np.diff(bars) < 0)

    def test_default_linear_terminates_near_zero(self):
        for steps in (50, 100, 1000):
            assert NoiseSchedule.linear(steps).alpha_bars[-1] < 1e-3

    def test_linear_rejects_insufficient_corruption(self):
        with pytest.raises(InvalidArgumentError):
            NoiseSchedule.linear(100, reference_steps=100)  # literal 1e-4..0.02 over 100 steps


class TestForwardNoise:
    def test_no_corruption_at_unit_alpha_bar(self):
        x0 = np.array([0.2, 0.8, 0.4, 0.6])
        e = np.array([5.0, -5.0, 3.0, 1.0])
        assert np.allclose(corrupt(x0, 1.0, e), x0)

    def test_hand_arithmetic(self):
        # alpha_bars [0.5, 0.25]; x0 = 0, e = ones, t = 2 -> sqrt(0.75)
        sched = NoiseSchedule(betas=(0.5, 0.5))
        out = corrupt(np.zeros(4), sched.alpha_bar(2), np.ones(4))
        assert np.allclose(out, np.sqrt(0.75))

    def test_out_of_range_step(self, rng):
        sched = NoiseSchedule(betas=(0.5, 0.5))
        img = ImageTensor(width=2, height=2, channels=1, data=np.zeros(4))
        with pytest.raises(InvalidArgumentError):
            forward_noise(img, 0, sched, rng)
        with pytest.raises(InvalidArgumentError):
            forward_noise(img, 3, sched, rng)

    def test_moment_oracle(self):
        sched = NoiseSchedule.linear(50)
        x0_img = ImageTensor(width=2, height=1, channels=1, data=np.array([0.3, 0.9]))
        n = 20_000
        t = 10
        abar = sched.alpha_bar(t)
        draws = np.stack(
            [forward_noise(x0_img, t, sched, RngSeed(1).derive(i))[0].data for i in range(n)]
        )
        std = np.sqrt(1 - abar)
        for j in range(2):
            mean_err = abs(draws[:, j].mean() - np.sqrt(abar) * x0_img.data[j])
            var_err = abs(draws[:, j].var() - (1 - abar))
            assert mean_err < clt_mean_bound(std, n)
            assert var_err < clt_variance_bound(1 - abar, n)

    def test_returns_matching_noise(self, rng):
        sched = NoiseSchedule.linear(50)
        img = ImageTensor(width=2, height=2, channels=1, data=np.full(4, 0.5))
        xt, e = forward_noise(img, 7, sched, rng)
        assert np.allclose(xt.data, corrupt(img.data, sched.alpha_bar(7), e))


class TestDenoiserForward:
    def test_zero_params_zero_output(self):
        params = zero_params(TINY)
        out = denoiser_forward(params, np.random.default_rng(0).random(16), 3)
        assert np.all(out == 0.0)

    def test_label_conditioning_changes_output(self, rng):
        params = init_params(TINY, rng)
        x = rng.derive(1).generator().random(16)
        out_class = denoiser_forward(params, x, 2, labels=1)
        out_uncond = denoiser_forward(params, x, 2)
        assert not np.allclose(out_class, out_uncond)

    def test_batch_permutation_equivariance(self, rng):
        params = init_params(TINY, rng)
        x = rng.derive(2).generator().random((5, 16))
        t = np.array([1, 2, 3, 4, 5])
        labels = np.array([0, 1, 2, 0, 1])
        perm = np.array([3, 0, 4, 1, 2])
        out = denoiser_forward(params, x, t, labels)
        out_perm = denoiser_forward(params, x[perm], t[perm], labels[perm])
        assert np.allclose(out[perm], out_perm, atol=0, rtol=0)

    def test_shape_mismatch_rejected(self, rng):
        params = init_params(TINY, rng)
        with pytest.raises(InvalidArgumentError):
            denoiser_forward(params, np.zeros(17), 1)


def _linear_tail_params() -> DenoiserParams:
    """Zero first two layers with chosen biases: output is linear in (W3, b3)."""
    gen = np.random.default_rng(8)
    vec = np.zeros(TINY.num_params)
    params = DenoiserParams(TINY, vec)
    v = params.vector.copy()
    views = TINY.views(v)
    views["b1"][:] = gen.standard_normal(TINY.hidden1)
    views["b2"][:] = gen.standard_normal(TINY.hidden2)
    views["W3"][:] = gen.standard_normal(views["W3"].shape)
    views["b3"][:] = gen.standard_normal(TINY.data_dim)
    return DenoiserParams(TINY, v)


class TestGradients:
    def test_hand_derived_linear_tail_gradient(self):
        # With W1 = W2 = 0 the hidden activations are constants, so the loss
        # is exactly least squares in (W3, b3); compare against the closed
        # form written out by hand.
        params = _linear_tail_params()
        views = TINY.views(params.vector)
        sched = NoiseSchedule(betas=(0.3,))
        x0 = np.random.default_rng(3).random((1, 16))
        res = loss_and_per_example_grads(
            params, x0, None, sched, RngSeed(5), noise_multiplicity=1, example_ids=[0]
        )
        # replay the single (t, e) draw the engine used
        gen = RngSeed(5).derive(0).generator()
        t = gen.integers(1, 2, size=1)
        e = gen.standard_normal((1, 16))

        def silu(x):
            return x / (1 + np.exp(-x))

        h1 = silu(views["b1"])
        h2 = silu(views["b2"] + views["W2"] @ h1)
        out = views["W3"] @ h2 + views["b3"]
        resid = out - e[0]
        grad_w3 = 2.0 * np.outer(resid, h2)
        grad_b3 = 2.0 * resid

        gviews = TINY.views(res.per_example_grads[0])
        assert np.allclose(gviews["W3"], grad_w3, rtol=1e-12, atol=1e-12)
        assert np.allclose(gviews["b3"], grad_b3, rtol=1e-12, atol=1e-12)
        assert res.loss == pytest.approx(float(resid @ resid), rel=1e-12)

    def test_finite_difference_oracle(self, rng):
        params = init_params(TINY, rng)
        sched = NoiseSchedule.linear(10)
        x0 = rng.derive(3).generator().random((3, 16))
        labels = np.array([0, 2, 1])

        def f(vec):
            p = params.replace_vector(vec)
            r = loss_and_per_example_grads(
                p, x0, labels, sched, rng.derive(4), noise_multiplicity=2, example_ids=[7, 8, 9]
            )
            return r.loss

        analytic = loss_and_per_example_grads(
            params, x0, labels, sched, rng.derive(4), noise_multiplicity=2, example_ids=[7, 8, 9]
        ).per_example_grads.mean(axis=0)
        fd = finite_difference_gradient(f, params.vector.copy(), 1e-5)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1e-3 * np.abs(fd).max())
        assert (np.abs(fd - analytic) / denom).max() < 1e-5

    def test_per_example_grads_match_singleton_batches(self, rng):
        params = init_params(TINY, rng)
        sched = NoiseSchedule.linear(10)
        x0 = rng.derive(5).generator().random((4, 16))
        labels = np.array([0, 1, 2, 0])
        ids = [11, 22, 33, 44]
        batched = loss_and_per_example_grads(
            params, x0, labels, sched, rng.derive(6), example_ids=ids
        )
        scale = np.abs(batched.per_example_grads).max()
        for i in range(4):
            single = loss_and_per_example_grads(
                params, x0[i : i + 1], labels[i : i + 1], sched, rng.derive(6), example_ids=[ids[i]]
            )
            assert np.allclose(
                single.per_example_grads[0],
                batched.per_example_grads[i],
                rtol=1e-12,
                atol=1e-12 * scale,
            )
        # batch loss is the mean of per-example losses
        assert batched.loss == pytest.approx(batched.per_example_losses.mean(), rel=1e-12)

    def test_noise_multiplicity_reduces_gradient_variance(self, rng):
        params = init_params(TINY, rng)
        sched = NoiseSchedule.linear(10)
        x0 = rng.derive(7).generator().random((1, 16))

        def grad_with(k, trial):
            r = loss_and_per_example_grads(
                params, x0, None, sched, rng.derive(100 + trial), noise_multiplicity=k
            )
            return r.per_example_grads[0]

        g1 = np.stack([grad_with(1, t) for t in range(100)])
        g4 = np.stack([grad_with(4, t) for t in range(100)])
        assert g4.var(axis=0).mean() < g1.var(axis=0).mean()


class TestSampling:
    def test_zero_model_matches_hand_rolled_chain(self):
        # With a zero denoiser the chain is a deterministic function of the
        # injected Gaussians; replay it step by step.
        params = zero_params(TINY)
        sched = NoiseSchedule.linear(8)
        out = sample(params, sched, 2, RngSeed(77))
        abars = sched.alpha_bars
        T = sched.num_steps
        for i in range(2):
            noises = RngSeed(77).derive(i).generator().standard_normal((T, 16))
            x = noises[0]
            for t in range(T, 0, -1):
                x0_hat = x / np.sqrt(abars[t - 1])
                if t > 1:
                    x = np.sqrt(abars[t - 2]) * x0_hat + np.sqrt(1 - abars[t - 2]) * noises[T - t + 1]
            expected = np.clip(x0_hat, 0.0, 1.0)
            assert np.allclose(out[i].data, expected, rtol=0, atol=0)

    def test_empty_request(self, rng):
        params = zero_params(TINY)
        assert sample(params, NoiseSchedule.linear(8), 0, rng) == []

    def test_determinism(self, rng):
        params = init_params(TINY, rng)
        sched = NoiseSchedule.linear(8)
        a = sample(params, sched, 3, RngSeed(5), labels=np.array([0, 1, 2]))
        b = sample(params, sched, 3, RngSeed(5), labels=np.array([0, 1, 2]))
        assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))

    def test_exactly_t_denoiser_evaluations(self, rng, monkeypatch):
        params = init_params(TINY, rng)
        sched = NoiseSchedule.linear(9)
        calls = []
        original = diffusion_mod._forward_cached

        def counting(*args, **kwargs):
            calls.append(1)
            return original(*args, **kwargs)

        monkeypatch.setattr(diffusion_mod, "_forward_cached", counting)
        sample(params, sched, 4, RngSeed(0))
        assert len(calls) == sched.num_steps

    def test_outputs_clamped_to_unit_range(self, rng):
        params = init_params(TINY, rng)
        out = sample(params, NoiseSchedule.linear(8), 5, rng)
        for img in out:
            assert img.data.min() >= 0.0 and img.data.max() <= 1.0


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path, rng):
        params = init_params(TINY, rng)
        sched = NoiseSchedule.linear(12)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, sched)
        loaded_params, loaded_sched = load_checkpoint(path)
        assert np.array_equal(loaded_params.vector, params.vector)
        assert loaded_sched.betas == sched.betas
        assert loaded_params.manifest == params.manifest
        first = path.read_bytes()
        save_checkpoint(path, loaded_params, loaded_sched)
        assert path.read_bytes() == first

    def test_truncated_checkpoint_rejected(self, tmp_path, rng):
        params = init_params(TINY, rng)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, NoiseSchedule.linear(12))
        data = path.read_bytes()
        path.write_bytes(data[:-17])
        with pytest.raises(InvalidArgumentError, match="truncated"):
            load_checkpoint(path)

    def test_corrupted_payload_rejected(self, tmp_path, rng):
        params = init_params(TINY, rng)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, NoiseSchedule.linear(12))
        data = bytearray(path.read_bytes())
        data[-5] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(InvalidArgumentError, match="checksum"):
            load_checkpoint(path)
