import numpy as np
import pytest

from kinodiff import engine as en
from kinodiff.denoiser import (DenoiserConfig, DenoiserError, as_model,
                               context_mask_bias, denoise_forward, init_params,
                               layer_norm, load_checkpoint, param_shapes,
                               residual_block, save_checkpoint,
                               spatial_attention, step_embedding,
                               temporal_conv, validate_params)
from kinodiff.diffusion import (LossWeights, physics_loss, predict_x0,
                                q_sample, recon_loss, simple_loss, total_loss)
from kinodiff.engine import Rng, Tensor, backward
from kinodiff.geodata import Normalizer


def tiny_config(**kw):
    base = dict(width=8, heads=2, sampling_blocks=2, resnet_blocks=2,
                kernel_size=3, max_context=2)
    base.update(kw)
    return DenoiserConfig(**base)


class TestConfig:
    def test_width_heads_divisibility(self):
        with pytest.raises(DenoiserError):
            DenoiserConfig(width=30, heads=4)

    def test_min_blocks(self):
        with pytest.raises(DenoiserError):
            DenoiserConfig(sampling_blocks=1)
        with pytest.raises(DenoiserError):
            DenoiserConfig(resnet_blocks=1)

    def test_shapes_determined_by_config(self):
        cfg = tiny_config()
        a = {k: tuple(v.shape) for k, v in init_params(cfg, Rng(0)).items()}
        assert a == param_shapes(cfg)

    def test_validate_params_detects_mismatch(self):
        cfg = tiny_config()
        params = init_params(cfg, Rng(0))
        validate_params(params, cfg)
        bad = dict(params)
        bad["head.eps.w"] = Tensor(np.zeros((3, 3)))
        with pytest.raises(DenoiserError, match="head.eps.w"):
            validate_params(bad, cfg)
        del bad["head.eps.w"]
        with pytest.raises(DenoiserError, match="missing"):
            validate_params(bad, cfg)


class TestSpatialAttention:
    def test_single_self_key(self):
        rng = Rng(0)
        B, n, W = 1, 6, 8
        q = Tensor(rng.normal((B, n, W)))
        kv = rng.normal((B, 1, n, W))
        out, weights = spatial_attention(q, Tensor(kv), Tensor(kv), heads=2)
        np.testing.assert_allclose(weights.data, 1.0)
        np.testing.assert_allclose(out.data, kv[:, 0], atol=1e-12)

    def test_two_identical_keys_split_evenly(self):
        rng = Rng(1)
        B, n, W = 1, 4, 8
        q = Tensor(rng.normal((B, n, W)))
        k1 = rng.normal((B, 1, n, W))
        keys = Tensor(np.concatenate([k1, k1], axis=1))
        vals = Tensor(rng.normal((B, 2, n, W)))
        _, weights = spatial_attention(q, keys, vals, heads=2)
        np.testing.assert_allclose(weights.data, 0.5, atol=1e-12)

    def test_rows_sum_to_one_and_convex_hull(self):
        rng = Rng(2)
        B, n, W, J, H = 2, 5, 8, 3, 2
        q = Tensor(rng.normal((B, n, W)))
        keys = Tensor(rng.normal((B, J, n, W)))
        vals = Tensor(rng.normal((B, J, n, W)))
        out, weights = spatial_attention(q, keys, vals, heads=H)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)
        # brute-force softmax oracle per (batch, step, head)
        dk = W // H
        qh = q.data.reshape(B, n, H, dk)
        kh = keys.data.reshape(B, J, n, H, dk)
        vh = vals.data.reshape(B, J, n, H, dk)
        for b in range(B):
            for i in range(n):
                for h in range(H):
                    logits = np.array([qh[b, i, h] @ kh[b, j, i, h] for j in range(J)])
                    logits /= np.sqrt(dk)
                    e = np.exp(logits - logits.max())
                    w = e / e.sum()
                    np.testing.assert_allclose(weights.data[b, i, h], w, atol=1e-12)
                    expect = sum(w[j] * vh[b, j, i, h] for j in range(J))
                    got = out.data[b, i, h * dk:(h + 1) * dk]
                    np.testing.assert_allclose(got, expect, atol=1e-12)
                    # convex combination stays inside the per-head value hull
                    assert np.all(got <= vh[b, :, i, h].max(axis=0) + 1e-12)
                    assert np.all(got >= vh[b, :, i, h].min(axis=0) - 1e-12)

    def test_logit_shift_invariance(self):
        rng = Rng(3)
        q = Tensor(rng.normal((1, 4, 8)))
        keys = Tensor(rng.normal((1, 3, 4, 8)))
        vals = Tensor(rng.normal((1, 3, 4, 8)))
        _, w1 = spatial_attention(q, keys, vals, heads=2)
        bias = np.full((1, 4, 1, 3), 7.25)
        _, w2 = spatial_attention(q, keys, vals, heads=2, mask_bias=bias)
        np.testing.assert_allclose(w1.data, w2.data, atol=1e-12)


class TestResidualBlock:
    def test_zero_sublayer_is_layernorm(self):
        rng = Rng(4)
        x = Tensor(rng.normal((3, 5, 8)))
        gain = Tensor(np.ones(8))
        bias = Tensor(np.zeros(8))
        out = residual_block(x, Tensor(np.zeros((3, 5, 8))), gain, bias)
        expect = layer_norm(x, gain, bias)
        np.testing.assert_allclose(out.data, expect.data, atol=1e-12)

    def test_rows_normalized_before_scale_shift(self):
        rng = Rng(5)
        x = Tensor(rng.normal((4, 6, 8)))
        out = residual_block(x, Tensor(rng.normal((4, 6, 8))),
                             Tensor(np.ones(8)), Tensor(np.zeros(8)))
        mean = out.data.mean(axis=-1)
        var = out.data.var(axis=-1)
        np.testing.assert_allclose(mean, 0.0, atol=1e-6)
        np.testing.assert_allclose(var, 1.0, atol=1e-4)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        gain = rng.standard_normal(6)
        bias = rng.standard_normal(6)
        sub = rng.standard_normal((4, 6))

        def f(x):
            return (residual_block(x, Tensor(sub), Tensor(gain), Tensor(bias)) ** 2).mean()

        err = en.grad_check(f, rng.standard_normal((4, 6)), h=1e-6)
        assert err < 1e-4


class TestStepEmbedding:
    def test_deterministic_and_distinct(self):
        a = step_embedding(0.5, 16)
        b = step_embedding(0.5, 16)
        np.testing.assert_array_equal(a, b)
        levels = np.linspace(1e-4, 1.0, 64)
        embs = step_embedding(levels, 16)
        dists = np.linalg.norm(embs[:, None] - embs[None, :], axis=-1)
        np.fill_diagonal(dists, np.inf)
        assert dists.min() > 1e-6

    def test_rejects_bad_abar(self):
        with pytest.raises(DenoiserError):
            step_embedding(0.0, 16)
        with pytest.raises(DenoiserError):
            step_embedding(1.5, 16)


class TestDenoiseForward:
    def setup_method(self):
        self.cfg = tiny_config()
        self.params = init_params(self.cfg, Rng(0))
        rng = Rng(1)
        self.B, self.K, self.n = 3, 2, 20
        self.x = rng.normal((self.B, self.n, 4))
        self.ctx = rng.normal((self.B, self.K, self.n, 4))
        self.mask = np.ones((self.B, self.K, self.n))
        self.abar = rng.uniform(0.05, 1.0, self.B)

    def test_output_shapes(self):
        eps, kin = denoise_forward(self.params, self.cfg, self.x, self.abar,
                                   self.ctx, self.mask)
        assert eps.shape == (self.B, self.n, 4)
        assert kin.shape == (self.B, self.n, 2)

    def test_unbatched_input(self):
        eps, kin = denoise_forward(self.params, self.cfg, self.x[0], self.abar[0])
        assert eps.shape == (self.n, 4)
        assert kin.shape == (self.n, 2)

    def test_empty_context_equals_masked_context(self):
        e1, _ = denoise_forward(self.params, self.cfg, self.x, self.abar)
        e2, _ = denoise_forward(self.params, self.cfg, self.x, self.abar,
                                self.ctx, np.zeros((self.B, self.K, self.n)))
        np.testing.assert_allclose(e1.data, e2.data, atol=1e-12)

    def test_neighbor_permutation_invariance(self):
        perm = [1, 0]
        e1, _ = denoise_forward(self.params, self.cfg, self.x, self.abar,
                                self.ctx, self.mask)
        e2, _ = denoise_forward(self.params, self.cfg, self.x, self.abar,
                                self.ctx[:, perm], self.mask[:, perm])
        np.testing.assert_allclose(e1.data, e2.data, atol=1e-12)

    def test_context_gain_zero_turns_attention_inward(self):
        cfg0 = tiny_config(context_gain=0.0)
        e_off, _ = denoise_forward(self.params, cfg0, self.x, self.abar,
                                   self.ctx, self.mask)
        e_none, _ = denoise_forward(self.params, self.cfg, self.x, self.abar)
        np.testing.assert_allclose(e_off.data, e_none.data, atol=1e-12)

    def test_context_changes_output(self):
        e1, _ = denoise_forward(self.params, self.cfg, self.x, self.abar)
        e2, _ = denoise_forward(self.params, self.cfg, self.x, self.abar,
                                self.ctx, self.mask)
        assert not np.allclose(e1.data, e2.data)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(DenoiserError, match="channels"):
            denoise_forward(self.params, self.cfg, self.x[..., :3], self.abar)


def toy_normalizer():
    return Normalizer(mode="zscore", lat0=0.0, lon0=0.0,
                      center=np.array([0.0, 0.0, 8.0, 0.0]),
                      scale=np.array([50.0, 50.0, 2.0, 0.5]))


class TestEndToEndGradients:
    def test_total_loss_gradcheck_sample(self):
        # spot-check a few parameters of a 2-block config against central
        # differences through the full composite loss; the acceptance suite
        # sweeps every coordinate
        cfg = tiny_config()
        params = init_params(cfg, Rng(0))
        rng = Rng(1)
        B, K, n = 2, 1, 10
        x0 = rng.normal((B, n, 4))
        ctx = rng.normal((B, K, n, 4))
        mask = np.ones((B, K, n))
        abar = np.array([0.7, 0.3])
        eps = rng.normal((B, n, 4))
        xt = q_sample(x0, abar[:, None, None], eps)
        weights = LossWeights(gamma1=1.0, gamma2=1.0, gamma3=0.1)
        norm = toy_normalizer()

        def loss_value():
            eps_hat, kin = denoise_forward(params, cfg, xt, abar, ctx, mask)
            x0_hat = predict_x0(xt, eps_hat, abar[:, None, None])
            return total_loss(simple_loss(eps, eps_hat),
                              recon_loss(x0_hat, x0),
                              physics_loss(x0_hat, kin, norm, 1.0, weights),
                              weights)

        loss = loss_value()
        grads = backward(loss)
        h = 1e-6
        rng_pick = np.random.default_rng(3)
        worst = 0.0
        for name in ("block0.attn.wq.w", "block1.conv.kern", "head.kin.w",
                     "embed.l1.w", "block1.res0.l1.w", "block0.ln_attn.gain"):
            p = params[name]
            g = grads[p]
            flat = p.data.ravel()
            for _ in range(4):
                i = int(rng_pick.integers(flat.size))
                keep = flat[i]
                flat[i] = keep + h
                hi = float(loss_value().data)
                flat[i] = keep - h
                lo = float(loss_value().data)
                flat[i] = keep
                fd = (hi - lo) / (2 * h)
                err = abs(g.ravel()[i] - fd) / max(1.0, abs(g.ravel()[i]))
                worst = max(worst, err)
        assert worst < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        from kinodiff.diffusion import desk_schedule
        from kinodiff.optim import AdamState

        cfg = tiny_config()
        params = init_params(cfg, Rng(0))
        norm = toy_normalizer()
        sched = desk_schedule(10)
        state = AdamState(params, lr=2e-3)
        state.step = 7
        state.m = {k: np.full_like(p.data, 0.25) for k, p in params.items()}
        path = tmp_path / "model.ckpt"
        meta = {"T": sched.T, "beta1": float(sched.beta[0]),
                "betaT": float(sched.beta[-1]), "digest": sched.digest()}
        save_checkpoint(path, params, cfg, norm, meta, step=123, moments=state)
        out = load_checkpoint(path)
        assert out["config"] == cfg
        assert out["step"] == 123
        assert out["adam_step"] == 7
        assert out["schedule"]["digest"] == sched.digest()
        for name, p in params.items():
            np.testing.assert_array_equal(out["params"][name].data, p.data)
            np.testing.assert_array_equal(out["adam_m"][name], 0.25)
        np.testing.assert_allclose(out["normalizer"].scale, norm.scale)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DenoiserError, match="magic"):
            load_checkpoint(path)

    def test_model_callable_matches_forward(self):
        cfg = tiny_config()
        params = init_params(cfg, Rng(0))
        rng = Rng(2)
        x = rng.normal((2, 12, 4))
        abar = np.array([0.5, 0.9])
        model = as_model(params, cfg)
        e_fn, k_fn = model(x, abar)
        e_direct, k_direct = denoise_forward(params, cfg, x, abar)
        np.testing.assert_array_equal(e_fn, e_direct.data)
        np.testing.assert_array_equal(k_fn, k_direct.data)
