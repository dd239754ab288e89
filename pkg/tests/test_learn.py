"""Learning machinery: prior net, reverse mode through the solver, Adam."""

from dataclasses import replace

import numpy as np
import pytest

from texsr.atlas import ViewObservation
from texsr.errors import ParameterError, StructuralError, UsageError
from texsr.learn import (
    AdamState,
    LearnableParams,
    PriorNet,
    TrainConfig,
    TrainSample,
    adam_step,
    backprop_through_solver,
    init_params,
    load_checkpoint,
    loss,
    prior_backward,
    prior_forward,
    run_pipeline,
    save_checkpoint,
    sigma_from_raw,
    sigma_to_raw,
    softplus,
    softplus_inv,
)
from texsr.solver import SolverConfig, run_unrolled
from texsr.synth import SceneSpec, gen_texture, render_views


def conv3_oracle(x, w, b):
    """Direct loop-based same-padded 3x3 correlation."""
    cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for i in range(cin):
            for ky in range(3):
                for kx in range(3):
                    out[o] += w[o, i, ky, kx] * xp[i, ky:ky + h, kx:kx + wd]
        out[o] += b[o]
    return out


def prior_oracle(net, t):
    z1 = conv3_oracle(t[None], net.w1, net.b1)
    a1 = np.maximum(z1, 0)
    z2 = conv3_oracle(a1, net.w2, net.b2)
    a2 = np.maximum(z2, 0)
    z3 = conv3_oracle(a2, net.w3, net.b3)
    return t + z3[0]


def tiny_scene(seed=0, n=16, views=2, sigma=0.8, noise=0.0):
    tex = gen_texture("mixed", (n, n), seed=seed)
    spec = SceneSpec(tex_dims=(n, n), num_views=views, factor=2, sigma_true=sigma,
                     noise_std=noise, seed=seed)
    return tex, render_views(tex, spec)


def pipeline_loss(gt, tex_init, lam_map, sigmas, net, sigma0, cfg, alpha=1.0):
    """Total training loss as a plain function of the learnable values."""
    t_mva, _ = run_unrolled(tex_init, list(gt.views), list(gt.chains), lam_map,
                            cfg, sigmas=sigmas, valid_mask=gt.texture.mask)
    t_hat = prior_forward(net, t_mva, gt.texture.mask)
    return loss(t_hat, gt.texture.data, sigmas, sigma0, alpha,
                gt.texture.mask).total


def rel_err(a, b):
    denom = max(abs(a), abs(b))
    return 0.0 if denom == 0 else abs(a - b) / denom


class TestReparameterizations:
    def test_softplus_roundtrip(self):
        y = np.array([0.01, 0.1, 1.0, 5.0])
        np.testing.assert_allclose(softplus(softplus_inv(y)), y, rtol=1e-12)

    def test_sigma_roundtrip_and_bounds(self):
        s = np.array([0.06, 0.8, 2.5, 4.9])
        np.testing.assert_allclose(sigma_from_raw(sigma_to_raw(s)), s, rtol=1e-9)
        wild = sigma_from_raw(np.array([-100.0, 100.0]))
        assert wild[0] >= 0.05 and wild[1] <= 5.0


class TestPriorNet:
    def test_identity_at_init_bit_exact(self):
        net = PriorNet.identity_init(seed=3)
        t = np.random.default_rng(0).random((20, 20))
        assert np.array_equal(prior_forward(net, t), t)

    def test_zero_input_zero_biases_zero_output(self):
        net = PriorNet.identity_init(seed=4)
        out = prior_forward(net, np.zeros((16, 16)))
        assert np.all(out == 0.0)

    def test_matches_loop_oracle(self):
        net = PriorNet.random_init(seed=5)
        t = np.random.default_rng(1).random((12, 14))
        got = prior_forward(net, t)
        expect = prior_oracle(net, t)
        np.testing.assert_allclose(got, expect, rtol=0, atol=1e-12)

    def test_mask_zeroes_invalid(self):
        net = PriorNet.random_init(seed=6)
        t = np.random.default_rng(2).random((10, 10))
        mask = np.zeros((10, 10), bool)
        mask[2:8, 2:8] = True
        out = prior_forward(net, t, mask)
        assert np.all(out[~mask] == 0.0)

    def test_backward_zero_upstream(self):
        net = PriorNet.random_init(seed=7)
        grads, gin = prior_backward(net, np.random.default_rng(3).random((9, 9)),
                                    np.zeros((9, 9)))
        assert np.all(gin == 0.0)
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_identity_net_passes_upstream_through(self):
        net = PriorNet.identity_init(seed=8)
        up = np.random.default_rng(4).random((11, 11))
        _, gin = prior_backward(net, np.random.default_rng(5).random((11, 11)), up)
        np.testing.assert_array_equal(gin, up)

    def test_weight_gradients_match_finite_difference(self):
        """Every parameter tensor, central differences h=1e-4, on an 8x8 input."""
        rng = np.random.default_rng(9)
        net = PriorNet.random_init(seed=9, scale=0.2)
        t = rng.random((8, 8))
        target = rng.random((8, 8))

        def scalar_loss(n):
            return float(np.abs(prior_forward(n, t) - target).sum())

        up = np.sign(prior_forward(net, t) - target)
        grads, gin = prior_backward(net, t, up)
        h = 1e-4
        rng2 = np.random.default_rng(10)
        for key in ("w1", "b1", "w2", "b2", "w3", "b3"):
            arr = getattr(net, key)
            flat_idx = rng2.choice(arr.size, size=min(20, arr.size), replace=False)
            for fi in flat_idx:
                idx = np.unravel_index(fi, arr.shape)
                n2 = net.copy()
                getattr(n2, key)[idx] += h
                n3 = net.copy()
                getattr(n3, key)[idx] -= h
                fd = (scalar_loss(n2) - scalar_loss(n3)) / (2 * h)
                assert rel_err(grads[key][idx], fd) <= 1e-4, (key, idx)

        # input gradient
        gi_fd = np.zeros_like(t)
        for fi in rng2.choice(t.size, size=16, replace=False):
            idx = np.unravel_index(fi, t.shape)
            tp, tm = t.copy(), t.copy()
            tp[idx] += h
            tm[idx] -= h
            fd = (float(np.abs(prior_forward(net, tp) - target).sum())
                  - float(np.abs(prior_forward(net, tm) - target).sum())) / (2 * h)
            assert rel_err(gin[idx], fd) <= 1e-4


class TestLoss:
    def test_zero_at_perfect_fit(self):
        t = np.random.default_rng(11).random((8, 8))
        lt = loss(t, t, [0.8, 0.9], [0.8, 0.9])
        assert lt.total == 0.0

    def test_sigma_deviations_sum(self):
        t = np.zeros((4, 4))
        lt = loss(t, t, [0.9, 0.6], [0.8, 0.8], alpha=1.0)
        assert abs(lt.sigma_reg - 0.3) <= 1e-12
        assert abs(lt.total - 0.3) <= 1e-12

    def test_matches_direct_evaluation(self):
        rng = np.random.default_rng(12)
        a, b = rng.random((9, 9)), rng.random((9, 9))
        mask = rng.random((9, 9)) > 0.3
        s, s0 = rng.uniform(0.2, 2, 3), rng.uniform(0.2, 2, 3)
        alpha = 0.7
        lt = loss(a, b, s, s0, alpha, mask)
        expect_data = sum(abs(a[i, j] - b[i, j]) for i in range(9) for j in range(9)
                          if mask[i, j])
        expect_reg = sum(abs(x - y) for x, y in zip(s, s0))
        assert abs(lt.data_l1 - expect_data) <= 1e-12
        assert abs(lt.sigma_reg - expect_reg) <= 1e-12
        assert abs(lt.total - (lt.data_l1 + alpha * lt.sigma_reg)) <= 1e-12


class TestBackpropThroughSolver:
    def setup_scene(self):
        # high-contrast texture and structured init keep every gradient well
        # above the finite-difference noise floor
        tex = gen_texture("checker", (16, 16), seed=21, cell=2)
        spec = SceneSpec(tex_dims=(16, 16), num_views=2, factor=2, sigma_true=0.8,
                         noise_std=0.005, seed=21)
        gt = render_views(tex, spec)
        lam = 0.35 + 0.1 * np.random.default_rng(22).random((16, 16))
        sig = np.array([0.72, 0.95])  # off sigma_true and off sigma0
        sigma0 = np.array([0.8, 0.8])
        net = PriorNet.random_init(seed=23, scale=0.15)
        init = np.random.default_rng(24).random((16, 16))
        cfg = SolverConfig(num_pd_iters=5, record_states=True, eta=0.15, tau=0.15)
        return gt, init, lam, sig, sigma0, net, cfg

    def _analytic(self, gt, init, lam, sig, sigma0, net, cfg, alpha=1.0):
        t_mva, trace = run_unrolled(init, list(gt.views), list(gt.chains), lam, cfg,
                                    sigmas=sig, valid_mask=gt.texture.mask)
        t_hat = prior_forward(net, t_mva, gt.texture.mask)
        up = np.where(gt.texture.mask, np.sign(t_hat - gt.texture.data), 0.0)
        _, d_tmva = prior_backward(net, t_mva, up, gt.texture.mask)
        sg = backprop_through_solver(trace, d_tmva)
        d_sig = sg.d_sigmas + alpha * np.sign(sig - sigma0)
        # no dual may sit near a constraint boundary during the check
        for qp in trace.dual_data_pre:
            assert max(np.abs(q).max() for q in qp) < 1 - 1e-3
        for pp in trace.dual_tv_pre:
            assert np.sqrt(pp[0] ** 2 + pp[1] ** 2).max() < 1 - 1e-3
        return sg, d_sig

    def test_zero_iterations_passthrough(self):
        gt, init, lam, sig, sigma0, net, _ = self.setup_scene()
        cfg = SolverConfig(num_pd_iters=0, record_states=True)
        _, trace = run_unrolled(init, list(gt.views), list(gt.chains), lam, cfg,
                                sigmas=sig)
        up = np.random.default_rng(14).random((16, 16))
        sg = backprop_through_solver(trace, up)
        np.testing.assert_array_equal(sg.d_tex_init, up)
        assert np.all(sg.d_weights == 0.0)
        assert np.all(sg.d_sigmas == 0.0)

    def test_missing_trace_raises(self):
        with pytest.raises(UsageError):
            backprop_through_solver(None, np.zeros((4, 4)))

    def test_lambda_gradient_matches_finite_difference(self):
        gt, init, lam, sig, sigma0, net, cfg = self.setup_scene()
        sg, _ = self._analytic(gt, init, lam, sig, sigma0, net, cfg)
        h = 1e-4
        rng = np.random.default_rng(15)
        for fi in rng.choice(256, size=24, replace=False):
            idx = np.unravel_index(fi, (16, 16))
            lp, lm = lam.copy(), lam.copy()
            lp[idx] += h
            lm[idx] -= h
            fd = (pipeline_loss(gt, init, lp, sig, net, sigma0, cfg)
                  - pipeline_loss(gt, init, lm, sig, net, sigma0, cfg)) / (2 * h)
            assert rel_err(sg.d_weights[idx], fd) <= 1e-4, idx

    def test_sigma_gradient_matches_finite_difference(self):
        gt, init, lam, sig, sigma0, net, cfg = self.setup_scene()
        _, d_sig = self._analytic(gt, init, lam, sig, sigma0, net, cfg)
        h = 1e-4
        for i in range(2):
            sp, sm = sig.copy(), sig.copy()
            sp[i] += h
            sm[i] -= h
            fd = (pipeline_loss(gt, init, lam, sp, net, sigma0, cfg)
                  - pipeline_loss(gt, init, lam, sm, net, sigma0, cfg)) / (2 * h)
            assert rel_err(d_sig[i], fd) <= 1e-4, i

    def test_init_gradient_matches_finite_difference(self):
        gt, init, lam, sig, sigma0, net, cfg = self.setup_scene()
        sg, _ = self._analytic(gt, init, lam, sig, sigma0, net, cfg)
        h = 1e-4
        rng = np.random.default_rng(16)
        for fi in rng.choice(256, size=12, replace=False):
            idx = np.unravel_index(fi, (16, 16))
            ip, im = init.copy(), init.copy()
            ip[idx] += h
            im[idx] -= h
            fd = (pipeline_loss(gt, ip, lam, sig, net, sigma0, cfg)
                  - pipeline_loss(gt, im, lam, sig, net, sigma0, cfg)) / (2 * h)
            assert rel_err(sg.d_tex_init[idx], fd) <= 1e-4, idx

    def test_typeset_tv_variant_also_differentiates(self):
        gt, init, lam, sig, sigma0, net, _ = self.setup_scene()
        cfg = SolverConfig(num_pd_iters=4, record_states=True, exact_adjoint_tv=False)
        sg, _ = self._analytic(gt, init, lam, sig, sigma0, net, cfg)
        h = 1e-4
        rng = np.random.default_rng(17)
        for fi in rng.choice(256, size=8, replace=False):
            idx = np.unravel_index(fi, (16, 16))
            lp, lm = lam.copy(), lam.copy()
            lp[idx] += h
            lm[idx] -= h
            fd = (pipeline_loss(gt, init, lp, sig, net, sigma0, cfg)
                  - pipeline_loss(gt, init, lm, sig, net, sigma0, cfg)) / (2 * h)
            assert rel_err(sg.d_weights[idx], fd) <= 1e-4, idx


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"x": np.array([1.0, -2.0])}
        st = AdamState.like(p)
        cfg = TrainConfig(learning_rate=0.1)
        p2, st2 = adam_step(p, {"x": np.zeros(2)}, st, cfg, 1)
        np.testing.assert_array_equal(p2["x"], p["x"])

    def test_first_step_moves_by_learning_rate(self):
        p = {"x": np.array([0.0])}
        cfg = TrainConfig(learning_rate=0.01)
        p2, _ = adam_step(p, {"x": np.array([1.0])}, AdamState.like(p), cfg, 1)
        assert p2["x"][0] == pytest.approx(-0.01, rel=1e-6)

    def test_quadratic_descent_monotone_after_burn_in(self):
        """Derived by running: f(x)=x^2 from x=1 with lr 5e-3 decreases."""
        p = {"x": np.array([1.0])}
        st = AdamState.like(p)
        cfg = TrainConfig(learning_rate=5e-3)
        vals = []
        for t in range(1, 101):
            g = {"x": 2.0 * p["x"]}
            p, st = adam_step(p, g, st, cfg, t)
            vals.append(float(p["x"][0] ** 2))
        assert all(b <= a for a, b in zip(vals[10:], vals[11:]))
        assert vals[-1] < vals[0]

    def test_bad_step_index(self):
        p = {"x": np.zeros(1)}
        with pytest.raises(ParameterError):
            adam_step(p, {"x": np.zeros(1)}, AdamState.like(p), TrainConfig(), 0)


def minimal_samples(n_patches=2, seed=31):
    """Hand-built 64x64 training samples with identity-geometry chains."""
    from texsr.atlas import Patch, PatchView
    from texsr.operators import (FlowField, ProjectionSpec, build_blur,
                                 build_downsample, build_projection, build_warp,
                                 compose_chain)
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(n_patches):
        target = gen_texture("mixed", (64, 64), seed=seed + k).data
        proj = build_projection(ProjectionSpec.from_homography(np.eye(3)),
                                (64, 64), (64, 64))
        warp = build_warp(FlowField.zero((64, 64)))
        chain = compose_chain(proj, warp, build_blur(0.8),
                              build_downsample(2, (64, 64)),
                              (64, 64), (64, 64), (32, 32))
        lr = chain.forward(target)
        pv = PatchView(view_id=0, lr_crop=lr, visibility=np.ones((32, 32), bool),
                       chain=chain, img_origin=(0, 0))
        patch = Patch(offset=(0, 0), tex=np.full((64, 64), 0.5),
                      mask=np.ones((64, 64), bool), views=(pv,))
        samples.append(TrainSample(patch=patch, target=target))
    return samples


class TestTrainEpoch:
    def test_zero_learning_rate_keeps_params(self):
        from texsr.learn import TrainSample, fresh_adam_state, train_epoch
        samples = minimal_samples()
        params = init_params((64, 64), [0.8], seed=2)
        before = params.copy()
        cfg = TrainConfig(learning_rate=1e-300, batch_size=2, seed=3)
        solver_cfg = SolverConfig(num_pd_iters=3)
        out, _, _ = train_epoch(samples, params, fresh_adam_state(params), cfg,
                                solver_cfg, np.array([0.8]))
        np.testing.assert_array_equal(out.lambda_raw, before.lambda_raw)
        np.testing.assert_array_equal(out.sigma_raw, before.sigma_raw)
        np.testing.assert_array_equal(out.net.w2, before.net.w2)

    def test_fixed_seed_identical_metrics(self):
        from texsr.learn import fresh_adam_state, train_epoch
        samples = minimal_samples()
        cfg = TrainConfig(learning_rate=1e-3, batch_size=1, seed=9)
        solver_cfg = SolverConfig(num_pd_iters=3)
        runs = []
        for _ in range(2):
            params = init_params((64, 64), [0.85], seed=4)
            p1, _, terms = train_epoch(samples, params, fresh_adam_state(params),
                                       cfg, solver_cfg, np.array([0.8]))
            runs.append((terms, p1))
        assert runs[0][0] == runs[1][0]
        np.testing.assert_array_equal(runs[0][1].lambda_raw, runs[1][1].lambda_raw)

    def test_empty_dataset_raises(self):
        from texsr.learn import fresh_adam_state, train_epoch
        params = init_params((64, 64), [0.8], seed=5)
        with pytest.raises(UsageError):
            train_epoch([], params, fresh_adam_state(params), TrainConfig(),
                        SolverConfig(num_pd_iters=1), np.array([0.8]))


class TestWorkerDeterminism:
    def test_thread_cap_parsed(self, monkeypatch):
        from texsr._threads import worker_count
        monkeypatch.setenv("TEXSR_THREADS", "3")
        assert worker_count() == 3
        monkeypatch.setenv("TEXSR_THREADS", "0")
        assert worker_count() >= 1

    def test_parallel_map_order_and_equality(self, monkeypatch):
        """Results are in input order and identical for any worker count."""
        from texsr._threads import parallel_map
        items = list(range(12))
        monkeypatch.setenv("TEXSR_THREADS", "1")
        seq = parallel_map(lambda i: i * i, items)
        monkeypatch.setenv("TEXSR_THREADS", "4")
        par = parallel_map(lambda i: i * i, items)
        assert seq == par == [i * i for i in items]


class TestParamsAndCheckpoint:
    def test_init_params_values(self):
        params = init_params((8, 8), [0.7, 0.9], lam_init=0.1, seed=0)
        np.testing.assert_allclose(params.lambda_map(), 0.1, rtol=1e-12)
        np.testing.assert_allclose(params.sigmas(), [0.7, 0.9], rtol=1e-9)
        t = np.random.default_rng(0).random((8, 8))
        assert np.array_equal(prior_forward(params.net, t), t)

    def test_checkpoint_roundtrip(self, tmp_path):
        params = init_params((6, 7), [0.8], seed=1)
        params.net = PriorNet.random_init(seed=2)
        st = AdamState.like(
            {"lambda_raw": params.lambda_raw, "sigma_raw": params.sigma_raw,
             "w1": params.net.w1, "b1": params.net.b1, "w2": params.net.w2,
             "b2": params.net.b2, "w3": params.net.w3, "b3": params.net.b3})
        st.m["sigma_raw"][:] = 0.25
        st.t = 17
        path = tmp_path / "ck.tsrc"
        save_checkpoint(path, params, st)
        p2, s2 = load_checkpoint(path)
        assert s2.t == 17
        np.testing.assert_array_equal(p2.lambda_raw, params.lambda_raw)
        np.testing.assert_array_equal(p2.net.w2, params.net.w2)
        np.testing.assert_array_equal(s2.m["sigma_raw"], st.m["sigma_raw"])

    def test_checkpoint_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tsrc"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        from texsr.errors import ParseError
        with pytest.raises(ParseError):
            load_checkpoint(path)
