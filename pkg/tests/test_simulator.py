import io

import numpy as np
import pytest

from localsgd.dataio import Regime, generate_synthetic, partition
from localsgd.numkit import RngStream
from localsgd.objective import build_problem, full_grad_global, solve_reference
from localsgd.simulator import (
    DivergenceError,
    GradientMode,
    RunConfig,
    SyncSchedule,
    compute_Vt,
    run_local_sgd,
    run_minibatch_sgd,
    run_replicated,
)


@pytest.fixture(scope="module")
def setup():
    ds = generate_synthetic(200, 8, seed=42)
    p = build_problem(ds, partition(ds, 4, Regime.IDENTICAL), lam=0.02)
    ref = solve_reference(p, 1e-11)
    return p, ref


@pytest.fixture(scope="module")
def setup_het():
    ds = generate_synthetic(200, 8, seed=43, sort_by_label=True)
    p = build_problem(ds, partition(ds, 4, Regime.HETEROGENEOUS), lam=0.02)
    ref = solve_reference(p, 1e-11)
    return p, ref


def make_cfg(p, T=64, H=8, gamma=None, mode=GradientMode.STOCHASTIC, M=4,
             seed=0, **kw):
    gamma = gamma if gamma is not None else 1.0 / (4 * p.L)
    return RunConfig(M=M, T=T, schedule=SyncSchedule.uniform(H, T), gamma=gamma,
                     regime=p.part.regime, gradient_mode=mode, seed=seed, **kw)


class TestSyncSchedule:
    def test_uniform_divisible(self):
        s = SyncSchedule.uniform(4, 12)
        assert s.sync_steps == (4, 8, 12)

    def test_uniform_with_remainder_appends_final(self):
        s = SyncSchedule.uniform(5, 12)
        assert s.sync_steps == (5, 10, 12)
        assert s.max_gap() == 5

    def test_one_shot(self):
        s = SyncSchedule.one_shot(100)
        assert s.sync_steps == (100,) and s.H == 100

    def test_gap_exceeding_H_rejected(self):
        with pytest.raises(ValueError, match="gap"):
            SyncSchedule(sync_steps=(10,), H=5)

    def test_first_gap_counts(self):
        with pytest.raises(ValueError, match="gap"):
            SyncSchedule(sync_steps=(9, 10), H=8)

    def test_nonincreasing_rejected(self):
        with pytest.raises(ValueError, match="increasing"):
            SyncSchedule(sync_steps=(4, 4, 8), H=8)

    def test_from_steps_infers_H(self):
        s = SyncSchedule.from_steps([3, 5, 11])
        assert s.H == 6  # the 5 -> 11 gap


class TestComputeVt:
    def test_all_equal_is_exactly_zero(self):
        x = np.ones((3, 5)) * 0.3333333333333333
        assert compute_Vt(x) == 0.0

    def test_hand_value(self):
        # nodes at 0 and 2: mean 1, V = (1 + 1)/2 = 1
        assert compute_Vt(np.array([[0.0], [2.0]])) == 1.0

    def test_translation_invariance(self):
        gen = RngStream(seed=1).generator()
        X = gen.standard_normal((4, 6))
        c = gen.standard_normal(6) * 100
        assert compute_Vt(X + c) == pytest.approx(compute_Vt(X), rel=1e-9)

    def test_nonnegative(self):
        gen = RngStream(seed=2).generator()
        for _ in range(50):
            assert compute_Vt(gen.standard_normal((5, 3))) >= 0.0

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            compute_Vt(np.zeros(5))


class TestLocalSgdBasics:
    def test_noise_free_identical_full_equals_gd(self, setup):
        # Identical data + exact gradients: all nodes stay equal, V_t = 0
        # everywhere, and the trajectory is plain GD on f.
        p, ref = setup
        cfg = make_cfg(p, T=32, H=8, mode=GradientMode.FULL, record_every=1)
        tr = run_local_sgd(p, cfg, ref, capture_xhat=True)
        assert np.all(tr.V == 0.0)
        x = np.zeros(p.dim)
        for i, t in enumerate(tr.t):
            assert np.allclose(tr.xhat[i], x, rtol=1e-12, atol=1e-300)
            steps = (tr.t[i + 1] - t) if i + 1 < tr.t.size else 0
            for _ in range(int(steps)):
                x = x - cfg.gamma * full_grad_global(p, x)

    def test_h1_equals_minibatch(self, setup):
        p, ref = setup
        cfg = make_cfg(p, T=80, H=1, record_every=1)
        a = run_local_sgd(p, cfg, ref, capture_xhat=True)
        b = run_minibatch_sgd(p, cfg, ref, capture_xhat=True)
        rel = (np.linalg.norm(a.xhat - b.xhat, axis=1)
               / np.maximum(np.linalg.norm(b.xhat, axis=1), 1e-300))
        assert np.max(rel) <= 1e-12

    def test_single_node_is_serial_sgd(self, setup):
        ds = generate_synthetic(200, 8, seed=42)
        p1 = build_problem(ds, partition(ds, 1, Regime.IDENTICAL), lam=0.02)
        ref1 = solve_reference(p1, 1e-11)
        cfg_a = make_cfg(p1, T=50, H=5, M=1, record_every=1)
        cfg_b = make_cfg(p1, T=50, H=50, M=1, record_every=1)
        a = run_local_sgd(p1, cfg_a, ref1, capture_xhat=True)
        b = run_local_sgd(p1, cfg_b, ref1, capture_xhat=True)
        assert np.array_equal(a.xhat, b.xhat)

    def test_gamma_zero_freezes_minibatch(self, setup):
        p, ref = setup
        cfg = RunConfig(M=4, T=20, schedule=SyncSchedule.uniform(1, 20),
                        gamma=0.0, regime=Regime.IDENTICAL,
                        gradient_mode=GradientMode.STOCHASTIC, seed=0,
                        record_every=1)
        tr = run_minibatch_sgd(p, cfg, ref, capture_xhat=True)
        assert np.all(tr.xhat == 0.0)

    def test_minibatch_full_is_exact_gd(self, setup):
        p, ref = setup
        cfg = make_cfg(p, T=16, H=1, mode=GradientMode.FULL, record_every=1)
        tr = run_minibatch_sgd(p, cfg, ref, capture_xhat=True)
        x = np.zeros(p.dim)
        for i in range(tr.t.size):
            assert np.allclose(tr.xhat[i], x, rtol=1e-12, atol=1e-300)
            x = x - cfg.gamma * full_grad_global(p, x)

    def test_config_validation(self, setup):
        p, ref = setup
        with pytest.raises(ValueError, match="partition"):
            run_local_sgd(p, make_cfg(p, M=3), ref)
        with pytest.raises(ValueError, match="noise_sigma"):
            run_local_sgd(p, make_cfg(p, mode=GradientMode.INJECTED_NOISE), ref)
        bad = RunConfig(M=4, T=10, schedule=SyncSchedule.uniform(4, 12),
                        gamma=0.1, regime=Regime.IDENTICAL,
                        gradient_mode=GradientMode.FULL, seed=0)
        with pytest.raises(ValueError, match="schedule"):
            run_local_sgd(p, bad, ref)


class TestInvariants:
    def test_vt_zero_at_syncs_and_start(self, setup_het):
        p, ref = setup_het
        cfg = make_cfg(p, T=60, H=7, record_every=1)
        tr = run_local_sgd(p, cfg, ref)
        assert tr.V[0] == 0.0
        assert np.all(tr.V[tr.synced] == 0.0)
        between = ~tr.synced & (tr.t > 0)
        assert np.all(tr.V[between] > 0.0)

    def test_average_iterate_identity(self, setup_het):
        # xhat_{t+1} == xhat_t - gamma * mean_m g_t^m whether or not the step
        # synchronized; reconstructed from captured trajectories.
        p, ref = setup_het
        gamma = 1.0 / (4 * p.L)
        cfg = make_cfg(p, T=40, H=5, gamma=gamma, record_every=1)
        tr = run_local_sgd(p, cfg, ref, capture_xhat=True)
        # replay the per-node dynamics with the same streams
        from localsgd.numkit import draw_indices
        from scipy.special import expit
        X = np.zeros((4, p.dim))
        rows_all = p.dataset.features.toarray()
        idx = {m: p.node_range(m)[0] + draw_indices(
            RngStream(seed=cfg.seed, stream_id=m),
            p.node_range(m)[1] - p.node_range(m)[0], (cfg.T, 1))
            for m in range(4)}
        for t in range(cfg.T):
            G = np.zeros_like(X)
            for m in range(4):
                i = int(idx[m][t, 0])
                a, y = rows_all[i], p.dataset.labels[i]
                tv = float(a @ X[m])
                G[m] = -y * expit(-y * tv) * a + p.lam * X[m]
            xhat_next_pred = X.mean(axis=0) - gamma * G.mean(axis=0)
            X = X - gamma * G
            if (t + 1) in cfg.schedule.sync_steps:
                X = np.tile(X.mean(axis=0), (4, 1))
            denom = max(float(np.linalg.norm(xhat_next_pred)), 1e-300)
            rel = np.linalg.norm(tr.xhat[t + 1] - xhat_next_pred) / denom
            assert rel <= 1e-12

    def test_schedule_equivalence_bitwise(self, setup):
        # Same sync steps, different declared H: identical trace rows.
        p, ref = setup
        steps = (3, 6, 9, 12, 20)
        s1 = SyncSchedule.from_steps(steps)          # H inferred = 8
        s2 = SyncSchedule.from_steps(steps, H=12)    # looser declared bound
        out = []
        for s in (s1, s2):
            cfg = RunConfig(M=4, T=20, schedule=s, gamma=1.0 / (4 * p.L),
                            regime=Regime.IDENTICAL,
                            gradient_mode=GradientMode.STOCHASTIC, seed=5,
                            record_every=1)
            out.append(run_local_sgd(p, cfg, ref))
        a, b = out
        for field in ("V", "dist_sq", "subopt", "grad_norm_sq"):
            assert np.array_equal(getattr(a, field), getattr(b, field),
                                  equal_nan=True)

    def test_comm_rounds_uniform(self, setup):
        p, ref = setup
        for T, H in ((100, 10), (100, 7), (64, 64), (5, 1)):
            cfg = make_cfg(p, T=T, H=H)
            tr = run_local_sgd(p, cfg, ref)
            assert tr.comm_rounds == int(np.ceil(T / H))

    def test_disable_averaging_breaks_sync_invariant(self, setup):
        # Mutation hook: without averaging the sync rows must show V_t > 0,
        # proving the invariant check has teeth.
        p, ref = setup
        cfg = make_cfg(p, T=24, H=4, record_every=1)
        tr = run_local_sgd(p, cfg, ref, _disable_averaging=True)
        assert np.any(tr.V[tr.synced] > 0.0)

    def test_disable_averaging_breaks_h1_equivalence(self, setup):
        p, ref = setup
        cfg = make_cfg(p, T=40, H=1, record_every=1)
        tampered = run_local_sgd(p, cfg, ref, capture_xhat=True,
                                 _disable_averaging=True)
        mb = run_minibatch_sgd(p, cfg, ref, capture_xhat=True)
        rel = (np.linalg.norm(tampered.xhat - mb.xhat, axis=1)
               / np.maximum(np.linalg.norm(mb.xhat, axis=1), 1e-300))
        assert np.max(rel) > 1e-12

    def test_divergence_reported(self, setup):
        ds = generate_synthetic(50, 4, seed=44)
        p = build_problem(ds, partition(ds, 2, Regime.IDENTICAL), lam=1.0)
        ref = solve_reference(p, 1e-9)
        cfg = RunConfig(M=2, T=500, schedule=SyncSchedule.uniform(10, 500),
                        gamma=1e4, regime=Regime.IDENTICAL,
                        gradient_mode=GradientMode.FULL, seed=0)
        with pytest.raises(DivergenceError, match="diverged at step"):
            run_local_sgd(p, cfg, ref)


class TestReplicated:
    def test_repeated_seed_zero_se(self, setup):
        p, ref = setup
        cfg = make_cfg(p, T=30, H=5)
        agg = run_replicated(p, cfg, ref, seeds=[7, 7, 7])
        for name in ("V", "dist_sq", "subopt"):
            assert np.all(agg.se[name] == 0.0)

    def test_full_gradient_zero_variance(self, setup):
        p, ref = setup
        cfg = make_cfg(p, T=30, H=5, mode=GradientMode.FULL)
        agg = run_replicated(p, cfg, ref, seeds=[1, 2, 3, 4])
        for name in ("V", "dist_sq", "subopt"):
            assert np.all(agg.se[name] == 0.0)

    def test_seed_order_irrelevant(self, setup):
        p, ref = setup
        cfg = make_cfg(p, T=30, H=5)
        a = run_replicated(p, cfg, ref, seeds=[3, 1, 2])
        b = run_replicated(p, cfg, ref, seeds=[1, 2, 3])
        for name in ("V", "dist_sq", "subopt"):
            assert np.array_equal(a.mean[name], b.mean[name])

    def test_matches_individual_runs(self, setup):
        p, ref = setup
        cfg = make_cfg(p, T=30, H=5, record_every=1)
        agg = run_replicated(p, cfg, ref, seeds=[0, 1])
        traces = []
        for s in (0, 1):
            cfg_s = make_cfg(p, T=30, H=5, seed=s, record_every=1)
            traces.append(run_local_sgd(p, cfg_s, ref))
        stacked = np.stack([tr.dist_sq for tr in traces], axis=1)
        assert np.allclose(agg.mean["dist_sq"], stacked.mean(axis=1), rtol=1e-12)

    def test_needs_two_seeds(self, setup):
        p, ref = setup
        with pytest.raises(ValueError, match="2 seeds"):
            run_replicated(p, make_cfg(p), ref, seeds=[0])

    def test_noise_replication_matches_single(self, setup):
        p, ref = setup
        cfg = make_cfg(p, T=20, H=4, mode=GradientMode.INJECTED_NOISE,
                       noise_sigma=0.5, record_every=1)
        agg = run_replicated(p, cfg, ref, seeds=[0, 9])
        tr9 = run_local_sgd(p, make_cfg(p, T=20, H=4, seed=9,
                                        mode=GradientMode.INJECTED_NOISE,
                                        noise_sigma=0.5, record_every=1), ref)
        stacked_max = np.maximum(agg.mean["dist_sq"], tr9.dist_sq)
        # seed 9's trace participates in the aggregate: mean of {s0, s9}
        # lies between min and max of the pair at every step
        assert np.all(agg.mean["dist_sq"] <= stacked_max + 1e-30)


class TestTraceCsv:
    def test_round_and_columns(self, setup):
        p, ref = setup
        cfg = make_cfg(p, T=20, H=4, record_every=1)
        tr = run_local_sgd(p, cfg, ref)
        buf = io.StringIO()
        tr.to_csv(buf)
        text = buf.getvalue()
        header = [l for l in text.splitlines() if not l.startswith("#")][0]
        assert header == "t,round,synced,V_t,dist_sq,subopt,grad_norm_sq"
        assert "# gamma" in text and "# L =" in text and "# r0_sq" in text
        last = text.splitlines()[-1].split(",")
        assert last[0] == "20" and last[1] == "5"  # T and total rounds

    def test_byte_identical_reruns(self, setup):
        p, ref = setup
        cfg = make_cfg(p, T=25, H=5)
        bufs = []
        for _ in range(2):
            tr = run_local_sgd(p, cfg, ref)
            buf = io.StringIO()
            tr.to_csv(buf)
            bufs.append(buf.getvalue())
        assert bufs[0] == bufs[1]

    def test_aggregate_csv(self, setup):
        p, ref = setup
        cfg = make_cfg(p, T=20, H=4)
        agg = run_replicated(p, cfg, ref, seeds=[0, 1, 2])
        buf = io.StringIO()
        agg.to_csv(buf)
        text = buf.getvalue()
        assert "# n_seeds = 3" in text
        assert "subopt_mean,subopt_se" in text
