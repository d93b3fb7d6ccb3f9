import numpy as np
import pytest

from ssmkit import curation, numkit
from ssmkit import systems as sy


@pytest.fixture(scope="module")
def slow_fast_decay():
    sys = sy.slow_fast_system()
    return sy.generate_decay_dataset(sys, 10, sys.box(0.5), 40.0, 0.01, seed=2024)


class TestEstimateEquilibrium:
    def test_slow_fast_recovers_fixed_point(self, slow_fast_decay):
        eq = curation.estimate_equilibrium(slow_fast_decay)
        assert np.linalg.norm(eq - [1.0, 1.0]) < 1e-3

    def test_constant_trajectories(self):
        t = np.arange(50) * 0.1
        c = np.array([2.0, -1.0])
        trajs = [sy.Trajectory(t, np.tile(c[:, None], (1, 50))) for _ in range(3)]
        ds = sy.TrajectoryDataset(dt=0.1, trajectories=trajs)
        np.testing.assert_allclose(curation.estimate_equilibrium(ds), c)

    def test_controlled_dataset_rejected(self):
        sys = sy.slow_fast_system()
        ds = sy.generate_controlled_dataset(sys, 1, sy.SinusoidProtocol(), 0.5, 0.01, seed=0)
        with pytest.raises(ValueError):
            curation.estimate_equilibrium(ds)

    def test_bad_tail_fraction(self, slow_fast_decay):
        with pytest.raises(ValueError):
            curation.estimate_equilibrium(slow_fast_decay, tail_fraction=0.0)


class TestCurate:
    def test_degenerate_split_all_near(self, slow_fast_decay):
        cur = curation.curate(slow_fast_decay, N_T1=0, n=1, d=0, strict_embedding=False)
        assert cur.Y_trans.shape == (2, 0)
        assert cur.Y_near.shape[1] == sum(tr.n_samples for tr in slow_fast_decay.trajectories)

    def test_embedding_requirement_enforced(self, slow_fast_decay):
        # full-state slow-fast: p = 2 < 2n+1 = 3 unless the exemption is used
        with pytest.raises(curation.EmbeddingError):
            curation.curate(slow_fast_decay, N_T1=100, n=1, d=0)
        cur = curation.curate(slow_fast_decay, N_T1=100, n=1, d=0, strict_embedding=False)
        assert cur.p == 2

    def test_chain_dimensioning_accepted(self):
        sys = sy.chain_system(L=12, k=300.0, k3=0.0, c=60.0)
        ds = sy.generate_decay_dataset(sys, 3, sys.box(0.1), 6.0, 0.01, seed=1, substeps=4)
        cur = curation.curate(ds, N_T1=100, n=5, d=3)
        assert cur.p == 12 and cur.p >= 2 * cur.n + 1
        assert cur.V_E.shape == (12, 5)

    def test_column_accounting(self, slow_fast_decay):
        N_T1, d = 120, 2
        cur = curation.curate(slow_fast_decay, N_T1=N_T1, n=1, d=d, strict_embedding=False)
        for tr, ct, cn in zip(slow_fast_decay.trajectories, cur.trans_counts, cur.near_counts):
            assert ct == N_T1
            assert ct + cn == tr.n_samples - d

    def test_split_concatenation_equals_full(self, slow_fast_decay):
        n_t1, d = 80, 1
        cur = curation.curate(slow_fast_decay, N_T1=n_t1, n=1, d=d, strict_embedding=False)
        eq_raw = cur.y_eq[: cur.q]
        # per trajectory, transient + near blocks reproduce the whole curated signal
        t0 = n0 = 0
        for tr, ct, cn in zip(slow_fast_decay.trajectories, cur.trans_counts, cur.near_counts):
            Y = numkit.delay_embed(tr.observables - eq_raw[:, None], d, slow_fast_decay.dt)
            full = np.hstack([cur.Y_trans[:, t0:t0 + ct], cur.Y_near[:, n0:n0 + cn]])
            np.testing.assert_allclose(full, Y, atol=1e-12)
            t0 += ct
            n0 += cn

    def test_orthonormal_tangent_basis(self, slow_fast_decay):
        cur = curation.curate(slow_fast_decay, N_T1=50, n=1, d=1)
        assert np.linalg.norm(cur.V_E.T @ cur.V_E - np.eye(1)) < 1e-12

    def test_trajectory_order_invariance_of_subspace(self, slow_fast_decay):
        cur1 = curation.curate(slow_fast_decay, N_T1=50, n=1, d=1)
        shuffled = sy.TrajectoryDataset(
            dt=slow_fast_decay.dt,
            trajectories=list(reversed(slow_fast_decay.trajectories)),
            metadata=slow_fast_decay.metadata,
        )
        cur2 = curation.curate(shuffled, N_T1=50, n=1, d=1)
        sin_angle = np.linalg.norm(cur1.V_E - cur2.V_E @ (cur2.V_E.T @ cur1.V_E), ord=2)
        assert sin_angle < 1e-10

    def test_shift_invariance(self, slow_fast_decay):
        offset = np.array([0.3, -0.7])
        shifted = sy.TrajectoryDataset(
            dt=slow_fast_decay.dt,
            trajectories=[
                sy.Trajectory(tr.times, tr.observables + offset[:, None])
                for tr in slow_fast_decay.trajectories
            ],
            metadata=slow_fast_decay.metadata,
        )
        cur1 = curation.curate(slow_fast_decay, N_T1=60, n=1, d=0, strict_embedding=False)
        cur2 = curation.curate(shifted, N_T1=60, n=1, d=0, strict_embedding=False)
        np.testing.assert_allclose(cur1.Y_trans, cur2.Y_trans, atol=1e-9)
        np.testing.assert_allclose(cur1.Y_near, cur2.Y_near, atol=1e-9)
        np.testing.assert_allclose(cur2.y_eq - cur1.y_eq, offset, atol=1e-9)

    def test_too_short_trajectory(self):
        t = np.arange(5) * 0.1
        trajs = [sy.Trajectory(t, np.random.default_rng(0).normal(size=(2, 5)))]
        ds = sy.TrajectoryDataset(dt=0.1, trajectories=trajs)
        with pytest.raises(ValueError):
            curation.curate(ds, N_T1=3, n=1, d=1, strict_embedding=False)

    def test_derivatives_match_finite_difference_of_embedded(self, slow_fast_decay):
        cur = curation.curate(slow_fast_decay, N_T1=50, n=1, d=1)
        tr = slow_fast_decay.trajectories[0]
        eq_raw = cur.y_eq[: cur.q]
        Y = numkit.delay_embed(tr.observables - eq_raw[:, None], 1, slow_fast_decay.dt)
        Ydot = numkit.finite_difference(Y, slow_fast_decay.dt)
        np.testing.assert_allclose(cur.Ydot_trans[:, :50], Ydot[:, :50], atol=1e-12)


class TestControlledCuration:
    def test_shapes_and_alignment(self):
        sys = sy.slow_fast_system()
        ds = sy.generate_controlled_dataset(sys, 3, sy.SinusoidProtocol(), 2.0, 0.01, seed=5)
        Y_u, Ydot_u, U = curation.curate_controlled(ds, np.array([1.0, 1.0]), d=2)
        n_cols = sum(tr.n_samples - 2 for tr in ds.trajectories)
        assert Y_u.shape == (6, n_cols)
        assert Ydot_u.shape == (6, n_cols)
        assert U.shape == (2, n_cols)

    def test_requires_inputs(self, slow_fast_decay=None):
        sys = sy.slow_fast_system()
        ds = sy.generate_decay_dataset(sys, 1, sys.box(0.2), 0.5, 0.01, seed=0)
        with pytest.raises(ValueError):
            curation.curate_controlled(ds, np.array([1.0, 1.0]), d=0)


class TestDiagnostics:
    def test_normal_energy_decays(self, slow_fast_decay):
        idx, energy = curation.normal_energy_profile(slow_fast_decay, n=1, d=0)
        assert len(idx) == len(energy)
        # transient-heavy beginning carries more normal energy than the tail
        assert energy[:50].mean() > energy[-50:].mean()


class TestBundle:
    def test_roundtrip(self, slow_fast_decay, tmp_path):
        cur = curation.curate(slow_fast_decay, N_T1=40, n=1, d=1)
        curation.save_curated(cur, tmp_path / "curated")
        back = curation.load_curated(tmp_path / "curated")
        np.testing.assert_array_equal(back.Y_trans, cur.Y_trans)
        np.testing.assert_array_equal(back.Ydot_near, cur.Ydot_near)
        np.testing.assert_array_equal(back.V_E, cur.V_E)
        np.testing.assert_array_equal(back.y_eq, cur.y_eq)
        assert (back.n, back.d, back.q, back.dt) == (cur.n, cur.d, cur.q, cur.dt)
        assert back.trans_counts == cur.trans_counts
