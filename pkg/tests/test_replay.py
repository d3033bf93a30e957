import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import LinearOracle, TableOracle
from ners.replay import (
    ReplayBuffer,
    Transition,
    beta_schedule,
    compute_td_error,
    importance_weights,
)
from ners.sumtree import EmptyTreeError


def _push_n(buf, n, rng=None):
    rng = rng or np.random.default_rng(0)
    for t in range(n):
        buf.push(Transition(rng.normal(size=buf.obs_dim), rng.uniform(-1, 1, size=1), 0.0, rng.normal(size=buf.obs_dim), False, t))


class TestPush:
    def test_first_push_priority_one(self):
        buf = ReplayBuffer(8, obs_dim=2)
        _push_n(buf, 1)
        assert buf.size == 1
        assert buf.tree.leaf_values[0] == 1.0

    def test_fifo_eviction(self):
        buf = ReplayBuffer(4, obs_dim=1)
        for t in range(6):
            buf.add([float(t)], [0.0], 0.0, [0.0], False, t)
        assert buf.size == 4
        assert sorted(buf.states[:, 0].tolist()) == [2.0, 3.0, 4.0, 5.0]

    def test_two_pushes_equal_odds(self):
        buf = ReplayBuffer(4, obs_dim=1, alpha=0.5)
        _push_n(buf, 2)
        np.testing.assert_allclose(buf.probabilities(), [0.5, 0.5])

    def test_dimension_mismatch(self):
        buf = ReplayBuffer(4, obs_dim=2)
        with pytest.raises(ValueError):
            buf.add([1.0, 2.0, 3.0], [0.0], 0.0, [1.0, 2.0], False, 0)
        with pytest.raises(ValueError):
            buf.add([1.0, 2.0], [0.0, 1.0], 0.0, [1.0, 2.0], False, 0)

    def test_discrete_actions_one_hot(self):
        buf = ReplayBuffer(4, obs_dim=2, n_actions=3)
        buf.add([0.0, 1.0], 2, 1.0, [1.0, 0.0], False, 0)
        np.testing.assert_array_equal(buf.action_features(np.array([0])), [[0.0, 0.0, 1.0]])
        with pytest.raises(ValueError):
            buf.add([0.0, 1.0], 3, 1.0, [1.0, 0.0], False, 1)


class TestSample:
    def test_uniform_weights_are_one(self):
        buf = ReplayBuffer(128, obs_dim=2)
        _push_n(buf, 100)
        batch = buf.sample(32, 1.0, LinearOracle(), np.random.default_rng(0))
        np.testing.assert_allclose(batch.probabilities, 0.01)
        np.testing.assert_allclose(batch.raw_weights, 1.0)
        np.testing.assert_allclose(batch.weights, 1.0)

    def test_four_to_one_priorities(self):
        buf = ReplayBuffer(2, obs_dim=1, alpha=0.5)
        _push_n(buf, 2)
        buf.update_priorities([0, 1], [4.0, 1.0])
        np.testing.assert_allclose(buf.probabilities(), [2 / 3, 1 / 3])
        batch = buf.sample(100_000, 0.4, LinearOracle(), np.random.default_rng(1))
        assert np.mean(batch.indices == 0) == pytest.approx(2 / 3, abs=0.01)

    def test_fresh_rows_read_one(self):
        buf = ReplayBuffer(8, obs_dim=1)
        buf.add([0.3], [0.1], 0.5, [0.2], False, 0)
        batch = buf.sample(4, 0.4, LinearOracle(), np.random.default_rng(0))
        rows = batch.rows(buf.obs_dim, buf.action_feature_dim)
        assert all(r.td_error_norm == 1.0 and r.target_q_norm == 1.0 for r in rows)
        assert rows[0].reward == 0.5
        np.testing.assert_array_equal(rows[0].state, [0.3])
        np.testing.assert_array_equal(rows[0].next_state, [0.2])

    def test_after_update_rows_carry_tanh(self):
        buf = ReplayBuffer(8, obs_dim=1, gamma=0.9)
        buf.add([0.3], [0.1], 0.5, [0.2], False, 0)
        oracle = LinearOracle()
        batch = buf.sample(1, 0.4, oracle, np.random.default_rng(0))
        buf.update_priorities(batch.indices, [1.0], batch.td_errors, batch.target_q)
        again = buf.sample(1, 0.4, oracle, np.random.default_rng(0))
        # Q = 0.3 + 0.1, target = 0.5 + 0.9 * 2 * 0.2
        target = 0.5 + 0.9 * 0.4
        assert again.features[0, -1] == pytest.approx(np.tanh(target))
        assert again.features[0, -2] == pytest.approx(np.tanh(target - 0.4))

    def test_empty(self):
        with pytest.raises(EmptyTreeError):
            ReplayBuffer(4, obs_dim=1).sample(1, 0.4, LinearOracle(), np.random.default_rng(0))

    def test_feature_layout(self, filled_buffer, linear_oracle):
        batch = filled_buffer.sample(16, 0.4, linear_oracle, np.random.default_rng(0))
        assert batch.features.shape == (16, filled_buffer.feature_dim)
        assert np.all((batch.features[:, -3] >= 0) & (batch.features[:, -3] <= 1))
        assert np.all(np.abs(batch.features[:, -2:]) <= 1)

    def test_timestep_normalized_by_current_step(self):
        buf = ReplayBuffer(8, obs_dim=1)
        for t in (0, 5, 9):
            buf.add([0.0], [0.0], 0.0, [0.0], False, t)
        np.testing.assert_allclose(buf.timestep_norm(np.arange(3)), [0.0, 0.5, 0.9])

    def test_probabilities_reproduce_leaf_ratio(self, filled_buffer, linear_oracle):
        rng = np.random.default_rng(3)
        filled_buffer.update_priorities(np.arange(100), rng.uniform(0.1, 5.0, 100))
        batch = filled_buffer.sample(50, 0.4, linear_oracle, rng)
        leaves = filled_buffer.tree.leaf_values[: filled_buffer.size]
        np.testing.assert_allclose(batch.probabilities, leaves[batch.indices] / leaves.sum(), rtol=1e-9)

    def test_stratified_roundtrip_covers_everything(self):
        buf = ReplayBuffer(64, obs_dim=2, stratified=True)
        _push_n(buf, 50)
        batch = buf.sample(50, 0.4, LinearOracle(), np.random.default_rng(0))
        assert set(batch.indices.tolist()) == set(range(50))


class TestUpdatePriorities:
    def test_unit_score(self):
        buf = ReplayBuffer(4, obs_dim=1, alpha=0.5)
        _push_n(buf, 2)
        buf.update_priorities([1], [1.0])
        assert buf.tree.leaf_values[1] == 1.0

    def test_score_four_doubles_odds(self):
        buf = ReplayBuffer(4, obs_dim=1, alpha=0.5)
        _push_n(buf, 2)
        buf.update_priorities([0], [4.0])
        assert buf.tree.leaf_values[0] == 2.0
        assert buf.probabilities()[0] / buf.probabilities()[1] == pytest.approx(2.0)

    def test_clears_fresh_flag(self):
        buf = ReplayBuffer(4, obs_dim=1)
        _push_n(buf, 2)
        assert buf.fresh[0]
        buf.update_priorities([0], [2.0], [0.3], [0.7])
        assert not buf.fresh[0] and buf.fresh[1]
        assert buf.cached_td_norm()[0] == pytest.approx(np.tanh(0.3))

    @pytest.mark.parametrize("bad", [0.0, -1.0, np.nan])
    def test_nonpositive_rejected(self, bad):
        buf = ReplayBuffer(4, obs_dim=1)
        _push_n(buf, 2)
        with pytest.raises(ValueError):
            buf.update_priorities([0], [bad])


class TestTdError:
    def test_reward_only(self):
        tr = Transition([0.0], [0.0], 1.0, [0.0], False, 0)
        assert compute_td_error(tr, TableOracle(), 0.99) == pytest.approx(1.0)

    def test_exact_cancellation(self):
        tr = Transition([0.0], [0.0], 0.0, [0.0], False, 0)
        oracle = TableOracle(q=lambda s, a: 9.9, target=lambda s2: 10.0)
        assert compute_td_error(tr, oracle, 0.99) == pytest.approx(0.0, abs=1e-12)

    def test_terminal_ignores_next_state(self):
        oracle = TableOracle(q=lambda s, a: 2.0, target=lambda s2: 1e6 * s2[0])
        for s2 in ([0.0], [1.0], [-3.0]):
            assert compute_td_error(Transition([0.0], [0.0], 5.0, s2, True, 0), oracle, 0.99) == pytest.approx(3.0)

    def test_terminal_masking_on_chain(self):
        # 3-state chain 0 -> 1 -> 2 (terminal, reward 1); exact Bellman values with gamma = 0.5
        gamma = 0.5
        v = {0: 0.5, 1: 1.0, 2: 0.0}
        q = {(0, 1): 0.5, (1, 1): 1.0}
        oracle = TableOracle(q=lambda s, a: q[(int(s[0]), int(a[0]))], target=lambda s2: v[int(s2[0])])
        transitions = [
            Transition([0.0], [1.0], 0.0, [1.0], False, 0),
            Transition([1.0], [1.0], 1.0, [2.0], True, 1),
        ]
        # true values satisfy Bellman exactly, so every TD-error is zero
        for tr in transitions:
            assert compute_td_error(tr, oracle, gamma) == pytest.approx(0.0, abs=1e-12)
        # without masking the terminal transition would pick up gamma * V(2) which is 0 here;
        # perturb V(2) to show it is ignored
        v[2] = 7.0
        assert compute_td_error(transitions[1], oracle, gamma) == pytest.approx(0.0, abs=1e-12)

    def test_buffer_evaluate_agrees(self, filled_buffer, linear_oracle):
        idx = np.arange(20)
        td, target, q = filled_buffer.evaluate(idx, linear_oracle)
        for k in idx:
            tr = Transition(
                filled_buffer.states[k],
                filled_buffer.actions[k],
                filled_buffer.rewards[k],
                filled_buffer.next_states[k],
                filled_buffer.dones[k],
                int(filled_buffer.timesteps[k]),
            )
            assert td[k] == pytest.approx(compute_td_error(tr, linear_oracle, filled_buffer.gamma))


class TestWeights:
    def test_beta_zero_all_equal(self):
        p = np.array([0.1, 0.5, 0.4])
        _, raw = importance_weights(p, 3, 0.0)
        np.testing.assert_array_equal(raw, 1.0)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(0.01, 100.0), min_size=2, max_size=256),
        st.floats(0.05, 1.0),
    )
    def test_weight_contract(self, priorities, beta):
        pri = np.asarray(priorities) ** 0.5
        p = pri / pri.sum()
        w, raw = importance_weights(p, len(p), beta)
        assert np.all((w > 0) & (w <= 1.0))
        order = np.argsort(p)
        # strictly decreasing in p wherever p strictly increases
        dp = np.diff(p[order])
        dw = np.diff(raw[order])
        assert np.all(dw[dp > 1e-12 * p.max()] < 0)
        assert w[np.argmax(p)] == pytest.approx(w.min())

    def test_beta_schedule_directions(self):
        assert beta_schedule(0.0) == pytest.approx(0.4)
        assert beta_schedule(1.0) == pytest.approx(1.0)
        assert beta_schedule(0.5) == pytest.approx(0.7)
        assert beta_schedule(0.0, mode="footnote") == pytest.approx(1.0)
        assert beta_schedule(1.0, mode="footnote") == pytest.approx(0.4)
        assert beta_schedule(2.0) == pytest.approx(1.0)


def test_snapshot_roundtrip(tmp_path, filled_buffer, linear_oracle):
    rng = np.random.default_rng(0)
    filled_buffer.update_priorities(np.arange(10), rng.uniform(0.5, 2.0, 10), rng.normal(size=10), rng.normal(size=10))
    path = tmp_path / "buf.nrsb"
    filled_buffer.save(path)
    assert path.read_bytes()[:4] == b"NRSB"
    back = ReplayBuffer.load(path)
    assert back.size == filled_buffer.size and back.capacity == filled_buffer.capacity
    for name in ("states", "actions", "rewards", "next_states", "dones", "timesteps", "fresh", "td_cache"):
        np.testing.assert_array_equal(getattr(back, name)[: back.size], getattr(filled_buffer, name)[: back.size])
    np.testing.assert_array_equal(back.tree.leaf_values, filled_buffer.tree.leaf_values)
    a = back.sample(8, 0.4, linear_oracle, np.random.default_rng(5))
    b = filled_buffer.sample(8, 0.4, linear_oracle, np.random.default_rng(5))
    np.testing.assert_array_equal(a.features, b.features)


def test_snapshot_discrete(tmp_path):
    buf = ReplayBuffer(8, obs_dim=2, n_actions=3)
    for t in range(5):
        buf.add([t, 0.0], t % 3, 1.0, [0.0, t], t == 4, t)
    buf.save(tmp_path / "d.nrsb")
    back = ReplayBuffer.load(tmp_path / "d.nrsb")
    np.testing.assert_array_equal(back.actions[:5], buf.actions[:5])
    assert back.n_actions == 3
