"""Tests for the replay agents: buffer mechanics, action selection, update
cadence, learning sanity on toy envs, the q-learning reduction, and full
checkpoint resume."""
import numpy as np
import pytest

from cpikit import agents as A
from cpikit import neural as N
from cpikit.agents import (AgentConfig, ConservativeAgent, DqnAgent,
                           ReplayBuffer, Transition, act,
                           compute_policy_targets, conservative_q_targets,
                           greedy_onehot, greedy_q_targets, make_agent)
from cpikit.envs import CartPole, OneStepEnv, TwoArmedBandit

# chi-squared critical value at p = 0.001 for one degree of freedom
CHI2_1DF = 10.828


def fill_buffer(buf, n, obs_dim=2, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(n):
        buf.push(Transition(rng.normal(size=obs_dim), i % 2, float(i),
                            rng.normal(size=obs_dim), i % 5 == 0))


class TestReplayBuffer:
    def test_len_caps_at_capacity(self):
        buf = ReplayBuffer(capacity=10, obs_dim=2)
        assert len(buf) == 0
        fill_buffer(buf, 7)
        assert len(buf) == 7
        fill_buffer(buf, 10)
        assert len(buf) == 10

    def test_fifo_overwrite(self):
        # capacity 3, rewards 0..4 pushed: slots end up holding 3, 4, 2
        buf = ReplayBuffer(capacity=3, obs_dim=1)
        for i in range(5):
            buf.push(Transition(np.array([float(i)]), 0, float(i),
                                np.array([0.0]), False))
        assert sorted(buf._rewards.tolist()) == [2.0, 3.0, 4.0]

    def test_sample_shapes_and_types(self):
        buf = ReplayBuffer(capacity=50, obs_dim=3, seed=1)
        fill_buffer(buf, 20, obs_dim=3)
        batch = buf.sample(8)
        assert batch.states.shape == (8, 3)
        assert batch.next_states.shape == (8, 3)
        assert batch.actions.shape == (8,)
        assert batch.actions.dtype == np.int64
        assert batch.terminals.dtype == np.bool_

    def test_sample_contents_match_stored(self):
        buf = ReplayBuffer(capacity=50, obs_dim=1, seed=2)
        for i in range(10):
            buf.push(Transition(np.array([float(i)]), i, 10.0 * i,
                                np.array([float(i) + 0.5]), False))
        batch = buf.sample(64)
        # every sampled row must be one of the stored transitions, intact
        for s, a, r, ns in zip(batch.states, batch.actions, batch.rewards,
                               batch.next_states):
            i = int(s[0])
            assert a == i and r == 10.0 * i and ns[0] == i + 0.5

    def test_empty_sample_rejected(self):
        buf = ReplayBuffer(capacity=4, obs_dim=1)
        with pytest.raises(ValueError):
            buf.sample(2)

    def test_rng_override_leaves_own_stream_untouched(self):
        buf_a = ReplayBuffer(capacity=30, obs_dim=1, seed=7)
        buf_b = ReplayBuffer(capacity=30, obs_dim=1, seed=7)
        fill_buffer(buf_a, 30, obs_dim=1)
        fill_buffer(buf_b, 30, obs_dim=1)
        buf_a.sample(5, rng=np.random.default_rng(99))
        a = buf_a.sample(5)
        b = buf_b.sample(5)
        assert np.array_equal(a.rewards, b.rewards)

    def test_state_roundtrip(self):
        buf = ReplayBuffer(capacity=8, obs_dim=2, seed=3)
        fill_buffer(buf, 11)
        data = buf.state_arrays("b")
        clone = ReplayBuffer(capacity=8, obs_dim=2, seed=0)
        clone.restore_state(data, "b")
        assert len(clone) == 8
        x = buf.sample(6)
        y = clone.sample(6)
        assert np.array_equal(x.states, y.states)
        assert np.array_equal(x.actions, y.actions)


class TestActionSelection:
    def test_pure_exploration_is_uniform(self):
        rng = np.random.default_rng(0)
        n = 100_000
        counts = np.zeros(2)
        for _ in range(n):
            a = act(None, None, None, 1.0, "actor", rng, 2)
            counts[a] += 1
        # expected n/2 per arm under uniformity
        chi2 = ((counts - n / 2) ** 2 / (n / 2)).sum()
        assert chi2 < CHI2_1DF

    def test_greedy_critic_takes_argmax(self):
        rng = np.random.default_rng(0)
        q_fn = lambda obs: np.array([0.1, 0.9, 0.3])
        for _ in range(20):
            assert act(None, q_fn, None, 0.0, "greedy_critic", rng, 3) == 1

    def test_greedy_critic_ties_break_low(self):
        rng = np.random.default_rng(0)
        q_fn = lambda obs: np.array([0.0, 5.0])
        assert act(None, q_fn, None, 0.0, "greedy_critic", rng, 2) == 1
        tie_fn = lambda obs: np.array([2.0, 2.0, 1.0])
        assert act(None, tie_fn, None, 0.0, "greedy_critic", rng, 3) == 0

    def test_actor_samples_policy_distribution(self):
        rng = np.random.default_rng(4)
        pi_fn = lambda obs: np.array([0.25, 0.75], dtype=np.float32)
        n = 10_000
        hits = sum(act(None, None, pi_fn, 0.0, "actor", rng, 2)
                   for _ in range(n))
        assert abs(hits / n - 0.75) <= 0.01

    def test_actor_renormalizes_drifted_probs(self):
        rng = np.random.default_rng(5)
        # float32 head output summing to slightly under one
        pi_fn = lambda obs: np.array([0.3333, 0.6666], dtype=np.float32)
        draws = {act(None, None, pi_fn, 0.0, "actor", rng, 2)
                 for _ in range(200)}
        assert draws == {0, 1}

    def test_degenerate_policy_never_overflows_index(self):
        rng = np.random.default_rng(6)
        pi_fn = lambda obs: np.array([0.0, 1.0], dtype=np.float32)
        for _ in range(100):
            assert act(None, None, pi_fn, 0.0, "actor", rng, 2) == 1


class TestGreedyOnehot:
    def test_hand_case(self):
        q = np.array([[1.0, 3.0, 2.0], [5.0, 0.0, 4.0]])
        expect = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        assert np.array_equal(greedy_onehot(q), expect)

    def test_ties_break_to_lowest_index(self):
        q = np.array([[2.0, 2.0, 1.0]])
        assert np.array_equal(greedy_onehot(q), [[1.0, 0.0, 0.0]])

    def test_onehot_backup_equals_max_bitwise(self):
        # the reduction hinges on sum_a onehot(a) * q(a) == max_a q(a)
        # holding exactly in float32, not just approximately
        rng = np.random.default_rng(7)
        q = rng.normal(size=(500, 4)).astype(np.float32) * 100
        via_onehot = (greedy_onehot(q) * q).sum(axis=1)
        assert np.array_equal(via_onehot, q.max(axis=1))


def identity_net(width):
    """Linear net whose forward is the identity map."""
    net = N.MlpNet((width, width), head="linear", dtype=np.float64)
    net.weights[0] = np.eye(width)
    net.biases[0] = np.zeros(width)
    return net


class TestQTargets:
    def make_batch(self):
        from cpikit.agents import Batch
        return Batch(
            states=np.zeros((2, 2)),
            actions=np.array([0, 1]),
            rewards=np.array([1.0, 2.0]),
            next_states=np.array([[1.0, 0.0], [0.0, 3.0]]),
            terminals=np.array([False, True]),
        )

    def test_conservative_hand_values(self):
        # identity net: q(s') = s'. row 0: 1 + 0.5*(0.5*1 + 0.5*0) = 1.25
        # row 1 is terminal: target = reward = 2
        net = identity_net(2)
        probs = np.array([[0.5, 0.5], [1.0, 0.0]])
        t = conservative_q_targets(self.make_batch(), net, probs, 0.5, 2)
        assert np.allclose(t, [1.25, 2.0])

    def test_greedy_hand_values(self):
        # row 0: 1 + 0.5*max(1, 0) = 1.5; row 1 terminal: 2
        net = identity_net(2)
        t = greedy_q_targets(self.make_batch(), net, 0.5, 2)
        assert np.allclose(t, [1.5, 2.0])

    def test_greedy_is_conservative_with_onehot(self):
        net = identity_net(2)
        batch = self.make_batch()
        probs = greedy_onehot(net.forward(batch.next_states))
        a = conservative_q_targets(batch, net, probs, 0.5, 2)
        b = greedy_q_targets(batch, net, 0.5, 2)
        assert np.array_equal(a, b)

    def test_uniform_policy_hand_value(self):
        # r=0, gamma=0.5, q(s') = [0, 2], uniform policy -> 0.5*(0+2)/2 = 0.5
        from cpikit.agents import Batch
        batch = Batch(states=np.zeros((1, 2)), actions=np.array([0]),
                      rewards=np.array([0.0]),
                      next_states=np.array([[0.0, 2.0]]),
                      terminals=np.array([False]))
        t = conservative_q_targets(batch, identity_net(2),
                                   np.array([[0.5, 0.5]]), 0.5, 2)
        assert t[0] == 0.5

    def test_zero_discount_returns_rewards(self):
        net = identity_net(2)
        batch = self.make_batch()
        probs = np.array([[0.5, 0.5], [1.0, 0.0]])
        assert np.array_equal(
            conservative_q_targets(batch, net, probs, 0.0, 2), batch.rewards)
        assert np.array_equal(
            greedy_q_targets(batch, net, 0.0, 2), batch.rewards)


class TestPolicyTargets:
    def test_alpha_zero_keeps_slow_policy(self):
        pi = np.array([[0.4, 0.6], [0.9, 0.1]])
        q = np.array([[1.0, 2.0], [3.0, 0.0]])
        assert np.array_equal(compute_policy_targets(pi, q, 0.0), pi)

    def test_alpha_one_is_greedy(self):
        pi = np.array([[0.4, 0.6]])
        q = np.array([[5.0, 1.0]])
        assert np.array_equal(compute_policy_targets(pi, q, 1.0), [[1.0, 0.0]])

    def test_hand_mixture(self):
        # (1-0.3)*[0.5,0.5] + 0.3*[0,1] = [0.35, 0.65]
        pi = np.array([[0.5, 0.5]])
        q = np.array([[0.0, 4.0]])
        assert np.allclose(compute_policy_targets(pi, q, 0.3), [[0.35, 0.65]])

    def test_rows_stay_distributions(self):
        rng = np.random.default_rng(8)
        raw = rng.uniform(0.1, 1.0, size=(50, 4))
        pi = raw / raw.sum(axis=1, keepdims=True)
        q = rng.normal(size=(50, 4))
        for alpha in (0.0, 0.17, 0.5, 0.83, 1.0):
            rows = compute_policy_targets(pi, q, alpha)
            assert np.all(rows >= 0)
            assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-9)

    def test_bad_alpha_rejected(self):
        with pytest.raises(ValueError):
            compute_policy_targets(np.ones((1, 2)) / 2, np.ones((1, 2)), 1.5)


class TestAgentConfig:
    def test_bad_modes_rejected(self):
        with pytest.raises(ValueError):
            AgentConfig(obs_dim=4, n_actions=2, behavior="psychic")
        with pytest.raises(ValueError):
            AgentConfig(obs_dim=4, n_actions=2, policy_kind="tarot")
        with pytest.raises(ValueError):
            AgentConfig(obs_dim=4, n_actions=3, output_width=2)

    def test_bad_periods_and_epsilons_rejected(self):
        with pytest.raises(ValueError):
            AgentConfig(obs_dim=4, n_actions=2, target_period=0)
        with pytest.raises(ValueError):
            AgentConfig(obs_dim=4, n_actions=2, learn_period=0)
        with pytest.raises(ValueError):
            AgentConfig(obs_dim=4, n_actions=2, epsilon_start=1.5)
        with pytest.raises(ValueError):
            AgentConfig(obs_dim=4, n_actions=2, epsilon_end=-0.1)

    def test_q_width_defaults_to_action_count(self):
        cfg = AgentConfig(obs_dim=4, n_actions=2)
        assert cfg.q_width == 2
        wide = AgentConfig(obs_dim=4, n_actions=2, output_width=8)
        assert wide.q_width == 8

    def test_epsilon_schedule(self):
        cfg = AgentConfig(obs_dim=1, n_actions=2, epsilon_start=1.0,
                          epsilon_end=0.1, epsilon_horizon=100)
        assert cfg.epsilon_at(0) == 1.0
        # midpoint: 1.0 + (0.1 - 1.0) * 0.5 = 0.55
        assert np.isclose(cfg.epsilon_at(50), 0.55)
        assert cfg.epsilon_at(100) == pytest.approx(0.1)
        assert cfg.epsilon_at(10_000) == pytest.approx(0.1)

    def test_flat_epsilon(self):
        cfg = AgentConfig(obs_dim=1, n_actions=2)
        assert cfg.epsilon_at(0) == cfg.epsilon_at(10**6) == 0.01


def small_config(**over):
    base = dict(obs_dim=1, n_actions=2, gamma=0.9, target_period=10,
                learn_period=4, batch_size=8, buffer_capacity=500,
                min_buffer_fill=8, hidden=(16,), lr=1e-2,
                epsilon_start=0.1, epsilon_end=0.1)
    base.update(over)
    return AgentConfig(**base)


class TestCadence:
    def test_learn_waits_for_min_fill(self):
        agent = DqnAgent(small_config(min_buffer_fill=1000), seed=0)
        env = OneStepEnv(seed=0)
        for _ in range(100):
            agent.train_step(env)
        assert agent.grad_steps == 0

    def test_learn_and_sync_counters(self):
        # F=4, min fill 8: gradient passes at steps 8, 12, 16, 20 -> 4
        agent = DqnAgent(small_config(), seed=0)
        env = OneStepEnv(seed=0)
        for _ in range(9):
            agent.train_step(env)
        assert agent.grad_steps == 1
        for _ in range(11):
            agent.train_step(env)
        assert agent.grad_steps == 4
        assert len(agent.q_losses) == 4
        # C=10: the last sync ran at step 20, right after that learn pass
        for w_on, w_tg in zip(agent.q.weights, agent.q_target.weights):
            assert np.array_equal(w_on, w_tg)

    def test_target_lags_between_syncs(self):
        agent = DqnAgent(small_config(), seed=0)
        env = OneStepEnv(seed=0)
        for _ in range(16):  # learns at 8, 12, 16; last sync at step 10
            agent.train_step(env)
        assert any(not np.array_equal(w, t) for w, t in
                   zip(agent.q.weights, agent.q_target.weights))

    def test_episode_reporting(self):
        agent = DqnAgent(small_config(), seed=0)
        env = OneStepEnv(seed=0)
        episodes = [agent.train_step(env) for _ in range(6)]
        # one-step env: every interaction closes an episode of return 1
        assert episodes == [(1.0, 1)] * 6

    def test_cartpole_episode_pays_zero_on_final_step(self):
        agent = DqnAgent(small_config(obs_dim=4), seed=5)
        env = CartPole(seed=agent.env_entropy)
        ep = None
        for _ in range(600):
            ep = agent.train_step(env)
            if ep is not None:
                break
        ret, length = ep
        assert ret == length - 1


class TestLearningSanity:
    def test_dqn_fits_one_step_reward(self):
        # both actions always pay 1 and end the episode, so every target
        # is exactly 1 regardless of gamma
        agent = DqnAgent(small_config(batch_size=16), seed=1)
        env = OneStepEnv(seed=1)
        for _ in range(1500):
            agent.train_step(env)
        q = agent.q.forward(np.array([1.0], dtype=np.float32))
        assert np.all(np.abs(q - 1.0) < 0.05)

    def test_both_agents_solve_bandit(self):
        for kind in ("dqn", "dcpi"):
            cfg = small_config(batch_size=16, behavior="actor",
                               rate_kind="cpi", alpha0=0.5)
            if kind == "dqn":
                cfg.behavior = "greedy_critic"
            agent = make_agent(kind, cfg, seed=2)
            env = TwoArmedBandit(seed=agent.env_entropy)
            for _ in range(3000):
                agent.train_step(env)
            q = agent.q.forward(np.array([1.0], dtype=np.float32))
            assert np.argmax(q) == 1, kind
            if kind == "dcpi":
                probs = agent.pi.forward(np.array([1.0], dtype=np.float32))
                assert probs[1] > 0.8

    def test_wide_q_head_trains(self):
        cfg = small_config(output_width=6)
        agent = DqnAgent(cfg, seed=3)
        env = OneStepEnv(seed=3)
        for _ in range(60):
            agent.train_step(env)
        assert agent.grad_steps == 14  # steps 8, 12, ..., 56, 60
        assert agent._q_values_single(np.array([1.0])).shape == (2,)

    def test_rate_stats_share_the_policy_batch(self, monkeypatch):
        # the adaptive rate must be fed from the very batch the policy
        # gradient uses, with q-values taken after the value update
        captured = {}
        samples = []

        real_stats = A.R.batch_stats
        monkeypatch.setattr(A.R, "batch_stats", lambda q, p: captured.update(
            q_values=q) or real_stats(q, p))

        real_pi_loss = A.N.pi_loss_and_grad

        def spy_pi_loss(net, states, targets):
            captured["pi_states"] = states
            return real_pi_loss(net, states, targets)

        monkeypatch.setattr(A.N, "pi_loss_and_grad", spy_pi_loss)

        real_sample = ReplayBuffer.sample

        def spy_sample(self, n, rng=None):
            batch = real_sample(self, n, rng)
            samples.append(batch)
            return batch

        monkeypatch.setattr(ReplayBuffer, "sample", spy_sample)

        agent = ConservativeAgent(small_config(), seed=4)
        env = OneStepEnv(seed=4)
        for _ in range(12):
            agent.train_step(env)

        assert agent.grad_steps == 2  # steps 8 and 12
        assert len(samples) == 4      # value batch + policy batch per pass
        policy_batch = samples[-1]
        assert captured["pi_states"] is policy_batch.states
        assert np.array_equal(
            captured["q_values"],
            agent.q.forward(policy_batch.states)[:, :agent.config.n_actions])


def reduction_config(**over):
    base = dict(obs_dim=4, n_actions=2, gamma=0.99, target_period=25,
                learn_period=4, batch_size=16, buffer_capacity=2000,
                min_buffer_fill=50, hidden=(16, 16), lr=1e-3,
                epsilon_start=0.01, epsilon_end=0.01)
    base.update(over)
    return AgentConfig(**base)


class TestDqnReduction:
    def test_bit_identical_q_losses(self):
        seed = 11
        dqn = DqnAgent(reduction_config(), seed=seed)
        red = ConservativeAgent(
            reduction_config(behavior="greedy_critic",
                             policy_kind="greedy_oracle",
                             rate_kind="constant", alpha0=1.0), seed=seed)
        env_a = CartPole(seed=dqn.env_entropy)
        env_b = CartPole(seed=red.env_entropy)
        for _ in range(400):
            dqn.train_step(env_a)
            red.train_step(env_b)
        assert dqn.grad_steps == red.grad_steps > 50
        assert dqn.q_losses == red.q_losses
        assert all(a == 1.0 for a in red.alphas)
        for w_a, w_b in zip(dqn.q.weights, red.q.weights):
            assert np.array_equal(w_a, w_b)

    def test_divergence_without_oracle(self):
        # same seed but a learned policy net: the value paths must differ
        seed = 11
        dqn = DqnAgent(reduction_config(), seed=seed)
        dcpi = ConservativeAgent(
            reduction_config(behavior="greedy_critic", policy_kind="network",
                             rate_kind="constant", alpha0=1.0), seed=seed)
        env_a = CartPole(seed=dqn.env_entropy)
        env_b = CartPole(seed=dcpi.env_entropy)
        for _ in range(400):
            dqn.train_step(env_a)
            dcpi.train_step(env_b)
        assert dqn.q_losses != dcpi.q_losses


class TestCheckpointResume:
    def run_steps(self, agent, env, n):
        for _ in range(n):
            agent.train_step(env)

    def test_resume_is_bit_identical(self):
        cfg = reduction_config(behavior="actor", policy_kind="network",
                               rate_kind="cpi", alpha0=0.3)
        agent = ConservativeAgent(cfg, seed=21)
        env = CartPole(seed=agent.env_entropy)
        self.run_steps(agent, env, 150)

        payload = agent.state_arrays("agent")
        payload.update(env.state_arrays("env"))

        # keep training the original
        self.run_steps(agent, env, 80)

        # restore into a fresh agent built from a different seed
        other = ConservativeAgent(cfg, seed=999)
        other.restore_state(payload, "agent")
        env2 = CartPole(seed=0)
        env2.restore_state(payload, "env")
        self.run_steps(other, env2, 80)

        assert other.steps == agent.steps
        assert other.q_losses == agent.q_losses
        assert other.pi_losses == agent.pi_losses
        assert other.alphas == agent.alphas
        for w_a, w_b in zip(agent.q.weights, other.q.weights):
            assert np.array_equal(w_a, w_b)
        for w_a, w_b in zip(agent.pi.weights, other.pi.weights):
            assert np.array_equal(w_a, w_b)

    def test_checkpoint_file_roundtrip(self, tmp_path):
        agent = DqnAgent(small_config(obs_dim=4), seed=31)
        env = CartPole(seed=agent.env_entropy)
        self.run_steps(agent, env, 60)
        payload = agent.state_arrays("agent")
        payload.update(env.state_arrays("env"))
        path = tmp_path / "ck.npz"
        N.save_checkpoint(path, payload)
        loaded = N.load_checkpoint(path)

        self.run_steps(agent, env, 40)
        other = DqnAgent(small_config(obs_dim=4), seed=77)
        other.restore_state(loaded, "agent")
        env2 = CartPole(seed=1)
        env2.restore_state(loaded, "env")
        self.run_steps(other, env2, 40)
        assert other.q_losses == agent.q_losses


class TestFactory:
    def test_kinds(self):
        cfg = small_config()
        assert isinstance(make_agent("dqn", cfg, 0), DqnAgent)
        assert isinstance(make_agent("dcpi", cfg, 0), ConservativeAgent)
        with pytest.raises(ValueError):
            make_agent("sarsa", cfg, 0)
