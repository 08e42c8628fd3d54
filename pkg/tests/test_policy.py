"""Schedule encoder, policy heads, actor-critic losses, checkpoints, and
trainer mechanics."""
import math

import numpy as np
import pytest

from conftest import G, I, U, UG, toy_scenario
from obsched import autograd as ag
from obsched.policy import (
    CheckpointError,
    PolicyConfig,
    PolicyNet,
    TrainConfig,
    discounted_returns,
    learning_rate_at,
    load_checkpoint,
    losses,
    region_distribution,
    replay_losses,
    save_checkpoint,
)
from obsched.rewriter import SearchConfig, TrajectoryStep, RewriteAction, rewrite_search
from obsched.schedule import Assignment, build_dag

CFG = PolicyConfig(hidden=8, n_filters=3, n_sites=1)


def build(scenario, triples):
    return build_dag(scenario, [Assignment(t, s, b) for t, s, b in triples])


def _scalar_lstm(wx, wh, b, x, h_in, c_in):
    """Loop-and-math.exp reimplementation of one LSTM step (the oracle)."""
    hsz = len(h_in)
    z = [
        sum(wx[r][k] * x[k] for k in range(len(x)))
        + sum(wh[r][k] * h_in[k] for k in range(hsz))
        + b[r]
        for r in range(4 * hsz)
    ]
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    i = [sig(z[r]) for r in range(hsz)]
    f = [sig(z[hsz + r]) for r in range(hsz)]
    o = [sig(z[2 * hsz + r]) for r in range(hsz)]
    g = [math.tanh(z[3 * hsz + r]) for r in range(hsz)]
    c = [f[r] * c_in[r] + i[r] * g[r] for r in range(hsz)]
    h = [o[r] * math.tanh(c[r]) for r in range(hsz)]
    return h, c


class TestEncoder:
    def test_root_state_depends_only_on_biases(self):
        s = toy_scenario([(0, 5, U)])
        dag = build(s, [(0, 0, 0)])
        cfg = PolicyConfig(hidden=2, n_filters=3, n_sites=1)
        net = PolicyNet(cfg, seed=1)
        states = net.encode(dag)
        wx = net.params["enc_wx"].value
        wh = net.params["enc_wh"].value
        b = net.params["enc_b"].value
        h, c = _scalar_lstm(wx, wh, b, [0.0] * cfg.d_in, [0.0, 0.0], [0.0, 0.0])
        assert np.allclose(states[0].value, np.array(h + c))

    def test_diamond_parent_sum_against_scalar_oracle(self):
        # two tasks finish together at step 5; the third starts there and has
        # both as parents, so its input state is the elementwise sum
        s = toy_scenario([(0, 5, U), (0, 5, G), (0, 4, I)])
        dag = build(s, [(0, 0, 0), (1, 0, 0), (2, 0, 5)])
        n2 = dag.node_of_task[2]
        assert set(dag.parents[n2]) == {dag.node_of_task[0], dag.node_of_task[1]}

        cfg = PolicyConfig(hidden=2, n_filters=3, n_sites=1)
        net = PolicyNet(cfg, seed=3)
        states = net.encode(dag)
        from obsched.schedule import embedding_matrix

        emb = embedding_matrix(dag, e_max=cfg.e_max)
        wx = net.params["enc_wx"].value
        wh = net.params["enc_wh"].value
        b = net.params["enc_b"].value

        def node_state(x, parents):
            h_in = [sum(p[0][r] for p in parents) for r in range(2)] if parents else [0.0, 0.0]
            c_in = [sum(p[1][r] for p in parents) for r in range(2)] if parents else [0.0, 0.0]
            return _scalar_lstm(wx, wh, b, list(x), h_in, c_in)

        root = node_state(emb[0], [])
        h0c0 = node_state(emb[dag.node_of_task[0]], [root])
        h1c1 = node_state(emb[dag.node_of_task[1]], [root])
        h2c2 = node_state(emb[n2], [h0c0, h1c1])
        assert np.allclose(states[n2].value, np.array(h2c2[0] + h2c2[1]), atol=1e-12)

    def test_parent_order_invariance(self):
        s = toy_scenario([(0, 5, U), (0, 5, G), (0, 4, I)])
        dag = build(s, [(0, 0, 0), (1, 0, 0), (2, 0, 5)])
        net = PolicyNet(CFG, seed=0)
        a = net.encode(dag)
        hacked_parents = tuple(
            tuple(reversed(p)) for p in dag.parents
        )
        from obsched.schedule import ScheduleDag

        dag2 = ScheduleDag(dag.ctx, dag.rows, dag.site, dag.start, dag.eta, hacked_parents, dag.profile)
        b = net.encode(dag2)
        for x, y in zip(a, b):
            assert np.allclose(x.value, y.value)

    def test_cycle_raises(self):
        s = toy_scenario([(0, 5, U), (0, 5, G)])
        dag = build(s, [(0, 0, 0), (1, 0, 0)])
        from obsched.schedule import ScheduleDag

        parents = list(dag.parents)
        parents[1] = (2,)
        parents[2] = (1,)
        dag2 = ScheduleDag(dag.ctx, dag.rows, dag.site, dag.start, dag.eta, tuple(parents), dag.profile)
        net = PolicyNet(CFG, seed=0)
        with pytest.raises(ValueError):
            net.encode(dag2)

    def test_parameters_initialized_in_range(self):
        net = PolicyNet(CFG, seed=9)
        for p in net.params.values():
            assert np.all(np.abs(p.value) <= 0.1)


class TestDistributions:
    def test_softmax_of_equal_scores_is_uniform(self):
        p = region_distribution(np.zeros(7))
        assert np.allclose(p, 1 / 7)

    def test_single_candidate(self):
        assert region_distribution(np.array([3.3])) == pytest.approx([1.0])

    def test_two_score_case(self):
        p = region_distribution(np.array([1.0, 2.0]))
        assert p[0] == pytest.approx(0.2689, abs=1e-4)
        assert p[1] == pytest.approx(0.7311, abs=1e-4)

    def test_shift_invariance(self):
        q = np.array([0.3, -1.0, 2.2, 0.0])
        assert np.allclose(region_distribution(q), region_distribution(q + 123.4))

    def test_rule_distribution_uniform_for_identical_candidates(self):
        s = toy_scenario([(0, 5, U), (5, 5, U)])
        dag = build(s, [(0, 0, 0), (1, 0, 5)])
        net = PolicyNet(CFG, seed=0)
        logits = net.rule_scores(dag, 1, [("root", 0), ("root", 0), ("root", 0)])
        p = np.exp(logits.value - np.max(logits.value))
        p /= p.sum()
        assert np.allclose(p, 1 / 3)

    def test_pick_rule_single_candidate_is_certain(self):
        s = toy_scenario([(0, 5, U), (5, 5, U)])
        dag = build(s, [(0, 0, 0), (1, 0, 5)])
        net = PolicyNet(CFG, seed=0)
        choice, info = net.pick_rule(dag, 1, [("root", 0)], np.random.default_rng(0))
        assert choice == ("root", 0)
        assert np.exp(info["logp_all"].value[0]) == pytest.approx(1.0)


def _stub_step(dag, reward, q, logits, q_idx=0, u_idx=0):
    return TrajectoryStep(
        step=0,
        dag=dag,
        action=RewriteAction(region=dag.task_ids[0], parent_task=None, parent_site=0),
        reward=reward,
        cost_before=0.0,
        cost_after=0.0,
        status="applied",
        region_candidates=list(dag.task_ids),
        rule_candidates=[("root", 0)],
        region_info={"q_all": ag.Tensor.param(np.asarray(q, dtype=float)), "index": q_idx},
        rule_info={"logp_all": ag.log_softmax(ag.Tensor.param(np.asarray(logits, dtype=float))), "index": u_idx},
    )


class TestLosses:
    def _dag(self):
        s = toy_scenario([(0, 5, U)])
        return build(s, [(0, 0, 0)])

    def test_perfect_critic_gives_zero_loss(self):
        dag = self._dag()
        traj = [_stub_step(dag, reward=2.0, q=[2.0], logits=[0.0])]
        lw, lu, total = losses(traj, TrainConfig())
        assert float(lw.value) == pytest.approx(0.0)
        assert float(lu.value) == pytest.approx(0.0)
        assert float(total.value) == pytest.approx(0.0)

    def test_two_step_hand_computed_case(self):
        # rewards (1,1), gamma 0.9, Q=(0,0): G=(1.9,1.0), L_w=(1.9^2+1)/2
        dag = self._dag()
        traj = [
            _stub_step(dag, reward=1.0, q=[0.0], logits=[0.0]),
            _stub_step(dag, reward=1.0, q=[0.0], logits=[0.0]),
        ]
        lw, lu, total = losses(traj, TrainConfig(gamma=0.9))
        assert float(lw.value) == pytest.approx(2.305)
        assert float(total.value) == pytest.approx(float(lu.value) + 10.0 * 2.305)

    def test_zero_rewards_zero_critic(self):
        dag = self._dag()
        traj = [_stub_step(dag, reward=0.0, q=[0.0], logits=[0.5])] * 3
        lw, lu, total = losses(traj, TrainConfig())
        assert float(lw.value) == 0.0
        assert float(lu.value) == 0.0

    def test_gamma_zero_reduces_returns_to_rewards(self):
        r = np.array([3.0, -1.0, 2.0])
        assert np.allclose(discounted_returns(r, 0.0), r)

    def test_empty_trajectory_rejected(self):
        with pytest.raises(ValueError):
            losses([], TrainConfig())

    def test_advantage_is_detached_from_rule_loss(self):
        # the rule-loss gradient w.r.t. Q parameters must vanish when the
        # log-likelihood path does not touch them
        dag = self._dag()
        q = ag.Tensor.param(np.array([0.7]))
        step = _stub_step(dag, reward=1.0, q=[0.0], logits=[0.1, -0.2])
        step.region_info = {"q_all": q, "index": 0}
        _, lu, _ = losses([step], TrainConfig())
        ag.backward(lu)
        assert q.grad is None or np.all(q.grad == 0.0)


class TestGradientPipeline:
    def test_full_pipeline_matches_finite_differences(self):
        from obsched.heuristics import TaskRule, schedule_online_heuristic
        from obsched.scenario import GenConfig, generate_scenario
        from obsched.schedule import SchedulingContext

        gen = GenConfig(horizon_steps=60, arrival_prob=0.25, mode_exposure_count_frac=0.0)
        s = generate_scenario(gen, 12)
        ctx = SchedulingContext.for_scenario(s)
        dag0, _ = schedule_online_heuristic(s, TaskRule.FCFS, None, ctx=ctx)
        assert len(dag0.rows) >= 2

        net = PolicyNet(CFG, seed=0)
        tc = TrainConfig(episode_len=8)
        _, traj = rewrite_search(
            dag0, net, SearchConfig(num_steps=8), np.random.default_rng(0), pc=0.5
        )
        g_ret = discounted_returns(np.array([t.reward for t in traj]), tc.gamma)
        q0 = np.array(
            [
                float(
                    ag.gather1(
                        net.region_scores(t.dag, t.region_candidates), t.region_info["index"]
                    ).value
                )
                for t in traj
            ]
        )
        delta0 = g_ret - q0

        net.zero_grad()
        net._cache = None
        _, _, total = replay_losses(net, traj, tc, delta=delta0)
        ag.backward(total)
        flat = net.flat()
        grad = net.grad_flat()

        def f(v):
            n2 = PolicyNet(CFG, init=False)
            n2.set_flat(v)
            _, _, l2 = replay_losses(n2, traj, tc, delta=delta0)
            return float(l2.value)

        rng = np.random.default_rng(5)
        for i in rng.choice(flat.size, 50, replace=False):
            e = np.zeros_like(flat)
            e[i] = 1e-5
            num = (f(flat + e) - f(flat - e)) / 2e-5
            a = grad[i]
            assert abs(num - a) < 1e-4 * max(1.0, abs(num), abs(a))


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path):
        net = PolicyNet(CFG, seed=4)
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, path, train_step=17)
        loaded, step = load_checkpoint(path)
        assert step == 17
        assert loaded.config == CFG
        assert np.array_equal(loaded.flat(), net.flat())

    def test_truncated_file_rejected(self, tmp_path):
        net = PolicyNet(CFG, seed=4)
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 100])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_dimension_mismatch_rejected(self, tmp_path):
        net = PolicyNet(CFG, seed=4)
        path = tmp_path / "m.ckpt"
        save_checkpoint(net, path)
        with pytest.raises(CheckpointError, match="mismatch"):
            load_checkpoint(path, config=PolicyConfig(hidden=16, n_filters=3, n_sites=1))

    def test_garbage_header_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"\x00\x01\x02 not json\n\x00" * 10)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestTrainerMechanics:
    def test_learning_rate_schedule(self):
        tc = TrainConfig()
        assert learning_rate_at(tc, 0) == pytest.approx(1e-4)
        assert learning_rate_at(tc, 2500) == pytest.approx(1e-4 * 0.9**2)
        assert learning_rate_at(tc, 999) == pytest.approx(1e-4)

    def test_single_worker_training_is_reproducible(self):
        from obsched.scenario import GenConfig
        from obsched.policy import train

        gen = GenConfig(horizon_steps=60, arrival_prob=0.25, mode_exposure_count_frac=0.0)
        tc = TrainConfig(batch=2, episode_len=5, steps=2)
        sc = SearchConfig(num_steps=10)
        n1, _ = train(gen, tc, sc, CFG, seed=11, workers=1, val_every=100, val_instances=1)
        n2, _ = train(gen, tc, sc, CFG, seed=11, workers=1, val_every=100, val_instances=1)
        assert np.array_equal(n1.flat(), n2.flat())
