import itertools
import math

import numpy as np
import pytest

from rlqls.env import EnvConfig, QlsEnv
from rlqls.errors import ContractViolation, TrainingError
from rlqls.policy import (
    NetParams,
    OptimizerConfig,
    PolicyOutput,
    backward,
    encode,
    feature_dim,
    flatten_params,
    forward,
    forward_batch,
    greedy_action,
    init_optimizer,
    init_params,
    load_checkpoint,
    log_prob_of,
    num_params,
    optimizer_step,
    sample_action,
    save_checkpoint,
    unflatten_params,
)
from rlqls.seeding import substream

from conftest import seeded_problem


def zero_params(input_dim, n_actions, hidden=(4,)):
    template = init_params(input_dim, n_actions, hidden, substream(0, "zp"))
    return unflatten_params(np.zeros(num_params(template)), template)


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


class TestEncode:
    def test_length_for_n4(self):
        p = seeded_problem(4, annotate=True)
        env = QlsEnv(p, EnvConfig(m=2))
        state = env.reset(substream(0, "e"))
        assert encode(state).size == 6 + 4 + 8
        assert feature_dim(4) == 18

    def test_previous_config_occupies_tail(self):
        from dataclasses import replace

        p = seeded_problem(5, annotate=True)
        env = QlsEnv(p, EnvConfig(m=2))
        state = env.reset(substream(1, "e"))
        other = replace(state, previous_config=-state.previous_config)
        a, b = encode(state), encode(other)
        n = 5
        assert np.array_equal(a[:-n], b[:-n])
        assert not np.array_equal(a[-n:], b[-n:])

    def test_injective_on_config_pairs(self):
        from dataclasses import replace

        p = seeded_problem(6, annotate=True)
        env = QlsEnv(p, EnvConfig(m=2))
        base = env.reset(substream(2, "e"))
        rng = substream(3, "e")
        seen = set()
        for _ in range(1000):
            cur = rng.integers(0, 2, 6) * 2.0 - 1.0
            prev = rng.integers(0, 2, 6) * 2.0 - 1.0
            state = replace(base, current_config=cur, previous_config=prev)
            seen.add(encode(state).tobytes())
        # 2^6 x 2^6 = 4096 possible pairs; 1000 draws collide as pairs, never as encodings
        pairs = set()
        rng = substream(3, "e")
        for _ in range(1000):
            cur = rng.integers(0, 2, 6) * 2.0 - 1.0
            prev = rng.integers(0, 2, 6) * 2.0 - 1.0
            pairs.add((cur.tobytes(), prev.tobytes()))
        assert len(seen) == len(pairs)


class TestForward:
    def test_zero_net_outputs_zero(self):
        params = zero_params(5, 3)
        out = forward(params, np.ones(5))
        assert np.all(out.logits == 0.0)
        assert out.value == 0.0

    def test_value_head_separation(self):
        from dataclasses import replace

        params = init_params(6, 4, (8,), substream(4, "f"))
        x = substream(5, "f").normal(size=6)
        base = forward(params, x)
        doubled = replace(params, value_w=2 * params.value_w, value_b=2 * params.value_b)
        out = forward(doubled, x)
        assert out.value == pytest.approx(2 * base.value, rel=1e-12)
        assert np.array_equal(out.logits, base.logits)

    def test_hand_computed_tiny_net(self):
        w1 = np.array([[0.5, -0.2, 0.1], [0.3, 0.4, -0.6]])
        b1 = np.array([0.05, -0.1, 0.2])
        wp = np.array([[1.0, -1.0], [0.5, 0.25], [-0.75, 0.6]])
        bp = np.array([0.01, -0.02])
        wv = np.array([0.2, -0.3, 0.4])
        params = NetParams(
            trunk_w=(w1,), trunk_b=(b1,), policy_w=wp, policy_b=bp,
            value_w=wv, value_b=0.15,
        )
        x = np.array([0.7, -1.3])
        h = np.tanh(np.array([
            0.7 * 0.5 + (-1.3) * 0.3 + 0.05,
            0.7 * -0.2 + (-1.3) * 0.4 + (-0.1),
            0.7 * 0.1 + (-1.3) * -0.6 + 0.2,
        ]))
        logits = np.array([
            h[0] * 1.0 + h[1] * 0.5 + h[2] * -0.75 + 0.01,
            h[0] * -1.0 + h[1] * 0.25 + h[2] * 0.6 - 0.02,
        ])
        value = h[0] * 0.2 + h[1] * -0.3 + h[2] * 0.4 + 0.15
        out = forward(params, x)
        assert np.allclose(out.logits, logits, atol=1e-14)
        assert out.value == pytest.approx(value, abs=1e-14)

    def test_batch_matches_single(self):
        params = init_params(7, 5, (8, 4), substream(6, "f"))
        X = substream(7, "f").normal(size=(9, 7))
        logits, values = forward_batch(params, X)
        for k in range(9):
            single = forward(params, X[k])
            assert np.allclose(single.logits, logits[k], atol=1e-12)
            assert single.value == pytest.approx(values[k], abs=1e-12)

    def test_purity(self):
        params = init_params(6, 4, (8,), substream(8, "f"))
        x = substream(9, "f").normal(size=6)
        a = forward(params, x)
        b = forward(params, x)
        assert a.logits.tobytes() == b.logits.tobytes()
        assert a.value == b.value

    def test_shape_mismatch(self):
        params = zero_params(5, 3)
        with pytest.raises(ContractViolation):
            forward(params, np.ones(4))


class TestSampleAction:
    def test_uniform_single_draw(self):
        out = PolicyOutput(logits=np.zeros(8), value=0.0)
        rng = substream(10, "s")
        counts = np.zeros(8)
        draws = 40_000
        for _ in range(draws):
            action, lp = sample_action(out, 1, rng)
            counts[action[0]] += 1
            assert lp == pytest.approx(-math.log(8), abs=1e-12)
        assert np.all(np.abs(counts / draws - 1 / 8) < 0.01)

    def test_saturated_logit_dominates(self):
        logits = np.zeros(8)
        logits[3] = 1000.0
        out = PolicyOutput(logits=logits, value=0.0)
        rng = substream(11, "s")
        for _ in range(200):
            action, _ = sample_action(out, 1, rng)
            assert action[0] == 3

    def test_ordered_pair_frequencies_match_analytic(self):
        logits = np.array([0.4, -0.8, 1.1, 0.0, -0.3])
        out = PolicyOutput(logits=logits, value=0.0)
        probs = {}
        p1 = softmax(logits)
        for q1 in range(5):
            masked = logits.copy()
            rest = [q for q in range(5) if q != q1]
            p2 = softmax(masked[rest])
            for pos, q2 in enumerate(rest):
                probs[(q1, q2)] = p1[q1] * p2[pos]
        assert sum(probs.values()) == pytest.approx(1.0, abs=1e-12)

        rng = substream(12, "s")
        draws = 300_000
        counts = {pair: 0 for pair in probs}
        for _ in range(draws):
            action, _ = sample_action(out, 2, rng)
            counts[action] += 1
        for pair, p in probs.items():
            se = math.sqrt(p * (1 - p) / draws)
            assert abs(counts[pair] / draws - p) < 3 * se + 1e-12, pair

    def test_no_duplicates_fuzz(self):
        rng = substream(13, "s")
        for _ in range(20_000):
            logits = rng.normal(size=6) * 3
            out = PolicyOutput(logits=logits, value=0.0)
            action, _ = sample_action(out, 3, rng)
            assert len(set(action)) == 3

    def test_m_exceeds_n(self):
        out = PolicyOutput(logits=np.zeros(3), value=0.0)
        with pytest.raises(ContractViolation):
            sample_action(out, 4, substream(0, "s"))

    def test_greedy_action(self):
        logits = np.array([0.1, 2.0, -1.0, 1.5])
        out = PolicyOutput(logits=logits, value=0.0)
        action, lp = greedy_action(out, 2)
        assert action == (1, 3)
        assert lp == pytest.approx(log_prob_of(out, (1, 3)), abs=1e-15)


class TestLogProbOf:
    def test_round_trip_exact(self):
        rng = substream(14, "lp")
        for _ in range(300):
            logits = rng.normal(size=7) * 2
            out = PolicyOutput(logits=logits, value=0.0)
            action, lp = sample_action(out, 3, rng)
            assert log_prob_of(out, action) == lp

    def test_uniform_closed_form(self):
        out = PolicyOutput(logits=np.zeros(32), value=0.0)
        lp = log_prob_of(out, (4, 8, 15, 16, 23))
        assert lp == pytest.approx(-math.log(32 * 31 * 30 * 29 * 28), abs=1e-10)

    def test_total_probability_n5_m2(self):
        logits = substream(15, "lp").normal(size=5)
        out = PolicyOutput(logits=logits, value=0.0)
        total = sum(
            math.exp(log_prob_of(out, pair))
            for pair in itertools.permutations(range(5), 2)
        )
        assert abs(total - 1.0) <= 1e-9

    @pytest.mark.parametrize("n,m", [(4, 1), (5, 2), (6, 3)])
    def test_total_probability_exhaustive(self, n, m):
        logits = substream(16, "lp").normal(size=n) * 1.5
        out = PolicyOutput(logits=logits, value=0.0)
        total = sum(
            math.exp(log_prob_of(out, tup))
            for tup in itertools.permutations(range(n), m)
        )
        assert abs(total - 1.0) <= 1e-9

    def test_duplicate_rejected(self):
        out = PolicyOutput(logits=np.zeros(5), value=0.0)
        with pytest.raises(ContractViolation):
            log_prob_of(out, (2, 2))


class TestBackward:
    def test_zero_coefficients_zero_gradient(self):
        params = init_params(6, 4, (8,), substream(17, "b"))
        x = substream(18, "b").normal(size=6)
        grad = backward(params, x, (1, 2), c_pg=0.0, c_v=0.0)
        assert np.all(grad == 0.0)

    def test_head_separation(self):
        params = init_params(6, 4, (8,), substream(19, "b"))
        x = substream(20, "b").normal(size=6)
        only_policy = unflatten_params(
            backward(params, x, (0, 3), c_pg=1.0, c_v=0.0), params
        )
        assert np.all(only_policy.value_w == 0.0)
        assert only_policy.value_b == 0.0
        only_value = unflatten_params(
            backward(params, x, (0, 3), c_pg=0.0, c_v=1.0), params
        )
        assert np.all(only_value.policy_w == 0.0)
        assert np.all(only_value.policy_b == 0.0)

    def test_finite_differences_10_input_8_hidden(self):
        params = init_params(10, 6, (8,), substream(21, "b"))
        x = substream(22, "b").normal(size=10)
        action = (2, 5, 0)
        c_pg, c_v = 0.7, -1.3

        def objective(flat):
            p = unflatten_params(flat, params)
            out = forward(p, x)
            return c_pg * log_prob_of(out, action) + c_v * out.value

        grad = backward(params, x, action, c_pg=c_pg, c_v=c_v)
        flat = flatten_params(params)
        eps = 1e-5
        fd = np.zeros_like(flat)
        for k in range(flat.size):
            up, down = flat.copy(), flat.copy()
            up[k] += eps
            down[k] -= eps
            fd[k] = (objective(up) - objective(down)) / (2 * eps)
        rel = np.abs(grad - fd) / np.maximum.reduce(
            [np.abs(grad), np.abs(fd), np.full_like(fd, 1e-6)]
        )
        assert rel.max() <= 1e-4


class TestOptimizer:
    def test_zero_gradient_keeps_params(self):
        params = init_params(4, 3, (5,), substream(23, "o"))
        state = init_optimizer(params)
        state.accumulator[:] = 0.25
        new_params, new_state = optimizer_step(
            params, np.zeros(num_params(params)), state, OptimizerConfig()
        )
        assert np.array_equal(flatten_params(new_params), flatten_params(params))
        assert np.allclose(new_state.accumulator, 0.99 * 0.25)

    def test_single_step_closed_form(self):
        params = zero_params(3, 2, hidden=(2,))
        state = init_optimizer(params)
        g = np.linspace(-1.0, 1.0, num_params(params))
        hyper = OptimizerConfig(learning_rate=0.1, decay=0.9, eps=1e-5)
        new_params, new_state = optimizer_step(params, g, state, hyper)
        expected = -0.1 * g / np.sqrt(0.1 * g**2 + 1e-5)
        assert np.allclose(flatten_params(new_params), expected, atol=1e-15)
        assert np.allclose(new_state.accumulator, 0.1 * g**2)

    def test_converges_on_convex_quadratic(self):
        # 5-variable quadratic (last coordinate frozen by a zero eigenvalue)
        template = init_params(1, 1, (1,), substream(24, "o"))
        assert num_params(template) == 6
        A = np.diag([0.6, 0.9, 1.2, 1.6, 2.1, 0.0])
        x_star = np.array([0.3, -0.5, 0.8, -0.2, 0.6, 0.0])
        params = unflatten_params(np.zeros(6), template)
        state = init_optimizer(params)
        hyper = OptimizerConfig(learning_rate=0.02)
        for _ in range(100):
            g = A @ (flatten_params(params) - x_star)
            params, state = optimizer_step(params, g, state, hyper)
        final_grad = A @ (flatten_params(params) - x_star)
        assert np.linalg.norm(final_grad) < 1e-3

    def test_non_finite_gradient_raises(self):
        params = zero_params(3, 2, hidden=(2,))
        g = np.zeros(num_params(params))
        g[0] = np.nan
        with pytest.raises(TrainingError):
            optimizer_step(params, g, init_optimizer(params), OptimizerConfig())


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = init_params(feature_dim(6), 6, (16, 8), substream(25, "c"), version=7)
        path = tmp_path / "ckpt_7.json"
        save_checkpoint(path, params, n=6, m=2)
        loaded, meta = load_checkpoint(path)
        assert np.array_equal(flatten_params(loaded), flatten_params(params))
        assert loaded.version == 7
        assert meta == {"n": 6, "m": 2, "arch": [feature_dim(6), 16, 8], "version": 7}

    def test_header_fields(self, tmp_path):
        import json

        params = init_params(feature_dim(4), 4, (8,), substream(26, "c"), version=3)
        path = tmp_path / "c.json"
        save_checkpoint(path, params, n=4, m=2)
        data = json.loads(path.read_text())
        assert data["arch"] == [feature_dim(4), 8]
        assert data["n"] == 4 and data["m"] == 2 and data["version"] == 3
        assert data["activation"] == "tanh"
        assert len(data["params"]) == num_params(params)
