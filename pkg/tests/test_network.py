"""Network math: forward chain, softmax head, backprop vs finite differences,
serialization round-trips."""

import json

import numpy as np
import pytest

from safenav.network import (GradientTape, NetworkFormatError, PolicyNetwork,
                             backprop, cross_entropy_loss,
                             distribution_entropy, greedy_action, load_network,
                             log_policy_distribution, mse_loss,
                             network_to_dict, policy_distribution,
                             sample_action, save_network, select_action,
                             sum_logits_loss, validate_policy_shape)


def reference_forward(net, x):
    """Independent straight-line re-evaluation: explicit per-neuron loops."""
    h = [float(v) for v in x]
    for spec, w, b in zip(net.layer_specs, net.weights, net.biases):
        out = []
        for k in range(spec.out_width):
            acc = float(b[k])
            for m in range(spec.in_width):
                acc += float(w[k, m]) * h[m]
            if spec.activation == "relu" and acc < 0.0:
                acc = 0.0
            out.append(acc)
        h = out
    return np.array(h)


def finite_difference_grads(net, loss_fn, X, h=1e-5):
    g = np.zeros(net.n_params)
    for i in range(net.n_params):
        orig = net.params[i]
        net.params[i] = orig + h
        up, _ = loss_fn(net.forward_batch(X))
        net.params[i] = orig - h
        down, _ = loss_fn(net.forward_batch(X))
        net.params[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return g


class TestForward:
    def test_zero_network_outputs_zero(self):
        net = PolicyNetwork((16, 8, 5), seed=None)
        obs = np.linspace(0.0, 1.0, 16)
        assert np.array_equal(net.forward(obs), np.zeros(5))

    def test_affine_selection_rows(self):
        # single identity layer, row k = e_k: logits mirror the first 5 inputs
        w = np.zeros((5, 16))
        for k in range(5):
            w[k, k] = 1.0
        net = PolicyNetwork.from_arrays([w], [np.zeros(5)])
        obs = np.full(16, 0.3)
        obs[2] = 0.9
        assert greedy_action(net.forward(obs)) == 2

    def test_matches_independent_reference(self):
        net = PolicyNetwork((16, 32, 32, 5), seed=123)
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.random(16)
            got = net.forward(x)
            want = reference_forward(net, x)
            rel = np.abs(got - want) / np.maximum(np.abs(want), 1e-12)
            assert rel.max() < 1e-12

    def test_determinism_bitwise(self):
        net = PolicyNetwork((16, 32, 32, 5), seed=7)
        x = np.random.default_rng(1).random(16)
        a = net.forward(x)
        b = net.forward(x.copy())
        assert np.array_equal(a, b)

    def test_dimension_mismatch_is_hard_error(self):
        net = PolicyNetwork((16, 8, 5), seed=0)
        with pytest.raises(ValueError):
            net.forward(np.zeros(15))
        with pytest.raises(ValueError):
            net.forward_batch(np.zeros((4, 17)))

    def test_nonfinite_input_rejected(self):
        net = PolicyNetwork((16, 8, 5), seed=0)
        bad = np.zeros(16)
        bad[3] = np.nan
        with pytest.raises(ValueError):
            net.forward(bad)

    def test_piecewise_linearity_away_from_kinks(self):
        # where no pre-activation crosses 0, the map is affine along any ray
        net = PolicyNetwork((16, 32, 32, 5), seed=5)
        rng = np.random.default_rng(3)
        checked = 0
        while checked < 5:
            x = rng.random(16)
            _, (_, pre) = net.forward_cached(x[None, :])
            margin = min(np.abs(p).min() for p in pre[:-1])
            if margin < 1e-3:
                continue
            d = rng.standard_normal(16)
            d /= np.linalg.norm(d)
            alpha = min(1e-4, margin / 100.0)
            f0 = net.forward(x)
            f1 = net.forward(x + alpha * d)
            f2 = net.forward(x + 2.0 * alpha * d)
            assert np.allclose(f2 - f1, f1 - f0, atol=1e-9)
            checked += 1


class TestPolicyHead:
    def test_uniform(self):
        p = policy_distribution(np.zeros(5))
        assert np.allclose(p, 0.2, atol=1e-12)
        assert abs(p.sum() - 1.0) < 1e-12

    def test_saturation_no_overflow(self):
        p = policy_distribution(np.array([1000.0, 0, 0, 0, 0]))
        assert np.isfinite(p).all()
        assert abs(p[0] - 1.0) < 1e-12

    def test_closed_form_ln2(self):
        p = policy_distribution(np.array([np.log(2.0), 0, 0, 0, 0]))
        want = np.array([2, 1, 1, 1, 1]) / 6.0
        assert np.abs(p - want).max() < 1e-12

    def test_greedy_tie_breaks_to_lowest_index(self):
        assert select_action(np.array([3.0, 3.0, 1.0, 1.0, 1.0])) == 0
        assert select_action(np.array([0.0, 5.0, 0.0, 0.0, 0.0])) == 1

    def test_sampling_frequencies(self):
        rng = np.random.default_rng(11)
        logits = np.zeros(5)
        counts = np.zeros(5)
        n = 100_000
        for _ in range(n):
            counts[sample_action(logits, rng)] += 1
        assert np.abs(counts / n - 0.2).max() < 0.005

    def test_entropy_of_uniform(self):
        assert abs(distribution_entropy(np.zeros(5)) - np.log(5.0)) < 1e-12


class TestBackprop:
    def test_zero_loss_gives_zero_grads(self):
        net = PolicyNetwork((16, 8, 5), seed=2)
        X = np.random.default_rng(0).random((3, 16))
        _, cache = net.forward_cached(X)
        tape = GradientTape(net)
        backprop(net, cache, np.zeros((3, 5)), tape)
        assert np.array_equal(tape.grads, np.zeros(net.n_params))

    @pytest.mark.parametrize("loss_name", ["sum", "xent", "mse_like"])
    def test_gradients_match_finite_differences(self, loss_name):
        net = PolicyNetwork((16, 8, 5), seed=3)
        rng = np.random.default_rng(4)
        X = rng.random((4, 16))
        labels = np.array([1, 2, 0, 4])
        target = rng.random((4, 5))
        loss_fn = {
            "sum": sum_logits_loss,
            "xent": lambda L: cross_entropy_loss(L, labels),
            "mse_like": lambda L: mse_loss(L, target),
        }[loss_name]
        logits, cache = net.forward_cached(X)
        _, grad_logits = loss_fn(logits)
        tape = GradientTape(net)
        backprop(net, cache, grad_logits, tape)
        fd = finite_difference_grads(net, loss_fn, X)
        rel = np.abs(tape.grads - fd) / np.maximum(np.abs(fd), 1e-8)
        assert (rel < 1e-4).mean() >= 0.99
        assert rel.max() < 1e-2

    def test_accumulation(self):
        net = PolicyNetwork((16, 8, 5), seed=3)
        X = np.random.default_rng(4).random((2, 16))
        logits, cache = net.forward_cached(X)
        tape = GradientTape(net)
        backprop(net, cache, np.ones_like(logits), tape)
        once = tape.grads.copy()
        backprop(net, cache, np.ones_like(logits), tape)
        assert np.allclose(tape.grads, 2.0 * once)

    def test_stale_cache_rejected(self):
        net = PolicyNetwork((16, 8, 5), seed=3)
        other = PolicyNetwork((16, 4, 4, 5), seed=3)
        X = np.zeros((1, 16))
        _, cache = net.forward_cached(X)
        with pytest.raises(ValueError):
            backprop(other, cache, np.zeros((1, 5)), GradientTape(other))

    def test_input_gradient(self):
        net = PolicyNetwork((16, 8, 5), seed=6)
        x = np.random.default_rng(7).random(16)
        logits, cache = net.forward_cached(x[None, :])
        g = backprop(net, cache, np.ones((1, 5)))
        h = 1e-6
        for i in (0, 7, 15):
            xp = x.copy()
            xp[i] += h
            xm = x.copy()
            xm[i] -= h
            fd = (net.forward(xp).sum() - net.forward(xm).sum()) / (2 * h)
            assert abs(g[0, i] - fd) < 1e-5

    def test_clip_global_norm(self):
        net = PolicyNetwork((16, 8, 5), seed=1)
        tape = GradientTape(net)
        tape.grads[...] = 1.0
        tape.clip_global_norm(0.5)
        assert abs(tape.global_norm() - 0.5) < 1e-12


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        net = PolicyNetwork((16, 32, 32, 5), seed=42)
        net.metadata = {"seed": 42, "method": "ppo", "episodes": 600}
        path = tmp_path / "net.json"
        save_network(net, path)
        loaded = load_network(path)
        assert loaded.metadata == net.metadata
        rng = np.random.default_rng(5)
        for _ in range(100):
            x = rng.random(16)
            assert np.array_equal(net.forward(x), loaded.forward(x))

    def test_truncated_weights_name_layer(self, tmp_path):
        net = PolicyNetwork((16, 8, 5), seed=0)
        doc = network_to_dict(net)
        doc["weights"][1] = doc["weights"][1][:-3]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(NetworkFormatError, match=r"layers\[1\]"):
            load_network(path)

    def test_version_mismatch(self, tmp_path):
        net = PolicyNetwork((16, 8, 5), seed=0)
        doc = network_to_dict(net)
        doc["version"] = 2
        path = tmp_path / "v2.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(NetworkFormatError, match="version"):
            load_network(path)

    def test_missing_field_named(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"version": 1, "layers": []}))
        with pytest.raises(NetworkFormatError, match="'weights'"):
            load_network(path)

    def test_not_json(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text("{nope")
        with pytest.raises(NetworkFormatError, match="JSON"):
            load_network(path)

    def test_docs_fixture_matches_hand_computation(self):
        # docs/example_network.json: 16-2-5 net evaluated at all-0.5 input.
        # hidden pre-activations: 16*0.125*0.5 - 0.5 = 0.5 and
        # 8*0.25*0.5 - 8*0.25*0.5 + 0.1 = 0.1; output combines (0.5, 0.1):
        #   z = (0.5, 0.15, 0.4, -0.2, 0.15)
        import os
        here = os.path.dirname(__file__)
        net = load_network(os.path.join(here, "..", "docs",
                                        "example_network.json"))
        got = net.forward(np.full(16, 0.5))
        want = np.array([0.5, 0.15, 0.4, -0.2, 0.15])
        assert np.abs(got - want).max() < 1e-12
        assert greedy_action(got) == 0

    def test_validate_policy_shape(self):
        validate_policy_shape(PolicyNetwork((16, 8, 5), seed=0))
        with pytest.raises(ValueError):
            validate_policy_shape(PolicyNetwork((16, 8, 1), seed=0))


class TestConstruction:
    def test_initialization_bounds(self):
        net = PolicyNetwork((16, 32, 32, 5), seed=9)
        for spec, w in zip(net.layer_specs, net.weights):
            limit = np.sqrt(6.0 / (spec.in_width + spec.out_width))
            assert np.abs(w).max() <= limit
            assert np.abs(w).max() > 0.5 * limit   # actually filled
        for b in net.biases:
            assert np.array_equal(b, np.zeros_like(b))

    def test_same_seed_same_weights(self):
        a = PolicyNetwork((16, 32, 32, 5), seed=11)
        b = PolicyNetwork((16, 32, 32, 5), seed=11)
        assert np.array_equal(a.params, b.params)

    def test_copy_is_independent(self):
        a = PolicyNetwork((16, 8, 5), seed=1)
        b = a.copy()
        b.params[...] += 1.0
        assert not np.array_equal(a.params, b.params)

    def test_width_chain_enforced(self):
        with pytest.raises(ValueError):
            PolicyNetwork.from_arrays(
                [np.zeros((8, 16)), np.zeros((5, 7))],
                [np.zeros(8), np.zeros(5)])

    def test_weights_are_views_of_flat_params(self):
        net = PolicyNetwork((16, 8, 5), seed=1)
        net.params[...] = 0.0
        net.weights[0][0, 0] = 3.5
        assert net.params[0] == 3.5

    def test_log_distribution_consistency(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((6, 5)) * 3
        assert np.allclose(np.exp(log_policy_distribution(logits)),
                           policy_distribution(logits), atol=1e-12)
