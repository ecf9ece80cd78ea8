import numpy as np
import pytest

from epg import autodiff as ad
from epg import nets


def make_layout(reward=True):
    return nets.FeatureLayout(obs_dim=2, act_dim=2, reward_observing=reward)


def make_zero_loss(layout, n_buffer):
    shapes = nets.loss_shapes(layout, n_buffer)
    return nets.LossParams(*[np.zeros(s) for s in shapes], n_buffer=n_buffer)


# ---------------------------------------------------------------------------
# policy


def test_policy_zero_final_layer_outputs_bias():
    rng = np.random.default_rng(0)
    p = nets.init_policy(3, 2, (8,), rng)
    p.weights[-1][:] = 0.0
    p.biases[-1][:] = [0.7, -0.2]
    mean, _ = nets.policy_forward(p, rng.uniform(-1, 1, 3))
    assert np.array_equal(mean, [0.7, -0.2])


def test_policy_std_is_exp_log_std_and_state_free():
    p = nets.init_policy(2, 2, (4,), np.random.default_rng(1))
    _, std0 = nets.policy_forward(p, [0.0, 0.0])
    _, std1 = nets.policy_forward(p, [5.0, -3.0])
    assert np.array_equal(std0, np.ones(2))
    assert np.array_equal(std0, std1)


def test_policy_forward_matches_straight_line_oracle():
    rng = np.random.default_rng(2)
    p = nets.init_policy(3, 2, (5, 4), rng)
    s = rng.uniform(-2, 2, 3)
    # independent re-evaluation of the MLP arithmetic
    h = np.tanh(s @ p.weights[0] + p.biases[0])
    h = np.tanh(h @ p.weights[1] + p.biases[1])
    expected = h @ p.weights[2] + p.biases[2]
    mean, _ = nets.policy_forward(p, s)
    assert np.allclose(mean, expected, rtol=0, atol=1e-14)


def test_policy_forward_dimension_check():
    p = nets.init_policy(3, 2, (4,), np.random.default_rng(3))
    with pytest.raises(ValueError):
        nets.policy_forward(p, [1.0, 2.0])


def test_policy_param_count_matches_flat_length():
    p = nets.init_policy(4, 3, (64, 64), np.random.default_rng(4))
    assert p.flat().size == nets.policy_param_count(4, 3, (64, 64))


def test_policy_flatten_roundtrip_bit_exact():
    p = nets.init_policy(3, 2, (6, 5), np.random.default_rng(5))
    flat = p.flat()
    q = nets.PolicyParams.from_flat(flat.copy(), p.shapes())
    assert np.array_equal(q.flat(), flat)
    for a, b in zip(p.to_arrays(), q.to_arrays()):
        assert np.array_equal(a, b)


def test_policy_logprob_standard_normal_values():
    p = nets.init_policy(1, 1, (3,), np.random.default_rng(6))
    p.weights[-1][:] = 0.0
    p.biases[-1][:] = 0.0
    p.log_std[:] = 0.0
    at_mode = nets.policy_logprob(p, [0.3], [0.0])
    assert at_mode == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)
    at_one = nets.policy_logprob(p, [0.3], [1.0])
    assert at_one == pytest.approx(-0.5 - 0.5 * np.log(2 * np.pi), abs=1e-12)


def test_policy_logprob_matches_direct_density():
    from scipy.stats import norm

    rng = np.random.default_rng(7)
    p = nets.init_policy(3, 4, (8,), rng)
    p.log_std[:] = rng.uniform(-1, 0.5, 4)
    for _ in range(10):
        s = rng.uniform(-2, 2, 3)
        a = rng.uniform(-2, 2, 4)
        mean, std = nets.policy_forward(p, s)
        expected = norm.logpdf(a, loc=mean, scale=std).sum()
        assert nets.policy_logprob(p, s, a) == pytest.approx(expected, rel=1e-12)


def test_policy_kl_identical_is_zero():
    p = nets.init_policy(2, 2, (4,), np.random.default_rng(8))
    states = np.random.default_rng(9).uniform(-1, 1, (5, 2))
    assert nets.policy_kl(p, p, states) == 0.0


def test_policy_kl_unit_shift_analytic():
    rng = np.random.default_rng(10)
    before = nets.init_policy(1, 1, (2,), rng)
    after = nets.init_policy(1, 1, (2,), rng)
    for p, bias in ((before, 0.0), (after, 1.0)):
        p.weights[-1][:] = 0.0
        p.biases[-1][:] = bias
        p.log_std[:] = 0.0
    assert nets.policy_kl(before, after, np.zeros((1, 1))) == pytest.approx(0.5)


def test_policy_kl_monte_carlo_oracle():
    rng = np.random.default_rng(11)
    before = nets.init_policy(2, 2, (6,), rng)
    after = nets.init_policy(2, 2, (6,), rng)
    before.log_std[:] = rng.uniform(-0.5, 0.3, 2)
    after.log_std[:] = rng.uniform(-0.5, 0.3, 2)
    state = rng.uniform(-1, 1, 2)
    kl = nets.policy_kl(before, after, state[None, :])
    assert kl >= 0.0

    mu1, std1 = nets.policy_forward(before, state)
    n = 100_000
    x = mu1 + std1 * rng.standard_normal((n, 2))
    lp1 = np.array([nets.policy_logprob(before, state, xi) for xi in x[:2000]])
    lp2 = np.array([nets.policy_logprob(after, state, xi) for xi in x[:2000]])
    diffs = lp1 - lp2
    se = diffs.std(ddof=1) / np.sqrt(len(diffs))
    assert abs(diffs.mean() - kl) < 3 * se + 1e-12


def test_policy_mean_graph_bitwise_matches_batch():
    rng = np.random.default_rng(12)
    p = nets.init_policy(3, 2, (8, 6), rng)
    states = rng.uniform(-2, 2, (7, 3))
    wt = [ad.Tensor(w) for w in p.weights]
    bt = [ad.Tensor(b) for b in p.biases]
    out = nets.policy_mean_graph(wt, bt, states)
    assert np.array_equal(out.data, nets.policy_mean_batch(p, states))


def test_logprob_rows_graph_matches_scalar_logprob():
    rng = np.random.default_rng(13)
    p = nets.init_policy(2, 2, (5,), rng)
    p.log_std[:] = rng.uniform(-0.4, 0.4, 2)
    states = rng.uniform(-1, 1, (4, 2))
    actions = rng.uniform(-1, 1, (4, 2))
    mean_t = ad.constant(nets.policy_mean_batch(p, states))
    rows = nets.logprob_rows_graph(mean_t, ad.constant(p.log_std), actions)
    expected = [nets.policy_logprob(p, s, a) for s, a in zip(states, actions)]
    assert np.allclose(rows.data.ravel(), expected, rtol=1e-12)


# ---------------------------------------------------------------------------
# memory unit


def test_memory_zero_params_zero_output():
    assert np.array_equal(nets.memory_forward(nets.init_memory()), np.zeros(32))


def test_memory_output_in_open_unit_interval():
    rng = np.random.default_rng(14)
    mem = nets.MemoryState(weight=rng.uniform(-3, 3, (1, 32)),
                           bias=rng.uniform(-3, 3, 32))
    out = nets.memory_forward(mem)
    assert np.all(out > -1.0) and np.all(out < 1.0)


def test_memory_matches_direct_evaluation_and_is_deterministic():
    rng = np.random.default_rng(15)
    mem = nets.MemoryState(weight=rng.uniform(-1, 1, (1, 32)),
                           bias=rng.uniform(-1, 1, 32))
    expected = np.tanh(mem.weight[0] + mem.bias)
    assert np.allclose(nets.memory_forward(mem), expected, rtol=0, atol=0)
    assert np.array_equal(nets.memory_forward(mem), nets.memory_forward(mem))


def test_memory_gradients_flow_to_weights_not_constant_input():
    rng = np.random.default_rng(16)
    w = ad.Tensor(rng.uniform(-1, 1, (1, 32)))
    b = ad.Tensor(rng.uniform(-1, 1, 32))
    out = nets.memory_forward_graph(w, b)
    total = ad.sum_all(ad.square(out))
    constants = [p for p in _leaves(total) if not p.requires_grad]
    ad.backward(total)
    assert np.any(w.grad != 0.0)
    assert np.any(b.grad != 0.0)
    assert all(c.grad is None for c in constants)


def _leaves(node, seen=None):
    seen = seen if seen is not None else set()
    if id(node) in seen:
        return []
    seen.add(id(node))
    if not node._parents:
        return [node]
    out = []
    for p in node._parents:
        out.extend(_leaves(p, seen))
    return out


# ---------------------------------------------------------------------------
# loss network


def test_context_length_arithmetic_n512():
    layout = make_layout(reward=True)
    assert nets.conv_output_length(512, 8, 7) == 73
    assert nets.conv_output_length(73, 4, 2) == 35
    assert nets.context_flat_length(512) == 350
    loss = nets.init_loss(layout, 512, np.random.default_rng(17))
    ctx = nets.loss_context(loss, np.zeros((512, layout.buffer_channels)))
    assert ctx.shape == (32,)


def test_context_length_arithmetic_n1024():
    layout = make_layout(reward=False)
    assert nets.conv_output_length(1024, 8, 7) == 146
    assert nets.conv_output_length(146, 4, 2) == 72
    assert nets.context_flat_length(1024) == 720
    loss = nets.init_loss(layout, 1024, np.random.default_rng(18))
    ctx = nets.loss_context(loss, np.zeros((1024, layout.buffer_channels)))
    assert ctx.shape == (32,)


def test_zero_buffer_zero_params_zero_context():
    layout = make_layout()
    loss = make_zero_loss(layout, 512)
    ctx = nets.loss_context(loss, np.zeros((512, layout.buffer_channels)))
    assert np.array_equal(ctx.data, np.zeros(32))


def test_context_rejects_wrong_rows_or_channels():
    layout = make_layout()
    loss = nets.init_loss(layout, 512, np.random.default_rng(19))
    with pytest.raises(ad.ShapeError, match="loss_context"):
        nets.loss_context(loss, np.zeros((511, layout.buffer_channels)))
    with pytest.raises(ad.ShapeError, match="loss_context"):
        nets.loss_context(loss, np.zeros((512, layout.buffer_channels + 1)))


def test_zero_head_gives_zero_losses():
    layout = make_layout()
    loss = nets.init_loss(layout, 512, np.random.default_rng(20))
    feats = np.random.default_rng(21).uniform(-1, 1, (32, layout.head_channels))
    vals = nets.loss_per_step(loss, feats)
    assert np.array_equal(vals.data, np.zeros(32))


def test_per_step_single_row_hand_computed():
    layout = nets.FeatureLayout(obs_dim=1, act_dim=1, reward_observing=False)
    loss = make_zero_loss(layout, 512)
    ch = layout.head_channels
    loss.head_w[:] = 0.0
    loss.head_w[0, 0] = 0.5   # first feature into first hidden unit
    loss.head_b[0] = 0.1
    loss.out_w[0, 0] = 2.0
    loss.out_b[0] = -0.3
    row = np.zeros((1, ch))
    row[0, 0] = 0.8
    # hidden pre-activation 0.5*0.8 + 0.1 = 0.5 -> leaky relu passes it
    expected = 2.0 * 0.5 - 0.3
    vals = nets.loss_per_step(loss, row)
    assert vals.data[0] == pytest.approx(expected, abs=1e-15)
    row[0, 0] = -2.0  # pre-activation -0.9 -> slope 0.01
    expected = 2.0 * (0.01 * (0.5 * -2.0 + 0.1)) - 0.3
    assert nets.loss_per_step(loss, row).data[0] == pytest.approx(expected, abs=1e-15)


def test_per_step_rows_are_independent():
    layout = make_layout()
    loss = nets.init_loss(layout, 512, np.random.default_rng(22))
    loss.out_w[:] = np.random.default_rng(23).uniform(-1, 1, loss.out_w.shape)
    feats = np.random.default_rng(24).uniform(-1, 1, (8, layout.head_channels))
    perm = np.random.default_rng(25).permutation(8)
    direct = nets.loss_per_step(loss, feats).data
    permuted = nets.loss_per_step(loss, feats[perm]).data
    assert np.array_equal(permuted, direct[perm])


def test_per_step_rejects_channel_mismatch():
    layout = make_layout()
    loss = nets.init_loss(layout, 512, np.random.default_rng(26))
    with pytest.raises(ad.ShapeError, match="loss_per_step"):
        nets.loss_per_step(loss, np.zeros((4, layout.head_channels - 1)))


def test_loss_flatten_roundtrip_bit_exact():
    layout = make_layout()
    loss = nets.init_loss(layout, 512, np.random.default_rng(27))
    flat = loss.flat()
    again = nets.LossParams.from_flat(flat.copy(), loss.shapes(), 512)
    assert np.array_equal(again.flat(), flat)
    assert flat.size == nets.loss_param_count(layout, 512)


def test_full_loss_on_zero_buffer_is_finite_scalar():
    # Regression fixture: composed network output on an all-zero buffer.
    layout = make_layout()
    loss = nets.init_loss(layout, 512, np.random.default_rng(28))
    loss.out_w[:] = 0.25
    loss.out_b[:] = 0.125
    ctx = nets.loss_context(loss, np.zeros((512, layout.buffer_channels)))
    feats = np.zeros((64, layout.head_channels))
    feats[:, -32 - 2 * layout.act_dim:-2 * layout.act_dim] = ctx.data
    total = ad.sum_all(nets.loss_per_step(loss, feats))
    assert np.isfinite(total.item())
    again = ad.sum_all(nets.loss_per_step(loss, feats))
    assert total.item() == again.item()


def test_gradient_through_policy_mean_columns():
    # The training path: d(sum of per-step losses)/d(policy mean inputs).
    layout = make_layout(reward=False)
    rng = np.random.default_rng(29)
    loss = nets.init_loss(layout, 512, rng)
    loss.out_w[:] = rng.uniform(-0.5, 0.5, loss.out_w.shape)
    base = rng.uniform(-1, 1, (6, layout.head_channels))
    sl = layout.buffer_slices()["policy_mean"]

    def fn(mean_block):
        parts = [
            ad.constant(base[:, :sl.start + 32]),  # everything before mean (ctx included)
            mean_block,
            ad.constant(base[:, sl.start + 32 + layout.act_dim:]),
        ]
        feats = ad.concat(parts, axis=1)
        return ad.sum_all(nets.loss_per_step(loss, feats))

    err = ad.check_gradient(fn, base[:, sl.start + 32:sl.start + 32 + layout.act_dim])
    assert err < 1e-6


# ---------------------------------------------------------------------------
# checkpoint container


def test_params_file_roundtrip(tmp_path):
    rng = np.random.default_rng(30)
    arrays = {"loss/conv1_w": rng.standard_normal((16, 10)),
              "loss/conv1_b": rng.standard_normal(10),
              "policy/log_std": rng.standard_normal(2)}
    meta = {"layout": {"obs_dim": 2, "act_dim": 2, "reward_observing": True},
            "n_buffer": 512}
    path = tmp_path / "params.bin"
    nets.save_params_file(path, arrays, meta)
    loaded, got_meta = nets.load_params_file(path)
    assert got_meta == meta
    assert list(loaded) == list(arrays)
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k])


def test_params_file_rejects_foreign_data(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="not a parameter checkpoint"):
        nets.load_params_file(path)
