import numpy as np
import pytest

from fastkv.gate import (GateConfig, init_gate, gate_forward,
                         gate_loss_and_grad, bce_loss, save_gates, load_gates,
                         sink_attention_param_count)

TINY = GateConfig(d_model=8, n_kv_heads=2, group_size=2, d_low=4, n_sinks=3)


def random_params(config, seed, scale=0.5):
    """Unit-scale random draw; keeps curvature moderate for gradchecks."""
    rng = np.random.default_rng(seed)
    params = init_gate(config, seed)
    for name, arr in params.tensors.items():
        if name.startswith("gamma"):
            params.tensors[name] = 1.0 + 0.2 * rng.normal(size=arr.shape)
        else:
            params.tensors[name] = rng.normal(0.0, scale, size=arr.shape)
    return params


def test_init_deterministic():
    a = init_gate(TINY, 3)
    b = init_gate(TINY, 3)
    assert a.allclose(b)


def test_init_bias_is_ln2():
    p = init_gate(TINY, 0)
    b = np.logaddexp(0.0, p["beta"])
    assert np.allclose(b, np.log(2.0))


def test_linear_param_count():
    cfg = GateConfig(d_model=8, n_kv_heads=2, group_size=2, variant="linear")
    p = init_gate(cfg, 0)
    assert p.n_params() == 2 * 8 + 2  # H*D weights plus H biases


def test_forced_zero_logits_value():
    # e = 0, all c = 0, b = 0, S = 16 -> each group term 1/17
    cfg = GateConfig(d_model=4, n_kv_heads=1, group_size=1, d_low=2, n_sinks=16)
    p = init_gate(cfg, 0)
    p.tensors["w_q"][:] = 0.0  # q = 0 -> e = c = 0
    p.tensors["beta"][:] = -1e9  # softplus -> 0
    s = gate_forward(np.ones((3, 4)), p, cfg)
    assert np.allclose(s, 1.0 / 17.0, atol=1e-9)


def test_no_sinks_no_bias_gives_one():
    cfg = GateConfig(d_model=4, n_kv_heads=1, group_size=1, d_low=2, n_sinks=0)
    p = init_gate(cfg, 0)
    p.tensors["w_q"][:] = 0.0
    p.tensors["beta"][:] = -1e9
    s = gate_forward(np.ones((3, 4)), p, cfg)
    assert np.allclose(s, 1.0)


def test_score_monotone_in_logit():
    # x/(x+c) rises with x for fixed positive c: larger e -> larger score.
    # gamma_k scales k uniformly, which scales e while leaving the sink
    # logits (functions of q only) untouched.
    cfg = GateConfig(d_model=2, n_kv_heads=1, group_size=1, d_low=2, n_sinks=2)
    p = random_params(cfg, 1)
    h = np.array([[1.0, 0.5]])
    from fastkv.gate import _sink_intermediates
    inter = _sink_intermediates(np.asarray(h, dtype=np.float64), p, cfg)
    sign = np.sign(inter["e"][0, 0, 0]) or 1.0
    scores = []
    for gain in (1.0, 2.0, 4.0):
        q = p.copy()
        q.tensors["gamma_k"] = p["gamma_k"] * gain * sign
        scores.append(gate_forward(h, q, cfg)[0, 0])
    assert scores[0] < scores[1] < scores[2]


def test_output_strictly_inside_unit_interval(small_gate_config):
    rng = np.random.default_rng(5)
    p = random_params(small_gate_config, 2)
    s = gate_forward(rng.normal(size=(50, small_gate_config.d_model)) * 10,
                     p, small_gate_config)
    assert np.all(s > 0.0) and np.all(s < 1.0)


def test_permutation_equivariance(small_gate_config):
    rng = np.random.default_rng(6)
    p = random_params(small_gate_config, 3)
    h = rng.normal(size=(12, small_gate_config.d_model))
    perm = rng.permutation(12)
    assert np.array_equal(gate_forward(h, p, small_gate_config)[perm],
                          gate_forward(h[perm], p, small_gate_config))


@pytest.mark.parametrize("variant", ["sink_attention", "no_denominator",
                                     "mlp", "linear"])
def test_statelessness_bitwise(variant):
    cfg = GateConfig(d_model=16, n_kv_heads=2, group_size=2, d_low=4,
                     n_sinks=3, variant=variant)
    p = random_params(cfg, 4)
    h = np.random.default_rng(7).normal(size=(20, 16))
    full = gate_forward(h, p, cfg)
    parts = np.concatenate([gate_forward(h[:9], p, cfg),
                            gate_forward(h[9:], p, cfg)])
    assert np.array_equal(full, parts)


def test_no_denominator_equals_sigmoid():
    cfg = GateConfig(d_model=8, n_kv_heads=2, group_size=2, d_low=4,
                     n_sinks=0, variant="no_denominator")
    p = random_params(cfg, 8)
    h = np.random.default_rng(9).normal(size=(10, 8))
    s = gate_forward(h, p, cfg)
    # recompute e directly and compare with sigmoid
    from fastkv.gate import _project, _rms_forward
    kx = _project(h, p["w_k"]).reshape(10, 2, 4)
    qx = _project(h, p["w_q"]).reshape(10, 2, 2, 4)
    k, _ = _rms_forward(kx, p["gamma_k"], cfg.norm_eps)
    q, _ = _rms_forward(qx, p["gamma_q"], cfg.norm_eps)
    e = np.einsum("tghd,thd->tgh", q, k)
    expected = (1.0 / (1.0 + np.exp(-e))).mean(axis=1)
    assert np.abs(s - expected).max() < 1e-12


def test_param_count_bound(small_gate_config):
    c = small_gate_config
    p = init_gate(c, 0)
    bound = (2 * (c.group_size + 1) * c.n_kv_heads * c.d_low * c.d_model
             + c.n_sinks * c.n_kv_heads * c.d_low + 2 * c.d_low
             + c.group_size * c.n_kv_heads)
    assert p.n_params() <= bound
    assert p.n_params() == sink_attention_param_count(c)


def test_mlp_matches_param_count_within_2pct():
    cfg = GateConfig(d_model=64, n_kv_heads=2, group_size=2)
    mlp_cfg = GateConfig(d_model=64, n_kv_heads=2, group_size=2, variant="mlp")
    target = sink_attention_param_count(cfg)
    got = init_gate(mlp_cfg, 0).n_params()
    assert abs(got - target) / target < 0.02


def finite_difference_grads(params, h, t, cfg, eps=1e-4):
    fds = {}
    for name in params.names():
        arr = params.tensors[name]
        fd = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            lp, _ = gate_loss_and_grad(params, h, t, cfg)
            arr[idx] = orig - eps
            lm, _ = gate_loss_and_grad(params, h, t, cfg)
            arr[idx] = orig
            fd[idx] = (lp - lm) / (2 * eps)
        fds[name] = fd
    return fds


def max_rel_error(grads, fds):
    worst = 0.0
    for name, g in grads.items():
        fd = fds[name]
        denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-5)
        worst = max(worst, float((np.abs(g - fd) / denom).max()))
    return worst


@pytest.mark.parametrize("variant", ["sink_attention", "no_denominator",
                                     "mlp", "linear"])
def test_gradcheck(variant):
    cfg = GateConfig(d_model=8, n_kv_heads=2, group_size=2, d_low=4,
                     n_sinks=3, variant=variant)
    rng = np.random.default_rng(10)
    for draw in range(2):
        p = random_params(cfg, 20 + draw)
        h = rng.normal(size=(5, 8))
        t = rng.uniform(size=(5, 2))
        loss, grads = gate_loss_and_grad(p, h, t, cfg)
        fds = finite_difference_grads(p, h, t, cfg)
        assert max_rel_error(grads, fds) < 1e-4


def test_bce_values():
    assert bce_loss(np.full((2, 2), 0.5), np.full((2, 2), 0.5)) == \
        pytest.approx(np.log(2.0))
    assert bce_loss(np.array([0.9]), np.array([1.0])) == \
        pytest.approx(-np.log(0.9))


def test_bce_minimized_at_target():
    t = np.array([0.37])
    grid = np.arange(0.01, 1.0, 0.01)
    losses = [bce_loss(np.array([p]), t) for p in grid]
    assert grid[int(np.argmin(losses))] == pytest.approx(0.37)


def test_loss_at_self_target_is_binary_entropy(small_gate_config):
    p = random_params(small_gate_config, 11)
    h = np.random.default_rng(12).normal(size=(6, small_gate_config.d_model))
    s = gate_forward(h, p, small_gate_config)
    loss, _ = gate_loss_and_grad(p, h, s, small_gate_config)
    entropy = float(np.mean(-(s * np.log(s) + (1 - s) * np.log(1 - s))))
    assert loss == pytest.approx(entropy, rel=1e-9)


def test_rejects_bad_inputs(small_gate_config):
    p = init_gate(small_gate_config, 0)
    with pytest.raises(ValueError):
        gate_forward(np.ones((2, 3)), p, small_gate_config)
    h = np.ones((2, small_gate_config.d_model))
    with pytest.raises(ValueError):
        gate_loss_and_grad(p, h, np.full((2, 2), 1.5), small_gate_config)
    with pytest.raises(ValueError):
        gate_loss_and_grad(p, h * np.nan, np.full((2, 2), 0.5),
                           small_gate_config)


def test_gate_file_roundtrip(tmp_path, small_gate_config):
    gates = [random_params(small_gate_config, s) for s in range(3)]
    # f32-representable so the file round-trips exactly back to memory
    for g in gates:
        for k in g.tensors:
            g.tensors[k] = g.tensors[k].astype(np.float32).astype(np.float64)
    path = tmp_path / "gates.fkvz"
    save_gates(gates, path, provenance={"note": "test"})
    loaded, prov = load_gates(path)
    assert prov["note"] == "test"
    assert all(a.allclose(b) for a, b in zip(gates, loaded))
    path2 = tmp_path / "gates2.fkvz"
    save_gates(loaded, path2, provenance=prov)
    assert path.read_bytes() == path2.read_bytes()
