import struct

import numpy as np
import pytest

from frma.qnn import (
    Arch,
    ArchitectureMismatch,
    BufferNotReady,
    DEFAULT_ARCH,
    Experience,
    QnnWeights,
    ReplayBuffer,
    Trainer,
    TrainerConfig,
    TrainingDivergence,
    forward,
    forward_batch,
    gradients,
    init_weights,
    load_checkpoint,
    save_checkpoint,
    sync_target,
    td_target,
    train_step,
)

LINEAR_2x2 = Arch(input_dim=2, hidden=2, n_plain=0, n_blocks=0, n_actions=2)
SCALAR = Arch(input_dim=1, hidden=1, n_plain=0, n_blocks=0, n_actions=1)


def constant_net(arch, q):
    w = init_weights(0, arch)
    for p in w.weights:
        p[...] = 0.0
    for b in w.biases:
        b[...] = 0.0
    w.biases[-1][...] = q
    return w


def fd_gradient(w, x, dq, eps=1e-5):
    """Central differences of sum(dq * Q(x)) for every parameter."""
    out = []
    for p in w.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            hi = np.sum(dq * forward_batch(w, x))
            p[idx] = old - eps
            lo = np.sum(dq * forward_batch(w, x))
            p[idx] = old
            g[idx] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def test_default_architecture():
    w = init_weights(1)
    dims = [m.shape for m in w.weights]
    assert dims == [(40, 64), (64, 64), (64, 64), (64, 64), (64, 64), (64, 64), (64, 2)]
    assert w.all_finite()


def test_init_deterministic_per_seed():
    a, b, c = init_weights(5), init_weights(5), init_weights(6)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())


def test_init_he_uniform_bounds():
    w = init_weights(3)
    for m in w.weights:
        assert np.max(np.abs(m)) <= np.sqrt(6.0 / m.shape[0])


def test_zero_net_outputs_zero():
    w = constant_net(DEFAULT_ARCH, 0.0)
    assert np.array_equal(forward(w, np.ones(40)), np.zeros(2))


def test_linear_toy_net_by_hand():
    w = constant_net(LINEAR_2x2, 0.0)
    w.weights[0][...] = [[1.0, 0.0], [0.0, 1.0]]
    w.biases[0][...] = [0.5, -0.5]
    assert np.allclose(forward(w, [2.0, 3.0]), [2.5, 2.5])


def test_one_hidden_layer_toy_net_by_hand():
    arch = Arch(input_dim=2, hidden=2, n_plain=1, n_blocks=0, n_actions=2)
    w = constant_net(arch, 0.0)
    w.weights[0][...] = [[1.0, -1.0], [2.0, 1.0]]
    w.biases[0][...] = [0.0, -1.0]
    w.weights[1][...] = [[1.0, 0.0], [3.0, 1.0]]
    w.biases[1][...] = [0.1, 0.2]
    # s = (1, 1): hidden pre-activation (3, -1) -> relu (3, 0) -> q = (3.1, 0.2)
    assert np.allclose(forward(w, [1.0, 1.0]), [3.1, 0.2])


def test_forward_rejects_bad_input():
    w = init_weights(0)
    with pytest.raises(ValueError):
        forward(w, np.full(40, np.nan))
    with pytest.raises(ValueError):
        forward(w, np.zeros(39))


def test_forward_lipschitz_bound():
    w = init_weights(11)
    rng = np.random.default_rng(0)
    s = rng.random(40)
    d = rng.normal(size=40)
    d *= 1e-9 / np.linalg.norm(d)
    norms = [np.linalg.norm(m, 2) for m in w.weights]
    bound = norms[0] * norms[1] * (1 + norms[2] * norms[3]) * (1 + norms[4] * norms[5]) * norms[6]
    assert np.linalg.norm(forward(w, s + d) - forward(w, s)) <= bound * 1e-9 * (1 + 1e-6)


def test_residual_block_identity_when_zeroed():
    full = init_weights(4)
    for i in (2, 3, 4, 5):
        full.weights[i][...] = 0.0
        full.biases[i][...] = 0.0
    plain_arch = Arch(n_blocks=0)
    plain = QnnWeights(plain_arch, [full.weights[0], full.weights[1], full.weights[6]],
                       [full.biases[0], full.biases[1], full.biases[6]])
    x = np.random.default_rng(1).random((8, 40))
    assert np.allclose(forward_batch(full, x), forward_batch(plain, x))


def test_convex_combination_is_valid_network():
    a, b = init_weights(1), init_weights(2)
    mix = QnnWeights(a.arch, [0.3 * p + 0.7 * q for p, q in zip(a.weights, b.weights)],
                     [0.3 * p + 0.7 * q for p, q in zip(a.biases, b.biases)])
    assert np.all(np.isfinite(forward(mix, np.ones(40))))


def test_td_target_examples():
    target = constant_net(DEFAULT_ARCH, [0.5, -0.2])
    assert td_target(target, 1.0, np.zeros(40), gamma=0.9) == pytest.approx(1.45)
    zero = constant_net(DEFAULT_ARCH, 0.0)
    assert td_target(zero, 0.0, np.ones(40), gamma=0.9) == 0.0


def test_train_step_zero_residual_leaves_weights():
    w = init_weights(9)
    before = w.flat().copy()
    target = constant_net(DEFAULT_ARCH, 0.0)
    rng = np.random.default_rng(0)
    batch = []
    for _ in range(4):
        s = rng.integers(0, 2, 40).astype(float)
        a = int(rng.integers(2))
        batch.append(Experience(s, a, float(forward(w, s)[a]), np.zeros(40)))
    _, loss = train_step(w, target, batch, TrainerConfig())
    assert loss == pytest.approx(0.0, abs=1e-24)
    assert np.allclose(w.flat(), before, atol=1e-15)


def test_train_step_scalar_net_by_hand():
    # q = 0.3 * s + 0.1, target q' = 0.5 * s'
    w = constant_net(SCALAR, 0.1)
    w.weights[0][...] = 0.3
    target = constant_net(SCALAR, 0.0)
    target.weights[0][...] = 0.5
    e = Experience(np.array([2.0]), 0, 1.0, np.array([1.0]))
    _, loss = train_step(w, target, [e], TrainerConfig(learning_rate=0.001, gamma=0.9))
    # v = 1 + 0.9 * 0.5 = 1.45, q = 0.7, residual 0.75
    assert loss == pytest.approx(0.75 ** 2)
    assert w.weights[0][0, 0] == pytest.approx(0.3 + 0.001 * 0.75 * 2.0)
    assert w.biases[0][0] == pytest.approx(0.1 + 0.001 * 0.75)


def test_gradients_match_finite_differences():
    w = init_weights(21)
    rng = np.random.default_rng(3)
    x = rng.integers(0, 2, (3, 40)).astype(float)
    dq = rng.normal(size=(3, 2))
    gw, gb = gradients(w, x, dq)
    analytic = [g for pair in zip(gw, gb) for g in pair]
    for a, n in zip(analytic, fd_gradient(w, x, dq)):
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-7)
        assert err.max() < 1e-4


def test_semi_gradient_ignores_target_weights():
    w0 = init_weights(2)
    rng = np.random.default_rng(4)
    s = rng.integers(0, 2, (5, 40)).astype(float)
    s2 = rng.integers(0, 2, (5, 40)).astype(float)
    a = rng.integers(0, 2, 5)
    r = rng.normal(size=5)
    t1, t2 = init_weights(7), init_weights(8)
    v1, v2 = td_target(t1, r, s2), td_target(t2, r, s2)
    assert not np.allclose(v1, v2)
    cfg = TrainerConfig()
    w1, _ = train_step(w0.copy(), t1, (s, a, r, s2), cfg)
    w2, _ = train_step(w0.copy(), t2, (s, a, r, s2), cfg)
    # the update is linear in v: the difference is rho * mean((v1 - v2) * grad q) only
    dq = np.zeros((5, 2))
    dq[np.arange(5), a] = (v1 - v2) / 5
    gw, gb = gradients(w0, s, dq)
    expect = np.concatenate([g.ravel() for pair in zip(gw, gb) for g in pair]) * cfg.learning_rate
    assert np.allclose(w1.flat() - w2.flat(), expect, atol=1e-14)


def test_divergence_detected():
    w = init_weights(0)
    e = Experience(np.zeros(40), 0, float("inf"), np.zeros(40))
    with pytest.raises(TrainingDivergence):
        train_step(w, w.copy(), [e])


def test_sync_target_copies():
    w, t = init_weights(1), init_weights(2)
    sync_target(w, t)
    x = np.random.default_rng(0).random((10, 40))
    assert np.array_equal(forward_batch(w, x), forward_batch(t, x))
    assert t.weights[0] is not w.weights[0]


def filled_trainer(n=40, seed=0):
    tr = Trainer(init_weights(seed), rng=np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for _ in range(n):
        tr.buffer.push(Experience(rng.integers(0, 2, 40).astype(float), int(rng.integers(2)),
                                  float(rng.normal()), rng.integers(0, 2, 40).astype(float)))
    return tr


def test_trainer_target_schedule():
    tr = filled_trainer()
    frozen = tr.w_target.flat().copy()
    for _ in range(199):
        tr.tick()
    assert np.array_equal(tr.w_target.flat(), frozen)
    assert tr.since_sync == 199
    tr.tick()
    assert tr.syncs == 1 and tr.since_sync == 0
    assert np.array_equal(tr.w_target.flat(), tr.w.flat())


def test_trainer_skips_when_not_ready():
    tr = filled_trainer(n=31)
    assert tr.tick() is None
    assert tr.train_steps == 0


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(capacity=1000, state_dim=40)
    for i in range(1001):
        buf.push(Experience(np.full(40, float(i)), 0, float(i), np.zeros(40)))
    items = buf.ordered()
    assert len(items) == 1000
    assert items[0].r_next == 1.0 and items[-1].r_next == 1000.0


def test_buffer_full_sample_is_whole_buffer():
    buf = ReplayBuffer(capacity=32, state_dim=40)
    for i in range(32):
        buf.push(Experience(np.zeros(40), 0, float(i), np.zeros(40)))
    _, _, r, _ = buf.sample(32, np.random.default_rng(0))
    assert sorted(r) == list(range(32))


def test_buffer_not_ready():
    buf = ReplayBuffer(capacity=100)
    with pytest.raises(BufferNotReady):
        buf.sample(32, np.random.default_rng(0))


def test_buffer_sampling_uniform():
    buf = ReplayBuffer(capacity=100, state_dim=1)
    for i in range(100):
        buf.push(Experience(np.zeros(1), 0, float(i), np.zeros(1)))
    rng = np.random.default_rng(99)
    counts = np.zeros(100)
    for _ in range(10_000):
        idx = buf.sample_indices(10, rng)
        assert len(set(idx)) == 10
        np.add.at(counts, idx, 1)
    assert counts.sum() == 100_000
    expected = 1000.0
    sigma = np.sqrt(expected * (1 - 1 / 100))
    assert np.all(np.abs(counts - expected) < 5 * sigma)


def test_checkpoint_round_trip(tmp_path):
    w = init_weights(13)
    w.version = 4
    path = tmp_path / "q.ckpt"
    save_checkpoint(w, path, meta={"steps": 10})
    loaded, meta = load_checkpoint(path)
    assert meta == {"steps": 10}
    assert loaded.version == 4
    x = np.random.default_rng(0).random((6, 40))
    assert np.array_equal(forward_batch(w, x), forward_batch(loaded, x))


def test_checkpoint_byte_layout(tmp_path):
    w = init_weights(13)
    path = tmp_path / "q.ckpt"
    save_checkpoint(w, path)
    raw = path.read_bytes()
    assert raw[:8] == b"FRMAQNN\0"
    fmt, hlen = struct.unpack_from("<HI", raw, 8)
    assert fmt == 1
    first = struct.unpack_from("<d", raw, 14 + hlen)[0]
    assert first == w.weights[0][0, 0]
    n_params = sum(p.size for p in w.params())
    assert len(raw) == 14 + hlen + 8 * n_params


def test_checkpoint_rejects_other_architecture(tmp_path):
    path = tmp_path / "small.ckpt"
    save_checkpoint(init_weights(0, LINEAR_2x2), path)
    with pytest.raises(ArchitectureMismatch):
        load_checkpoint(path)
    loaded, _ = load_checkpoint(path, expect=LINEAR_2x2)
    assert loaded.arch == LINEAR_2x2
