"""Reference computations shared by unit and acceptance tests."""
import numpy as np

from deskrl.updater import BatchSplit, LearnerState, sac_update_single


def one_state_toy(seed=0, gamma=0.5, reward=1.0, iterations=3000, batch=64):
    """Repeated SAC updates on a single non-terminal state with a constant reward.

    Returns the worst |Q(s, a) - r / (1 - gamma)| over an action grid, for both critics.
    """
    st = LearnerState.create(1, 1, [1.0], hidden=(16,), seed=seed, gamma=gamma, alpha=0.0,
                             lr=3e-3, tau=1.0, batch_size=batch)
    rng = np.random.default_rng(seed)
    s = np.ones((batch, 1), np.float32)
    b = BatchSplit(s, s.copy(), s.copy(), np.full(batch, reward, np.float32),
                   np.zeros(batch, np.float32), np.arange(batch))
    for i in range(iterations):
        if i == int(iterations * 0.8):
            for opt in (st.opt_q1, st.opt_q2):
                opt.state.lr /= 10
        b.a = rng.uniform(-1, 1, (batch, 1)).astype(np.float32)
        sac_update_single(st, b, rng)
    x = np.concatenate([s, np.linspace(-1, 1, batch, dtype=np.float32)[:, None]], axis=1)
    fixed_point = reward / (1.0 - gamma)
    return max(float(np.abs(net(x)[:, 0] - fixed_point).max()) for net in (st.q1, st.q2))


def random_batch(rng, n, obs_dim=3, act_dim=1, terminal_frac=0.1):
    s = rng.standard_normal((n, obs_dim)).astype(np.float32)
    return BatchSplit(s, rng.uniform(-2, 2, (n, act_dim)).astype(np.float32),
                      (s + 0.05 * rng.standard_normal((n, obs_dim))).astype(np.float32),
                      rng.uniform(-10, 0, n).astype(np.float32),
                      (rng.random(n) < terminal_frac).astype(np.float32), np.arange(n))


def dual_vs_single(iterations=100, seed=0, batch=256, hidden=(64, 64)):
    """Worst relative parameter gap between the two update modes, checked after every iteration."""
    from deskrl.updater import DualUpdater

    kw = dict(hidden=hidden, seed=seed, batch_size=batch, lr=1e-3)
    single = LearnerState.create(3, 1, [2.0], **kw)
    dual = LearnerState.create(3, 1, [2.0], **kw)
    data_rng = np.random.default_rng(seed + 1000)
    rs, rd = np.random.default_rng(seed), np.random.default_rng(seed)
    worst, payload, state_bytes = 0.0, 0, 0
    with DualUpdater(dual, timeout=30.0) as du:
        for _ in range(iterations):
            b = random_batch(data_rng, batch)
            sac_update_single(single, b, rs)
            _, diag = du.update(b, rd)
            p, q = single.flat_params(), dual.flat_params()
            worst = max(worst, float(np.abs(p - q).max() / max(np.abs(p).max(), 1e-12)))
            payload = max(payload, diag.exchange_bytes)
            state_bytes = b.state_bytes
    return worst, payload, state_bytes
