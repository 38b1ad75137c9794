import numpy as np
import pytest

from taskspan import autodiff as ad
from taskspan.networks import flat_size, flat_forward_actor, flat_forward_critic
from taskspan.replay import ReplayBuffer, TaskBatch
from taskspan.sac import SacAgent, TaskIdError, np_squashed_log_prob, polyak_update


def small_agent(task_count=3, k=2, seed=0, obs_dim=6, hidden=(16, 16), **kw):
    return SacAgent(obs_dim=obs_dim, act_dim=2, task_count=task_count, k=k,
                    hidden=hidden, seed=seed, **kw)


def random_batch(rng, obs_dim=6, n=5):
    return TaskBatch(
        obs=rng.standard_normal((n, obs_dim)),
        action=rng.uniform(-1, 1, (n, 2)),
        reward=rng.standard_normal(n),
        next_obs=rng.standard_normal((n, obs_dim)),
        terminal=np.zeros(n),
    )


def _zero_actor(agent, log_std_value=-40.0):
    """Force mean = 0 and a tiny policy std: the actor region of the basis
    is zeroed, the log-std head bias pinned, and the task vectors set to
    all-ones so the composed parameters equal the pinned values."""
    actor_names = [l.name for l in agent.actor_layers]
    for name in actor_names:
        w0, b0, end = agent.phi.offsets[name]
        agent.phi.data[:, w0:end] = 0.0
    w0, b0, end = agent.phi.offsets["actor.log_std"]
    agent.phi.data[:, b0:end] = log_std_value / agent.k
    for tau in range(agent.task_count):
        agent.w.set_raw(tau, np.ones(agent.k))
    agent.bump_version()


# ---------------------------------------------------------------------------
# acting


def test_deterministic_action_strictly_inside_unit_box():
    agent = small_agent(seed=1)
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = agent.act(rng.standard_normal(6) * 5, 1, deterministic=True)
        assert np.all(np.abs(a) < 1.0)


def test_degenerate_gaussian_collapses_to_zero_action():
    agent = small_agent(seed=2, k=1, task_count=1)
    _zero_actor(agent)
    a = agent.act(np.ones(6), 0, rng=np.random.default_rng(1))
    # std is clamped at exp(LOG_STD_MIN) = e^-20, so the samples sit within
    # a few parts in 1e9 of the zero mean
    assert np.max(np.abs(a)) < 1e-8


def test_monte_carlo_mean_matches_deterministic_action():
    agent = small_agent(seed=3, k=1, task_count=1)
    # pin the std small enough that tanh is locally linear
    w0, b0, end = agent.phi.offsets["actor.log_std"]
    agent.phi.data[:, w0:b0] = 0.0
    agent.phi.data[:, b0:end] = -6.0
    agent.bump_version()
    obs = np.random.default_rng(2).standard_normal(6)
    det = agent.act(obs, 0, deterministic=True)
    rng = np.random.default_rng(3)
    samples = agent.act(np.tile(obs, (100_000, 1)), 0, rng=rng)
    se = samples.std(axis=0) / np.sqrt(samples.shape[0])
    assert np.all(np.abs(samples.mean(axis=0) - det) < 3 * se + 1e-9)


def test_invalid_task_id():
    agent = small_agent()
    with pytest.raises(TaskIdError):
        agent.act(np.zeros(6), 3, deterministic=True)


# ---------------------------------------------------------------------------
# losses


def test_degenerate_discount_gives_pure_q_regression():
    # gamma = 0, zero rewards, alpha = 0: target is 0, critic loss = E[q1^2 + q2^2]
    agent = small_agent(task_count=1, k=1, seed=4, gamma=0.0)
    agent.log_alpha[0].data[...] = -1e9  # alpha == 0 exactly after exp underflow
    rng = np.random.default_rng(5)
    batch = random_batch(rng)
    batch.reward[:] = 0.0
    res = agent.task_loss(batch, 0, np.random.default_rng(6))
    q1 = flat_forward_critic(agent.critic_flat(0, 1), agent.critic1_layers,
                             batch.obs, batch.action)
    q2 = flat_forward_critic(agent.critic_flat(0, 2), agent.critic2_layers,
                             batch.obs, batch.action)
    assert res["critic_loss"] == pytest.approx(np.mean(q1 ** 2) + np.mean(q2 ** 2),
                                               rel=1e-12)


def test_single_transition_loss_matches_hand_computation():
    agent = small_agent(task_count=1, k=1, seed=7, gamma=0.9)
    rng = np.random.default_rng(8)
    batch = random_batch(rng, n=1)
    loss_rng = np.random.default_rng(9)
    res = agent.task_loss(batch, 0, loss_rng)

    # replay the exact computation with plain numpy and the same noise order
    check_rng = np.random.default_rng(9)
    target_noise = check_rng.standard_normal((1, 2))
    actor_noise = check_rng.standard_normal((1, 2))
    alpha = agent.alpha(0)

    mean_n, log_std_n = flat_forward_actor(agent.actor_flat(0), agent.actor_layers,
                                           batch.next_obs)
    u_n = mean_n + np.exp(log_std_n) * target_noise
    a_n = np.tanh(u_n)
    logp_n = np_squashed_log_prob(u_n, mean_n, log_std_n)
    q1t = flat_forward_critic(agent.target1[0], agent.critic1_layers, batch.next_obs, a_n)
    q2t = flat_forward_critic(agent.target2[0], agent.critic2_layers, batch.next_obs, a_n)
    y = batch.reward + 0.9 * (np.minimum(q1t, q2t) - alpha * logp_n)

    q1 = flat_forward_critic(agent.critic_flat(0, 1), agent.critic1_layers,
                             batch.obs, batch.action)
    q2 = flat_forward_critic(agent.critic_flat(0, 2), agent.critic2_layers,
                             batch.obs, batch.action)
    critic = float((q1 - y) ** 2 + (q2 - y) ** 2)

    mean, log_std = flat_forward_actor(agent.actor_flat(0), agent.actor_layers, batch.obs)
    u = mean + np.exp(log_std) * actor_noise
    a_pi = np.tanh(u)
    logp = np_squashed_log_prob(u, mean, log_std)
    q1p = flat_forward_critic(agent.critic_flat(0, 1), agent.critic1_layers,
                              batch.obs, a_pi)
    q2p = flat_forward_critic(agent.critic_flat(0, 2), agent.critic2_layers,
                              batch.obs, a_pi)
    actor = float(alpha * logp - np.minimum(q1p, q2p))

    assert res["critic_loss"] == pytest.approx(critic, rel=1e-10)
    assert res["actor_loss"] == pytest.approx(actor, rel=1e-10)
    assert float(res["loss"].data) == pytest.approx(actor + critic, rel=1e-10)


def test_twin_target_never_exceeds_either_critic():
    agent = small_agent(task_count=1, k=1, seed=10, gamma=0.95)
    rng = np.random.default_rng(11)
    batch = random_batch(rng, n=16)
    noise = np.random.default_rng(12).standard_normal((16, 2))
    y = agent.critic_target(batch, 0, noise)
    alpha = agent.alpha(0)
    mean_n, log_std_n = flat_forward_actor(agent.actor_flat(0), agent.actor_layers,
                                           batch.next_obs)
    u_n = mean_n + np.exp(log_std_n) * noise
    a_n = np.tanh(u_n)
    logp_n = np_squashed_log_prob(u_n, mean_n, log_std_n)
    for which, target in ((1, agent.target1[0]), (2, agent.target2[0])):
        layers = agent.critic1_layers if which == 1 else agent.critic2_layers
        qt = flat_forward_critic(target, layers, batch.next_obs, a_n)
        y_single = batch.reward + 0.95 * (qt - alpha * logp_n)
        assert np.all(y <= y_single + 1e-12)


def test_one_hot_tasks_have_disjoint_parameter_gradients():
    # one-hot w with k == tasks: J_0 must not touch basis vector 1
    agent = small_agent(task_count=2, k=2, seed=13, w_init="one-hot")
    rng = np.random.default_rng(14)
    res = agent.task_loss(random_batch(rng), 0, rng)
    grads = ad.backward(res["loss"])
    g_phi = grads.grad(agent.phi.tensor)
    assert np.array_equal(g_phi[1], np.zeros(agent.phi.n))
    assert np.any(g_phi[0] != 0.0)


def test_gradient_isolation_and_phi_sum():
    agent = small_agent(task_count=3, k=2, seed=15)
    rng = np.random.default_rng(16)
    batches = {t: random_batch(rng) for t in range(3)}
    res = agent.task_losses(batches, np.random.default_rng(17))
    total = ad.add(ad.add(res[0]["loss"], res[1]["loss"]), res[2]["loss"])
    joint = ad.backward(total)
    per_task = [ad.backward(res[t]["loss"]) for t in range(3)]
    # cross-task w gradients are exactly zero
    for t in range(3):
        for other in range(3):
            if other != t:
                assert per_task[t].get(agent.w.vectors[other]) is None
    # basis gradient of the sum equals the sum of per-task basis gradients
    summed = sum(p.grad(agent.phi.tensor) for p in per_task)
    assert np.max(np.abs(joint.grad(agent.phi.tensor) - summed)) < 1e-10


# ---------------------------------------------------------------------------
# temperatures


def test_temperature_fixed_point():
    agent = small_agent()
    before = float(agent.log_alpha[0].data)
    agent.update_temperature(0, -agent.target_entropy)  # entropy exactly on target
    assert float(agent.log_alpha[0].data) == before


def test_temperature_rises_when_entropy_below_target():
    agent = small_agent()
    before = agent.alpha(1)
    # entropy below target <=> mean log prob above -target_entropy
    agent.update_temperature(1, -agent.target_entropy + 1.0)
    assert agent.alpha(1) > before


def test_temperature_update_is_per_task():
    agent = small_agent()
    other = agent.log_alpha[2].data.tobytes()
    agent.update_temperature(0, 5.0)
    assert agent.log_alpha[2].data.tobytes() == other


def test_non_finite_entropy_estimate_is_skipped():
    agent = small_agent()
    before = float(agent.log_alpha[0].data)
    agent.update_temperature(0, float("nan"))
    assert float(agent.log_alpha[0].data) == before


# ---------------------------------------------------------------------------
# polyak


def test_polyak_rho_one_copies():
    online = np.random.default_rng(18).standard_normal(20)
    target = np.zeros(20)
    polyak_update(online, target, 1.0)
    assert target.tobytes() == online.tobytes()


def test_polyak_rho_zero_keeps_target():
    online = np.ones(10)
    target = np.full(10, 3.0)
    polyak_update(online, target, 0.0)
    assert np.array_equal(target, np.full(10, 3.0))


def test_polyak_geometric_convergence():
    online = np.full(4, 2.0)
    target = np.zeros(4)
    for _ in range(1000):
        polyak_update(online, target, 0.005)
    expected_gap = 2.0 * 0.995 ** 1000
    assert np.allclose(online - target, expected_gap, rtol=1e-9)


def test_polyak_rejects_bad_rho():
    with pytest.raises(ValueError):
        polyak_update(np.zeros(2), np.zeros(2), 1.5)


# ---------------------------------------------------------------------------
# freezing


def test_frozen_basis_is_bitwise_unchanged_by_updates():
    agent = small_agent(task_count=2, k=2, seed=19)
    agent.freeze_shared()
    before = agent.phi.data.tobytes()
    rng = np.random.default_rng(20)
    res = agent.task_losses({t: random_batch(rng) for t in range(2)}, rng)
    total = ad.add(res[0]["loss"], res[1]["loss"])
    grads = ad.backward(total)
    agent.apply_update(grads, w_tasks=[0, 1])
    assert agent.phi.data.tobytes() == before
    # the task vectors still learn
    assert np.linalg.norm(grads.grad(agent.w.vectors[0])) > 0.0
    agent.unfreeze_shared()
    agent.apply_update(grads, w_tasks=[0, 1])
    assert agent.phi.data.tobytes() != before


# ---------------------------------------------------------------------------
# fitted Q evaluation on a two-state MDP


def test_critic_updates_converge_to_exact_policy_values():
    """With the entropy term zeroed and a frozen near-deterministic policy,
    the critic update is fitted Q evaluation; on a deterministic 2-cycle
    MDP the fixed point is known in closed form."""
    gamma = 0.9
    agent = SacAgent(obs_dim=1, act_dim=2, task_count=1, k=1, hidden=(32, 32),
                     seed=21, gamma=gamma, polyak=0.05, lr=1e-3)
    _zero_actor(agent)              # action identically ~0, tiny std
    agent.log_alpha[0].data[...] = -1e9   # alpha = 0
    actor_span = flat_size(agent.actor_layers)

    s0, s1 = np.array([0.0]), np.array([1.0])
    buf = ReplayBuffer(64, 1, 2, 1)
    for _ in range(16):
        buf.add(s0, np.zeros(2), 1.0, s1, False, 0)   # s0 -> s1, reward 1
        buf.add(s1, np.zeros(2), 0.0, s0, False, 0)   # s1 -> s0, reward 0
    rng = np.random.default_rng(22)

    for _ in range(3000):
        batch = buf.sample_balanced(32, rng)[0]
        res = agent.task_loss(batch, 0, rng)
        grads = ad.backward(res["critic_loss_graph"])
        g = grads.grad(agent.phi.tensor).copy()
        g[:, :actor_span] = 0.0          # keep the policy frozen
        agent.phi_opt.step(agent.phi.data, g)
        agent.bump_version()
        agent.update_targets()

    q_exact_s0 = 1.0 / (1.0 - gamma ** 2)
    q_exact_s1 = gamma / (1.0 - gamma ** 2)
    a_star = np.zeros((1, 2))
    for which in (1, 2):
        layers = agent.critic1_layers if which == 1 else agent.critic2_layers
        q0 = float(flat_forward_critic(agent.critic_flat(0, which), layers,
                                       s0.reshape(1, 1), a_star))
        q1 = float(flat_forward_critic(agent.critic_flat(0, which), layers,
                                       s1.reshape(1, 1), a_star))
        assert q0 == pytest.approx(q_exact_s0, abs=0.2)
        assert q1 == pytest.approx(q_exact_s1, abs=0.2)
