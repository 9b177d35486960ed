import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chardiff.diffusion import make_schedule, posterior, q_sample, restore, training_loss
from chardiff.metrics import psnr
from chardiff.numerics import Tensor, make_rng


def oracle_model(x0, schedule):
    """Closed-form noise predictor that inverts the forward process for a known x0."""
    def predict(x_t, x_lq, t, priors):
        ab = schedule.alpha_bars[np.asarray(t)].reshape(-1, 1, 1, 1)
        return (x_t - np.sqrt(ab) * x0) / np.sqrt(1 - ab)
    return predict


def test_schedule_single_step():
    s = make_schedule(1, 1e-4, 0.02, 1)
    assert s.alpha_bars[0] == pytest.approx(1 - 1e-4, rel=1e-15)
    assert s.taus.tolist() == [0]


def test_schedule_matches_running_product():
    s = make_schedule(1000, 1e-4, 0.02, 50)
    betas = [1e-4 + (0.02 - 1e-4) * i / 999 for i in range(1000)]
    prod, ref = 1.0, []
    for b in betas:
        prod *= 1.0 - b
        ref.append(prod)
    assert np.max(np.abs(s.alpha_bars - ref) / np.array(ref)) < 1e-10


def test_schedule_invariants():
    s = make_schedule(1000, 1e-4, 0.02, 50)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[-1] < 0.01
    assert s.taus[-1] == 999 and np.all(np.diff(s.taus) == 20)
    assert make_schedule(20, 1e-4, 0.02, 20).taus.tolist() == list(range(20))


def test_schedule_errors():
    for args in [(0, 1e-4, 0.02, 1), (10, 1e-4, 0.02, 11), (10, 0.03, 0.02, 5), (10, 1e-4, 1.0, 5)]:
        with pytest.raises(ValueError):
            make_schedule(*args)


def test_q_sample_limits():
    rng = make_rng(0)
    x0 = rng.uniform(-1, 1, (2, 1, 4, 4))
    eps = rng.standard_normal(x0.shape)
    s = make_schedule(10, 0.0, 0.1, 5)
    np.testing.assert_array_equal(q_sample(x0, 0, eps, s), x0)
    s.alpha_bars[3] = 0.0
    np.testing.assert_array_equal(q_sample(x0, 3, eps, s), eps)
    with pytest.raises(ValueError):
        q_sample(x0, 10, eps, s)


def test_q_sample_per_sample_timesteps():
    rng = make_rng(1)
    s = make_schedule(100, 1e-4, 0.02, 10)
    x0 = rng.uniform(-1, 1, (3, 1, 2, 2))
    eps = rng.standard_normal(x0.shape)
    t = np.array([0, 50, 99])
    out = q_sample(x0, t, eps, s)
    for i in range(3):
        np.testing.assert_allclose(out[i], q_sample(x0[i], t[i], eps[i], s), atol=1e-15)


class Stub:
    def __init__(self, offset):
        self.offset = offset
        self.eps = None

    def __call__(self, x_t, x_lq, t, priors):
        return Tensor(self.eps + self.offset, dtype=np.float64)


def _capture_eps(monkeypatch, stub):
    """Let the stub see the noise training_loss draws."""
    import chardiff.diffusion as D
    orig = D.q_sample

    def spy(x0, t, eps, schedule):
        stub.eps = eps
        return orig(x0, t, eps, schedule)
    monkeypatch.setattr(D, "q_sample", spy)


@pytest.mark.parametrize("offset,expected", [(0.0, 0.0), (0.5, 0.25)])
def test_training_loss_stubs(monkeypatch, offset, expected):
    stub = Stub(offset)
    _capture_eps(monkeypatch, stub)
    x0 = np.zeros((4, 1, 4, 4))
    loss = training_loss(x0, x0, None, stub, make_schedule(50, 1e-4, 0.02, 5), make_rng(0))
    assert float(loss.data) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_training_loss_nonnegative(seed):
    rng = make_rng(seed)
    w = rng.standard_normal()

    def model(x_t, x_lq, t, priors):
        return Tensor(w * x_t + x_lq, dtype=np.float64)
    x0 = rng.uniform(-1, 1, (2, 1, 3, 3))
    assert float(training_loss(x0, x0, None, model, make_schedule(20, 1e-4, 0.02, 4), rng).data) >= 0


def test_training_loss_empty_batch():
    with pytest.raises(ValueError):
        training_loss(np.zeros((0, 1, 2, 2)), np.zeros((0, 1, 2, 2)), None, None,
                      make_schedule(10, 1e-4, 0.02, 2), make_rng(0))


def test_oracle_sampler_recovers_x0():
    s = make_schedule(1000, 1e-4, 0.02, 50)
    rng = make_rng(2)
    x0 = np.clip(rng.uniform(-1, 1, (20, 1, 8, 8)), -1, 1)
    out = restore(np.zeros_like(x0), None, oracle_model(x0, s), s, "deterministic", seed=0)
    for a, b in zip(out, x0):
        assert psnr((a + 1) * 127.5, (b + 1) * 127.5) > 50


def test_single_step_sampler_is_one_clamped_estimate():
    s = make_schedule(100, 1e-4, 0.02, 1)
    rng = make_rng(3)
    x0 = rng.uniform(-1, 1, (2, 1, 4, 4))
    noise = make_rng(5, "restore").standard_normal(x0.shape)
    eps = 0.3 * np.ones_like(x0)
    out = restore(np.zeros_like(x0), None, lambda *a: eps, s, "deterministic", seed=5)
    ab = s.alpha_bars[99]
    np.testing.assert_allclose(out, np.clip((noise - np.sqrt(1 - ab) * eps) / np.sqrt(ab), -1, 1))


def test_ancestral_sampler_is_reproducible():
    s = make_schedule(100, 1e-4, 0.02, 10)
    x_lq = make_rng(4).uniform(-1, 1, (2, 1, 4, 4))
    model = lambda x_t, x_lq, t, p: 0.1 * x_t - 0.2 * x_lq  # noqa: E731
    a = restore(x_lq, None, model, s, "ancestral", seed=9)
    b = restore(x_lq, None, model, s, "ancestral", seed=9)
    c = restore(x_lq, None, model, s, "ancestral", seed=10)
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()


def test_trajectory_is_clamped():
    s = make_schedule(100, 1e-4, 0.02, 10)
    traj = []
    restore(np.zeros((1, 1, 3, 3)), None, lambda x, *a: -5 * x, s, "ancestral", seed=0, trajectory=traj)
    assert len(traj) == 10
    assert all(np.all(np.abs(x) <= 1) for x in traj)


def test_unknown_mode():
    with pytest.raises(ValueError):
        restore(np.zeros((1, 1, 2, 2)), None, None, make_schedule(10, 1e-4, 0.02, 2), "ddim")


def test_full_stride_posterior_matches_ddpm():
    s = make_schedule(200, 1e-4, 0.02, 200)
    rng = make_rng(6)
    x0 = rng.uniform(-1, 1, 5)
    xt = rng.standard_normal(5)
    for t in range(1, 200):
        mean, var = posterior(s, t, t - 1, x0, xt)
        beta = s.betas[t]
        ab, ab_prev = s.alpha_bars[t], s.alpha_bars[t - 1]
        ref_mean = (np.sqrt(ab_prev) * beta / (1 - ab)) * x0 + (np.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)) * xt
        ref_var = (1 - ab_prev) / (1 - ab) * beta
        np.testing.assert_allclose(mean, ref_mean, rtol=1e-8, atol=1e-14)
        assert var == pytest.approx(ref_var, rel=1e-8)
