import math

import numpy as np
import pytest

from synthkd.data import RealDataset
from synthkd.diffusion import (GenConfig, denoise_step, forward_noise, generate_dataset, guided_noise,
                               make_schedule, respace, sample_chain, train_denoiser)
from synthkd.errors import ConfigError, NumericalError, ShapeError
from synthkd.nets import Denoiser

import oracles


class LinearDenoiser:
    """eps = a * x under a class condition and b * x under the null condition."""

    num_classes = 2

    def __init__(self, a, b):
        self.a, self.b = a, b
        self.calls = []

    def __call__(self, x, t, c):
        self.calls.append((np.array(t), np.array(c)))
        coef = np.where(np.asarray(c) == self.num_classes, self.b, self.a).reshape(-1, 1, 1, 1)
        return coef * x


def test_two_step_schedule():
    s = make_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.sigma, np.sqrt([0.1, 0.2]))


def test_default_schedule_monotone():
    s = make_schedule()
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))
    assert np.all(s.sigma > 0)


def test_default_alpha_bar_matches_product_oracle():
    ref = oracles.linear_alpha_bar(400, 1e-4, 0.02)
    np.testing.assert_allclose(make_schedule().alpha_bar, ref, rtol=1e-12)


def test_default_final_alpha_bar_below_one_percent():
    # ā_T for the default linear schedule; the independent product gives 0.01747
    assert make_schedule().alpha_bar[-1] < 0.01


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_bounds(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


def test_forward_noise_plug_in():
    s = make_schedule(2, 0.1, 0.2)
    s = type(s)(s.T_train, s.beta, np.array([0.25, 0.2]), s.sigma, s.timesteps)
    out = forward_noise(np.ones((1, 1, 2, 2)), 1, np.zeros((1, 1, 2, 2)), s)
    np.testing.assert_array_equal(out, 0.5)


def test_forward_noise_identity_limit(rng):
    s = make_schedule(10, 1e-12, 2e-12)
    x0 = rng.standard_normal((2, 1, 4, 4))
    np.testing.assert_allclose(forward_noise(x0, 1, rng.standard_normal(x0.shape), s), x0, atol=1e-5)


def test_forward_noise_is_linear(rng):
    s = make_schedule()
    x0, x1, e0, e1 = (rng.standard_normal((3, 1, 4, 4)) for _ in range(4))
    t = np.array([1, 50, 400])
    lhs = forward_noise(2 * x0 + x1, t, 2 * e0 + e1, s)
    rhs = 2 * forward_noise(x0, t, e0, s) + forward_noise(x1, t, e1, s)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_forward_noise_rejects_out_of_range_t():
    s = make_schedule()
    with pytest.raises(ValueError):
        forward_noise(np.zeros(3), 0, np.zeros(3), s)
    with pytest.raises(ValueError):
        forward_noise(np.zeros(3), 401, np.zeros(3), s)


def test_guided_noise_plug_in():
    assert guided_noise(np.array([1.0]), np.array([0.0]), 2)[0] == 2.0


def test_guided_noise_identity_and_errors(rng):
    ec, eu = rng.standard_normal(5), rng.standard_normal(5)
    out = guided_noise(ec, eu, 1)
    assert out.tobytes() == ec.tobytes() and out is not ec
    with pytest.raises(ShapeError):
        guided_noise(ec, eu[:4], 2)
    with pytest.raises(ConfigError):
        guided_noise(ec, eu, 0.5)


def test_respace_full_length_is_identity():
    s = make_schedule()
    assert respace(s, 400) is s


def test_respace_keeps_alpha_bar_of_retained_steps():
    s = make_schedule()
    r = respace(s, 50)
    assert r.T == 50 and r.timesteps[0] == 1 and r.timesteps[-1] == 400
    np.testing.assert_array_equal(r.alpha_bar, s.alpha_bar[r.timesteps - 1])
    np.testing.assert_allclose(np.cumprod(1 - r.beta), r.alpha_bar, rtol=1e-12)
    with pytest.raises(ConfigError):
        respace(s, 401)


def test_two_step_chain_matches_hand_evaluation():
    sched = make_schedule(2, 0.1, 0.2)
    model = LinearDenoiser(a=0.3, b=-0.2)
    s, x2, z = 2.5, 0.7, -1.1
    noise = np.zeros((1, 3, 1, 16, 16))
    noise[:, 0] = x2
    noise[:, 1] = z
    noise[:, 2] = 123.0  # must be ignored: the last step adds no noise
    out = sample_chain(model, sched, np.array([1]), s, noise)

    def step(x, beta, ab, z):
        eps = -0.2 * x + s * (0.3 * x - (-0.2 * x))
        return (x - beta / math.sqrt(1 - ab) * eps) / math.sqrt(1 - beta) + math.sqrt(beta) * z
    x1 = step(x2, 0.2, 0.72, z)
    x0 = step(x1, 0.1, 0.9, 0.0)
    np.testing.assert_allclose(out, x0, rtol=0, atol=1e-10)


def test_guidance_one_skips_unconditional_pass():
    model = LinearDenoiser(a=0.3, b=-0.2)
    denoise_step(model, np.ones((2, 1, 16, 16)), 1, np.array([0, 1]), 1.0, make_schedule(2, 0.1, 0.2))
    assert len(model.calls) == 1 and not np.any(model.calls[0][1] == 2)


def test_denoise_step_is_deterministic_given_seed(rng):
    model = LinearDenoiser(0.3, -0.2)
    s = make_schedule(10, 0.01, 0.2)
    x = rng.standard_normal((2, 1, 16, 16))
    a = denoise_step(model, x, 5, [0, 1], 2.0, s, rng=np.random.default_rng(9))
    b = denoise_step(model, x, 5, [0, 1], 2.0, s, rng=np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_denoise_step_reports_nonfinite():
    model = LinearDenoiser(np.inf, 0.0)
    with np.errstate(all="ignore"), pytest.raises(NumericalError, match="t=3"):
        denoise_step(model, np.ones((1, 1, 16, 16)), 3, [0], 2.0, make_schedule(10, 0.01, 0.2),
                     z=np.zeros((1, 1, 16, 16)))


def test_respaced_full_length_equals_unrespaced(rng):
    s = make_schedule(6, 0.01, 0.3)
    model = LinearDenoiser(0.2, 0.1)
    noise = rng.standard_normal((2, 7, 1, 16, 16))
    a = sample_chain(model, s, np.array([0, 1]), 2.0, noise)
    b = sample_chain(model, respace(s, 6), np.array([0, 1]), 2.0, noise)
    assert np.array_equal(a, b)


def _toy(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return RealDataset(rng.uniform(-1, 1, (n, 1, 16, 16)).astype(np.float32), np.arange(n) % 2, "train", 2)


def test_initial_denoiser_loss_is_about_one():
    m = Denoiser(num_classes=2, width=4, t_max=50)
    _, trace = train_denoiser(m, _toy(256), make_schedule(50), epochs=1, batch=256, lr=0.0)
    assert abs(trace.initial - 1.0) < 0.02


def test_no_dropout_leaves_null_row_untouched():
    m = Denoiser(num_classes=2, width=4, t_max=50)
    before = m.params["class_table"].data[2].copy()
    train_denoiser(m, _toy(16), make_schedule(50), epochs=2, batch=8, cond_dropout_p=0.0)
    assert np.array_equal(m.params["class_table"].data[2], before)
    assert not np.array_equal(m.params["class_table"].data[0], Denoiser(2, 4, t_max=50).params["class_table"].data[0])


def test_training_rejects_bad_dropout_and_schedule():
    m = Denoiser(num_classes=2, width=4, t_max=50)
    with pytest.raises(ConfigError):
        train_denoiser(m, _toy(), make_schedule(50), cond_dropout_p=1.0)
    with pytest.raises(ConfigError):
        train_denoiser(m, _toy(), make_schedule(60))


def test_nonfinite_training_loss_reports_step():
    m = Denoiser(num_classes=2, width=4, t_max=50)
    m.params["out.b"].data[:] = np.inf
    with np.errstate(all="ignore"), pytest.raises(NumericalError, match="step 0"):
        train_denoiser(m, _toy(), make_schedule(50), epochs=1, batch=4)


def _tiny_denoiser():
    m = Denoiser(num_classes=3, width=4, t_max=40, seed=5)
    rng = np.random.default_rng(0)
    m.params["out.w"].data[:] = rng.standard_normal(m.params["out.w"].shape) * 0.05
    return m


def test_generate_dataset_counts_and_provenance():
    ds = generate_dataset(_tiny_denoiser(), make_schedule(40), GenConfig(s=2, T_sample=5, per_class_count=2))
    assert len(ds) == 6
    assert np.bincount(ds.labels).tolist() == [2, 2, 2]
    for key in ("s", "T_sample", "seed", "denoiser_digest", "schedule_digest"):
        assert key in ds.provenance
    assert ds.images.min() >= -1 and ds.images.max() <= 1


def test_generate_dataset_is_reproducible_across_workers():
    m, s = _tiny_denoiser(), make_schedule(40)
    cfg = GenConfig(s=3, T_sample=4, per_class_count=7, seed=11)
    a = generate_dataset(m, s, cfg, workers=1)
    b = generate_dataset(m, s, cfg, workers=1)
    c = generate_dataset(m, s, cfg, workers=3)
    assert a.pixels.tobytes() == b.pixels.tobytes() == c.pixels.tobytes()


def test_gen_config_validation():
    with pytest.raises(ConfigError):
        GenConfig(s=0.5)
    with pytest.raises(ConfigError):
        GenConfig(T_sample=0)
    with pytest.raises(ConfigError):
        GenConfig(per_class_count=0)
    with pytest.raises(ConfigError):
        generate_dataset(_tiny_denoiser(), make_schedule(40), GenConfig(T_sample=41, per_class_count=1))


def test_failed_images_are_regenerated(monkeypatch):
    from synthkd import diffusion

    real = diffusion._run_jobs
    seen = []

    def flaky(model, sched, cfg, jobs, attempt=0):
        px, ok = real(model, sched, cfg, jobs, attempt)
        if attempt == 0 and (0, 1) in jobs:
            ok = ok.copy()
            ok[jobs.index((0, 1))] = False
        seen.append(attempt)
        return px, ok
    monkeypatch.setattr(diffusion, "_run_jobs", flaky)
    ds = generate_dataset(_tiny_denoiser(), make_schedule(40), GenConfig(T_sample=3, per_class_count=2))
    assert ds.provenance["regenerated"] == [[0, 1, 1]]
    assert 1 in seen


def test_persistent_failure_aborts(monkeypatch):
    from synthkd import diffusion

    real = diffusion._run_jobs

    def broken(model, sched, cfg, jobs, attempt=0):
        px, ok = real(model, sched, cfg, jobs, attempt)
        return px, np.zeros_like(ok)
    monkeypatch.setattr(diffusion, "_run_jobs", broken)
    with pytest.raises(NumericalError, match="3 sampling attempts"):
        generate_dataset(_tiny_denoiser(), make_schedule(40), GenConfig(T_sample=2, per_class_count=1))
