"""Noise schedules, denoiser training, guided ancestral sampling, dataset generation."""

from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
import multiprocessing

import numpy as np

from . import autodiff as ad
from .data.datasets import RealDataset, SyntheticDataset, quantize
from .errors import ConfigError, NumericalError
from .optim import Adam

log = logging.getLogger(__name__)

CHUNK = 16  # images per sampling chain batch; fixed so results never depend on worker count


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients, indexed by ``t`` in ``[1, T]`` via ``array[t - 1]``.

    ``timesteps`` maps each step to the training timestep the denoiser sees;
    it is ``1..T_train`` for a training schedule and a subsequence after
    respacing.
    """

    T_train: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.T_train).encode())
        for a in (self.beta, self.alpha_bar, self.sigma):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.timesteps, dtype="<i8").tobytes())
        return h.hexdigest()


def make_schedule(T_train: int = 400, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear variance schedule with fixed sampling noise ``sigma_t = sqrt(beta_t)``."""
    if T_train < 2:
        raise ConfigError(f"T_train must be >= 2, got {T_train}")
    if not 0 < beta_min < beta_max < 1:
        raise ConfigError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, T_train)
    return NoiseSchedule(T_train, beta, np.cumprod(1.0 - beta), np.sqrt(beta), np.arange(1, T_train + 1))


def respace(schedule: NoiseSchedule, T_sample: int) -> NoiseSchedule:
    """Evenly spaced sub-schedule with coefficients rebuilt from the kept ``alpha_bar``."""
    if not 1 <= T_sample <= schedule.T_train:
        raise ConfigError(f"T_sample must be in [1, {schedule.T_train}], got {T_sample}")
    if T_sample == schedule.T and np.array_equal(schedule.timesteps, np.arange(1, schedule.T_train + 1)):
        return schedule
    if T_sample == 1:
        keep = np.array([schedule.T_train])
    else:
        keep = np.rint(np.linspace(1, schedule.T_train, T_sample)).astype(np.int64)
    ab = schedule.alpha_bar[keep - 1]
    prev = np.concatenate([[1.0], ab[:-1]])
    beta = 1.0 - ab / prev
    return NoiseSchedule(schedule.T_train, beta, ab, np.sqrt(beta), keep)


def _check_t(t, T: int) -> None:
    t = np.asarray(t)
    if t.size and (t.min() < 1 or t.max() > T):
        raise ValueError(f"timestep outside [1, {T}]")


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``.

    ``t`` is a scalar or one timestep per leading-axis entry.
    """
    _check_t(t, schedule.T)
    ab = schedule.alpha_bar[np.asarray(t) - 1]
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    ab = np.asarray(ab, dtype=x0.dtype) if np.ndim(ab) else float(ab)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@dataclass
class DenoiserTrace:
    losses: np.ndarray

    @property
    def initial(self) -> float:
        return float(self.losses[0])

    @property
    def final(self) -> float:
        tail = max(1, len(self.losses) // 20)
        return float(np.mean(self.losses[-tail:]))

    def smoothed(self, decay: float = 0.98) -> np.ndarray:
        out = np.empty_like(self.losses)
        acc = self.losses[0]
        for i, v in enumerate(self.losses):
            acc = decay * acc + (1 - decay) * v if i else v
            out[i] = acc
        return out


def train_denoiser(model, dataset: RealDataset, schedule: NoiseSchedule, epochs: int = 40,
                   batch: int = 64, lr: float = 2e-3, cond_dropout_p: float = 0.1, seed: int = 0,
                   ema_decay: float = 0.0, progress=None):
    """Minimise the noise-prediction MSE with random null-condition dropout.

    Each step draws ``t`` uniformly, forms ``x_t`` with :func:`forward_noise`
    and swaps labels for the null condition with probability
    ``cond_dropout_p``.  With ``ema_decay > 0`` the returned model carries an
    exponential moving average of the weights.
    """
    if not 0 <= cond_dropout_p < 1:
        raise ConfigError(f"cond_dropout_p must be in [0, 1), got {cond_dropout_p}")
    if schedule.T_train != model.t_max:
        raise ConfigError(f"schedule has T_train={schedule.T_train} but the denoiser expects {model.t_max}")
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    ema = {k: p.data.copy() for k, p in model.params.items()} if ema_decay else None
    x_all, y_all = dataset.images, dataset.labels
    losses = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(x_all))
        for i in range(0, len(order) - batch + 1, batch):
            idx = order[i:i + batch]
            x0 = x_all[idx]
            t = rng.integers(1, schedule.T_train + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            c = np.where(rng.random(len(idx)) < cond_dropout_p, model.num_classes, y_all[idx])
            xt = forward_noise(x0, t, eps, schedule).astype(np.float32)
            with ad.Tape():
                loss = ad.mse(model.forward(ad.Array(xt), t, c), ad.Array(eps))
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite denoiser loss at step {step}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            if ema is not None:
                for k, p in model.params.items():
                    ema[k] += (1 - ema_decay) * (p.data - ema[k])
            losses.append(value)
            if progress is not None:
                progress(step, value)
            step += 1
    if ema is not None:
        model.load_state_dict(ema)
    return model, DenoiserTrace(np.asarray(losses))


def guided_noise(eps_cond: np.ndarray, eps_uncond: np.ndarray, s: float) -> np.ndarray:
    """Classifier-free guidance: ``eps_uncond + s * (eps_cond - eps_uncond)``."""
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ad.ShapeError(f"guided_noise: shape mismatch {np.shape(eps_cond)} vs {np.shape(eps_uncond)}")
    if s < 1:
        raise ConfigError(f"guidance scale must be >= 1, got {s}")
    if s == 1:
        return np.array(eps_cond, copy=True)
    return eps_uncond + s * (eps_cond - eps_uncond)


def _guided_eps(model, x: np.ndarray, t_model: int, c: np.ndarray, s: float) -> np.ndarray:
    n = len(x)
    tt = np.full(n, t_model)
    if s == 1:  # the unconditional pass would cancel exactly
        return guided_noise(model(x, tt, c), np.zeros_like(x), 1)
    both = model(np.concatenate([x, x]), np.concatenate([tt, tt]),
                 np.concatenate([c, np.full(n, model.num_classes)]))
    return guided_noise(both[:n], both[n:], s)


def denoise_step(model, x_t: np.ndarray, t: int, c, s: float, schedule: NoiseSchedule,
                 rng: np.random.Generator | None = None, z: np.ndarray | None = None,
                 check: bool = True) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}`` with fixed variance ``sigma_t**2``.

    ``t`` indexes ``schedule`` (possibly respaced); ``model`` is any callable
    ``(x, t_model, c) -> eps`` exposing ``num_classes``.  The final step
    (``t == 1``) adds no noise.
    """
    _check_t(t, schedule.T)
    c = np.broadcast_to(np.asarray(c), (len(x_t),))
    eps_hat = _guided_eps(model, x_t, int(schedule.timesteps[t - 1]), c, s)
    beta = float(schedule.beta[t - 1])
    ab = float(schedule.alpha_bar[t - 1])
    x = (x_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(1.0 - beta)
    if t > 1:
        if z is None:
            if rng is None:
                raise ValueError("denoise_step needs rng or z before the final step")
            z = rng.standard_normal(x_t.shape).astype(x_t.dtype)
        x = x + float(schedule.sigma[t - 1]) * z
    if check and not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite sample at chain position t={t}")
    return x.astype(x_t.dtype, copy=False)


def sample_chain(model, schedule: NoiseSchedule, c: np.ndarray, s: float, noise: np.ndarray,
                 check: bool = True) -> np.ndarray:
    """Run the full reverse chain; ``noise[:, 0]`` is ``x_T`` and ``noise[:, k]`` the step-k draw."""
    x = noise[:, 0]
    for k, t in enumerate(range(schedule.T, 0, -1)):
        x = denoise_step(model, x, t, c, s, schedule, z=noise[:, k + 1] if t > 1 else None, check=check)
    return x


@dataclass(frozen=True)
class GenConfig:
    s: float = 2.0
    T_sample: int = 100
    per_class_count: int = 100
    seed: int = 0
    classes: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.s < 1:
            raise ConfigError(f"guidance scale s must be >= 1, got {self.s}")
        if self.T_sample < 1:
            raise ConfigError(f"T_sample must be >= 1, got {self.T_sample}")
        if self.per_class_count < 1:
            raise ConfigError(f"per_class_count must be >= 1, got {self.per_class_count}")


def _image_noise(cfg: GenConfig, cls: int, index: int, attempt: int, shape) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, cls, index, attempt]))
    return rng.standard_normal(shape).astype(np.float32)


def _run_jobs(model, sched: NoiseSchedule, cfg: GenConfig, jobs, attempt: int = 0):
    shape = (sched.T, 1, 16, 16)
    noise = np.stack([_image_noise(cfg, k, i, attempt, shape) for k, i in jobs])
    labels = np.array([k for k, _ in jobs])
    with np.errstate(all="ignore"):
        x = sample_chain(model, sched, labels, cfg.s, noise, check=False)
    ok = np.all(np.isfinite(x.reshape(len(jobs), -1)), axis=1)
    x = np.where(ok[:, None, None, None], x, 0)
    return quantize(x), ok


_POOL_STATE: dict = {}


def _pool_chunk(chunk):
    st = _POOL_STATE
    return _run_jobs(st["model"], st["sched"], st["cfg"], chunk)


def worker_cap(requested: int | None) -> int:
    cap = os.environ.get("SYNTHKD_THREADS")
    n = requested if requested is not None else (int(cap) if cap else 1)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def generate_dataset(model, schedule: NoiseSchedule, config: GenConfig, workers: int | None = None,
                     progress=None) -> SyntheticDataset:
    """Sample ``per_class_count`` guided images per class.

    Each image draws all of its randomness from a generator keyed on
    ``(seed, class, index, attempt)`` and images are batched in fixed
    canonical chunks, so the output bytes do not depend on ``workers``.
    Images whose chain goes non-finite are redrawn with the next attempt
    key, at most three attempts in total.
    """
    sched = respace(schedule, config.T_sample)
    classes = tuple(range(model.num_classes)) if config.classes is None else tuple(config.classes)
    for k in classes:
        if not 0 <= k < model.num_classes:
            raise ConfigError(f"class {k} outside [0, {model.num_classes})")
    jobs = [(k, i) for k in classes for i in range(config.per_class_count)]
    chunks = [jobs[i:i + CHUNK] for i in range(0, len(jobs), CHUNK)]
    n_workers = min(worker_cap(workers), len(chunks))
    results = []
    if n_workers > 1:
        _POOL_STATE.update(model=model, sched=sched, cfg=config)
        try:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(n_workers, mp_context=ctx) as pool:
                for j, r in enumerate(pool.map(_pool_chunk, chunks)):
                    results.append(r)
                    if progress is not None:
                        progress(j, len(chunks))
        finally:
            _POOL_STATE.clear()
    else:
        for j, chunk in enumerate(chunks):
            results.append(_run_jobs(model, sched, config, chunk))
            if progress is not None:
                progress(j, len(chunks))
    pixels = np.concatenate([r[0] for r in results])
    ok = np.concatenate([r[1] for r in results])
    regenerated = []
    for pos in np.flatnonzero(~ok):
        k, i = jobs[pos]
        for attempt in (1, 2):
            px, good = _run_jobs(model, sched, config, [(k, i)], attempt)
            if good[0]:
                pixels[pos] = px[0]
                regenerated.append([int(k), int(i), attempt])
                log.warning("image (class %d, index %d) regenerated on attempt %d", k, i, attempt)
                break
        else:
            raise NumericalError(f"image (class {k}, index {i}) failed 3 sampling attempts")
    provenance = {
        "s": float(config.s), "T_sample": int(config.T_sample), "seed": int(config.seed),
        "per_class_count": int(config.per_class_count), "classes": [int(k) for k in classes],
        "T_train": int(schedule.T_train), "denoiser_digest": model.digest() if hasattr(model, "digest") else None,
        "schedule_digest": schedule.digest(), "regenerated": regenerated,
    }
    labels = np.array([k for k, _ in jobs], dtype=np.int64)
    return SyntheticDataset(pixels, labels, model.num_classes, provenance)
