"""Randomized scalar functions over every differentiable primitive.

Each builder takes a generator and returns ``(f, params)`` in float64, with
the primitive's output contracted against a fixed random weight so that
every output entry contributes to the gradient.
"""

import numpy as np

from synthkd import autodiff as ad
from synthkd.autodiff import Array
from synthkd.distill import hard_label_loss, kd_loss


def _p(rng, *shape, scale=1.0):
    return Array(rng.standard_normal(shape) * scale, requires_grad=True)


def _project(y: Array, rng) -> Array:
    w = Array(rng.standard_normal(y.shape))
    return ad.sum(ad.mul(y, w))


def _dims(rng, n, lo=1, hi=5):
    return [int(v) for v in rng.integers(lo, hi + 1, size=n)]


def case_add(rng):
    shape = _dims(rng, 2)
    a, b = _p(rng, *shape), _p(rng, *shape)
    w = Array(rng.standard_normal(shape))
    return lambda: ad.sum(ad.mul(ad.add(a, b), w)), [a, b]


def case_sub(rng):
    shape = _dims(rng, 2)
    a, b = _p(rng, *shape), _p(rng, *shape)
    w = Array(rng.standard_normal(shape))
    return lambda: ad.sum(ad.mul(ad.sub(a, b), w)), [a, b]


def case_mul(rng):
    shape = _dims(rng, 3)
    a, b = _p(rng, *shape), _p(rng, *shape)
    w = Array(rng.standard_normal(shape))
    return lambda: ad.sum(ad.mul(ad.mul(a, b), w)), [a, b]


def case_scalar_mul(rng):
    a, s = _p(rng, *_dims(rng, 2)), _p(rng)
    w = Array(rng.standard_normal(a.shape))
    return lambda: ad.sum(ad.mul(ad.mul(a, s), w)), [a, s]


def case_matmul(rng):
    n, k, m = _dims(rng, 3)
    a, b = _p(rng, n, k), _p(rng, k, m)
    w = Array(rng.standard_normal((n, m)))
    return lambda: ad.sum(ad.mul(ad.matmul(a, b), w)), [a, b]


def case_affine(rng):
    n, i, o = _dims(rng, 3)
    x, wt, b = _p(rng, n, i), _p(rng, i, o), _p(rng, o)
    w = Array(rng.standard_normal((n, o)))
    return lambda: ad.sum(ad.mul(ad.affine(x, wt, b), w)), [x, wt, b]


def case_conv2d(rng):
    n, c, o = _dims(rng, 3, 1, 3)
    h, wd = _dims(rng, 2, 3, 6)
    k = int(rng.choice([1, 3]))
    x, kern, b = _p(rng, n, c, h, wd), _p(rng, o, c, k, k), _p(rng, o)
    w = Array(rng.standard_normal((n, o, h, wd)))
    return lambda: ad.sum(ad.mul(ad.conv2d(x, kern, b), w)), [x, kern, b]


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return Array(np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x), requires_grad=True)


def case_relu(rng):
    x = _away_from_zero(rng, _dims(rng, 2))
    w = Array(rng.standard_normal(x.shape))
    return lambda: ad.sum(ad.mul(ad.relu(x), w)), [x]


def case_silu(rng):
    x = _p(rng, *_dims(rng, 2), scale=2.0)
    w = Array(rng.standard_normal(x.shape))
    return lambda: ad.sum(ad.mul(ad.silu(x), w)), [x]


def case_sum(rng):
    x = _p(rng, *_dims(rng, 3))
    return lambda: ad.mul(ad.sum(ad.mul(x, x)), 0.5), [x]


def case_mean(rng):
    x = _p(rng, *_dims(rng, 3))
    return lambda: ad.mean(ad.mul(x, x)), [x]


def case_mse(rng):
    shape = _dims(rng, 3)
    a, b = _p(rng, *shape), _p(rng, *shape)
    return lambda: ad.mse(a, b), [a, b]


def case_softmax(rng):
    x = _p(rng, *_dims(rng, 2, 1, 6), scale=2.0)
    w = Array(rng.standard_normal(x.shape))
    return lambda: ad.sum(ad.mul(ad.softmax(x), w)), [x]


def case_log_softmax(rng):
    x = _p(rng, *_dims(rng, 2, 1, 6), scale=2.0)
    w = Array(rng.standard_normal(x.shape))
    return lambda: ad.sum(ad.mul(ad.log_softmax(x), w)), [x]


def case_embedding(rng):
    rows, dim, n = _dims(rng, 3)
    table = _p(rng, rows, dim)
    idx = rng.integers(0, rows, size=n)
    w = Array(rng.standard_normal((n, dim)))
    return lambda: ad.sum(ad.mul(ad.embedding_lookup(table, idx), w)), [table]


def case_reshape(rng):
    a, b = _dims(rng, 2)
    x = _p(rng, a, b)
    w = Array(rng.standard_normal((b, a)))
    return lambda: ad.sum(ad.mul(ad.mul(ad.reshape(x, (b, a)), ad.reshape(x, (b, a))), w)), [x]


def case_avg_pool2(rng):
    n, c = _dims(rng, 2, 1, 3)
    h, wd = (2 * v for v in _dims(rng, 2, 1, 3))
    x = _p(rng, n, c, h, wd)
    return lambda: _project(ad.avg_pool2(x), np.random.default_rng(7)), [x]


def case_upsample2(rng):
    n, c, h, wd = _dims(rng, 4, 1, 3)
    x = _p(rng, n, c, h, wd)
    return lambda: _project(ad.upsample2(x), np.random.default_rng(7)), [x]


def case_add_channel_bias(rng):
    n, c, h, wd = _dims(rng, 4, 1, 3)
    x, v = _p(rng, n, c, h, wd), _p(rng, n, c)
    return lambda: _project(ad.add_channel_bias(x, v), np.random.default_rng(7)), [x, v]


def case_pick(rng):
    n, k = _dims(rng, 2, 1, 6)
    x = _p(rng, n, k)
    idx = rng.integers(0, k, size=n)
    w = Array(rng.standard_normal(n))
    return lambda: ad.sum(ad.mul(ad.pick(x, idx), w)), [x]


def case_kd_loss(rng):
    n, k = _dims(rng, 2, 1, 8)
    tau = float(rng.choice([1.0, 2.0, 4.0, 10.0]))
    q_t = rng.standard_normal((n, k)) * 3
    q_s = _p(rng, n, k, scale=3.0)
    return lambda: kd_loss(q_t, q_s, tau), [q_s]


def case_hard_label_loss(rng):
    n, k = _dims(rng, 2, 1, 8)
    q_s = _p(rng, n, k, scale=3.0)
    labels = rng.integers(0, k, size=n)
    return lambda: hard_label_loss(q_s, labels), [q_s]


PRIMITIVES = {
    "add": case_add, "sub": case_sub, "mul": case_mul, "scalar_mul": case_scalar_mul,
    "matmul": case_matmul, "affine": case_affine, "conv2d": case_conv2d, "relu": case_relu,
    "silu": case_silu, "sum": case_sum, "mean": case_mean, "mse": case_mse, "softmax": case_softmax,
    "log_softmax": case_log_softmax, "embedding_lookup": case_embedding, "reshape": case_reshape,
    "avg_pool2": case_avg_pool2, "upsample2": case_upsample2, "add_channel_bias": case_add_channel_bias,
    "pick": case_pick,
}
LOSSES = {"kd_loss": case_kd_loss, "hard_label_loss": case_hard_label_loss}
