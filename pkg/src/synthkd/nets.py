"""Conditional noise-prediction network and the classifier capacity ladder."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array

IMAGE_SHAPE = (1, 16, 16)
TIME_EMBED_DIM = 32


class Module:
    """Ordered collection of named parameter arrays."""

    def __init__(self) -> None:
        self.params: dict[str, Array] = {}

    def _param(self, name: str, value: np.ndarray) -> Array:
        p = Array(value, requires_grad=True)
        self.params[name] = p
        return p

    def parameters(self) -> list[Array]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in self.params.items():
            v = np.asarray(state[k])
            if v.shape != p.shape:
                raise ValueError(f"{k}: shape {v.shape} != {p.shape}")
            p.data = v.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        """Cast parameters in place (float64 for gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, p in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


@dataclass(frozen=True)
class Condition:
    """A class label, or the null condition when ``label`` is None."""

    label: int | None = None

    def index(self, num_classes: int) -> int:
        if self.label is None:
            return num_classes
        if not 0 <= self.label < num_classes:
            raise IndexError(f"class {self.label} outside [0, {num_classes})")
        return int(self.label)


NULL = Condition(None)


def sinusoidal_embedding(t: np.ndarray, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser(Module):
    """Two-level convolutional encoder-decoder predicting the added noise.

    Row ``num_classes`` of the class table is the learned null condition.
    The output convolution starts at zero, so a fresh model predicts 0.
    """

    kind = "denoiser"

    def __init__(self, num_classes: int = 10, width: int = 16, embed_dim: int = 64,
                 t_max: int = 400, seed: int = 0):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.embed_dim = embed_dim
        self.t_max = t_max
        self.seed = seed
        rng = np.random.default_rng(seed)
        c, c2, e = width, 2 * width, embed_dim
        self._param("time.w", _he(rng, (TIME_EMBED_DIM, e), TIME_EMBED_DIM))
        self._param("time.b", np.zeros(e, np.float32))
        self._param("class_table", (rng.standard_normal((num_classes + 1, e)) * 0.5).astype(np.float32))
        self._param("in.w", _he(rng, (c, 1, 3, 3), 9))
        self._param("in.b", np.zeros(c, np.float32))
        for name, cin, cout in [("down", c, c), ("mid1", c, c2), ("mid2", c2, c2), ("up", c2, c)]:
            self._param(f"{name}.w", _he(rng, (cout, cin, 3, 3), 9 * cin))
            self._param(f"{name}.b", np.zeros(cout, np.float32))
            self._param(f"{name}.emb_w", (rng.standard_normal((e, cout)) * np.sqrt(1.0 / e)).astype(np.float32))
            self._param(f"{name}.emb_b", np.zeros(cout, np.float32))
        self._param("out.w", np.zeros((1, c, 3, 3), np.float32))
        self._param("out.b", np.zeros(1, np.float32))

    def config(self) -> dict:
        return {"num_classes": self.num_classes, "width": self.width,
                "embed_dim": self.embed_dim, "t_max": self.t_max, "seed": self.seed}

    def _block(self, name: str, h: Array, emb: Array) -> Array:
        p = self.params
        h = ad.conv2d(h, p[f"{name}.w"], p[f"{name}.b"])
        h = ad.add_channel_bias(h, ad.affine(emb, p[f"{name}.emb_w"], p[f"{name}.emb_b"]))
        return ad.silu(h)

    def forward(self, x: Array, t, c) -> Array:
        """Predicted noise for a batch ``x`` (B, 1, 16, 16).

        ``t`` holds timesteps in ``[1, t_max]`` and ``c`` class indices in
        ``[0, num_classes]`` (the last value is the null condition).
        """
        t = np.asarray(t).reshape(-1)
        c = np.asarray(c).reshape(-1)
        if x.ndim != 4 or x.shape[1:] != IMAGE_SHAPE:
            raise ad.ShapeError(f"denoiser expects (B, 1, 16, 16), got {x.shape}")
        if t.shape != (x.shape[0],) or c.shape != (x.shape[0],):
            raise ad.ShapeError(f"t {t.shape} and c {c.shape} must match batch {x.shape[0]}")
        if t.size and (t.min() < 1 or t.max() > self.t_max):
            raise ValueError(f"timestep outside [1, {self.t_max}]")
        if c.size and (c.min() < 0 or c.max() > self.num_classes):
            raise IndexError(f"condition index outside [0, {self.num_classes}]")
        p = self.params
        temb = Array(sinusoidal_embedding(t).astype(p["time.w"].dtype))
        emb = ad.silu(ad.add(ad.affine(temb, p["time.w"], p["time.b"]),
                             ad.embedding_lookup(p["class_table"], c.astype(np.int64))))
        h0 = ad.silu(ad.conv2d(x, p["in.w"], p["in.b"]))
        h1 = self._block("down", h0, emb)
        h = self._block("mid1", ad.avg_pool2(h1), emb)
        h = self._block("mid2", h, emb)
        h = ad.upsample2(ad.conv2d(h, p["up.w"], p["up.b"]))
        h = ad.add_channel_bias(ad.add(h, h1), ad.affine(emb, p["up.emb_w"], p["up.emb_b"]))
        h = ad.silu(h)
        return ad.conv2d(h, p["out.w"], p["out.b"])

    def predict(self, x: np.ndarray, t, c) -> np.ndarray:
        """Inference without recording; numpy in, numpy out."""
        with ad.no_tape():
            return self.forward(Array(x), t, c).data

    def __call__(self, x: np.ndarray, t, c) -> np.ndarray:
        return self.predict(x, t, c)


# Conv blocks and base width per tier; width doubles at every block.
TIERS = {"S": (2, 8), "M": (3, 16), "L": (4, 32)}


def tier_parameter_count(tier: str, num_classes: int = 10) -> int:
    """Parameter count of a tier, computed from the layer shapes alone."""
    blocks, width = TIERS[tier]
    cin, side, total = 1, IMAGE_SHAPE[1], 0
    for i in range(blocks):
        cout = width * 2 ** i
        total += cout * cin * 9 + cout
        cin, side = cout, side // 2
    return total + cin * side * side * num_classes + num_classes


def _check_ladder(num_classes: int) -> None:
    counts = [tier_parameter_count(t, num_classes) for t in ("S", "M", "L")]
    if not counts[0] < counts[1] < counts[2]:
        raise ValueError(f"capacity tiers are not ordered by size for K={num_classes}: {counts}")


class Classifier(Module):
    """Plain conv-relu-pool stack followed by a linear head."""

    kind = "classifier"

    def __init__(self, tier: str = "M", num_classes: int = 10, seed: int = 0):
        super().__init__()
        if tier not in TIERS:
            raise ValueError(f"unknown capacity tier {tier!r}; choose from {sorted(TIERS)}")
        _check_ladder(num_classes)
        self.tier = tier
        self.num_classes = num_classes
        self.seed = seed
        rng = np.random.default_rng(seed)
        blocks, width = TIERS[tier]
        cin, side = 1, IMAGE_SHAPE[1]
        for i in range(blocks):
            cout = width * 2 ** i
            self._param(f"conv{i}.w", _he(rng, (cout, cin, 3, 3), 9 * cin))
            self._param(f"conv{i}.b", np.zeros(cout, np.float32))
            cin, side = cout, side // 2
        self.features = cin * side * side
        self._param("head.w", (rng.standard_normal((self.features, num_classes))
                               * np.sqrt(1.0 / self.features)).astype(np.float32))
        self._param("head.b", np.zeros(num_classes, np.float32))

    def config(self) -> dict:
        return {"tier": self.tier, "num_classes": self.num_classes, "seed": self.seed}

    def forward(self, x: Array) -> Array:
        if x.ndim != 4 or x.shape[1:] != IMAGE_SHAPE:
            raise ad.ShapeError(f"classifier expects (B, 1, 16, 16), got {x.shape}")
        p = self.params
        h = x
        for i in range(TIERS[self.tier][0]):
            h = ad.avg_pool2(ad.relu(ad.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"])))
        h = ad.reshape(h, (x.shape[0], self.features))
        return ad.affine(h, p["head.w"], p["head.b"])

    def predict(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Logits for a numpy batch, evaluated in chunks without recording."""
        x = np.asarray(x, dtype=self.params["head.w"].dtype)
        out = []
        with ad.no_tape():
            for i in range(0, len(x), batch_size):
                out.append(self.forward(Array(x[i:i + batch_size])).data)
        if not out:
            return np.zeros((0, self.num_classes), dtype=x.dtype)
        return np.concatenate(out)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.predict(x)


def build_classifier_ladder(num_classes: int = 10, seed: int = 0) -> dict[str, Classifier]:
    ladder = {t: Classifier(t, num_classes, seed) for t in ("S", "M", "L")}
    counts = [ladder[t].parameter_count() for t in ("S", "M", "L")]
    assert counts[0] < counts[1] < counts[2], counts
    return ladder
