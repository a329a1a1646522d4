"""Fixed-topology tanh MLPs with hand-written reverse mode, Gaussian heads and Adam.

Parameters are kept as a flat list of arrays ``[W0, b0, W1, b1, ...]`` with
``W`` of shape ``(fan_in, fan_out)`` so that a batch ``X @ W + b`` is the
forward map. Everything is float64.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class CheckpointError(ValueError):
    pass


def orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return np.ascontiguousarray(gain * q[:fan_in, :fan_out])


class Mlp:
    """Dense network ``sizes[0] -> ... -> sizes[-1]``; tanh between layers, linear output."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, out_gain: float = 1.0,
                 hidden_gain: float = 1.0, out_bias: float = 0.0):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[np.ndarray] = []
        n_layers = len(self.sizes) - 1
        for i, (fi, fo) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = out_gain if i == n_layers - 1 else hidden_gain
            self.params.append(orthogonal(rng, fi, fo, gain))
            self.params.append(np.full(fo, out_bias if i == n_layers - 1 else 0.0))
        self._version = 0

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def touch(self) -> None:
        """Mark parameters as modified; caches from earlier forwards become stale."""
        self._version += 1

    def forward(self, x):
        """Return ``(output, cache)``. ``x`` may be a vector or a batch."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[-1] != self.in_dim:
            raise ValueError(f"input dim {h.shape[-1]} != expected {self.in_dim}")
        acts = [h]
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            h = h @ W + b
            if i < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        out = h[0] if single else h
        return out, {"acts": acts, "single": single, "version": self._version}

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out) -> list[np.ndarray]:
        """Gradients of ``sum(grad_out * output)`` w.r.t. every parameter."""
        if cache["version"] != self._version:
            raise RuntimeError("stale cache: parameters changed since forward()")
        acts = cache["acts"]
        g = np.asarray(grad_out, dtype=float)
        if cache["single"]:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.params[2 * i].T
        return grads

    def input_grad(self, cache, grad_out) -> np.ndarray:
        acts = cache["acts"]
        g = np.asarray(grad_out, dtype=float)
        if cache["single"]:
            g = g[None, :]
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            g = g @ self.params[2 * i].T
        return g[0] if cache["single"] else g

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.sizes = list(self.sizes)
        other.params = [p.copy() for p in self.params]
        other._version = 0
        return other

    def to_dict(self) -> dict:
        return {
            "dims": list(self.sizes),
            "layers": [{"shape": list(self.params[2 * i].shape),
                        "weight": self.params[2 * i].ravel().tolist(),
                        "bias": self.params[2 * i + 1].tolist()} for i in range(self.n_layers)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        net = cls.__new__(cls)
        net.sizes = [int(s) for s in data["dims"]]
        net.params = []
        for layer in data["layers"]:
            net.params.append(np.asarray(layer["weight"], float).reshape(layer["shape"]))
            net.params.append(np.asarray(layer["bias"], float))
        net._version = 0
        for i in range(net.n_layers):
            if net.params[2 * i].shape != (net.sizes[i], net.sizes[i + 1]):
                raise CheckpointError("layer shape does not match dims")
        return net


def matrix_chain(params, x) -> np.ndarray:
    """Straightforward re-evaluation of an MLP from its parameter list (test oracle)."""
    n = len(params) // 2
    h = np.asarray(x, dtype=float)
    for i in range(n):
        h = np.dot(h, params[2 * i]) + params[2 * i + 1]
        if i < n - 1:
            h = np.tanh(h)
    return h


def gaussian_log_prob(action, mean, log_std):
    z = (np.asarray(action) - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)


def gaussian_sample(mean, log_std, rng: np.random.Generator):
    """Draw ``mean + exp(log_std) * z`` and return it with its log density."""
    mean = np.asarray(mean, dtype=float)
    log_std = np.asarray(log_std, dtype=float)
    z = rng.standard_normal(mean.shape)
    action = mean + np.exp(log_std) * z
    logp = np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)
    return action, logp


class GaussianPolicy:
    """Diagonal Gaussian over actions with an MLP mean and state-independent log-std."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 hidden=(64, 64), init_log_std: float = math.log(0.5), out_gain: float = 0.01,
                 out_bias: float = 0.0):
        self.net = Mlp([in_dim, *hidden, out_dim], rng, out_gain=out_gain, out_bias=out_bias)
        self.log_std = np.full(out_dim, float(init_log_std))
        self.clamp_log_std()

    @property
    def in_dim(self) -> int:
        return self.net.in_dim

    @property
    def out_dim(self) -> int:
        return self.net.out_dim

    def clamp_log_std(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def parameters(self) -> list[np.ndarray]:
        return [*self.net.params, self.log_std]

    def mean(self, x) -> np.ndarray:
        return self.net(x)

    def sample(self, x, rng: np.random.Generator):
        return gaussian_sample(self.net(x), self.log_std, rng)

    def log_prob(self, x, action):
        return gaussian_log_prob(action, self.net(x), self.log_std)

    def entropy(self) -> float:
        return float(np.sum(self.log_std + 0.5 + HALF_LOG_2PI))

    def copy(self) -> "GaussianPolicy":
        other = GaussianPolicy.__new__(GaussianPolicy)
        other.net = self.net.copy()
        other.log_std = self.log_std.copy()
        return other

    def to_dict(self) -> dict:
        return {**self.net.to_dict(), "log_std": self.log_std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianPolicy":
        pol = cls.__new__(cls)
        pol.net = Mlp.from_dict(data)
        pol.log_std = np.asarray(data["log_std"], float)
        if pol.log_std.shape != (pol.net.out_dim,):
            raise CheckpointError("log_std length does not match output dim")
        return pol


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray], lr: float | None = None) -> None:
        """In-place update of ``self.params``."""
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr,
                "m": [m.ravel().tolist() for m in self.m],
                "v": [v.ravel().tolist() for v in self.v]}

    def load_state_dict(self, data: dict) -> None:
        self.t = int(data["t"])
        self.lr = float(data["lr"])
        self.m = [np.asarray(m, float).reshape(p.shape) for m, p in zip(data["m"], self.params)]
        self.v = [np.asarray(v, float).reshape(p.shape) for v, p in zip(data["v"], self.params)]


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], opt: Adam, lr: float | None = None):
    if opt.params is not params:
        raise ValueError("optimizer is bound to a different parameter list")
    opt.step(grads, lr)
    return params


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_by_global_norm(grads, max_norm: float):
    norm = global_norm(grads)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(path, kind: str, model, optimizer: Adam | None = None, extra: dict | None = None) -> None:
    payload = {"format_version": FORMAT_VERSION, "kind": kind, **model.to_dict()}
    payload["optimizer"] = optimizer.state_dict() if optimizer is not None else None
    if extra:
        payload["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path):
    """Return ``(model, payload)``; model is a GaussianPolicy if the file carries a log-std."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    payload = json.loads(path.read_text())
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {version!r} != supported {FORMAT_VERSION}")
    if "log_std" in payload:
        return GaussianPolicy.from_dict(payload), payload
    return Mlp.from_dict(payload), payload
