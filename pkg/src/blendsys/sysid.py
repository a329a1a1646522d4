"""Parameter estimators: unscented Kalman filter, search-parameter model, oracle.

The low-level pieces (sigma points, a single UKF step, SPM prediction and
search update) are plain functions over small state objects. The
``*Estimator`` classes wrap them into the per-episode protocol used by the
blending trainer and the evaluator: a new human arrives, the estimator is
handed whatever it is allowed to see, and returns a parameter estimate that
is held for the episode.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import (ACT_DIM, DEFAULT_BOUNDS, OBS_DIM, PARAM_DIM, EnvConfig, ParamBounds,
                  ParamVector, VecEnv)
from .nn import Adam, Mlp, clip_by_global_norm

ESTIMATOR_KINDS = ("ukf", "spm", "perfect")

UKF_Q = 1e-6
UKF_R_DIAG = (0.02 ** 2, 0.02 ** 2, 0.05 ** 2, 0.05 ** 2)


# --- unscented Kalman filter ---------------------------------------------

def sigma_points(mean, cov, alpha: float = 1e-1, beta: float = 2.0, kappa: float = 0.0):
    """Merwe scaled sigma points. Returns ``(points (2n+1, n), Wm, Wc)``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = mean.size
    lam = alpha * alpha * (n + kappa) - n
    try:
        root = np.linalg.cholesky((n + lam) * cov)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("covariance is not symmetric positive definite") from exc
    pts = np.empty((2 * n + 1, n))
    pts[0] = mean
    pts[1:n + 1] = mean + root.T
    pts[n + 1:] = mean - root.T
    wm = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + (1.0 - alpha * alpha + beta)
    return pts, wm, wc


def unscented_transform(points, wm, wc, noise_cov=None):
    mean = wm @ points
    d = points - mean
    cov = (wc[:, None] * d).T @ d
    if noise_cov is not None:
        cov = cov + noise_cov
    return mean, cov


@dataclass
class UkfState:
    mean: np.ndarray
    cov: np.ndarray
    Q: np.ndarray = field(default_factory=lambda: UKF_Q * np.eye(PARAM_DIM))
    R: np.ndarray = field(default_factory=lambda: np.diag(UKF_R_DIAG))
    alpha: float = 1e-1
    beta: float = 2.0
    kappa: float = 0.0
    bounds: ParamBounds | None = DEFAULT_BOUNDS

    kind = "ukf"

    def to_dict(self) -> dict:
        return {"kind": "ukf", "mean": self.mean.tolist(), "cov": self.cov.tolist(),
                "Q": self.Q.tolist(), "R": self.R.tolist(), "alpha": self.alpha,
                "beta": self.beta, "kappa": self.kappa}

    @classmethod
    def from_dict(cls, d: dict) -> "UkfState":
        return cls(np.asarray(d["mean"], float), np.asarray(d["cov"], float),
                   np.asarray(d["Q"], float), np.asarray(d["R"], float),
                   d["alpha"], d["beta"], d["kappa"])


def ukf_prior(bounds: ParamBounds = DEFAULT_BOUNDS, **kw) -> UkfState:
    """Uninformed prior: bounds midpoint with the variance of a uniform over the box."""
    return UkfState(bounds.midpoint, np.diag(bounds.span ** 2 / 12.0), bounds=bounds, **kw)


def ukf_step(state: UkfState, z) -> UkfState:
    """Predict with identity dynamics, then update with a direct noisy measurement."""
    pts, wm, wc = sigma_points(state.mean, state.cov, state.alpha, state.beta, state.kappa)
    x_pred, P_pred = unscented_transform(pts, wm, wc, state.Q)
    pts, wm, wc = sigma_points(x_pred, P_pred, state.alpha, state.beta, state.kappa)
    z_pts = pts  # identity measurement model
    z_pred, S = unscented_transform(z_pts, wm, wc, state.R)
    Pxz = (wc[:, None] * (pts - x_pred)).T @ (z_pts - z_pred)
    K = np.linalg.solve(S.T, Pxz.T).T
    mean = x_pred + K @ (np.asarray(z, float) - z_pred)
    cov = P_pred - K @ S @ K.T
    cov = 0.5 * (cov + cov.T)
    if state.bounds is not None:
        mean = state.bounds.clip(mean)
    if np.min(np.linalg.eigvalsh(cov)) <= 0:
        raise np.linalg.LinAlgError("UKF covariance lost positive definiteness")
    return UkfState(mean, cov, state.Q, state.R, state.alpha, state.beta, state.kappa, state.bounds)


def kalman_update(mean, cov, z, R, Q=None):
    """Closed-form linear Kalman step for identity dynamics and measurement."""
    P = np.asarray(cov, float) + (0.0 if Q is None else np.asarray(Q, float))
    S = P + R
    K = P @ np.linalg.inv(S)
    return mean + K @ (z - mean), P - K @ P


def measure_params(true, R, rng: np.random.Generator) -> np.ndarray:
    true = true.as_array() if isinstance(true, ParamVector) else np.asarray(true, float)
    R = np.asarray(R, float)
    if not np.any(R):
        return true.copy()
    try:
        L = np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        # semidefinite (e.g. some zero variances): only diagonal R is supported then
        L = np.diag(np.sqrt(np.clip(np.diag(R), 0.0, None)))
    return true + L @ rng.standard_normal(len(true))


# --- search parameter model ----------------------------------------------

SPM_WINDOW = 10
SPM_STEP_DIM = OBS_DIM + ACT_DIM
SPM_INPUT_DIM = SPM_WINDOW * SPM_STEP_DIM + PARAM_DIM


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, float)))


def spm_features(window, guess, bounds: ParamBounds = DEFAULT_BOUNDS) -> np.ndarray:
    """Flatten ``(T, 16)`` windows and append the guess rescaled to [0, 1]."""
    w = np.asarray(window, float)
    g = np.asarray(guess, float)
    batched = g.ndim == 2
    w = w.reshape((w.shape[0], -1) if batched else (-1,))
    if w.shape[-1] != SPM_WINDOW * SPM_STEP_DIM:
        raise ValueError(f"window must flatten to {SPM_WINDOW * SPM_STEP_DIM} values, got {w.shape[-1]}")
    gn = (g - bounds.lo_array) / bounds.span
    return np.concatenate([w, gn], axis=-1)


def spm_labels(guess, true, tol: float = 1e-9) -> np.ndarray:
    """1 where guess exceeds truth, 0 where below, 0.5 inside the equality band."""
    diff = np.asarray(guess, float) - np.asarray(true, float)
    return np.where(np.abs(diff) <= tol, 0.5, (diff > 0).astype(float))


def make_spm_classifier(rng: np.random.Generator | None = None) -> Mlp:
    return Mlp([SPM_INPUT_DIM, 64, 64, PARAM_DIM], rng, out_gain=0.01)


def spm_predict(classifier: Mlp, window, guess, bounds: ParamBounds = DEFAULT_BOUNDS) -> np.ndarray:
    return sigmoid(classifier(spm_features(window, guess, bounds)))


def bce(probs, labels) -> float:
    p = np.clip(probs, 1e-12, 1 - 1e-12)
    return float(np.mean(-(labels * np.log(p) + (1 - labels) * np.log1p(-p))))


def spm_train_step(classifier: Mlp, inputs, labels, opt: Adam, max_grad_norm: float = 5.0) -> float:
    """One Adam step on mean per-parameter binary cross-entropy; returns the pre-step loss."""
    inputs = np.atleast_2d(inputs)
    labels = np.atleast_2d(labels)
    if len(inputs) == 0:
        raise ValueError("empty SPM batch")
    logits, cache = classifier.forward(inputs)
    probs = sigmoid(logits)
    loss = bce(probs, labels)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite SPM loss")
    grads = classifier.backward(cache, (probs - labels) / labels.size)
    grads, _ = clip_by_global_norm(grads, max_grad_norm)
    opt.step(grads)
    classifier.touch()
    return loss


def spm_search_update(guess, probs, bounds: ParamBounds = DEFAULT_BOUNDS, eta: float = 0.3) -> np.ndarray:
    g = np.asarray(guess, float) + eta * (0.5 - np.asarray(probs, float)) * bounds.span
    return bounds.clip(g)


# --- estimators -----------------------------------------------------------

class PerfectEstimator:
    kind = "perfect"

    def reset(self) -> None:
        pass

    def estimate(self, true) -> np.ndarray:
        return (true.as_array() if isinstance(true, ParamVector) else np.asarray(true, float)).copy()

    def begin_episode(self, true: ParamVector, rng, env_config=None, training=True) -> np.ndarray:
        return self.estimate(true)

    def to_dict(self) -> dict:
        return {"kind": "perfect"}


class UkfEstimator:
    """Fresh filter per human, fed ``measurements`` noisy direct readings."""

    kind = "ukf"

    def __init__(self, bounds: ParamBounds = DEFAULT_BOUNDS, measurements: int = 5,
                 R=None, Q: float = UKF_Q):
        self.bounds = bounds
        self.measurements = int(measurements)
        self.R = np.diag(UKF_R_DIAG) if R is None else np.asarray(R, float)
        self.Q = Q * np.eye(PARAM_DIM)
        self.reset()

    def reset(self) -> None:
        self.state = ukf_prior(self.bounds, Q=self.Q, R=self.R)

    def estimate(self, z) -> np.ndarray:
        self.state = ukf_step(self.state, z)
        return self.state.mean.copy()

    def begin_episode(self, true: ParamVector, rng, env_config=None, training=True) -> np.ndarray:
        self.reset()
        est = self.state.mean.copy()
        for _ in range(self.measurements):
            est = self.estimate(measure_params(true, self.R, rng))
        return est

    def to_dict(self) -> dict:
        return {**self.state.to_dict(), "measurements": self.measurements}

    @classmethod
    def from_dict(cls, d: dict, bounds: ParamBounds = DEFAULT_BOUNDS) -> "UkfEstimator":
        est = cls(bounds, d.get("measurements", 5), R=d["R"])
        est.Q = np.asarray(d["Q"], float)
        est.reset()
        return est


def probe_window(true: ParamVector, rng: np.random.Generator, env_config: EnvConfig | None = None,
                 length: int = SPM_WINDOW) -> np.ndarray:
    """``length`` steps of (observation, action) from the given human with a still robot."""
    env = VecEnv([rng], env_config)
    obs = env.reset([true])
    rows = []
    act = np.zeros((1, ACT_DIM))
    for _ in range(length):
        obs, *_ = env.step(act)
        rows.append(np.concatenate([obs[0], act[0]]))
    return np.asarray(rows)


class SpmEstimator:
    """Classifier-driven guess search, retrained on recent labelled windows while training."""

    kind = "spm"

    def __init__(self, bounds: ParamBounds = DEFAULT_BOUNDS, eta: float = 0.3,
                 search_iters: int = 50, guesses_per_window: int = 8, buffer_size: int = 200,
                 train_steps: int = 5, lr: float = 1e-3, seed: int = 0):
        self.bounds = bounds
        self.eta = eta
        self.search_iters = search_iters
        self.guesses_per_window = guesses_per_window
        self.train_steps = train_steps
        rng = np.random.default_rng(seed)
        self.classifier = make_spm_classifier(rng)
        self.opt = Adam(self.classifier.params, lr=lr)
        self.buffer: deque = deque(maxlen=buffer_size)
        self.guess = bounds.midpoint
        self.last_loss = math.nan

    def reset(self) -> None:
        self.guess = self.bounds.midpoint

    def add_window(self, window, true, rng: np.random.Generator) -> None:
        lo, span = self.bounds.lo_array, self.bounds.span
        tv = true.as_array() if isinstance(true, ParamVector) else np.asarray(true, float)
        for _ in range(self.guesses_per_window):
            g = lo + span * rng.uniform(size=PARAM_DIM)
            self.buffer.append((spm_features(window, g, self.bounds), spm_labels(g, tv)))

    def fit(self) -> float:
        if not self.buffer:
            return math.nan
        X = np.stack([b[0] for b in self.buffer])
        Y = np.stack([b[1] for b in self.buffer])
        for _ in range(self.train_steps):
            self.last_loss = spm_train_step(self.classifier, X, Y, self.opt)
        return self.last_loss

    def search(self, window, start=None) -> np.ndarray:
        g = self.bounds.midpoint if start is None else np.asarray(start, float)
        for _ in range(self.search_iters):
            g = spm_search_update(g, spm_predict(self.classifier, window, g, self.bounds),
                                  self.bounds, self.eta)
        return g

    def estimate(self, window, true=None, rng=None) -> np.ndarray:
        """One search iteration from the current guess; trains on the window if truth is given."""
        if true is not None:
            self.add_window(window, true, rng)
            self.fit()
        p = spm_predict(self.classifier, window, self.guess, self.bounds)
        self.guess = spm_search_update(self.guess, p, self.bounds, self.eta)
        return self.guess.copy()

    def begin_episode(self, true: ParamVector, rng, env_config=None, training=True) -> np.ndarray:
        window = probe_window(true, rng, env_config)
        if training:
            self.add_window(window, true, rng)
            self.fit()
        self.guess = self.search(window)
        return self.guess.copy()

    def to_dict(self) -> dict:
        return {"kind": "spm", "eta": self.eta, "search_iters": self.search_iters,
                "guess": self.guess.tolist(), "classifier": self.classifier.to_dict()}

    @classmethod
    def from_dict(cls, d: dict, bounds: ParamBounds = DEFAULT_BOUNDS) -> "SpmEstimator":
        est = cls(bounds, d["eta"], d["search_iters"])
        est.classifier = Mlp.from_dict(d["classifier"])
        est.opt = Adam(est.classifier.params, lr=est.opt.lr)
        est.guess = np.asarray(d["guess"], float)
        return est


def make_estimator(kind: str, seed: int = 0, **kw):
    if kind == "ukf":
        return UkfEstimator(**kw)
    if kind == "spm":
        return SpmEstimator(seed=seed, **kw)
    if kind == "perfect":
        return PerfectEstimator()
    raise ValueError(f"unknown estimator kind {kind!r}; expected one of {ESTIMATOR_KINDS}")


def estimator_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "ukf":
        return UkfEstimator.from_dict(d)
    if kind == "spm":
        return SpmEstimator.from_dict(d)
    if kind == "perfect":
        return PerfectEstimator()
    raise ValueError(f"unknown estimator kind {kind!r}")


def estimate(estimator, context, **kw) -> np.ndarray:
    """Dispatch a context (measurement, trajectory window or true params) to an estimator."""
    kind = estimator.kind
    if kind == "perfect":
        if not isinstance(context, ParamVector):
            raise TypeError("perfect estimator needs the true ParamVector")
        return estimator.estimate(context)
    if kind == "ukf":
        z = np.asarray(context, float)
        if z.shape != (PARAM_DIM,):
            raise TypeError("UKF estimator needs a 4-entry measurement")
        return estimator.estimate(z)
    w = np.asarray(context, float)
    if w.shape != (SPM_WINDOW, SPM_STEP_DIM):
        raise TypeError(f"SPM estimator needs a ({SPM_WINDOW}, {SPM_STEP_DIM}) trajectory window")
    return estimator.estimate(w, **kw)


def write_estimate_trace(path, rows) -> None:
    """rows: iterable of (episode, estimate vector, true vector)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "param_index", "estimate", "true"])
        for ep, est, true in rows:
            for i, (e, t) in enumerate(zip(est, true)):
                w.writerow([ep, i, repr(float(e)), repr(float(t))])
