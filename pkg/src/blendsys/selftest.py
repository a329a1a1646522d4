"""Fast oracle checks runnable from a fresh checkout (``blendsys selftest``)."""
from __future__ import annotations

import math

import numpy as np

from .blending import blend_action, blend_action_raw
from .env import forward_kinematics, target_position
from .nn import Mlp
from .sysid import bce, kalman_update, sigma_points, spm_search_update, ukf_step, UkfState
from .env import DEFAULT_BOUNDS


def random_spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T + 0.1 * np.eye(n)


def check_kinematics():
    cases = [((0, 0), (0.9, 0.0), (0.7, 0.0)),
             ((math.pi / 2, 0), (0.0, 0.9), (0.0, 0.7)),
             ((math.pi / 2, -math.pi / 2), (0.4, 0.5), (0.2, 0.5))]
    err = 0.0
    for q, fk, tp in cases:
        err = max(err, np.max(np.abs(forward_kinematics(q, (0.5, 0.4), (0, 0)) - fk)),
                  np.max(np.abs(target_position(q) - tp)))
    return err < 1e-12, f"max error {err:.2e}"


def check_ukf_vs_kalman(cases: int = 100, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        n = 4
        P = random_spd(rng, n)
        R = random_spd(rng, n)
        m = rng.standard_normal(n)
        z = rng.standard_normal(n)
        Q = 1e-6 * np.eye(n)
        st = ukf_step(UkfState(m, P, Q, R, bounds=None), z)
        km, kP = kalman_update(m, P, z, R, Q)
        worst = max(worst, np.max(np.abs(st.mean - km)), np.max(np.abs(st.cov - kP)))
    return worst < 1e-8, f"max deviation {worst:.2e}"


def finite_difference_check(net: Mlp, x, rng, h: float = 1e-5) -> float:
    """Worst |analytic - central FD| / max(1, |analytic|) over all parameters."""
    g_out = rng.standard_normal(net.out_dim if x.ndim == 1 else (x.shape[0], net.out_dim))
    out, cache = net.forward(x)
    grads = net.backward(cache, g_out)
    worst = 0.0
    for p, g in zip(net.params, grads):
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            fp = float(np.sum(g_out * net(x)))
            p[i] = old - h
            fm = float(np.sum(g_out * net(x)))
            p[i] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(g[i] - fd) / max(1.0, abs(g[i])))
    return worst


def check_gradients(problems: int = 20, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(problems):
        net = Mlp([8, 16, 16, 8], rng)
        for p in net.params:
            p += 0.3 * rng.standard_normal(p.shape)
        worst = max(worst, finite_difference_check(net, rng.standard_normal(8), rng))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_blending():
    a = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    ok = np.allclose(blend_action([1, 1, 1], a), [0.0, 1 / 3], atol=1e-12, rtol=0)
    ok &= np.allclose(blend_action_raw([3, 0, 0], a), a[0], atol=1e-12, rtol=0)
    ok &= np.allclose(blend_action([0, 0, 0], a), [0.0, 0.0], atol=1e-12, rtol=0)
    return bool(ok), "mean / scaling / null weights"


def check_spm():
    loss = bce(np.full((3, 4), 0.5), np.ones((3, 4)))
    ok = abs(loss - math.log(2)) < 1e-9
    true = np.array([0.1, 0.2, 0.6, 0.8])
    g = DEFAULT_BOUNDS.lo_array.copy()
    for _ in range(50):
        g = spm_search_update(g, (g > true).astype(float), DEFAULT_BOUNDS, 0.3)
    ok &= bool(np.all(np.abs(g - true) <= 0.15 * DEFAULT_BOUNDS.span + 1e-12))
    return bool(ok), f"BCE(0.5)={loss:.12f}"


def check_sigma_points():
    pts, wm, _ = sigma_points([0.0], [[1.0]], alpha=1.0, beta=2.0, kappa=0.0)
    ok = np.allclose(pts[:, 0], [0, 1, -1]) and np.allclose(wm, [0, 0.5, 0.5])
    return bool(ok), "n=1 closed form"


CHECKS = {
    "kinematics": check_kinematics,
    "sigma_points": check_sigma_points,
    "ukf_vs_kalman": check_ukf_vs_kalman,
    "gradients": check_gradients,
    "blending": check_blending,
    "spm": check_spm,
}


def run_all(echo=print) -> bool:
    ok_all = True
    for name, fn in CHECKS.items():
        ok, detail = fn()
        ok_all &= ok
        echo(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok_all
