"""Sampling oracle for the Lipschitz-transfer constant of the cut-off kernel.

Independent NumPy implementation of f^N and g^N. Estimates the smallest C with
  |f(b) - f(c)| <= C |a_coupling| g(a) |b - c|
over the admissible set |a| <= min(|b|, |c|), |b - c| <= min(N^-beta, |a|/3),
and the state-level analogue
  ||F(X) - F(Xbar)||_inf <= C ||G(Xbar)||_inf ||X - Xbar||_inf
for ||X - Xbar||_inf <= N^-beta. Writes the frozen value to
calibration/lipschitz_constant.json.
"""
import json
import sys
import numpy as np


def f(q, a, n, beta):
    eps = n ** -beta
    r2 = np.sum(q * q, axis=-1, keepdims=True)
    inner = a * n ** (2 * beta) * q
    with np.errstate(divide="ignore", invalid="ignore"):
        outer = a * q / r2
    return np.where(r2 <= eps * eps, inner, outer)


def g(q, n, beta):
    eps = n ** -beta
    r2 = np.sum(q * q, axis=-1)
    with np.errstate(divide="ignore"):
        return np.where(r2 <= 4 * eps * eps, 2 * n ** (2 * beta), 8.0 / r2)


def unit(rng, k):
    t = rng.uniform(0, 2 * np.pi, k)
    return np.stack([np.cos(t), np.sin(t)], axis=-1)


def pair_ratio(rng, k):
    n = np.exp(rng.uniform(0, np.log(1e4), k)).round().clip(1)
    beta = rng.uniform(0.05, 2.0, k)
    eps = n ** -beta
    amag = eps * np.exp(rng.uniform(np.log(1e-2), np.log(1e2), k))
    a_vec = unit(rng, k) * amag[:, None]
    # b at or slightly beyond |a|; half the draws pinned to |b| = |a|.
    bmag = amag * np.where(rng.random(k) < 0.5, 1.0, np.exp(rng.uniform(0, np.log(4), k)))
    b = unit(rng, k) * bmag[:, None]
    step = np.minimum(eps, amag / 3.0) * rng.uniform(0, 1, k) ** 0.25
    c = b + unit(rng, k) * step[:, None]
    ok = np.linalg.norm(c, axis=-1) >= amag
    fb = f(b, 1.0, n[:, None], beta[:, None])
    fc = f(c, 1.0, n[:, None], beta[:, None])
    num = np.linalg.norm(fb - fc, axis=-1)
    den = g(a_vec, n, beta) * np.linalg.norm(b - c, axis=-1)
    r = np.where(ok & (den > 0), num / np.where(den > 0, den, 1), 0.0)
    return r.max()


def state_ratio(rng, trials):
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 64))
        beta = rng.uniform(0.1, 2.0)
        eps = n ** -beta
        spread = eps * np.exp(rng.uniform(np.log(0.5), np.log(20)))
        xbar = rng.normal(size=(n, 2)) * spread
        dx = unit(rng, n) * (eps * rng.uniform(0, 1, n) ** 0.25)[:, None]
        x = xbar + dx
        def total(pos, fn):
            d = pos[:, None, :] - pos[None, :, :]
            return fn(d)
        fx = f(x[:, None, :] - x[None, :, :], 1.0, n, beta)
        fxb = f(xbar[:, None, :] - xbar[None, :, :], 1.0, n, beta)
        idx = np.arange(n)
        fx[idx, idx] = 0
        fxb[idx, idx] = 0
        big_f = fx.sum(axis=1) / n
        big_fb = fxb.sum(axis=1) / n
        gg = g(xbar[:, None, :] - xbar[None, :, :], n, beta)
        gg[idx, idx] = 0
        big_g = gg.sum(axis=1) / n
        num = np.linalg.norm(big_f - big_fb, axis=-1).max()
        den = big_g.max() * np.linalg.norm(dx, axis=-1).max()
        if den > 0:
            worst = max(worst, num / den)
    return worst


def main():
    rng = np.random.default_rng(20261016)
    pair = max(pair_ratio(rng, 200_000) for _ in range(10))
    state = state_ratio(rng, 20_000)
    measured = max(pair, state)
    frozen = float(np.ceil(measured * 1.25 * 100) / 100)
    out = {
        "name": "lipschitz_constant",
        "value": frozen,
        "measured_pair_max": pair,
        "measured_state_max": state,
        "margin": 1.25,
        "provenance": {
            "script": "calibration/scripts/lipschitz_oracle.py",
            "seed": 20261016,
            "pair_samples": 2_000_000,
            "state_samples": 20_000,
            "normalisation": "ratio divided by |coupling|; coupling fixed to 1",
        },
    }
    path = sys.argv[1] if len(sys.argv) > 1 else "calibration/lipschitz_constant.json"
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2)
        fh.write("\n")
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
