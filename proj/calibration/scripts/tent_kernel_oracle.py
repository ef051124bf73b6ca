"""Independent oracle for the hat-averaged grid kernel.

Integrates f(w) * hat(d - w) over the hat support with adaptive QUADPACK
cubature, splitting at the unit squares. Prints JSON with frozen values.
"""
import json
import sys

import numpy as np
from scipy import integrate


def kernel(wx, wy, a, eps):
    r2 = wx * wx + wy * wy
    if r2 == 0.0:
        return 0.0, 0.0
    s = a / (eps * eps) if r2 <= eps * eps else a / r2
    return s * wx, s * wy


def hat(sx, sy):
    return max(0.0, 1 - abs(sx)) * max(0.0, 1 - abs(sy))


def tent(dx, dy, a, eps):
    out = [0.0, 0.0]
    for comp in range(2):
        total = 0.0
        for sx in (dx - 1, dx):
            for sy in (dy - 1, dy):
                f = lambda wy, wx: kernel(wx, wy, a, eps)[comp] * hat(dx - wx, dy - wy)
                v, _ = integrate.dblquad(f, sx, sx + 1, sy, sy + 1, epsabs=1e-13, epsrel=1e-11)
                total += v
        out[comp] = total
    return out


def main():
    cases = []
    for (dx, dy, eps) in [(1, 0, 0.0), (1, 1, 0.0), (2, 1, 0.0), (1, 0, 0.25), (1, 2, 0.6),
                          (0, 1, 1.7), (3, 2, 1.7), (5, 3, 0.0), (1, 1, 0.05)]:
        kx, ky = tent(dx, dy, 1.0, eps)
        cases.append({"dx": dx, "dy": dy, "eps": eps, "kx": kx, "ky": ky})
    json.dump({"cases": cases}, sys.stdout, indent=1)


if __name__ == "__main__":
    main()
