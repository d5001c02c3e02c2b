"""Independent reference solutions used by the tests."""
from __future__ import annotations

import math

import numpy as np


def scalar_riccati(a: float, b: float, c: float, g: float, tau):
    """Solution of -p' = 2 a p - b p^2 + c with p(T) = g, as a function of tau = T - t.

    Closed form through the two equilibria p+ > p-; requires b > 0.
    """
    tau = np.asarray(tau, dtype=float)
    d = math.sqrt(a * a + b * c)
    p_hi, p_lo = (a + d) / b, (a - d) / b
    if g == p_hi:
        return np.full_like(tau, p_hi)
    w = (g - p_hi) / (g - p_lo) * np.exp(-2.0 * d * tau)
    return (p_hi - w * p_lo) / (1.0 - w)


def rk4_backward(rhs, terminal, T: float, steps: int):
    """Plain fixed-step RK4 from T down to 0 returning the state at t = 0."""
    h = T / steps
    x = np.array(terminal, dtype=float)
    for k in range(steps, 0, -1):
        t1 = k * h
        f1 = rhs(t1, x)
        f2 = rhs(t1 - h / 2, x + h / 2 * f1)
        f3 = rhs(t1 - h / 2, x + h / 2 * f2)
        f4 = rhs(t1 - h, x + h * f3)
        x = x + h / 6 * (f1 + 2 * f2 + 2 * f3 + f4)
    return x


def coupled_2x2_rhs(p):
    """Hand-written n = 1 coupled right-hand side from raw scalars.

    ``p`` holds A1, A2, D1, D2, F1, F2, c1, c2 (graphon constants), eps,
    B1, B2, R11, R22, R12, R21, Q1, Q2, Gamma1, Gamma2.
    """
    a = np.array([[p["A1"] + p["D1"] * p["c1"], p["eps"] * p["F1"]],
                  [p["eps"] * p["F2"], p["A2"] + p["D2"] * p["c2"]]])
    e1 = np.array([[1.0, 0.0], [0.0, 0.0]])
    e2 = np.array([[0.0, 0.0], [0.0, 1.0]])
    s1 = 2 * p["B1"] ** 2 / p["R11"] * e1
    s2 = 2 * p["B2"] ** 2 / p["R22"] * e2
    s01 = 2 * p["R12"] / p["R22"] ** 2 * p["B2"] ** 2 * e2
    s02 = 2 * p["R21"] / p["R11"] ** 2 * p["B1"] ** 2 * e1
    q1 = 0.5 * p["Q1"] * (1 - p["Gamma1"] * p["c1"]) ** 2 * e1
    q2 = 0.5 * p["Q2"] * (1 - p["Gamma2"] * p["c2"]) ** 2 * e2
    eps = p["eps"]

    def rhs(t, x):
        p1, p2 = x
        f1 = p1 @ a + a.T @ p1 - p1 @ s1 @ p1 - p1 @ s2 @ p2 - p2 @ s2 @ p1 + eps * p2 @ s01 @ p2 + q1
        f2 = p2 @ a + a.T @ p2 - p2 @ s2 @ p2 - p2 @ s1 @ p1 - p1 @ s1 @ p2 + eps * p1 @ s02 @ p1 + q2
        return np.stack([f1, f2])

    return rhs
