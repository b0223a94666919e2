"""Writes baseline_traces.json: 10-step traces of SGD, Adam and RMSProp.

Objective: f(t) = sum_i 0.5 * h_i * t_i^2 - c_i * t_i, gradient h_i * t_i - c_i.
Plain Python floats, no numpy, so every operation is a single IEEE double op.
"""
import json
import math
import pathlib

H = [1.0, 4.0, 0.25]
C = [0.5, -1.0, 2.0]
THETA0 = [1.0, -2.0, 0.5]
LR = 0.1
STEPS = 10


def grad(t):
    return [H[i] * t[i] - C[i] for i in range(len(t))]


def sgd():
    t = list(THETA0)
    out = []
    for _ in range(STEPS):
        g = grad(t)
        for i in range(len(t)):
            t[i] -= LR * g[i]
        out.append(list(t))
    return out


def adam(b1=0.9, b2=0.999, eps=1e-8):
    t = list(THETA0)
    m = [0.0] * len(t)
    v = [0.0] * len(t)
    p1 = 1.0
    p2 = 1.0
    out = []
    for _ in range(STEPS):
        g = grad(t)
        p1 *= b1
        p2 *= b2
        c1 = 1.0 - p1
        c2 = 1.0 - p2
        for i in range(len(t)):
            m[i] = b1 * m[i] + (1.0 - b1) * g[i]
            v[i] = b2 * v[i] + (1.0 - b2) * (g[i] * g[i])
            t[i] -= LR * (m[i] / c1) / (math.sqrt(v[i] / c2) + eps)
        out.append(list(t))
    return out


def rmsprop(rho=0.99, eps=1e-8):
    t = list(THETA0)
    v = [0.0] * len(t)
    out = []
    for _ in range(STEPS):
        g = grad(t)
        for i in range(len(t)):
            v[i] = rho * v[i] + (1.0 - rho) * (g[i] * g[i])
            t[i] -= LR * g[i] / (math.sqrt(v[i]) + eps)
        out.append(list(t))
    return out


doc = {
    "h": H,
    "c": C,
    "theta0": THETA0,
    "lr": LR,
    "traces": {"sgd": sgd(), "adam": adam(), "rmsprop": rmsprop()},
}
path = pathlib.Path(__file__).with_name("baseline_traces.json")
path.write_text(json.dumps(doc, indent=1) + "\n")
