"""Loop-based numpy re-implementation of one OMPN step, used as a test oracle.

Deliberately written without the autodiff ops and with explicit per-element
loops for the stick-breaking and routing arithmetic.
"""
import math

import numpy as np


def _sig(v):
    return np.array([1.0 / (1.0 + math.exp(-a)) for a in v])


def _lin(p, name, v):
    return v @ p[name + ".w"] + p[name + ".b"]


def _cell(p, name, parts, carry):
    z = _lin(p, name, np.concatenate(parts))
    m = len(carry)
    cand = np.tanh(z[:m])
    g = _sig(z[m:])
    return np.array([g[j] * carry[j] + (1 - g[j]) * cand[j] for j in range(m)])


def scalar_step(p, n, obs, memory, t, variant="full"):
    """``p`` maps parameter names to arrays; ``memory`` is a list of (m,) rows."""
    x = _lin(p, "enc", obs)
    if t == 0:
        C = [row.copy() for row in memory]
        f = [1.0] * (n - 1) + [0.0]
        pi = [0.0] * (n - 1) + [1.0]
    else:
        C, f = [], []
        prev = x
        for i in range(n):
            if variant == "no_bottomup":
                c = memory[i].copy()
            elif variant == "no_bottomup_recurr":
                c = _cell(p, f"up{i}", [np.zeros_like(x), x, memory[i]], memory[i])
            else:
                c = _cell(p, f"up{i}", [prev, x, memory[i]], memory[i])
            h = np.tanh(_lin(p, f"score{i}.l1", np.concatenate([x, c, memory[i]])))
            f.append(float(_sig(_lin(p, f"score{i}.l2", h))[0]))
            C.append(c)
            prev = c
        pi_hat = []
        for i in range(n):
            prod = 1.0
            for j in range(i):
                prod *= f[j]
            pi_hat.append((1 - f[i]) * prod)
        total = max(sum(pi_hat), 1e-8)
        pi = [v / total for v in pi_hat]
    below = [sum(pi[: i + 1]) for i in range(n)]
    above = [sum(pi[i:]) for i in range(n)]
    m_hat = [np.zeros_like(x) for _ in range(n)]
    if variant != "no_topdown":
        for i in range(n - 2, -1, -1):
            u = below[i + 1] * C[i + 1] + (1 - below[i + 1]) * m_hat[i + 1]
            m_hat[i] = _cell(p, f"down{i}", [u, x], u)
    new = [(1 - above[i]) * memory[i] + pi[i] * C[i] + (1 - below[i]) * m_hat[i] for i in range(n)]
    logits = _lin(p, "act", np.concatenate([new[0], x]))
    return new, f, pi, logits
