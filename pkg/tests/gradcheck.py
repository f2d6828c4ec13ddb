"""Finite-difference helpers shared by the network and acceptance tests."""

import numpy as np

RTOL = 1e-6


def loss_and_grads(net, x, t, w):
    tape = []
    out = net.forward(x, t, tape=tape)
    net.zero_grad()
    dx = net.backward(tape, w)
    return float(np.sum(out * w)), dx


def check_net(net, x, t, n_probe=12, seed=0):
    """Central differences of <w, net(x)> against the reverse pass."""
    gen = np.random.default_rng(seed)
    out = net.forward(x, t)
    w = gen.standard_normal(out.shape)
    _, dx = loss_and_grads(net, x, t, w)
    analytic = {k: g.copy() for k, _, g in net.parameters()}
    h = 1e-6
    worst = 0.0
    for key, p, _ in net.parameters():
        flat = p.reshape(-1)
        for idx in gen.choice(flat.size, min(n_probe, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            up = np.sum(net.forward(x, t) * w)
            flat[idx] = old - h
            dn = np.sum(net.forward(x, t) * w)
            flat[idx] = old
            fd = (up - dn) / (2 * h)
            a = analytic[key].reshape(-1)[idx]
            worst = max(worst, abs(fd - a) / max(1e-3, abs(fd), abs(a)))
    xf = x.reshape(-1)
    for idx in gen.choice(xf.size, min(n_probe, xf.size), replace=False):
        old = xf[idx]
        xf[idx] = old + h
        up = np.sum(net.forward(x, t) * w)
        xf[idx] = old - h
        dn = np.sum(net.forward(x, t) * w)
        xf[idx] = old
        fd = (up - dn) / (2 * h)
        a = dx.reshape(-1)[idx]
        worst = max(worst, abs(fd - a) / max(1e-3, abs(fd), abs(a)))
    return worst
