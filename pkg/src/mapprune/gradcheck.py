"""Central finite differences for checking analytic gradients."""
from __future__ import annotations

import numpy as np


def numerical_gradient(f, x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (perturbed in place, restored).

    Step per coordinate is ``rel_step * max(1, |x_i|)``.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = rel_step * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def check_network_gradients(net, images, labels, rel_step: float = 1e-6):
    """Compare backward() against finite differences for every parameter and gate.

    Returns a dict mapping ``"param:<layer>.<w|b>"`` / ``"gate:<layer>"`` to the
    relative error.
    """
    net.zero_grad()
    res = net.forward(images, labels)
    back = net.backward(res)
    errors = {}

    def loss():
        return net.forward(images, labels, keep_cache=False).loss

    for layer in sorted(net.params):
        for name, p in zip("wb", net.params[layer]):
            num = numerical_gradient(loss, p.value, rel_step)
            errors[f"param:{layer}.{name}"] = relative_error(p.gradient, num)
    for layer in net.conv_layers:
        g = net.gates[layer]
        num = numerical_gradient(loss, g, rel_step)
        errors[f"gate:{layer}"] = relative_error(back.total_gate_grad(layer), num)
    net.zero_grad()
    return errors


def gate_hessian_diagonal(net, images, labels, eps: float = 1e-3) -> dict:
    """Exact-up-to-O(eps^2) gate-Hessian diagonal from loss second differences.

    ``(C(g + eps e_k) - 2 C(g) + C(g - eps e_k)) / eps^2`` per gate, using only
    forward passes, so it is independent of the backward code.
    """
    base = net.forward(images, labels, keep_cache=False).loss
    out = {}
    for layer in net.conv_layers:
        g0 = np.asarray(net.gates[layer], dtype=np.float64)
        diag = np.empty(g0.size)
        for k in range(g0.size):
            vals = []
            for s in (eps, -eps):
                g = g0.copy()
                g[k] += s
                vals.append(net.forward(images, labels, gates={layer: g}, keep_cache=False).loss)
            diag[k] = (vals[0] - 2.0 * base + vals[1]) / eps ** 2
        out[layer] = diag
    return out
