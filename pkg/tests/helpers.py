"""Fixtures shared by the unit and acceptance suites."""
import numpy as np

import oracles
from mpqdm import diffusion as D
from mpqdm.quant import QuantParams


def planted_layer(seed, n=40, c_in=64, samples=128, fraction=0.1, sigma=8.0):
    """Gaussian layer with a +/- ``sigma`` outlier pair in ``fraction`` of its output channels."""
    rng = np.random.default_rng(seed)
    W = rng.normal(0, 1, (n, c_in))
    rows = rng.choice(n, max(1, int(round(fraction * n))), replace=False)
    for r in rows:
        i, j = rng.choice(c_in, 2, replace=False)
        W[r, i] = sigma
        W[r, j] = -sigma
    X = rng.normal(0, 1, (samples, c_in))
    return W, X, sorted(rows.tolist())


def boundary_safe_layer(rng, c_out=3, c_in=4, rank=2, bits=3):
    """A quantized layer whose effective weights sit >= s/10 from every rounding and clip boundary."""
    qmax = 2 ** bits - 1
    delta = rng.uniform(0.5, 2.0, c_in)
    scale = rng.uniform(0.05, 0.2, c_out)
    zero = rng.integers(2, qmax - 1, c_out).astype(float)
    lower = -zero * scale
    codes = rng.integers(1, qmax, (c_out, c_in)).astype(float)
    frac = rng.uniform(-0.4, 0.4, (c_out, c_in))
    Ws = (codes - zero[:, None] + frac) * scale[:, None]
    # push some entries well outside the grid to exercise the clipped branch
    out = rng.random((c_out, c_in)) < 0.2
    Ws = np.where(out, np.sign(rng.normal(size=Ws.shape)) * (qmax + 2) * scale[:, None], Ws)
    lora = D.LoraAdapter(rng.normal(0, 0.3, (c_out, rank)), rng.normal(0, 0.3, (rank, c_in)))
    W = Ws * delta - lora.B @ lora.A
    act = QuantParams.from_range(-3.0, 3.0, 8)
    layer = D.QuantLayer(np.full(c_out, bits), delta, scale, lower, 8, act.scale, act.lower, lora)
    return layer, W, Ws


def ste_lora_relative_errors(rng, h=1e-6):
    """STE gradients of one boundary-safe layer against central differences of the STE surrogate.

    The surrogate freezes the fake-quant output and adds the identity path for
    in-range weights only; near a boundary-safe point the true fake-quant is
    locally constant, so this is the function the straight-through rule
    differentiates. Returns ``{"B": err, "A": err}``.
    """
    layer, W, Ws0 = boundary_safe_layer(rng)
    bits = int(layer.bits[0])
    b = rng.normal(size=W.shape[0])
    x = rng.normal(size=(5, W.shape[1]))
    target = rng.normal(size=(5, W.shape[0]))
    y, cache = layer.forward(x, W, b)
    xq = cache[0]
    Wq0 = np.array([oracles.fq_fixed(r, s, lo, bits) for r, s, lo in zip(Ws0, layer.w_scale, layer.w_lower)])
    lo = layer.w_lower[:, None]
    hi = lo + layer.w_scale[:, None] * (2 ** bits - 1)
    inside = (Ws0 >= lo) & (Ws0 <= hi)
    assert np.allclose(cache[3], Wq0, atol=1e-12)

    def loss():
        Ws = D.lora_apply(W, layer.lora) / layer.delta
        Wq = Wq0 + inside * (Ws - Ws0)
        return 0.5 * np.sum((xq @ Wq.T + b - target) ** 2)

    _, grads = layer.backward(y - target, cache)
    errs = {}
    for key, arr in (("B", layer.lora.B), ("A", layer.lora.A)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = loss()
            arr[idx] = old - h
            lm = loss()
            arr[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        errs[key] = float(np.max(np.abs(grads[key] - num)) / max(np.max(np.abs(num)), 1e-8))
    # the perturbation never moves a code: the true fake-quant is locally constant there
    layer.lora.A += h
    assert np.array_equal(layer.forward(x, W, b)[1][3], cache[3])
    layer.lora.A -= h
    return errs
