"""Pure-numpy kernels, used when the compiled extension is unavailable."""
import numpy as np


def round_half_away(x):
    t = np.trunc(x)
    return t + np.where(np.abs(x - t) >= 0.5, np.sign(x), 0.0)


def _codes(x, scale, zero, qmax):
    v = x / scale[:, None]
    r = round_half_away(v)
    q = r + zero[:, None]
    return v, r, q


def quantize_rows(x, scale, zero, qmax):
    _, _, q = _codes(x, scale, zero, qmax)
    return np.clip(q, 0.0, qmax[:, None]).astype(np.int64)


def fake_quant_rows(x, scale, zero, qmax):
    _, _, q = _codes(x, scale, zero, qmax)
    q = np.clip(q, 0.0, qmax[:, None])
    return (q - zero[:, None]) * scale[:, None]


def fake_quant_rows_ste(x, scale, zero, qmax):
    v, r, q = _codes(x, scale, zero, qmax)
    hi = qmax[:, None]
    z = zero[:, None]
    # clip test on the unrounded value: identity exactly on [lower, upper]
    below = v + z < 0.0
    above = v + z > hi
    qc = np.clip(q, 0.0, hi)
    out = (qc - z) * scale[:, None]
    mask = (~(below | above)).astype(np.uint8)
    dscale = np.where(below, -z, np.where(above, hi - z, r - v))
    return out, mask, dscale


def kurtosis_rows(x):
    mean = x.mean(axis=1, keepdims=True)
    d2 = (x - mean) ** 2
    m2 = d2.mean(axis=1)
    m4 = (d2 * d2).mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = m4 / (m2 * m2)
    out[x.max(axis=1) == x.min(axis=1)] = np.nan
    return out
