"""Slow, obviously-correct reference implementations used by the tests.

Everything here is written with explicit Python loops so it shares no code
path with the vectorized library.
"""

import math

import numpy as np


def conv2d_loop(x, w, b):
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((n, c_out, h, wd))
    for i in range(n):
        for o in range(c_out):
            for y in range(h):
                for xx in range(wd):
                    acc = b[o]
                    for c in range(c_in):
                        for dy in range(k):
                            for dx in range(k):
                                yy, xs = y + dy - p, xx + dx - p
                                if 0 <= yy < h and 0 <= xs < wd:
                                    acc += x[i, c, yy, xs] * w[o, c, dy, dx]
                    out[i, o, y, xx] = acc
    return out


def conv_transpose_loop(x, w, b):
    """Scatter-accumulate: every input pixel stamps a weighted 2x2 kernel."""
    n, c_in, h, wd = x.shape
    c_out = w.shape[1]
    out = np.zeros((n, c_out, 2 * h, 2 * wd))
    for i in range(n):
        for c in range(c_in):
            for y in range(h):
                for xx in range(wd):
                    for o in range(c_out):
                        for dy in range(2):
                            for dx in range(2):
                                out[i, o, 2 * y + dy, 2 * xx + dx] += x[i, c, y, xx] * w[c, o, dy, dx]
    for o in range(c_out):
        out[:, o] += b[o]
    return out


def maxpool_loop(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    for i in range(n):
        for ch in range(c):
            for y in range(h // 2):
                for xx in range(w // 2):
                    out[i, ch, y, xx] = max(x[i, ch, 2 * y + a, 2 * xx + bb]
                                            for a in range(2) for bb in range(2))
    return out


def linear_loop(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]))
    for i in range(x.shape[0]):
        for o in range(w.shape[0]):
            out[i, o] = b[o] + sum(x[i, j] * w[o, j] for j in range(x.shape[1]))
    return out


def bce_loop(x, y, w_c):
    total = 0.0
    flat_x, flat_y = np.ravel(x), np.ravel(y)
    for xi, yi in zip(flat_x, flat_y):
        s = 1.0 / (1.0 + math.exp(-float(xi)))
        total += -(w_c * yi * math.log(s) + (1 - yi) * math.log(1 - s))
    return total / flat_x.size


def dice_loop(probs, y, smooth):
    vals = []
    for p_i, y_i in zip(probs, y):
        inter = sum(float(a) * float(b) for a, b in zip(np.ravel(p_i), np.ravel(y_i)))
        vals.append((2 * inter + smooth) / (float(np.sum(p_i)) + float(np.sum(y_i)) + smooth))
    return sum(vals) / len(vals)


def center_loop(conf, thr):
    sw = sx = sy = 0.0
    h, w = conf.shape
    for y in range(h):
        for x in range(w):
            if conf[y, x] >= thr:
                sw += conf[y, x]
                sx += conf[y, x] * x
                sy += conf[y, x] * y
    return sx / sw, sy / sw


def std_loop(conf, thr, center):
    xc, yc = center
    k = 0
    sw = vx = vy = 0.0
    h, w = conf.shape
    for y in range(h):
        for x in range(w):
            if conf[y, x] >= thr:
                k += 1
                sw += conf[y, x]
                vx += conf[y, x] * (x - xc) ** 2
                vy += conf[y, x] * (y - yc) ** 2
    if k == 1:
        return 0.0, 0.0
    d = (k - 1) / k * sw
    return math.sqrt(vx / d), math.sqrt(vy / d)


def iou_cells(a, b):
    """IoU of integer boxes by counting unit cells."""
    inter = union = 0
    for y in range(int(min(a[1], b[1])), int(max(a[3], b[3]))):
        for x in range(int(min(a[0], b[0])), int(max(a[2], b[2]))):
            ina = a[0] <= x < a[2] and a[1] <= y < a[3]
            inb = b[0] <= x < b[2] and b[1] <= y < b[3]
            inter += ina and inb
            union += ina or inb
    return inter / union


def sgd_script(theta, grads_fn, steps, lr, m, wd):
    v = 0.0
    for _ in range(steps):
        g = grads_fn(theta) + wd * theta
        v = m * v + g
        theta = theta - lr * v
    return theta


def numeric_grad(f, x, h=1e-3, idx=None):
    """Central differences of scalar ``f`` w.r.t. ``x`` (modified in place
    and restored); ``idx`` limits the entries checked."""
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b, floor=1e-12):
    """Relative error of two gradient vectors; ``floor`` keeps gradients
    that are identically zero (a conv bias in front of batch-norm) from
    turning round-off into a relative error of 1."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / den)
