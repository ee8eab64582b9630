"""Loop-level reference implementations of the image metrics."""

import math

import numpy as np


def loop_psnr(a, b, sel):
    total, n = 0.0, 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            if sel[i, j]:
                for c in range(3):
                    total += (a[i, j, c] - b[i, j, c]) ** 2
                    n += 1
    mse = total / n
    return 100.0 if mse == 0 else min(100.0, 10 * math.log10(1 / mse))


def loop_ssim(a, b, sel):
    """Per-pixel window sums over a symmetrically padded luma image."""
    x = a @ np.array([0.299, 0.587, 0.114])
    y = b @ np.array([0.299, 0.587, 0.114])
    r = 5
    g1 = np.array([math.exp(-(k * k) / (2 * 1.5 ** 2)) for k in range(-r, r + 1)])
    w = np.outer(g1, g1) / g1.sum() ** 2
    xp, yp = np.pad(x, r, mode="symmetric"), np.pad(y, r, mode="symmetric")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            if not sel[i, j]:
                continue
            px, py = xp[i:i + 2 * r + 1, j:j + 2 * r + 1], yp[i:i + 2 * r + 1, j:j + 2 * r + 1]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * px * px).sum() - mx * mx
            vy = (w * py * py).sum() - my * my
            cxy = (w * px * py).sum() - mx * my
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def scalar_lab(rgb):
    """One pixel sRGB -> LAB, written out from the standard definitions."""
    lin = []
    for c in rgb:
        lin.append(c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4)
    m = [[0.4124564, 0.3575761, 0.1804375],
         [0.2126729, 0.7151522, 0.0721750],
         [0.0193339, 0.1191920, 0.9503041]]
    xyz = [sum(m[r][k] * lin[k] for k in range(3)) for r in range(3)]
    white = [sum(row) for row in m]

    def f(t):
        return t ** (1 / 3) if t > (6 / 29) ** 3 else t / (3 * (6 / 29) ** 2) + 4 / 29

    fx, fy, fz = (f(xyz[k] / white[k]) for k in range(3))
    return 116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)


def loop_lab_error(a, b, sel):
    total, n = 0.0, 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            if sel[i, j]:
                la, lb = scalar_lab(a[i, j]), scalar_lab(b[i, j])
                total += sum(abs(p - q) for p, q in zip(la, lb)) / 3
                n += 1
    return total / n
