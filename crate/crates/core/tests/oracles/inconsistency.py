"""Reference values for the inconsistency measures, computed from scratch.

Run with plain python3; the printed numbers are frozen into the tests.
"""
import math


def cls_inconsistency(p):
    n, c = len(p), len(p[0])
    total = 0.0
    for j in range(c):
        col = [p[i][j] for i in range(n)]
        m = max(col)
        e = [math.exp(v - m) for v in col]
        z = sum(e)
        s = [v / z for v in e]
        h = -sum(v * math.log(v) for v in s if v > 0)
        total += (sum(col) / n) * h
    return -total


def loc_inconsistency(b):
    m = len(b)
    mean = [sum(r[k] for r in b) / m for k in range(4)]
    # L2 norm over the localizers, per coordinate column
    dev = sum(math.sqrt(sum((r[k] - mean[k]) ** 2 for r in b)) for k in range(4))
    return dev / (4 * math.sqrt(m))


def iou(a, b):
    def span(c, s):
        return c - s / 2, c + s / 2
    ax0, ax1 = span(a[0], a[2]); ay0, ay1 = span(a[1], a[3])
    bx0, bx1 = span(b[0], b[2]); by0, by1 = span(b[1], b[3])
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


print("one_hot_pair", repr(cls_inconsistency([[1.0, 0.0], [0.0, 1.0]])))
for n in (2, 4, 8, 16):
    print("identical", n, repr(cls_inconsistency([[0.1, 0.6, 0.3]] * n)), repr(-math.log(n)))
print("loc_pair", repr(loc_inconsistency([[1, 0, 0, 0], [-1, 0, 0, 0]])))
print("unit_squares_iou", repr(iou([0.5, 0.5, 1, 1], [1.0, 0.5, 1, 1])))
print("mixed_3x3", repr(cls_inconsistency([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.25, 0.25, 0.5]])))
print("loc_3x4", repr(loc_inconsistency([[0.1, 0.2, 0.3, 0.4], [0.5, -0.1, 0.2, 0.3], [0.0, 0.0, 1.0, 0.25]])))
print("nested_iou", repr(iou([0.0, 0.0, 2.0, 1.0], [0.1, 0.0, 0.5, 0.5])))
