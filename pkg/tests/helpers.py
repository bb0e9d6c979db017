"""Shared numeric oracles for the test suite.

These stay independent of the library code paths they check: finite
differences for gradients, per-pixel loops for masks and boundaries.
"""

import numpy as np


def fd_gradient(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at x, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise relative error with an absolute floor on the denominator."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def brute_force_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Pixel-enumeration IoU; both-empty convention 1.0."""
    inter = 0
    union = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p, g = bool(pred[i, j]), bool(gt[i, j])
            if p and g:
                inter += 1
            if p or g:
                union += 1
    if union == 0:
        return 1.0
    return inter / union


def brute_force_boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixel is boundary iff any 4-neighbor is background/out of bounds."""
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if ni < 0 or ni >= h or nj < 0 or nj >= w or not mask[ni, nj]:
                    out[i, j] = True
                    break
    return out


def brute_force_boundary_measure(pred: np.ndarray, gt: np.ndarray) -> float:
    """All-pairs distance version of the boundary F-measure."""
    h, w = pred.shape
    diag = np.sqrt(h * h + w * w)
    d = max(1.0, round(0.008 * diag))
    pb = np.argwhere(brute_force_boundary(pred))
    gb = np.argwhere(brute_force_boundary(gt))
    if len(pb) == 0 and len(gb) == 0:
        return 1.0
    if len(pb) == 0 or len(gb) == 0:
        return 0.0
    near_p = 0
    for p in pb:
        if np.min(np.sqrt(((gb - p) ** 2).sum(axis=1))) <= d:
            near_p += 1
    near_g = 0
    for q in gb:
        if np.min(np.sqrt(((pb - q) ** 2).sum(axis=1))) <= d:
            near_g += 1
    precision = near_p / len(pb)
    recall = near_g / len(gb)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _inside_shape(shape_class: str, px: float, py: float, cx: float, cy: float, r: float) -> bool:
    """Scalar point-in-shape predicate; px, py are pixel-center coordinates."""
    if shape_class == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if shape_class == "square":
        return max(abs(px - cx), abs(py - cy)) <= r
    if shape_class == "triangle":
        ax, ay = cx, cy - r
        bx, by = cx - r, cy + r
        qx, qy = cx + r, cy + r
        d1 = (px - ax) * (by - ay) - (py - ay) * (bx - ax)
        d2 = (px - bx) * (qy - by) - (py - by) * (qx - bx)
        d3 = (px - qx) * (ay - qy) - (py - qy) * (ax - qx)
        neg = d1 < 0 or d2 < 0 or d3 < 0
        pos = d1 > 0 or d2 > 0 or d3 > 0
        return not (neg and pos)
    raise ValueError(shape_class)


def brute_force_shape_mask(shape_class: str, cx: float, cy: float, r: float,
                           height: int, width: int) -> np.ndarray:
    """Pixel-loop rasterization of one shape at one position."""
    g = np.zeros((height, width), dtype=bool)
    for i in range(height):
        for j in range(width):
            g[i, j] = _inside_shape(shape_class, float(j), float(i), cx, cy, r)
    return g


def closed_form_position(u0: float, du: float, hi: float, t: int) -> float:
    """Reflected 1-D walk via unfolding: exact when u0, du are binary fractions."""
    period = 2.0 * hi
    v = (u0 + t * du) % period
    return v if v <= hi else period - v
