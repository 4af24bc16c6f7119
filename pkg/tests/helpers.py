import numpy as np


def central_fd(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of each array (mutated in place, then restored)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            hi = f()
            a[idx] = old - h
            lo = f()
            a[idx] = old
            g[idx] = (hi - lo) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
