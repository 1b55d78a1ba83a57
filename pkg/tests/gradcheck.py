"""Central finite-difference gradient checking shared by the test modules."""
import numpy as np


def numeric_grad(f, arr, coords, h=1e-5):
    """d f() / d arr[c] for each flat coordinate ``c``; ``arr`` is perturbed in place."""
    flat = arr.reshape(-1)
    out = []
    for c in coords:
        old = flat[c]
        flat[c] = old + h
        fp = f()
        flat[c] = old - h
        fm = f()
        flat[c] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def sample_coords(rng, size, n=20):
    return rng.choice(size, size=min(n, size), replace=False)


def smooth_numeric_grad(f, arr, rng, n=20, h=1e-5, kink_tol=1e-3, max_tries=200):
    """Central differences at ``n`` random coordinates, stepping around kinks.

    A ReLU or max-pool switch inside +-h makes the two one-sided slopes
    disagree by far more than smooth curvature can.  Such a coordinate is
    retried with a step 100x smaller and dropped (and replaced) only if the
    kink is still inside.  Returns ``(coords, grads, retried)``.
    """
    flat = arr.reshape(-1)
    f0 = f()

    def probe(c, step):
        old = flat[c]
        flat[c] = old + step
        fp = f()
        flat[c] = old - step
        fm = f()
        flat[c] = old
        up, down = (fp - f0) / step, (f0 - fm) / step
        kink = abs(up - down) > kink_tol * max(abs(up), abs(down), 1e-6)
        return kink, (fp - fm) / (2 * step)

    coords, grads, retried = [], [], 0
    for c in rng.permutation(flat.size)[:max_tries]:
        kink, g = probe(c, h)
        if kink:
            retried += 1
            kink, g = probe(c, h / 100)
            if kink:
                continue
        coords.append(c)
        grads.append(g)
        if len(coords) == n:
            break
    return np.array(coords), np.array(grads), retried
