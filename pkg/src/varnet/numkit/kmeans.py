from __future__ import annotations

import numpy as np


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (points * points).sum(1)[:, None] + (centers * centers).sum(1)[None, :] - 2.0 * points @ centers.T
    return np.maximum(d2, 0.0)


def kmeans_pp_init(points: np.ndarray, L: int, rng: np.random.Generator) -> np.ndarray:
    N = len(points)
    chosen = [int(rng.integers(N))]
    closest = _sq_dists(points, points[chosen[0]][None, :])[:, 0]
    for _ in range(1, L):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(N, p=closest / total))
        else:
            # every remaining point coincides with a chosen center
            free = np.setdiff1d(np.arange(N), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[idx][None, :])[:, 0])
    return points[chosen].copy()


def kmeans(points, L: int, iters: int = 100, rng: np.random.Generator | None = None, trace: list | None = None) -> np.ndarray:
    """Lloyd's algorithm from a k-means++ start.

    Empty clusters are re-seeded at the point farthest from its assigned
    center. If ``trace`` is given, the objective after every iteration is
    appended to it.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-D array")
    N = len(points)
    if not 1 <= L <= N:
        raise ValueError(f"need 1 <= L <= N, got L={L}, N={N}")
    rng = rng if rng is not None else np.random.default_rng()

    centers = kmeans_pp_init(points, L, rng)
    for _ in range(iters):
        d2 = _sq_dists(points, centers)
        labels = d2.argmin(1)
        own = d2[np.arange(N), labels]
        counts = np.bincount(labels, minlength=L)
        for j in np.flatnonzero(counts == 0):
            # only steal from clusters that keep at least one member
            far = int(np.where(counts[labels] > 1, own, -1.0).argmax())
            counts[labels[far]] -= 1
            labels[far] = j
            counts[j] = 1
            centers[j] = points[far]
            own[far] = 0.0
        new = np.zeros_like(centers)
        np.add.at(new, labels, points)
        new /= counts[:, None]
        moved = not np.array_equal(new, centers)
        centers = new
        if trace is not None:
            trace.append(float(((points - centers[labels]) ** 2).sum()))
        if not moved:
            break
    return centers
