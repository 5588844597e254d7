"""Shared test helpers: gradient checking against the finite-difference
oracle, and synthetic cluster geometry."""

import itertools

import numpy as np

from moce.tensor import Tensor, backward, finite_difference_gradient


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps near-zero gradients from inflating the ratio; below it
    the comparison degrades gracefully into an absolute check.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradcheck(build_loss, arrays, h=1e-5, coords=None, rng=None):
    """Compare analytic gradients of ``build_loss`` with central differences.

    ``build_loss`` maps a list of numpy arrays to a scalar loss Tensor and
    must rebuild the graph on every call (define-by-run). Returns the worst
    relative error over all inputs. ``coords`` limits the finite-difference
    probe to that many coordinates per array, sampled with ``rng``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    params = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(params)
    backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for i, base in enumerate(arrays):
        def scalar_f(x, i=i):
            probe = [Tensor(a) for a in arrays[:i]] + [Tensor(x)] + [Tensor(a) for a in arrays[i + 1:]]
            return build_loss(probe).item()

        if coords is None:
            numeric = finite_difference_gradient(scalar_f, base, h)
            worst = max(worst, relative_error(analytic[i], numeric))
        else:
            flat = base.reshape(-1)
            n = min(coords, flat.size)
            picked = rng.choice(flat.size, size=n, replace=False)
            for j in picked:
                orig = flat[j]
                flat[j] = orig + h
                fp = scalar_f(base)
                flat[j] = orig - h
                fm = scalar_f(base)
                flat[j] = orig
                numeric_j = (fp - fm) / (2.0 * h)
                worst = max(worst, relative_error(analytic[i].reshape(-1)[j], numeric_j))
    return worst


def make_planted_blobs(n_centers, n_points, dim, radius, rng, sep_factor=10.0):
    """Gaussian blobs planted on a randomly rotated, jittered simplex.

    All pairwise center distances are near-equal and at least
    sep_factor * radius. Near-equidistance matters beyond mere
    separation: if one center pair sits much closer than the rest,
    merging that pair is cheap and the SSE curve's sharpest bend moves
    below the true count, which no selection rule could repair.
    """
    if n_centers > dim:
        raise ValueError(f"cannot place {n_centers} equidistant centers in {dim}-D")
    sep = 1.2 * sep_factor * radius
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    centers = (sep / np.sqrt(2.0)) * q[:n_centers]
    centers = centers + rng.uniform(-1.0, 1.0, size=centers.shape) * (0.02 * sep)
    d = np.sqrt(((centers[:, None] - centers[None, :]) ** 2).sum(axis=2))
    np.fill_diagonal(d, np.inf)
    assert d.min() >= sep_factor * radius
    labels = rng.integers(0, n_centers, size=n_points)
    points = centers[labels] + rng.normal(scale=radius / 3.0, size=(n_points, dim))
    return points, labels, centers


def exhaustive_two_means(points):
    """Globally optimal 2-means SSE by enumerating every bipartition.

    Only feasible for a handful of points, and that is the point: it is the
    oracle the iterative fit is judged against.
    """
    n = points.shape[0]
    best = np.inf
    for assignment in itertools.product([0, 1], repeat=n):
        labels = np.array(assignment)
        if labels.min() == labels.max():
            continue
        total = 0.0
        for c in (0, 1):
            members = points[labels == c]
            centroid = members.mean(axis=0)
            total += float(((members - centroid) ** 2).sum())
        best = min(best, total)
    return best
