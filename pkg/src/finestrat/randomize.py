"""Treatment assignment draws: within-group stratified and complete."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, as_generator


@dataclass(frozen=True)
class AssignmentDraw:
    d: np.ndarray
    draw_index: int = 1
    accepted: bool = True
    penalty: float | None = None

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.int8)
        d.setflags(write=False)
        object.__setattr__(self, "d", d)


def treated_units_batch(groups, l, gen, size):
    """Draw `size` independent stratified assignments; returns the treated
    unit indices as a (size, G, l) array.

    Each group's treated subset comes from a partial Fisher-Yates shuffle of
    the group's slots (l swap rounds), which is exactly uniform over size-l
    subsets. Vectorized across draws and groups.
    """
    groups = np.asarray(groups)
    G, k = groups.shape
    perm = np.broadcast_to(np.arange(k), (size, G, k)).copy()
    bi = np.arange(size)[:, None]
    gi = np.arange(G)[None, :]
    for t in range(l):
        j = gen.integers(t, k, size=(size, G))
        tmp = perm[bi, gi, j]
        perm[bi, gi, j] = perm[:, :, t]
        perm[:, :, t] = tmp
    pos = perm[:, :, :l]
    return np.take_along_axis(np.broadcast_to(groups, (size, G, k)), pos, axis=2)


def assignment_matrix_from_treated(treated, n):
    """Convert (size, G, l) treated indices to a (size, n) 0/1 matrix."""
    size = treated.shape[0]
    d = np.zeros((size, n), dtype=np.int8)
    d[np.arange(size)[:, None, None], treated] = 1
    return d


def draw_stratified(partition, rng):
    """Independently for each group, treat a uniformly random subset of l
    of its k units."""
    gen = as_generator(rng)
    treated = treated_units_batch(partition.groups, partition.l, gen, 1)
    d = assignment_matrix_from_treated(treated, partition.n)[0]
    return AssignmentDraw(d=d)


def draw_complete(n, p, rng):
    """Uniformly random treated subset of size n*p (must be an integer)."""
    m = n * p
    if abs(m - round(m)) > 1e-9:
        raise ConfigError(f"n*p = {m} is not an integer; complete randomization undefined")
    m = int(round(m))
    if not 0 < m < n:
        raise ConfigError(f"need 0 < n*p < n, got n*p = {m}")
    gen = as_generator(rng)
    d = np.zeros(n, dtype=np.int8)
    d[gen.permutation(n)[:m]] = 1
    return AssignmentDraw(d=d)
