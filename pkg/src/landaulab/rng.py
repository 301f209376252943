"""Counter-based normal streams keyed by (seed, step, row).

Every draw comes from a Philox generator whose key is the run seed and whose
counter words hold (0, row, step, tag). Philox increments the lowest counter
word, so streams that differ in row, step or tag never overlap. Results do
not depend on the order in which rows or steps are generated.
"""

import numpy as np

MASK64 = (1 << 64) - 1

TAG_MEANFIELD = 1
TAG_PAIRWISE = 2
TAG_INITIAL = 3


def stream(seed, step, row=0, tag=0):
    """A numpy Generator on the Philox stream (seed, step, row, tag)."""
    key = np.array([int(seed) & MASK64, 0], dtype=np.uint64)
    counter = np.array([0, int(row) & MASK64, int(step) & MASK64, int(tag) & MASK64],
                       dtype=np.uint64)
    bg = np.random.Philox(key=key, counter=counter)
    return np.random.Generator(bg)


def block_normals(seed, step, shape, tag=TAG_MEANFIELD):
    """Standard normals of ``shape`` from the single stream of one step."""
    return stream(seed, step, 0, tag).standard_normal(shape)


def row_normals(seed, step, n_rows, row_shape, tag=TAG_PAIRWISE, out=None):
    """Array (n_rows, *row_shape) whose row i comes from stream (seed, step, i, tag).

    Row i of the pairwise scheme holds the partner noises xi_ij for all j,
    so each particle's noise is reproducible on its own.
    """
    shape = (n_rows,) + tuple(row_shape)
    if out is None:
        out = np.empty(shape)
    elif out.shape != shape:
        raise ValueError(f"out has shape {out.shape}, expected {shape}")
    for i in range(n_rows):
        stream(seed, step, i, tag).standard_normal(row_shape, out=out[i])
    return out
