"""Shared helpers for the test suite."""

import numpy as np

from vlbnn import autodiff as ad


def max_rel_err(a, b, floor=1e-6):
    """Elementwise |a-b| / max(|a|, |b|, floor), reduced with max."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def flatten(arrays):
    return np.concatenate([np.asarray(a).ravel() for a in arrays])


def assign_from_flat(leaves, vec):
    """Write a flat vector back into the data buffers of leaf tensors."""
    offset = 0
    for t in leaves:
        n = t.data.size
        t.data[...] = vec[offset:offset + n].reshape(t.data.shape)
        offset += n
    assert offset == vec.size


def tiny_mlp(widths, seed):
    """Plain on-tape leaves for a softplus MLP; returns (leaves, forward_fn)."""
    rng = np.random.default_rng(seed)
    leaves = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        leaves.append(ad.leaf(rng.normal(0, 1 / np.sqrt(fan_in), (fan_in, fan_out))))
        leaves.append(ad.leaf(rng.normal(0, 0.3, (fan_out,))))

    def forward(x):
        h = ad.as_tensor(x)
        for i in range(len(widths) - 1):
            h = ad.add(ad.matmul(h, leaves[2 * i]), leaves[2 * i + 1])
            if i < len(widths) - 2:
                h = ad.softplus(h)
        return h

    return leaves, forward
