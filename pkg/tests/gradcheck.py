"""Central finite-difference gradient checks in float64."""

import numpy as np

from s3nas import tensorcore as tc
from s3nas.supernet import _subnet_spec

REL_TOL = 1e-3
FLOOR = 1e-5
STEP = 1e-5


def rel_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def project(out: tc.Tensor, rng) -> tc.Tensor:
    """Scalar loss from any output: sum(out * R) with a fixed random R."""
    r = tc.Tensor(rng.standard_normal(out.shape))
    return tc.sum_(tc.mul(out, r)) if out.ndim else out


def check(fn, arrays, rng, coords_per_input=None):
    """Max relative error between backprop and central differences.

    ``fn`` maps a list of float64 leaf tensors to a scalar tensor. With
    ``coords_per_input`` only that many random coordinates per input are probed.
    """
    leaves = [tc.Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    loss = fn(leaves)
    loss.backward()
    worst = 0.0
    for leaf, base in zip(leaves, arrays):
        base = base.astype(np.float64)
        idxs = list(np.ndindex(base.shape))
        if coords_per_input is not None and len(idxs) > coords_per_input:
            pick = rng.choice(len(idxs), coords_per_input, replace=False)
            idxs = [idxs[i] for i in pick]
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(base)
        for idx in idxs:
            vals = []
            for sign in (1, -1):
                probe = [tc.Tensor(a.astype(np.float64)) for a in arrays]
                probe[[id(x) for x in leaves].index(id(leaf))].data[idx] += sign * STEP
                with tc.no_grad():
                    vals.append(fn(probe).item())
            num = (vals[0] - vals[1]) / (2 * STEP)
            worst = max(worst, float(rel_error(grad[idx], num)))
    return worst


def sliced_forward(names, arch, bounds, images, project_r):
    """Forward through supernet-shaped float64 leaves with the slicing route."""
    from s3nas.supernet import network_forward

    spec = list(_subnet_spec(arch, bounds))

    def fn(leaves):
        w = dict(zip(names, leaves))
        p = {n: tc.reshape(tc.slice_(w[n], idx), shp) for n, idx, shp in spec}
        out = network_forward(p, arch, bounds.shape, tc.Tensor(images))
        return tc.sum_(tc.mul(out, tc.Tensor(project_r)))

    return fn
