import numpy as np
import pytest

from adabet.ingest import tensor_from_array, write_npy
from adabet.jsonutil import dumps_canonical
from adabet.tinynet import (
    DenseNet,
    TrainConfig,
    activation_gradients,
    forward_capture,
    make_synthetic,
    train,
)


def ring(m, radius=1.0, center=(0.0, 0.0)):
    """m points evenly spaced on a circle."""
    theta = np.arange(m) * (2.0 * np.pi / m)
    return np.stack([center[0] + radius * np.cos(theta),
                     center[1] + radius * np.sin(theta)], axis=1)


@pytest.fixture
def unit_square():
    return np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def build_dump_dir(root, with_grads=False, seed=0, n_batches=5, batch_size=8,
                   dims=(2, 16, 16, 2), group_last_two=False):
    """Write a self-consistent dump directory from a small trained net.

    Returns (dump_dir, net, dataset).  With group_last_two the two middle
    layers share a group id, exercising atomic group selection.
    """
    root.mkdir(parents=True, exist_ok=True)
    data = make_synthetic("circles", 200, 0.05, seed)
    net = DenseNet.build(list(dims), seed=seed)
    train(net, data, TrainConfig(lr0=1e-2, epochs=5, seed=seed))
    widths = net.dims[1:]
    rows = []
    for k, layer in enumerate(net.layers):
        gid = "mid" if group_last_two and k in (1, 2) else None
        rows.append({
            "index": k,
            "name": "dense%d" % k,
            "trainable": True,
            "param_count": int(layer.param_count),
            "act_elems_per_sample": int(widths[k]),
            "group_id": gid,
        })
    (root / "meta.json").write_text(dumps_canonical(rows) + "\n")
    for b in range(n_batches):
        xb = data.x_train[b * batch_size:(b + 1) * batch_size]
        yb = data.y_train[b * batch_size:(b + 1) * batch_size]
        _, acts = forward_capture(net, xb)
        if with_grads:
            _, agrads = activation_gradients(net, xb, yb)
        for k in range(len(net.layers)):
            path = root / ("layer%04d_batch%04d.npy" % (k, b))
            path.write_bytes(write_npy(tensor_from_array(acts[k])))
            if with_grads:
                gpath = root / ("layer%04d_batch%04d.grad.npy" % (k, b))
                gpath.write_bytes(write_npy(tensor_from_array(agrads[k])))
    return root, net, data
