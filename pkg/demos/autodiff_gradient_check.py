"""Reverse-mode autodiff on a small 3D conv stack, checked against finite differences."""
import numpy as np

from volseg import tensor as T
from volseg.tensor import Tensor, default_dtype


def loss_fn(x, w):
    y = T.conv3d(x, w, padding="same")
    y = T.maxpool3d(T.leaky_relu(y), 2)
    return T.tsum(T.upsample_trilinear(y, 2) ** 2)


rng = np.random.default_rng(0)
with default_dtype(np.float64):
    x = Tensor(rng.normal(size=(1, 2, 6, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)) * 0.3, requires_grad=True)
    loss = loss_fn(x, w)
    loss.backward()

    h = 1e-6
    fd = np.zeros_like(w.data)
    for idx in np.ndindex(*w.shape):
        orig = w.data[idx]
        w.data[idx] = orig + h
        up = loss_fn(x, w).item()
        w.data[idx] = orig - h
        down = loss_fn(x, w).item()
        w.data[idx] = orig
        fd[idx] = (up - down) / (2 * h)

err = np.linalg.norm(w.grad - fd) / max(np.linalg.norm(fd), 1e-12)
print(f"loss {loss.item():.4f}, conv weight grad relative error vs finite differences: {err:.2e}")
