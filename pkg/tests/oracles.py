"""Independent reference computations shared by the test modules."""

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences (x is restored)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def reference_attention(q, k, v):
    d = q.shape[-1]
    return softmax(q @ k.T / np.sqrt(d)) @ v


def random_row_stochastic(rng, m: int, boost: float = 0.0) -> np.ndarray:
    """softmax of standard normal logits, optionally with ``boost`` added on the diagonal."""
    return softmax(rng.standard_normal((m, m)) + boost * np.eye(m))
