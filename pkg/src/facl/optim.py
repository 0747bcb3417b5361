import numpy as np

from .errors import NumericError, ShapeError

__all__ = ["Adam"]


class Adam:
    """Adam with bias correction over one flat parameter vector.

    State (``m``, ``v``, ``t``) belongs to a single client and is never
    averaged or transmitted.
    """

    def __init__(self, n_params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params, grad):
        """Return updated parameters; ``params`` itself is left untouched."""
        params = np.asarray(params, dtype=np.float64)
        grad = np.asarray(grad, dtype=np.float64)
        if params.shape != self.m.shape or grad.shape != self.m.shape:
            raise ShapeError(
                f"expected vectors of shape {self.m.shape}, got params {params.shape} and grad {grad.shape}"
            )
        bad = np.flatnonzero(~np.isfinite(grad))
        if bad.size:
            raise NumericError(f"non-finite gradient at parameter index {int(bad[0])}")

        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reset(self):
        self.m = np.zeros_like(self.m)
        self.v = np.zeros_like(self.v)
        self.t = 0
        return self
