"""Classification loss, attention-consistency KL loss, and their weighted sum."""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

__all__ = ["LossBreakdown", "cross_entropy", "kl_attention", "total_loss"]

KL_EPS = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    facl: float
    total: float
    mu: float


def cross_entropy(logits, label):
    """Return ``(loss, d_logits)`` for one sample."""
    logits = np.asarray(logits, dtype=np.float64)
    label = int(label)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    shifted = logits - logits.max()
    log_z = np.log(np.sum(np.exp(shifted)))
    loss = float(log_z - shifted[label])
    grad = np.exp(shifted - log_z)
    grad[label] -= 1.0
    return loss, grad


def kl_attention(client, server, eps=KL_EPS, direction="client_server", reduction="mean"):
    """KL divergence between attention profiles, averaged over class rows.

    ``direction="client_server"`` computes KL[client || server]; the other
    option ``"server_client"`` computes KL[server || client]. The server
    profile is a constant. The returned gradient is with respect to the
    client's pre-softmax attention logits.
    """
    P = np.asarray(client, dtype=np.float64)
    Q = np.asarray(server, dtype=np.float64)
    if P.shape != Q.shape or P.ndim != 2:
        raise ShapeError(f"attention profiles differ in shape: {P.shape} vs {Q.shape}")
    n_rows = P.shape[0]
    scale = 1.0 / n_rows if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    log_p = np.log(np.maximum(P, eps))
    log_q = np.log(np.maximum(Q, eps))
    if direction == "client_server":
        loss = np.sum(P * (log_p - log_q))
        # d/dP of P*log(max(P, eps)) drops the +1 where the clamp is active
        d_p = log_p - log_q + (P > eps)
    elif direction == "server_client":
        loss = np.sum(Q * (log_q - log_p))
        d_p = np.where(P > eps, -Q / np.maximum(P, eps), 0.0)
    else:
        raise ValueError(f"unknown KL direction {direction!r}")

    d_p = d_p * scale
    d_logits = P * (d_p - np.sum(d_p * P, axis=1, keepdims=True))
    return max(float(loss * scale), 0.0), d_logits


def total_loss(logits, label, client_profile, server_profile, mu=1.0, **kl_options):
    """Return ``(LossBreakdown, d_logits, d_attention_logits)`` for ``ce + mu * facl``."""
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu}")
    ce, d_logits = cross_entropy(logits, label)
    facl, d_att = kl_attention(client_profile, server_profile, **kl_options)
    if mu == 0:
        d_att = np.zeros_like(d_att)
    else:
        d_att = mu * d_att
    return LossBreakdown(ce, facl, ce + mu * facl, mu), d_logits, d_att
