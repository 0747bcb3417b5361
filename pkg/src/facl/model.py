"""Gated-attention multiple-instance classifier with per-class attention branches.

For a bag of patch features ``Z`` (N x feature_dim)::

    H      = Z W1^T                                  projection, N x proj_dim
    G      = tanh(H Va^T) * sigm(H Ua^T)             gated backbone, N x attn_dim
    logits = Wa G^T                                  one attention row per class
    A      = softmax over patches of each row        C x N
    pooled = A H                                     C x proj_dim
    s_m    = Wc[m] . pooled[m]                       slide logit per class

No bias terms anywhere. The backward pass is written out by hand and accepts
an extra upstream gradient on the attention logits so that a consistency
loss on the attention distribution can be trained without an autodiff tape.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError, StateError, VersionError
from .tensor import sigm_elem, softmax_rows

__all__ = [
    "ModelConfig",
    "ModelParams",
    "ForwardTrace",
    "init_params",
    "project",
    "attention_scores",
    "pool_bag",
    "classify",
    "forward",
    "backward",
    "predict_proba",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 768
    proj_dim: int = 512
    attn_dim: int = 256
    num_classes: int = 2

    def __post_init__(self):
        for name in ("feature_dim", "proj_dim", "attn_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if int(self.num_classes) < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def shapes(self):
        return {
            "W1": (self.proj_dim, self.feature_dim),
            "Ua": (self.attn_dim, self.proj_dim),
            "Va": (self.attn_dim, self.proj_dim),
            "Wa": (self.num_classes, self.attn_dim),
            "Wc": (self.num_classes, self.proj_dim),
        }

    @property
    def n_params(self):
        return sum(r * c for r, c in self.shapes.values())


# Row m of Wa / Wc is class m's attention branch / classifier head.
PARAM_NAMES = ("W1", "Ua", "Va", "Wa", "Wc")


@dataclass
class ModelParams:
    config: ModelConfig
    W1: np.ndarray
    Ua: np.ndarray
    Va: np.ndarray
    Wa: np.ndarray
    Wc: np.ndarray

    def __post_init__(self):
        for name, shape in self.config.shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    def tensors(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def flatten(self):
        return np.concatenate([getattr(self, name).ravel() for name in PARAM_NAMES])

    @classmethod
    def unflatten(cls, config, flat, copy=True):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (config.n_params,):
            raise ShapeError(f"flat vector has shape {flat.shape}, expected ({config.n_params},)")
        parts, start = {}, 0
        for name in PARAM_NAMES:
            r, c = config.shapes[name]
            part = flat[start:start + r * c].reshape(r, c)
            parts[name] = part.copy() if copy else part
            start += r * c
        return cls(config, **parts)

    def copy(self):
        return ModelParams(self.config, **{k: v.copy() for k, v in self.tensors().items()})


@dataclass
class ForwardTrace:
    Z: np.ndarray
    H: np.ndarray
    tanh_branch: np.ndarray
    sigm_branch: np.ndarray
    gated: np.ndarray
    attention_logits: np.ndarray  # C x N
    attention: np.ndarray  # C x N, rows sum to 1
    pooled: np.ndarray  # C x proj_dim
    logits: np.ndarray  # C
    params_id: int = field(default=0, repr=False)


def init_params(config, rng):
    """Uniform(-b, b) weights with b = sqrt(1 / fan_in) per tensor."""
    parts = {}
    for name in PARAM_NAMES:
        rows, fan_in = config.shapes[name]
        bound = np.sqrt(1.0 / fan_in)
        parts[name] = rng.uniform(-bound, bound, size=(rows, fan_in))
    return ModelParams(config, **parts)


def _bag_matrix(params, bag):
    Z = np.asarray(getattr(bag, "features", bag), dtype=np.float64)
    if Z.ndim != 2:
        raise ShapeError(f"bag features must be 2-D, got shape {Z.shape}")
    if Z.shape[0] < 1:
        raise ValueError("bag has no patches")
    if Z.shape[1] != params.config.feature_dim:
        raise ShapeError(
            f"bag feature dim {Z.shape[1]} does not match model feature_dim {params.config.feature_dim}"
        )
    return Z


def project(params, bag):
    return _bag_matrix(params, bag) @ params.W1.T


def _gate(params, H):
    t = np.tanh(H @ params.Va.T)
    s = sigm_elem(H @ params.Ua.T)
    return t, s, t * s


def attention_scores(params, H):
    """Return ``(logits, attention)``, both num_classes x N."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 1:
        raise ShapeError(f"H must be a non-empty 2-D matrix, got shape {H.shape}")
    _, _, gated = _gate(params, H)
    logits = params.Wa @ gated.T
    return logits, softmax_rows(logits)


def pool_bag(attention, H):
    attention = np.asarray(attention, dtype=np.float64)
    if attention.shape[1] != H.shape[0]:
        raise ShapeError(f"attention covers {attention.shape[1]} patches but H has {H.shape[0]} rows")
    return attention @ H


def classify(params, pooled):
    if pooled.shape != params.Wc.shape:
        raise ShapeError(f"pooled has shape {pooled.shape}, expected {params.Wc.shape}")
    return np.einsum("mp,mp->m", params.Wc, pooled)


def forward(params, bag):
    Z = _bag_matrix(params, bag)
    H = Z @ params.W1.T
    t, s, gated = _gate(params, H)
    att_logits = params.Wa @ gated.T
    att = softmax_rows(att_logits)
    pooled = att @ H
    logits = classify(params, pooled)
    return ForwardTrace(Z, H, t, s, gated, att_logits, att, pooled, logits, params_id=id(params))


def backward(params, trace, d_logits, d_attention_logits=None):
    """Gradient of the upstream loss w.r.t. all parameters, in flat layout.

    ``d_logits`` is dL/d(slide logits) (length C); ``d_attention_logits`` is
    an optional extra dL/d(attention logits) (C x N) added before the
    backbone is differentiated.
    """
    if trace.params_id != id(params):
        raise StateError("trace was produced by a different ModelParams instance")
    C, N = trace.attention.shape
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != (C,):
        raise ShapeError(f"d_logits has shape {d_logits.shape}, expected ({C},)")

    H, att = trace.H, trace.attention
    dWc = d_logits[:, None] * trace.pooled
    d_pooled = d_logits[:, None] * params.Wc
    dH = att.T @ d_pooled
    d_att = d_pooled @ H.T
    d_att_logits = att * (d_att - np.sum(d_att * att, axis=1, keepdims=True))
    if d_attention_logits is not None:
        d_attention_logits = np.asarray(d_attention_logits, dtype=np.float64)
        if d_attention_logits.shape != (C, N):
            raise ShapeError(
                f"d_attention_logits has shape {d_attention_logits.shape}, expected {(C, N)}"
            )
        d_att_logits = d_att_logits + d_attention_logits

    dWa = d_att_logits @ trace.gated
    d_gated = d_att_logits.T @ params.Wa
    t, s = trace.tanh_branch, trace.sigm_branch
    dV = d_gated * s * (1.0 - t * t)
    dU = d_gated * t * s * (1.0 - s)
    dVa = dV.T @ H
    dUa = dU.T @ H
    dH = dH + dV @ params.Va + dU @ params.Ua
    dW1 = dH.T @ trace.Z
    return np.concatenate([g.ravel() for g in (dW1, dUa, dVa, dWa, dWc)])


def predict_proba(params, bag):
    logits = forward(params, bag).logits
    e = np.exp(logits - logits.max())
    return e / e.sum()


_MAGIC = b"FACL"
_VERSION = 1
_HEADER = struct.Struct("<4sI4i")


def save_checkpoint(params, path):
    """Header ``FACL``, u32 version, 4 x i32 config fields, then float64 weights."""
    cfg = params.config
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, cfg.feature_dim, cfg.proj_dim, cfg.attn_dim, cfg.num_classes))
        fh.write(params.flatten().astype("<f8").tobytes())


def load_checkpoint(path, expected_config=None):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("checkpoint header truncated", offset=len(raw))
    magic, version, *dims = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != _VERSION:
        raise VersionError(f"unsupported checkpoint version {version}", offset=4)
    try:
        config = ModelConfig(*dims)
    except ValueError as exc:
        raise FormatError(f"invalid model config in checkpoint: {exc}", offset=8) from None
    if expected_config is not None and config != expected_config:
        raise VersionError(f"checkpoint config {config} does not match expected {expected_config}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * config.n_params:
        raise FormatError(
            f"checkpoint body has {len(body)} bytes, expected {8 * config.n_params}",
            offset=_HEADER.size + min(len(body), 8 * config.n_params),
        )
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise FormatError("checkpoint contains non-finite weights", offset=_HEADER.size)
    return ModelParams.unflatten(config, flat)
