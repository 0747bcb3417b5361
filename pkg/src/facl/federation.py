"""Federated training loop with attention-consistency regularisation.

Each round every client copies the current server weights, trains one pass
over its private bags (batch size 1) against a frozen copy of those server
weights, and sends back only its parameter vector and scalar losses. The
server takes a weighted average, optionally perturbs it with Gaussian noise
scaled to each tensor's spread, evaluates it on the clients' validation
sets and keeps the best round.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .losses import LossBreakdown, cross_entropy, total_loss
from .metrics import MetricSet, compute_metrics
from .model import ModelParams, attention_scores, backward, forward, init_params, project
from .optim import Adam
from .tensor import derive_rng, gaussian_noise

__all__ = [
    "FederationConfig",
    "ClientUpdate",
    "RoundReport",
    "Client",
    "EarlyStopping",
    "aggregate",
    "aggregation_weights",
    "predict_bags",
    "evaluate_server",
    "run_federation",
    "DEFAULT_NOISE_Z",
]

DEFAULT_NOISE_Z = 0.1

# leading keys that keep the training random streams apart
_INIT_STREAM = 10
_CLIENT_STREAM = 11
_SERVER_STREAM = 12


@dataclass(frozen=True)
class FederationConfig:
    algorithm: str = "facl"
    mu: float = 1.0
    noise_z: float = 0.0
    noise_placement: str = "server"
    weighting: str = "samples"
    local_epochs: int = 1
    max_rounds: int = 100
    min_rounds: int = 40
    patience: int = 20
    selection_metric: str = "auc"
    lr: float = 2e-4
    reset_optimizer: bool = False
    kl_direction: str = "client_server"
    kl_reduction: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("facl", "fedavg"):
            raise ConfigError(f"algorithm must be 'facl' or 'fedavg', got {self.algorithm!r}")
        if self.mu < 0:
            raise ConfigError("mu must be non-negative")
        if self.noise_z < 0:
            raise ConfigError("noise_z must be non-negative")
        if self.noise_placement not in ("server", "client"):
            raise ConfigError(f"noise_placement must be 'server' or 'client', got {self.noise_placement!r}")
        if self.weighting not in ("samples", "uniform"):
            raise ConfigError(f"weighting must be 'samples' or 'uniform', got {self.weighting!r}")
        if self.selection_metric not in ("auc", "kappa", "acc", "f1"):
            raise ConfigError(f"unknown selection metric {self.selection_metric!r}")
        if self.local_epochs < 1 or self.max_rounds < 1:
            raise ConfigError("local_epochs and max_rounds must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0 <= self.min_rounds <= self.max_rounds:
            raise ConfigError("min_rounds must lie in [0, max_rounds]")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.kl_direction not in ("client_server", "server_client"):
            raise ConfigError(f"unknown kl_direction {self.kl_direction!r}")
        if self.kl_reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown kl_reduction {self.kl_reduction!r}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ClientUpdate:
    """Everything a client sends to the server after a round."""

    client_id: int
    params: np.ndarray
    n_samples: int
    ce: float
    facl: float


@dataclass
class RoundReport:
    round: int
    client_losses: list
    server_metrics: MetricSet
    client_metrics: dict
    weights: list
    noise_sigma: dict
    score: float
    is_best: bool = False

    def as_row(self):
        row = {"round": self.round}
        for loss in self.client_losses:
            row[f"ce_{loss['client_id']}"] = loss["ce"]
            row[f"facl_{loss['client_id']}"] = loss["facl"]
        row.update(self.server_metrics.as_dict())
        row["score"] = self.score
        row["best"] = int(self.is_best)
        return row


def predict_bags(params, bags):
    """Class probabilities, one row per bag."""
    logits = np.stack([forward(params, bag).logits for bag in bags])
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def evaluate_server(params, bags, num_classes=None, kappa_weighting=None):
    if len(bags) == 0:
        raise ValueError("cannot evaluate on an empty bag list")
    num_classes = params.config.num_classes if num_classes is None else num_classes
    probs = predict_bags(params, bags)
    labels = np.array([bag.label for bag in bags])
    return compute_metrics(probs, labels, num_classes, kappa_weighting)


class Client:
    """One center. Bags stay private; only weights and scalars leave."""

    def __init__(self, client_id, train_bags, val_bags, model_config, fed_config):
        train_bags, val_bags = list(train_bags), list(val_bags)
        if not train_bags:
            raise ConfigError(f"client {client_id} has no training bags")
        overlap = {id(b) for b in train_bags} & {id(b) for b in val_bags}
        if overlap:
            raise ConfigError(f"client {client_id} has bags in both train and validation sets")
        self.client_id = int(client_id)
        self._train = train_bags
        self._val = val_bags
        self._model_config = model_config
        self._fed = fed_config
        self._optimizer = Adam(model_config.n_params, lr=fed_config.lr)

    @property
    def n_samples(self):
        return len(self._train)

    @property
    def n_validation(self):
        return len(self._val)

    @property
    def optimizer_step(self):
        return self._optimizer.t

    def train_round(self, server_params, round_idx):
        if server_params.config != self._model_config:
            raise ShapeError("server parameters do not match the client's model layout")
        fed = self._fed
        if fed.reset_optimizer:
            self._optimizer.reset()
        rng = derive_rng(fed.seed, _CLIENT_STREAM, round_idx, self.client_id)
        flat = server_params.flatten()
        params = ModelParams.unflatten(self._model_config, flat)
        ce_sum = facl_sum = 0.0
        steps = 0
        use_consistency = fed.algorithm == "facl"
        for _ in range(fed.local_epochs):
            for j in rng.permutation(len(self._train)):
                bag = self._train[j]
                trace = forward(params, bag)
                if use_consistency:
                    _, server_att = attention_scores(server_params, project(server_params, bag))
                    losses, d_logits, d_att = total_loss(
                        trace.logits,
                        bag.label,
                        trace.attention,
                        server_att,
                        fed.mu,
                        direction=fed.kl_direction,
                        reduction=fed.kl_reduction,
                    )
                    grad = backward(params, trace, d_logits, d_att if fed.mu > 0 else None)
                else:
                    ce, d_logits = cross_entropy(trace.logits, bag.label)
                    losses = LossBreakdown(ce, 0.0, ce, 0.0)
                    grad = backward(params, trace, d_logits)
                flat = self._optimizer.step(flat, grad)
                params = ModelParams.unflatten(self._model_config, flat, copy=False)
                ce_sum += losses.ce
                facl_sum += losses.facl
                steps += 1
        if fed.noise_z > 0 and fed.noise_placement == "client":
            params, _ = _add_tensor_noise(params, fed.noise_z, rng)
            flat = params.flatten()
        return ClientUpdate(self.client_id, flat, self.n_samples, ce_sum / steps, facl_sum / steps)

    def predict_validation(self, params):
        """``(probs, labels)`` of the server model on this client's validation bags."""
        if not self._val:
            return np.zeros((0, params.config.num_classes)), np.zeros(0, dtype=int)
        return predict_bags(params, self._val), np.array([b.label for b in self._val])


def aggregation_weights(n_samples, mode="samples"):
    n = np.asarray(n_samples, dtype=np.float64)
    if mode == "uniform":
        return np.full(n.size, 1.0 / n.size)
    if mode == "samples":
        return n / n.sum()
    raise ConfigError(f"unknown weighting {mode!r}")


def _add_tensor_noise(params, z, rng):
    noisy, sigmas = {}, {}
    for name, tensor in params.tensors().items():
        sigma = z * float(np.std(tensor))
        noisy[name] = tensor + gaussian_noise(rng, tensor.shape, sigma)
        sigmas[name] = sigma
    return ModelParams(params.config, **noisy), sigmas


def _aggregate(client_params, weights, z, rng, placement):
    if not client_params:
        raise ValueError("nothing to aggregate")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(client_params),):
        raise ValueError(f"got {weights.size} weights for {len(client_params)} clients")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights must be non-negative and sum to 1, got sum {weights.sum()}")
    config = client_params[0].config
    for p in client_params[1:]:
        if p.config != config:
            raise ShapeError(f"parameter layouts differ: {p.config} vs {config}")

    sigmas = {}
    if z > 0 and placement == "client":
        noised = []
        per_client = []
        for p in client_params:
            q, s = _add_tensor_noise(p, z, rng)
            noised.append(q)
            per_client.append(s)
        client_params = noised
        sigmas = {name: float(np.dot(weights, [s[name] for s in per_client])) for name in per_client[0]}

    avg = {}
    for name in client_params[0].tensors():
        acc = weights[0] * getattr(client_params[0], name)
        for w, p in zip(weights[1:], client_params[1:]):
            acc = acc + w * getattr(p, name)
        avg[name] = acc
    server = ModelParams(config, **avg)
    if z > 0 and placement == "server":
        server, sigmas = _add_tensor_noise(server, z, rng)
    return server, sigmas


def aggregate(client_params, weights, z=0.0, rng=None, placement="server"):
    """Weighted average of client weights plus N(0, (z * std(tensor))^2) noise per tensor.

    With ``placement="server"`` the spread is measured on the averaged tensor
    and noise is added once; with ``"client"`` each client's tensors are
    perturbed before averaging.
    """
    if z > 0 and rng is None:
        raise ValueError("a random generator is required when z > 0")
    return _aggregate(client_params, weights, z, rng, placement)[0]


class EarlyStopping:
    """Stop once ``patience`` rounds pass without strict improvement, but not before ``min_rounds``."""

    def __init__(self, patience=20, min_rounds=40, max_rounds=100):
        self.patience = patience
        self.min_rounds = min_rounds
        self.max_rounds = max_rounds
        self.best_score = -math.inf
        self.best_round = None
        self.last_round = 0

    def update(self, round_idx, score):
        """Record a round's score; return True when it is the new best."""
        self.last_round = round_idx
        if score is not None and not math.isnan(score) and score > self.best_score:
            self.best_score = score
            self.best_round = round_idx
            return True
        if self.best_round is None:
            self.best_round = round_idx
            return True
        return False

    @property
    def should_stop(self):
        if self.last_round >= self.max_rounds:
            return True
        stale = self.last_round - (self.best_round or 0)
        return stale >= self.patience and self.last_round >= self.min_rounds


def _n_threads(n_jobs):
    if n_jobs is None:
        n_jobs = int(os.environ.get("FACL_THREADS", "1") or 1)
    return max(1, int(n_jobs))


def run_federation(clients, fed_config, model_config=None, init=None, score_fn=None, n_jobs=None, callback=None):
    """Train ``clients`` for up to ``fed_config.max_rounds`` rounds.

    Returns ``(best_params, reports)``. ``score_fn(round, params, metrics)``
    replaces the configured selection metric when given. ``n_jobs`` (or the
    ``FACL_THREADS`` environment variable) sets how many clients train
    concurrently; results do not depend on it.
    """
    if not clients:
        raise ConfigError("need at least one client")
    if init is None:
        if model_config is None:
            raise ConfigError("pass model_config or initial parameters")
        init = init_params(model_config, derive_rng(fed_config.seed, _INIT_STREAM))
    server = init.copy()
    num_classes = server.config.num_classes
    kappa_weighting = "none" if num_classes == 2 else "quadratic"
    stopper = EarlyStopping(fed_config.patience, fed_config.min_rounds, fed_config.max_rounds)
    weights = aggregation_weights([c.n_samples for c in clients], fed_config.weighting)
    reports = []
    best = server.copy()
    n_threads = min(_n_threads(n_jobs), len(clients))
    pool = ThreadPoolExecutor(n_threads) if n_threads > 1 else None

    try:
        for k in range(1, fed_config.max_rounds + 1):
            if pool is None:
                updates = [c.train_round(server, k) for c in clients]
            else:
                updates = list(pool.map(lambda c: c.train_round(server, k), clients))
            client_params = [ModelParams.unflatten(server.config, u.params) for u in updates]
            rng = derive_rng(fed_config.seed, _SERVER_STREAM, k)
            z = fed_config.noise_z if fed_config.noise_placement == "server" else 0.0
            server, sigmas = _aggregate(client_params, weights, z, rng, "server")
            if fed_config.noise_z > 0 and fed_config.noise_placement == "client":
                sigmas = {"placement": "client"}

            all_probs, all_labels, per_client = [], [], {}
            for c in clients:
                probs, labels = c.predict_validation(server)
                if labels.size:
                    all_probs.append(probs)
                    all_labels.append(labels)
                    per_client[c.client_id] = compute_metrics(probs, labels, num_classes, kappa_weighting)
            if all_labels:
                pooled = compute_metrics(np.concatenate(all_probs), np.concatenate(all_labels), num_classes, kappa_weighting)
            else:
                pooled = MetricSet(*(float("nan"),) * 5)

            if score_fn is not None:
                score = float(score_fn(k, server, pooled))
            else:
                score = float(getattr(pooled, fed_config.selection_metric))
            improved = stopper.update(k, score)
            if improved:
                best = server.copy()
            report = RoundReport(
                round=k,
                client_losses=[{"client_id": u.client_id, "ce": u.ce, "facl": u.facl, "n": u.n_samples} for u in updates],
                server_metrics=pooled,
                client_metrics=per_client,
                weights=weights.tolist(),
                noise_sigma=sigmas,
                score=score,
                is_best=improved,
            )
            reports.append(report)
            if callback is not None:
                callback(report, server)
            if stopper.should_stop:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return best, reports
