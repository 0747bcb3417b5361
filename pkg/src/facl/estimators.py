"""scikit-learn compatible estimators over the attention MIL model.

Samples are bags: ``X`` is a sequence of ``(n_patches, n_features)`` arrays
(or :class:`~facl.data.FeatureBag` objects) and ``y`` holds one label per bag.
``FederatedAttentionMILClassifier.fit`` takes a ``groups`` array assigning
every bag to a center; each center becomes one federated client.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, column_or_1d

from .data import FeatureBag, stratified_split
from .federation import Client, FederationConfig, predict_bags, run_federation
from .model import ModelConfig, attention_scores, project
from .tensor import derive_rng

__all__ = ["check_bags", "AttentionMILClassifier", "FederatedAttentionMILClassifier"]

_SPLIT_STREAM = 20


def check_bags(X, n_features=None):
    """Validate a sequence of bags and return a list of float64 matrices."""
    if isinstance(X, np.ndarray) and X.ndim == 2 and X.dtype != object:
        raise ValueError("X must be a sequence of 2-D bags, got a single 2-D array")
    bags = []
    for i, bag in enumerate(X):
        arr = np.asarray(getattr(bag, "features", bag), dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"bag {i} must be 2-D (n_patches, n_features), got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError(f"bag {i} has no patches")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"bag {i} contains NaN or infinity")
        if n_features is None:
            n_features = arr.shape[1]
        elif arr.shape[1] != n_features:
            raise ValueError(f"bag {i} has {arr.shape[1]} features, expected {n_features}")
        bags.append(arr)
    if not bags:
        raise ValueError("X contains no bags")
    return bags


class _AttentionMILBase(ClassifierMixin, BaseEstimator):
    def _encode_targets(self, X, y):
        bags = check_bags(X)
        y = column_or_1d(y, warn=True)
        if len(y) != len(bags):
            raise ValueError(f"X has {len(bags)} bags but y has {len(y)} labels")
        check_classification_targets(y)
        classes = np.unique(y) if self.classes is None else np.asarray(self.classes)
        missing = np.setdiff1d(np.unique(y), classes)
        if missing.size:
            raise ValueError(f"labels {missing.tolist()} are not in classes")
        if classes.size < 2:
            raise ValueError("need at least two classes")
        self.classes_ = classes
        self.n_features_in_ = bags[0].shape[1]
        y_idx = np.searchsorted(classes, y)
        return [FeatureBag(f"bag{i}", b, label) for i, (b, label) in enumerate(zip(bags, y_idx))]

    def _fit_clients(self, groups_of_bags, fed_config):
        self.model_config_ = ModelConfig(self.n_features_in_, self.proj_dim, self.attn_dim, len(self.classes_))
        clients = []
        for gi, bags in enumerate(groups_of_bags):
            if self.validation_fraction > 0:
                train, val = stratified_split(
                    bags, 1.0 - self.validation_fraction, derive_rng(fed_config.seed, _SPLIT_STREAM, gi)
                )
            else:
                train, val = bags, []
            clients.append(Client(gi, train, val, self.model_config_, fed_config))
        score_fn = None
        if not any(c.n_validation for c in clients):
            # nothing to select on: keep the last round
            score_fn = lambda k, params, metrics: float(k)  # noqa: E731
        self.params_, self.history_ = run_federation(
            clients, fed_config, self.model_config_, score_fn=score_fn, n_jobs=getattr(self, "n_jobs", None)
        )
        self.best_round_ = max((r.round for r in self.history_ if r.is_best), default=None)
        self.n_rounds_ = len(self.history_)
        return self

    def _selection_metric(self):
        if self.selection_metric is not None:
            return self.selection_metric
        return "auc" if len(self.classes_) == 2 else "kappa"

    def _check_X(self, X):
        check_is_fitted(self, "params_")
        bags = check_bags(X, self.n_features_in_)
        return bags

    def predict_proba(self, X):
        bags = self._check_X(X)
        return predict_bags(self.params_, bags)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def attention(self, X):
        """Per-bag attention matrices of shape ``(n_classes, n_patches)``."""
        bags = self._check_X(X)
        return [attention_scores(self.params_, project(self.params_, b))[1] for b in bags]


class AttentionMILClassifier(_AttentionMILBase):
    """Single-site gated-attention MIL classifier trained with Adam, batch size 1.

    A stratified ``validation_fraction`` of the bags is held out each fit to
    pick the best epoch and drive early stopping.
    """

    def __init__(
        self,
        proj_dim=512,
        attn_dim=256,
        lr=2e-4,
        max_epochs=100,
        min_epochs=40,
        patience=20,
        validation_fraction=0.2,
        selection_metric=None,
        classes=None,
        random_state=0,
    ):
        self.proj_dim = proj_dim
        self.attn_dim = attn_dim
        self.lr = lr
        self.max_epochs = max_epochs
        self.min_epochs = min_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.selection_metric = selection_metric
        self.classes = classes
        self.random_state = random_state

    def fit(self, X, y):
        bags = self._encode_targets(X, y)
        fed = FederationConfig(
            algorithm="fedavg",
            mu=0.0,
            max_rounds=self.max_epochs,
            min_rounds=min(self.min_epochs, self.max_epochs),
            patience=self.patience,
            lr=self.lr,
            selection_metric=self._selection_metric(),
            seed=int(self.random_state or 0),
        )
        return self._fit_clients([bags], fed)


class FederatedAttentionMILClassifier(_AttentionMILBase):
    """Federated training across centers with optional attention consistency and weight noise.

    ``algorithm="facl"`` adds ``mu`` times the KL divergence between each
    client's attention and the frozen server copy's attention to the
    classification loss; ``"fedavg"`` trains on the classification loss
    alone. ``noise_z > 0`` perturbs each aggregated tensor with Gaussian
    noise of standard deviation ``noise_z`` times that tensor's spread.
    """

    def __init__(
        self,
        algorithm="facl",
        mu=1.0,
        noise_z=0.0,
        noise_placement="server",
        weighting="samples",
        proj_dim=512,
        attn_dim=256,
        lr=2e-4,
        local_epochs=1,
        max_rounds=100,
        min_rounds=40,
        patience=20,
        validation_fraction=0.2,
        selection_metric=None,
        reset_optimizer=False,
        kl_direction="client_server",
        kl_reduction="mean",
        classes=None,
        n_jobs=None,
        random_state=0,
    ):
        self.algorithm = algorithm
        self.mu = mu
        self.noise_z = noise_z
        self.noise_placement = noise_placement
        self.weighting = weighting
        self.proj_dim = proj_dim
        self.attn_dim = attn_dim
        self.lr = lr
        self.local_epochs = local_epochs
        self.max_rounds = max_rounds
        self.min_rounds = min_rounds
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.selection_metric = selection_metric
        self.reset_optimizer = reset_optimizer
        self.kl_direction = kl_direction
        self.kl_reduction = kl_reduction
        self.classes = classes
        self.n_jobs = n_jobs
        self.random_state = random_state

    def fit(self, X, y, groups=None):
        bags = self._encode_targets(X, y)
        if groups is None:
            groups = np.zeros(len(bags), dtype=int)
        groups = column_or_1d(groups)
        if len(groups) != len(bags):
            raise ValueError(f"groups has {len(groups)} entries for {len(bags)} bags")
        self.groups_ = np.unique(groups)
        per_group = [[b for b, g in zip(bags, groups) if g == key] for key in self.groups_]
        fed = FederationConfig(
            algorithm=self.algorithm,
            mu=self.mu,
            noise_z=self.noise_z,
            noise_placement=self.noise_placement,
            weighting=self.weighting,
            local_epochs=self.local_epochs,
            max_rounds=self.max_rounds,
            min_rounds=self.min_rounds,
            patience=self.patience,
            selection_metric=self._selection_metric(),
            lr=self.lr,
            reset_optimizer=self.reset_optimizer,
            kl_direction=self.kl_direction,
            kl_reduction=self.kl_reduction,
            seed=int(self.random_state or 0),
        )
        return self._fit_clients(per_group, fed)
