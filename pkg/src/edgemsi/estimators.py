"""scikit-learn style estimators over the simulator."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import datagen, evt, nn
from ._random import derive_rng
from .federation import Federation, HyperParams, MLPObjective, init_devices, mixing_matrix, run_rounds
from .netsim import max_quantization_levels, payload_bits, quantize_uniform


class FederatedClassifier(ClassifierMixin, BaseEstimator):
    """MLP trained by one of the federation protocols over a simulated partition.

    Predictions average the class probabilities of all device models (they
    coincide for protocols that keep devices synchronized).
    """

    def __init__(
        self,
        protocol="favg",
        n_devices=10,
        hidden=(32,),
        activation="relu",
        rounds=100,
        eta=0.1,
        tau=1,
        partition="iid",
        labels_per_device=1,
        p_share=0.0,
        T=1.0,
        batch_size=None,
        mixing="complete",
        random_state=0,
    ):
        self.protocol = protocol
        self.n_devices = n_devices
        self.hidden = hidden
        self.activation = activation
        self.rounds = rounds
        self.eta = eta
        self.tau = tau
        self.partition = partition
        self.labels_per_device = labels_per_device
        self.p_share = p_share
        self.T = T
        self.batch_size = batch_size
        self.mixing = mixing
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        codes = np.searchsorted(self.classes_, y)
        self.n_features_in_ = X.shape[1]
        seed = int(self.random_state or 0)
        ds = datagen.Dataset(X, codes, int(self.classes_.size))
        if self.partition == "iid":
            plan = datagen.partition_iid(ds, self.n_devices, derive_rng(seed, "partition"))
        elif self.partition == "label_skew":
            plan = datagen.partition_label_skew(ds, self.n_devices, self.labels_per_device, derive_rng(seed, "partition"))
        else:
            raise ValueError("partition must be 'iid' or 'label_skew'")
        if self.p_share > 0:
            plan = datagen.share_fraction(ds, plan, self.p_share, derive_rng(seed, "share"))
        self.spec_ = nn.ModelSpec((X.shape[1],) + tuple(self.hidden) + (ds.label_count,), self.activation)
        params0 = self.spec_.init_params(derive_rng(seed, "init"))
        devices = init_devices(self.protocol, params0, plan.assignments, ds.label_count, X.shape[1])
        hp = HyperParams(eta=self.eta, tau=self.tau, T=self.T, batch_size=self.batch_size)
        mixing = mixing_matrix(self.mixing, len(devices)) if self.protocol == "dsgd" else None
        fed = Federation([MLPObjective(self.spec_, X, codes)] * len(devices), hp, self.protocol, seed=seed, mixing=mixing)
        bits_up = 0
        self.bits_up_ = []
        for out in run_rounds(devices, fed, self.rounds):
            devices = out.devices
            bits_up += sum(payload_bits(m) for m in out.uplink)
            self.bits_up_.append(bits_up)
        self.device_params_ = [d.params for d in devices]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "device_params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        probs = [nn.softmax_temperature(nn.forward(self.spec_, p, X), 1.0) for p in self.device_params_]
        return np.mean(probs, axis=0)

    def predict(self, X):
        check_is_fitted(self, "device_params_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class GPDTailEstimator(BaseEstimator):
    """Generalized Pareto fit of positive exceedances.

    ``method`` is ``"mle"`` or ``"wasserstein"``. ``score`` returns the mean
    log-likelihood.
    """

    def __init__(self, method="mle", init_sigma=1.0, init_xi=0.1, steps=5000):
        self.method = method
        self.init_sigma = init_sigma
        self.init_xi = init_xi
        self.steps = steps

    def _values(self, X):
        x = check_array(np.asarray(X, dtype=np.float64).reshape(-1, 1), dtype=np.float64).ravel()
        if np.any(x <= 0):
            raise ValueError("exceedances must be strictly positive")
        return x

    def fit(self, X, y=None):
        x = self._values(X)
        init = evt.GpdParams(self.init_sigma, self.init_xi)
        if self.method == "mle":
            p, gn = evt.fit_gpd_mle(x, init, steps=self.steps)
        elif self.method == "wasserstein":
            p, gn = evt.fit_gpd_wasserstein(x, init, steps=min(self.steps, 500))
        else:
            raise ValueError("method must be 'mle' or 'wasserstein'")
        self.sigma_, self.xi_, self.grad_norm_ = p.sigma, p.xi, gn
        self.n_features_in_ = 1
        return self

    @property
    def params_(self) -> evt.GpdParams:
        check_is_fitted(self, "sigma_")
        return evt.GpdParams(self.sigma_, self.xi_)

    def cdf(self, x):
        return evt.gpd_cdf(np.asarray(x, dtype=np.float64), self.params_)

    def score(self, X, y=None) -> float:
        return evt.gpd_loglik_grad(self._values(X), self.params_)[0]


class UniformQuantizer(TransformerMixin, BaseEstimator):
    """Uniform midpoint quantizer over the fitted value range.

    ``levels=None`` derives the level count from ``capacity_bits``.
    """

    def __init__(self, levels=None, capacity_bits=5.0):
        self.levels = levels
        self.capacity_bits = capacity_bits

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_2d=False)
        self.levels_ = int(self.levels) if self.levels is not None else max_quantization_levels(self.capacity_bits)
        if self.levels_ < 1:
            raise ValueError("levels must be >= 1")
        _, self.step_ = quantize_uniform(X, self.levels_)
        self.min_ = float(X.min())
        self.max_ = float(X.max())
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else 1
        return self

    def transform(self, X):
        check_is_fitted(self, "step_")
        X = check_array(X, dtype=np.float64, ensure_2d=False)
        if self.step_ == 0:
            return np.full_like(X, self.min_)
        cell = np.clip(np.floor((X - self.min_) / self.step_), 0, self.levels_ - 1)
        return self.min_ + (cell + 0.5) * self.step_
