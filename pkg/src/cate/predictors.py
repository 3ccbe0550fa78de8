"""Neural accuracy predictors: a ReLU MLP regressor and DNGO.

DNGO fits the MLP by regression, then replaces its output layer with a
Bayesian linear regression on the last hidden layer, giving a closed-form
Gaussian predictive distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamW

JITTER = 1e-8


def _canonical_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row order that depends only on the multiset of (x, y) rows."""
    return np.lexsort(np.column_stack([x, y]).T[::-1])


class Standardizer:
    def __init__(self, data: np.ndarray):
        self.mean = data.mean(axis=0)
        std = data.std(axis=0)
        self.std = np.where(std > 1e-12, std, 1.0)

    def __call__(self, data: np.ndarray) -> np.ndarray:
        return (data - self.mean) / self.std

    def invert(self, data: np.ndarray) -> np.ndarray:
        return data * self.std + self.mean


class MLPRegressor:
    """Two hidden ReLU layers and a linear output."""

    def __init__(self, n_in: int, hidden: int = 128, seed: int = 0):
        rng = np.random.default_rng(seed)

        def lin(fan_in, fan_out, gain):
            a = gain * np.sqrt(3.0 / fan_in)
            return rng.uniform(-a, a, size=(fan_in, fan_out))

        self.params = {
            "w0": Tensor(lin(n_in, hidden, np.sqrt(2)), True, "w0"),
            "b0": Tensor(np.zeros(hidden), True, "b0"),
            "w1": Tensor(lin(hidden, hidden, np.sqrt(2)), True, "w1"),
            "b1": Tensor(np.zeros(hidden), True, "b1"),
            "w2": Tensor(lin(hidden, 1, 1.0), True, "w2"),
            "b2": Tensor(np.zeros(1), True, "b2"),
        }
        self.seed = seed

    def features(self, x) -> Tensor:
        p = self.params
        h = ad.relu(ad.add(ad.matmul(x, p["w0"]), p["b0"]))
        return ad.relu(ad.add(ad.matmul(h, p["w1"]), p["b1"]))

    def forward(self, x) -> Tensor:
        p = self.params
        return ad.add(ad.matmul(self.features(x), p["w2"]), p["b2"])

    def fit(self, x: np.ndarray, y: np.ndarray, epochs: int = 100, lr: float = 1e-3,
            batch_size: int = 32, weight_decay: float = 0.0) -> list[float]:
        opt = AdamW(self.params, lr=lr, weight_decay=weight_decay)
        rng = np.random.default_rng([self.seed, 1])
        n = len(x)
        history = []
        for _ in range(epochs):
            order = rng.permutation(n)
            for s in range(0, n, batch_size):
                idx = order[s:s + batch_size]
                with ad.Tape() as tape:
                    loss = ad.mse(ad.reshape(self.forward(x[idx]), (len(idx),)), y[idx])
                opt.step(tape.backward(loss, self.params))
                opt.zero_grad()
            history.append(loss.item())
        return history

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).data[:, 0]


@dataclass
class BayesianLinearRegression:
    """Evidence-maximised Bayesian linear regression with a bias feature.

    Prior w ~ N(0, alpha^-1 I), noise precision beta; both set by MacKay's
    fixed-point updates.
    """

    alpha: float = 1.0
    beta: float = 1.0
    max_iter: int = 100
    max_beta: float = 1e10
    mean: np.ndarray | None = None
    cov_chol: np.ndarray | None = None

    @staticmethod
    def _design(phi: np.ndarray) -> np.ndarray:
        return np.column_stack([phi, np.ones(len(phi))])

    def _posterior(self, phi, y, gram):
        a = self.alpha * np.eye(gram.shape[0]) + self.beta * gram
        try:
            chol = linalg.cho_factor(a, lower=True)
        except linalg.LinAlgError:
            a = a + JITTER * np.eye(a.shape[0])
            chol = linalg.cho_factor(a, lower=True)  # second failure propagates
        mean = self.beta * linalg.cho_solve(chol, phi.T @ y)
        return mean, chol

    def fit(self, features: np.ndarray, y: np.ndarray) -> "BayesianLinearRegression":
        phi = self._design(np.asarray(features, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64)
        n = len(y)
        gram = phi.T @ phi
        eig = np.clip(np.linalg.eigvalsh(gram), 0.0, None)
        for _ in range(self.max_iter):
            mean, chol = self._posterior(phi, y, gram)
            lam = self.beta * eig
            gamma = float(np.sum(lam / (lam + self.alpha)))
            resid = float(np.sum((y - phi @ mean) ** 2))
            new_alpha = gamma / max(float(mean @ mean), 1e-300)
            new_beta = (n - gamma) / resid if resid > 0 and n > gamma else self.max_beta
            new_alpha = float(np.clip(new_alpha, 1e-10, 1e10))
            new_beta = float(np.clip(new_beta, 1e-10, self.max_beta))
            done = abs(np.log(new_alpha / self.alpha)) < 1e-6 and abs(np.log(new_beta / self.beta)) < 1e-6
            self.alpha, self.beta = new_alpha, new_beta
            if done:
                break
        self.mean, self.cov_chol = self._posterior(phi, y, gram)
        return self

    def predict(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        phi = self._design(np.asarray(features, dtype=np.float64))
        mu = phi @ self.mean
        var = np.einsum("ij,ji->i", phi, linalg.cho_solve(self.cov_chol, phi.T)) + 1.0 / self.beta
        return mu, np.maximum(var, 0.0)


class DngoModel:
    def __init__(self, hidden: int = 128, epochs: int = 100, lr: float = 1e-3, batch_size: int = 32, seed: int = 0):
        self.hidden, self.epochs, self.lr, self.batch_size, self.seed = hidden, epochs, lr, batch_size, seed

    def fit(self, x: np.ndarray, y: np.ndarray) -> "DngoModel":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if len(x) < 2:
            raise ValueError("DNGO needs at least 2 training points")
        order = _canonical_order(x, y)
        x, y = x[order], y[order]
        self.xs = Standardizer(x)
        self.ys = Standardizer(y[:, None])
        xz, yz = self.xs(x), self.ys(y[:, None])[:, 0]
        self.mlp = MLPRegressor(x.shape[1], self.hidden, self.seed)
        self.mlp.fit(xz, yz, self.epochs, self.lr, self.batch_size)
        self.blr = BayesianLinearRegression().fit(self.mlp.features(xz).data, yz)
        return self

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        feats = self.mlp.features(self.xs(np.asarray(x, dtype=np.float64))).data
        mu, var = self.blr.predict(feats)
        return self.ys.invert(mu[:, None])[:, 0], var * self.ys.std[0] ** 2


class MlpPredictor:
    """Plain MLP regressor with the same input/target handling as DNGO; zero predictive variance."""

    def __init__(self, hidden: int = 128, epochs: int = 100, lr: float = 1e-3, batch_size: int = 32, seed: int = 0):
        self.hidden, self.epochs, self.lr, self.batch_size, self.seed = hidden, epochs, lr, batch_size, seed

    def fit(self, x, y) -> "MlpPredictor":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        order = _canonical_order(x, y)
        x, y = x[order], y[order]
        self.xs = Standardizer(x)
        self.ys = Standardizer(y[:, None])
        self.mlp = MLPRegressor(x.shape[1], self.hidden, self.seed)
        self.mlp.fit(self.xs(x), self.ys(y[:, None])[:, 0], self.epochs, self.lr, self.batch_size)
        return self

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        mu = self.mlp.predict(self.xs(np.asarray(x, dtype=np.float64)))
        return self.ys.invert(mu[:, None])[:, 0], np.zeros(len(mu))


def dngo_predictor(encodings, accuracies, candidates, epochs: int = 100, seed: int = 0, **kwargs):
    """Predictive mean and variance of a DNGO model fit on (encodings, accuracies)."""
    model = DngoModel(epochs=epochs, seed=seed, **kwargs).fit(encodings, accuracies)
    return model.predict(candidates)


def expected_improvement(mean: np.ndarray, var: np.ndarray, best: float) -> np.ndarray:
    from scipy.stats import norm

    sigma = np.sqrt(np.maximum(var, 1e-300))
    z = (mean - best) / sigma
    return (mean - best) * norm.cdf(z) + sigma * norm.pdf(z)
