"""Independent reference classifiers used to calibrate acceptance thresholds.

The multinomial logistic oracle is deliberately a separate route from the
package's own training path: closed-form gradient, scipy L-BFGS, no autodiff.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize


def logistic_oracle_fit(
    features: np.ndarray, labels: np.ndarray, l2: float = 1e-4
) -> np.ndarray:
    """Fit multinomial logistic regression; returns weights (dim + 1, n_classes)."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    n, d = x.shape
    c = int(y.max()) + 1
    xb = np.hstack([x, np.ones((n, 1))])
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0

    def objective(flat: np.ndarray):
        w = flat.reshape(d + 1, c)
        z = xb @ w
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        nll = -np.log(p[np.arange(n), y] + 1e-300).mean() + 0.5 * l2 * (w[:d] ** 2).sum()
        grad = xb.T @ (p - onehot) / n
        grad[:d] += l2 * w[:d]
        return nll, grad.reshape(-1)

    start = np.zeros((d + 1) * c)
    result = minimize(objective, start, jac=True, method="L-BFGS-B")
    return result.x.reshape(d + 1, c)


def logistic_oracle_scores(weights: np.ndarray, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    z = xb @ weights
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def logistic_oracle_accuracy(
    train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray
) -> float:
    """Test accuracy of the reference classifier trained on the raw features."""
    weights = logistic_oracle_fit(train_x, train_y)
    scores = logistic_oracle_scores(weights, test_x)
    return float((scores.argmax(axis=1) == np.asarray(test_y)).mean())
