"""Sparse variational GP classifier over capsule features.

One latent GP per class, all sharing the RBF kernel ``exp(-gamma |a - b|^2)``
and a single set of inducing locations ``Z``.  Each class has a Gaussian
``q(u_c) = N(m_c, L_c L_c^T)`` over its inducing values (non-whitened, so
the prior is ``N(0, Kzz)``).  Classification uses a softmax likelihood whose
expectation under the marginals of ``q(f)`` is estimated by reparameterized
Monte Carlo.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .diffcore import Module, Tensor, jittered_cholesky, ops, parameter, solve_triangular

VARIANCE_FLOOR = 1e-12


def rbf_kernel(a, b, gamma) -> Tensor:
    """Matrix of ``exp(-gamma * |a_n - b_m|^2)`` for rows of ``a`` (N×D) and ``b`` (M×D)."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"rbf_kernel: feature dimensions differ, {a.shape} vs {b.shape}")
    gamma = gamma if isinstance(gamma, Tensor) else Tensor(gamma)
    if np.any(gamma.data < 0):
        raise ValueError("rbf_kernel: gamma must be non-negative")
    sq_a = ops.sum(ops.square(a), axis=1, keepdims=True)
    sq_b = ops.reshape(ops.sum(ops.square(b), axis=1), (1, b.shape[0]))
    dist = ops.maximum(sq_a + sq_b - 2.0 * ops.matmul(a, ops.transpose(b)), 0.0)
    return ops.exp(-gamma * dist)


@dataclass
class PriorFactor:
    chol: Tensor        # lower Cholesky factor of Kzz + jitter*I
    jitter: float


def prior_factor(Z, gamma) -> PriorFactor:
    L, jitter = jittered_cholesky(rbf_kernel(Z, Z, gamma))
    return PriorFactor(L, jitter)


def _diag(L: Tensor) -> Tensor:
    idx = np.arange(L.shape[-1])
    return L[..., idx, idx]


def posterior_marginals(features, Z, q_mean, q_chol, gamma,
                        prior: Optional[PriorFactor] = None) -> Tuple[Tensor, Tensor]:
    """Means and variances (each N×Nc) of the latent functions under ``q(f)``.

    ``mu_c = Kxz Kzz^-1 m_c`` and
    ``var_c = diag(Kxx - Kxz (Kzz^-1 - Kzz^-1 S_c Kzz^-1) Kzx)``.
    """
    features = features if isinstance(features, Tensor) else Tensor(features)
    q_mean = q_mean if isinstance(q_mean, Tensor) else Tensor(q_mean)
    q_chol = q_chol if isinstance(q_chol, Tensor) else Tensor(q_chol)
    prior = prior or prior_factor(Z, gamma)
    Kzx = rbf_kernel(Z, features, gamma)                              # M×N
    A = solve_triangular(prior.chol, Kzx, lower=True)                 # L^-1 Kzx
    B = solve_triangular(prior.chol, A, lower=True, trans=True)       # Kzz^-1 Kzx
    mean = ops.transpose(ops.matmul(q_mean, B))                       # N×Nc
    projected = ops.matmul(ops.transpose(q_chol, (0, 2, 1)), B)       # Nc×M×N
    kept = ops.sum(ops.square(A), axis=0, keepdims=True)              # 1×N
    var = ops.transpose(1.0 - kept + ops.sum(ops.square(projected), axis=1))
    return mean, ops.maximum(var, VARIANCE_FLOOR)


def kl_to_prior(q_mean, q_chol, Z, gamma, prior: Optional[PriorFactor] = None) -> Tensor:
    """``sum_c KL(N(m_c, S_c) || N(0, Kzz))``."""
    q_mean = q_mean if isinstance(q_mean, Tensor) else Tensor(q_mean)
    q_chol = q_chol if isinstance(q_chol, Tensor) else Tensor(q_chol)
    prior = prior or prior_factor(Z, gamma)
    n_classes, M = q_mean.shape
    L = prior.chol
    stacked = ops.reshape(ops.transpose(q_chol, (1, 0, 2)), (M, n_classes * M))
    trace = ops.sum(ops.square(solve_triangular(L, stacked, lower=True)))
    maha = ops.sum(ops.square(solve_triangular(L, ops.transpose(q_mean), lower=True)))
    logdet_prior = 2.0 * ops.sum(ops.log(_diag(L)))
    logdet_q = 2.0 * ops.sum(ops.log(ops.maximum(_diag(q_chol), 1e-300)))
    return 0.5 * (trace + maha - n_classes * M + n_classes * logdet_prior - logdet_q)


def expected_log_likelihood(mean: Tensor, var: Tensor, labels, noise: np.ndarray) -> Tensor:
    """Monte Carlo estimate of ``sum_n E_q[log softmax(f_n)[y_n]]``.

    ``noise`` holds standard normal draws of shape (S, N, Nc).
    """
    labels = np.asarray(labels)
    n, n_classes = mean.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ValueError(f"labels must be {n} ids in [0, {n_classes})")
    f = mean + ops.sqrt(var) * Tensor(noise)
    onehot = np.eye(n_classes, dtype=mean.dtype)[labels]
    picked = ops.sum(ops.log_softmax(f, axis=-1) * Tensor(onehot), axis=-1)  # S×N
    return ops.sum(ops.mean(picked, axis=0))


def elbo(features, labels, q_mean, q_chol, Z, gamma, mc_samples: int = 10,
         rng: Optional[np.random.Generator] = None, noise: Optional[np.ndarray] = None,
         dataset_size: Optional[int] = None) -> Tensor:
    """Evidence lower bound for a minibatch; the KL term is scaled by batch/dataset size."""
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    prior = prior_factor(Z, gamma)
    mean, var = posterior_marginals(features, Z, q_mean, q_chol, gamma, prior)
    if noise is None:
        noise = (rng or np.random.default_rng()).standard_normal((mc_samples,) + mean.shape)
    n = mean.shape[0]
    scale = 1.0 if dataset_size is None else n / dataset_size
    return expected_log_likelihood(mean, var, labels, noise) - scale * kl_to_prior(q_mean, q_chol, Z, gamma, prior)


def predict_probs(mean, var, mc_samples: int = 64, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Average of ``softmax(f)`` over posterior draws; rows sum to one."""
    mean = np.asarray(mean.data if isinstance(mean, Tensor) else mean)
    var = np.asarray(var.data if isinstance(var, Tensor) else var)
    rng = rng or np.random.default_rng()
    f = mean + np.sqrt(var) * rng.standard_normal((mc_samples,) + mean.shape)
    f = f - f.max(axis=-1, keepdims=True)
    e = np.exp(f)
    probs = (e / e.sum(axis=-1, keepdims=True)).mean(axis=0)
    return probs / probs.sum(axis=-1, keepdims=True)


def predictive_entropy(probs) -> np.ndarray:
    """Shannon entropy (nats) along the last axis, with 0 ln 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logp, axis=-1)


def predict_class(probs) -> np.ndarray:
    """Argmax along the last axis; ties go to the lowest index."""
    return np.argmax(np.asarray(probs), axis=-1)


class SVGPHead(Module):
    """Trainable parameters of the GP classification layer."""

    def __init__(self, feature_dim: int, num_classes: int = 10, num_inducing: int = 70,
                 rng: Optional[np.random.Generator] = None, gamma: Optional[float] = None,
                 inducing_std: float = 0.1):
        rng = rng or np.random.default_rng(0)
        self.log_gamma = parameter(np.log(1.0 / feature_dim if gamma is None else gamma))
        self.inducing = parameter(rng.normal(0.0, inducing_std, size=(num_inducing, feature_dim)))
        self.q_mean = parameter(np.zeros((num_classes, num_inducing)))
        self.q_log_diag = parameter(np.zeros((num_classes, num_inducing)))
        self.q_lower = parameter(np.zeros((num_classes, num_inducing, num_inducing)))

    @property
    def num_classes(self) -> int:
        return self.q_mean.shape[0]

    @property
    def num_inducing(self) -> int:
        return self.q_mean.shape[1]

    def gamma(self) -> Tensor:
        return ops.exp(self.log_gamma)

    def q_chol(self) -> Tensor:
        M = self.num_inducing
        strict = Tensor(np.tril(np.ones((M, M)), -1))
        diag = ops.reshape(ops.exp(self.q_log_diag), (self.num_classes, M, 1)) * Tensor(np.eye(M))
        return self.q_lower * strict + diag

    def reset_variational(self) -> None:
        self.q_mean.data = np.zeros_like(self.q_mean.data)
        self.q_log_diag.data = np.zeros_like(self.q_log_diag.data)
        self.q_lower.data = np.zeros_like(self.q_lower.data)

    def set_inducing(self, Z: np.ndarray, gamma: Optional[float] = None) -> None:
        if Z.shape != self.inducing.shape:
            raise ValueError(f"inducing shape {Z.shape} != {self.inducing.shape}")
        self.inducing.data = np.array(Z, dtype=self.inducing.dtype)
        if gamma is not None:
            self.log_gamma.data = np.array(np.log(gamma), dtype=self.log_gamma.dtype)

    def marginals(self, features: Tensor, prior: Optional[PriorFactor] = None) -> Tuple[Tensor, Tensor]:
        return posterior_marginals(features, self.inducing, self.q_mean, self.q_chol(), self.gamma(), prior)

    def elbo(self, features: Tensor, labels, mc_samples: int = 10, rng=None, noise=None,
             dataset_size: Optional[int] = None) -> Tensor:
        return elbo(features, labels, self.q_mean, self.q_chol(), self.inducing, self.gamma(),
                    mc_samples=mc_samples, rng=rng, noise=noise, dataset_size=dataset_size)

    def kl(self) -> Tensor:
        return kl_to_prior(self.q_mean, self.q_chol(), self.inducing, self.gamma())


def median_heuristic_gamma(features: np.ndarray) -> float:
    """``1 / median squared pairwise distance`` of the given rows."""
    diff = features[:, None, :] - features[None, :, :]
    d2 = np.sum(diff * diff, axis=-1)[np.triu_indices(len(features), 1)]
    med = float(np.median(d2)) if d2.size else 0.0
    return 1.0 / med if med > 0 else 1.0
