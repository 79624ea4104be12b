"""Linear-Gaussian Thompson sampling with exact conjugate updates per action."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, NumericalError

N_ACTIONS = 4
STATE_DIM = 3  # observed state [c, h, d]


@dataclass(frozen=True)
class TsConfig:
    state_dim: int = STATE_DIM
    mu0: float | Sequence[float] = 0.0
    sigma0: float | Sequence[Sequence[float]] = 100.0
    sigma_y2: float = 25.0 ** 2
    include_bias: bool = False
    n_actions: int = N_ACTIONS

    @property
    def dim(self) -> int:
        return self.state_dim + (1 if self.include_bias else 0)

    def prior_mean(self) -> np.ndarray:
        mu = np.broadcast_to(np.asarray(self.mu0, dtype=float), (self.dim,)).copy()
        return mu

    def prior_cov(self) -> np.ndarray:
        s = np.asarray(self.sigma0, dtype=float)
        if s.ndim == 0:
            return float(s) * np.eye(self.dim)
        if s.shape != (self.dim, self.dim):
            raise ConfigError(f"sigma0 must be {self.dim}x{self.dim}, got {s.shape}")
        return s.copy()

    def __post_init__(self):
        if self.sigma_y2 <= 0:
            raise ConfigError("sigma_y2 must be positive")
        if self.state_dim < 1 or self.n_actions < 1:
            raise ConfigError("state_dim and n_actions must be positive")
        cov = self.prior_cov()
        if not np.allclose(cov, cov.T):
            raise ConfigError("sigma0 must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ConfigError("sigma0 must be positive definite") from None
        self.prior_mean()

    def to_dict(self) -> dict[str, Any]:
        def plain(v):
            return np.asarray(v).tolist()
        return {"state_dim": self.state_dim, "mu0": plain(self.mu0), "sigma0": plain(self.sigma0),
                "sigma_y2": self.sigma_y2, "include_bias": self.include_bias,
                "n_actions": self.n_actions}

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "TsConfig":
        data = dict(data or {})
        unknown = set(data) - {"state_dim", "mu0", "sigma0", "sigma_y2", "include_bias", "n_actions"}
        if unknown:
            raise ConfigError(f"unknown ts parameter(s): {sorted(unknown)}")
        return cls(**data)


@dataclass
class ActionPosterior:
    mu: np.ndarray
    Sigma: np.ndarray
    n_updates: int = 0

    def copy(self) -> "ActionPosterior":
        return ActionPosterior(self.mu.copy(), self.Sigma.copy(), self.n_updates)


def _cholesky(Sigma: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance is not positive definite: {exc}") from exc


def _spd_inverse(A: np.ndarray) -> np.ndarray:
    L = _cholesky(A)
    L_inv = np.linalg.solve(L, np.eye(len(A)))
    inv = L_inv.T @ L_inv
    return 0.5 * (inv + inv.T)


def sample_mvn(mu: np.ndarray, Sigma: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    L = _cholesky(Sigma)
    return mu + L @ rng.standard_normal(len(mu))


def update_posterior(post: ActionPosterior, v: np.ndarray, r: float, sigma_y2: float) -> ActionPosterior:
    """Conjugate Bayesian linear-regression update on one ``(v, r)`` observation.

    New covariance is ``sigma_y2 (v v^T + sigma_y2 Sigma^-1)^-1``, new mean is
    ``Sigma' (r v / sigma_y2 + Sigma^-1 mu)``.
    """
    v = np.asarray(v, dtype=float)
    if not (np.all(np.isfinite(v)) and np.isfinite(r)):
        raise ValueError("observation must be finite")
    prec = _spd_inverse(post.Sigma)
    Sigma_new = sigma_y2 * _spd_inverse(np.outer(v, v) + sigma_y2 * prec)
    mu_new = Sigma_new @ (r * v / sigma_y2 + prec @ post.mu)
    return ActionPosterior(mu_new, Sigma_new, post.n_updates + 1)


def propose_action(posteriors: Sequence[ActionPosterior], v: np.ndarray, rng: np.random.Generator) -> int:
    """Sample one weight vector per action and return the argmax; ties go to the lowest id."""
    scores = np.array([sample_mvn(p.mu, p.Sigma, rng) @ v for p in posteriors])
    return int(np.argmax(scores))


class ThompsonSampler:
    """Per-action Gaussian posteriors over linear reward weights."""

    def __init__(self, config: TsConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config or TsConfig()
        self.rng = rng if rng is not None else np.random.default_rng()
        mu0, cov0 = self.config.prior_mean(), self.config.prior_cov()
        self.posteriors = [ActionPosterior(mu0.copy(), cov0.copy()) for _ in range(self.config.n_actions)]

    def features(self, c: float, h: float, d: float) -> np.ndarray:
        v = [c, h, d] + ([1.0] if self.config.include_bias else [])
        return np.asarray(v, dtype=float)

    def propose(self, v: np.ndarray) -> int:
        return propose_action(self.posteriors, v, self.rng)

    def update(self, a: int, v: np.ndarray, r: float) -> None:
        self.posteriors[a] = update_posterior(self.posteriors[a], v, r, self.config.sigma_y2)

    def snapshot(self) -> list[dict[str, Any]]:
        return [{"mu": p.mu.tolist(), "Sigma": p.Sigma.tolist(), "n_updates": p.n_updates}
                for p in self.posteriors]
