"""Observation-density (Mahalanobis) estimator for sensor corruption."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .stats import nearest_rank


class NumericError(ArithmeticError):
    pass


@dataclass
class CalibrationSet:
    """Nominal transitions ``(obs[i], act[i], next_obs[i])``."""

    obs: np.ndarray
    act: np.ndarray
    next_obs: np.ndarray

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=float)
        self.act = np.asarray(self.act, dtype=float)
        self.next_obs = np.asarray(self.next_obs, dtype=float)
        if not (len(self.obs) == len(self.act) == len(self.next_obs)):
            raise ValueError("transition arrays differ in length")
        if self.obs.shape != self.next_obs.shape:
            raise ValueError("obs and next_obs differ in dimension")

    def __len__(self):
        return len(self.obs)

    def subset(self, idx) -> "CalibrationSet":
        return CalibrationSet(self.obs[idx], self.act[idx], self.next_obs[idx])

    def save(self, path):
        np.savez(path, obs=self.obs, act=self.act, next_obs=self.next_obs)

    @classmethod
    def load(cls, path) -> "CalibrationSet":
        with np.load(path) as d:
            return cls(d["obs"], d["act"], d["next_obs"])


@dataclass(frozen=True)
class AleatoricModel:
    mu: np.ndarray
    sigma: np.ndarray
    sigma_inv: np.ndarray
    mask: tuple[int, ...]
    lam: float
    tau: float
    percentile: float = 95.0
    m_a: float = 1.0
    calib_scores: np.ndarray | None = None

    def score(self, obs) -> np.ndarray | float:
        """Mahalanobis distance of one observation (or each row of a batch)."""
        o = np.asarray(obs, dtype=float)
        if not np.all(np.isfinite(o)):
            raise ValueError("non-finite observation")
        d = o[..., list(self.mask)] - self.mu
        q = np.einsum("...i,ij,...j->...", d, self.sigma_inv, d)
        s = np.sqrt(np.maximum(q, 0.0))
        return float(s) if s.ndim == 0 else s

    def trigger(self, obs):
        return self.score(obs) > self.tau

    def with_multiplier(self, m_a: float) -> "AleatoricModel":
        base = self.tau / self.m_a
        return AleatoricModel(self.mu, self.sigma, self.sigma_inv, self.mask,
                              self.lam, base * m_a, self.percentile, m_a,
                              self.calib_scores)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(),
                "lambda": self.lam, "tau": self.tau, "percentile": self.percentile,
                "m_a": self.m_a, "mask": list(self.mask)}

    @classmethod
    def from_dict(cls, d: dict) -> "AleatoricModel":
        sigma = np.asarray(d["sigma"], dtype=float)
        return cls(np.asarray(d["mu"], dtype=float), sigma, _spd_inverse(sigma),
                   tuple(d["mask"]), d["lambda"], d["tau"], d["percentile"], d["m_a"])


def _spd_inverse(sigma: np.ndarray) -> np.ndarray:
    try:
        c = linalg.cho_factor(sigma, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericError("covariance is not positive definite") from exc
    inv = linalg.cho_solve(c, np.eye(len(sigma)))
    return 0.5 * (inv + inv.T)


def fit_aleatoric(observations, mask, lam: float = 1e-6,
                  percentile: float = 95.0, m_a: float = 1.0) -> AleatoricModel:
    """Fit mean and ridge-regularized 1/N covariance over the masked dims.

    ``observations`` is either an ``(N, d)`` array or a :class:`CalibrationSet`
    (its ``obs`` column is used). The threshold is the nearest-rank percentile
    of the in-sample scores times ``m_a``.
    """
    if isinstance(observations, CalibrationSet):
        observations = observations.obs
    full = np.asarray(observations, dtype=float)
    x = full[:, list(mask)]
    if lam <= 0:
        raise ValueError("lambda must be positive")
    n, k = x.shape
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} observations, got {n}")
    mu = x.mean(axis=0)
    xc = x - mu
    sigma = xc.T @ xc / n + lam * np.eye(k)
    sigma = 0.5 * (sigma + sigma.T)
    sigma_inv = _spd_inverse(sigma)
    model = AleatoricModel(mu, sigma, sigma_inv, tuple(mask), lam, 0.0, percentile, m_a)
    scores = np.sort(model.score(full))
    tau = nearest_rank(scores, percentile) * m_a
    return AleatoricModel(mu, sigma, sigma_inv, tuple(mask), lam, tau,
                          percentile, m_a, scores)


def alea_score(model: AleatoricModel, obs):
    return model.score(obs)


def alea_trigger(model: AleatoricModel, obs):
    return model.trigger(obs)


def dumps(model: AleatoricModel) -> str:
    return json.dumps(model.to_dict())


def loads(text: str) -> AleatoricModel:
    return AleatoricModel.from_dict(json.loads(text))
