"""Spectral norm estimation by power iteration and hard rescaling of weights.

All routines accept a single matrix ``(m, n)`` or a stack ``(..., m, n)``; the
persistent vector ``u`` then carries the same leading dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autograd import Tensor

DEFAULT_TARGET = 5.0
REPORT_TOL = 1e-9
REPORT_MAX_ITERS = 1000


class SpectralEstimate(NamedTuple):
    sigma: float
    converged: bool
    iterations: int


def _normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return x / safe, norm[..., 0]


def power_iteration_step(W: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One step: v' = normalize(W^T u), u' = normalize(W v'), sigma = u'^T W v'.

    Stacked matrices whose W^T u vanishes keep their ``u`` and report sigma 0.
    """
    W = np.asarray(W, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v, vnorm = _normalize(np.einsum("...mn,...m->...n", W, u))
    Wv = np.einsum("...mn,...n->...m", W, v)
    u_new, _ = _normalize(Wv)
    sigma = np.einsum("...m,...m->...", u_new, Wv)
    dead = vnorm == 0
    if np.any(dead):
        u_new = np.where(dead[..., None], u, u_new)
        sigma = np.where(dead, 0.0, sigma)
    return u_new, v, sigma


def random_unit(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    u, _ = _normalize(rng.standard_normal(shape))
    return u


def estimate_spectral_norm(W: np.ndarray, tol: float = REPORT_TOL, max_iters: int = REPORT_MAX_ITERS,
                           seed: int = 0) -> SpectralEstimate:
    if tol <= 0:
        raise ValueError("tol must be positive")
    W = np.asarray(W, dtype=np.float64)
    u = random_unit((W.shape[0],), np.random.default_rng(seed))
    sigma_prev = None
    sigma = 0.0
    for it in range(1, max_iters + 1):
        u, _, s = power_iteration_step(W, u)
        sigma = float(s)
        if sigma == 0.0:
            return SpectralEstimate(0.0, True, it)
        if sigma_prev is not None and abs(sigma - sigma_prev) < tol * sigma:
            return SpectralEstimate(sigma, True, it)
        sigma_prev = sigma
    return SpectralEstimate(sigma, False, max_iters)


SN_MODES = ("rescale", "clip")


def normalize_weight(W, sigma_hat, sigma_target: float = DEFAULT_TARGET, mode: str = "rescale"):
    """Rescale ``W`` so its spectral norm becomes ``sigma_target``.

    ``mode="clip"`` only divides when ``sigma_hat`` exceeds the target, leaving
    smaller matrices untouched. ``W`` and ``sigma_hat`` may be arrays or taped
    tensors; stacked matrices take one sigma per leading index. A zero sigma
    leaves that matrix unchanged.
    """
    if sigma_target <= 0:
        raise ValueError("sigma_target must be positive")
    if mode not in SN_MODES:
        raise ValueError(f"unknown spectral normalization mode {mode!r}")
    if isinstance(sigma_hat, Tensor):
        s = sigma_hat.data
        act = (s > sigma_target) if mode == "clip" else (s > 0)
        act = act.astype(np.float64)
        denom = sigma_hat * act + (1.0 - act)
        scale = (sigma_target * act) / denom + (1.0 - act)
        return W * scale.reshape(scale.shape + (1, 1))
    s = np.asarray(sigma_hat, dtype=np.float64)
    act = (s > sigma_target) if mode == "clip" else (s > 0)
    scale = np.where(act, sigma_target / np.where(act, s, 1.0), 1.0)
    return W * scale[..., None, None]


@dataclass
class SpectralState:
    """Persistent left singular vectors per named weight (possibly stacked)."""

    target: float = DEFAULT_TARGET
    mode: str = "rescale"
    u: dict[str, np.ndarray] = field(default_factory=dict)
    sigma: dict[str, np.ndarray] = field(default_factory=dict)

    def init_matrix(self, name: str, W: np.ndarray, seed: int, warmup: int = 50) -> None:
        rng = np.random.default_rng(seed)
        u = random_unit(W.shape[:-2] + (W.shape[-2],), rng)
        sigma = np.zeros(W.shape[:-2])
        for _ in range(warmup):
            u, _, sigma = power_iteration_step(W, u)
        self.u[name] = u
        self.sigma[name] = np.asarray(sigma)

    def select(self, name: str, keep: np.ndarray) -> None:
        """Keep only the stacked entries ``keep`` (used when heads are removed)."""
        if name in self.u:
            self.u[name] = self.u[name][keep]
            self.sigma[name] = self.sigma[name][keep]

    def drop(self, name: str) -> None:
        self.u.pop(name, None)
        self.sigma.pop(name, None)

    def normalized(self, name: str, W: Tensor, update: bool) -> Tensor:
        """Taped ``target * W / sigma(W)``; sigma flows gradient through u^T W v.

        With ``update`` the persistent u advances one power-iteration step;
        otherwise it is read without modification so evaluation is repeatable.
        """
        u = self.u[name]
        u_new, v, sigma = power_iteration_step(W.data, u)
        if update:
            self.u[name] = u_new
            self.sigma[name] = np.asarray(sigma)
        lead = W.shape[:-2]
        uu = Tensor(u_new.reshape(lead + (W.shape[-2], 1)))
        vv = Tensor(v.reshape(lead + (W.shape[-1], 1)))
        sigma_t = (uu * (W @ vv)).sum(axis=(-2, -1))
        return normalize_weight(W, sigma_t, self.target, self.mode)

    def effective_sigma(self, name: str, W: np.ndarray) -> np.ndarray:
        """Sigma the forward pass divides by, computed without touching state."""
        _, _, sigma = power_iteration_step(W, self.u[name])
        return np.asarray(sigma)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "mode": self.mode,
            "u": {k: self.u[k].tolist() for k in sorted(self.u)},
            "sigma": {k: np.asarray(self.sigma[k]).tolist() for k in sorted(self.sigma)},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SpectralState":
        return cls(
            target=float(payload["target"]),
            mode=payload.get("mode", "rescale"),
            u={k: np.asarray(v, dtype=np.float64) for k, v in payload["u"].items()},
            sigma={k: np.asarray(v, dtype=np.float64) for k, v in payload["sigma"].items()},
        )


def stacked_spectral_norms(W: np.ndarray, tol: float = REPORT_TOL,
                           max_iters: int = REPORT_MAX_ITERS) -> list[SpectralEstimate]:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 2:
        return [estimate_spectral_norm(W, tol, max_iters)]
    return [estimate_spectral_norm(m, tol, max_iters) for m in W.reshape((-1,) + W.shape[-2:])]
