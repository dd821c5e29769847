"""Adaptive augmentation: state predictor, projected estimator, low-pass filter.

The augmentation runs alongside the contraction feedback.  A predictor copies
the plant but with the uncertainty replaced by its current estimate and a
Hurwitz pull-back toward the measured state; the estimate adapts on the
prediction error through a projection that keeps it inside (a slight
inflation of) the assumed uncertainty ball; the commanded correction is the
negated estimate pushed through a first-order low-pass, so high-frequency
estimation chatter never reaches the plant.

All discrete-time pieces here are exact or explicitly documented:

* the low-pass step is the exact zero-order-hold discretization, so the
  filter is unconditionally stable for any step size;
* the estimator uses an explicit Euler step (the standard choice); a radial
  clamp after the step enforces the ball invariance that the projection
  guarantees only in continuous time.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from .errors import DimensionMismatch


@dataclass
class L1Config:
    """Tuning for the adaptive augmentation.

    ``pred_matrix`` must be Hurwitz; ``lyap_p`` solves
    ``pred_matrix.T @ P + P @ pred_matrix = -lyap_q`` and is computed here
    unless supplied.
    """

    state_dim: int
    input_dim: int
    bandwidth: float            # low-pass pole of the command filter (rad/s)
    adaptation_gain: float
    unc_bound: float            # radius of the matched-uncertainty ball
    eps_proj: float = 0.1       # relative width of the projection boundary layer
    pred_matrix: np.ndarray = None
    lyap_q: np.ndarray = None
    lyap_p: np.ndarray = dc_field(default=None, repr=False)

    def __post_init__(self):
        if self.bandwidth <= 0.0:
            raise ValueError("filter bandwidth must be positive")
        if self.adaptation_gain <= 0.0:
            raise ValueError("adaptation gain must be positive")
        if self.unc_bound <= 0.0:
            raise ValueError("uncertainty bound must be positive")
        if self.eps_proj <= 0.0:
            raise ValueError("projection boundary width must be positive")
        n = self.state_dim
        if self.pred_matrix is None:
            self.pred_matrix = -10.0 * np.eye(n)
        else:
            self.pred_matrix = np.asarray(self.pred_matrix, dtype=float)
        if self.lyap_q is None:
            self.lyap_q = np.eye(n)
        else:
            self.lyap_q = np.asarray(self.lyap_q, dtype=float)
        eigs = np.linalg.eigvals(self.pred_matrix)
        if np.any(eigs.real >= 0.0):
            raise ValueError("predictor matrix must be Hurwitz")
        if self.lyap_p is None:
            self.lyap_p = solve_continuous_lyapunov(self.pred_matrix.T,
                                                    -self.lyap_q)
        self.lyap_p = 0.5 * (self.lyap_p + self.lyap_p.T)

    @property
    def clamp_radius(self) -> float:
        """Largest estimate norm the discrete update permits."""
        return self.unc_bound * float(np.sqrt(1.0 + self.eps_proj))


@dataclass
class L1State:
    """Mutable per-run state of the augmentation."""

    x_hat: np.ndarray           # predictor state
    sigma_hat: np.ndarray       # matched-uncertainty estimate
    u_adaptive: np.ndarray      # filtered correction currently applied

    @classmethod
    def start(cls, x0, input_dim: int) -> "L1State":
        x0 = np.asarray(x0, dtype=float)
        return cls(x_hat=x0.copy(), sigma_hat=np.zeros(input_dim),
                   u_adaptive=np.zeros(input_dim))

    def prediction_error(self, x) -> np.ndarray:
        return self.x_hat - np.asarray(x, dtype=float)


def projection_map(theta: np.ndarray, raw: np.ndarray, radius: float,
                   eps: float) -> np.ndarray:
    """Smoothly deflect ``raw`` so the driven estimate stays near the ball.

    Inside the ball of the given radius the map is the identity; in the
    boundary layer (norm between ``radius`` and ``radius*sqrt(1+eps)``) the
    outward component is progressively removed whenever ``raw`` points
    outward.  The deflection is always along ``theta`` itself, which gives
    the defining inequality: for every target inside the ball, the deflection
    never increases the squared distance to it.
    """
    theta = np.asarray(theta, dtype=float)
    raw = np.asarray(raw, dtype=float)
    norm_sq = float(theta @ theta)
    f = (norm_sq - radius * radius) / (eps * radius * radius)
    if f <= 0.0:
        return raw.copy()
    outward = float(theta @ raw)
    if outward <= 0.0:
        return raw.copy()
    return raw - (f * outward / norm_sq) * theta


def predictor_rate(cfg: L1Config, drift: np.ndarray, input_mat: np.ndarray,
                   u_applied: np.ndarray, sigma_hat: np.ndarray,
                   x_hat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Time derivative of the predictor state.

    ``drift`` and ``input_mat`` are the plant's pieces evaluated at the
    *measured* state; the predictor differs from the plant only by the
    uncertainty estimate and the Hurwitz pull-back on the prediction error.
    """
    if u_applied.shape != sigma_hat.shape:
        raise DimensionMismatch("input and estimate dimensions differ")
    return (drift + input_mat @ (u_applied + sigma_hat)
            + cfg.pred_matrix @ (x_hat - x))


def adaptation_step(cfg: L1Config, state: L1State, x: np.ndarray,
                    input_mat: np.ndarray, dt: float) -> None:
    """One explicit-Euler update of the estimate, in place.

    The raw drive is the prediction-error signal projected against the
    uncertainty ball; a radial clamp afterwards enforces in discrete time the
    invariance the projection gives in continuous time.
    """
    x_tilde = state.prediction_error(x)
    raw = -(input_mat.T @ (cfg.lyap_p @ x_tilde))
    drive = projection_map(state.sigma_hat, raw, cfg.unc_bound, cfg.eps_proj)
    sigma = state.sigma_hat + dt * cfg.adaptation_gain * drive
    norm = float(np.linalg.norm(sigma))
    cap = cfg.clamp_radius
    if norm > cap:
        sigma *= cap / norm
    state.sigma_hat = sigma


def filter_step(cfg: L1Config, state: L1State, dt: float) -> None:
    """Exact zero-order-hold step of the first-order command filter."""
    decay = float(np.exp(-cfg.bandwidth * dt))
    state.u_adaptive = (decay * state.u_adaptive
                        + (1.0 - decay) * (-state.sigma_hat))
