"""Bootstrap particle filter baseline on the same likelihood stack.

Weights are kept in the log domain: with a few hundred sharply peaked
residual rows, linear weights underflow for almost every particle.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import geometry as geo
from .camera import CameraIntrinsics
from .errors import EmptyObservation
from .needle import NeedleModel
from .residuals import FrameLikelihood, NoiseCalibration, Observation, TermMask
from .svn import FrameResult, ParticleSet, extract_map, initialize, summarize


class AllZeroWeights(RuntimeWarning):
    """Every particle got a non-finite likelihood; weights were reset."""


@dataclass
class PfConfig:
    n_particles: int = 3000
    rw_sigma_t: float = 1e-3
    rw_sigma_r: float = float(np.deg2rad(5.0))
    ess_frac: float = 0.30
    seed: int = 0
    init_jitter: float = float(np.deg2rad(10.0))

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if not 0 < self.ess_frac <= 1:
            raise ValueError("ess_frac must lie in (0, 1]")
        if self.rw_sigma_t < 0 or self.rw_sigma_r < 0:
            raise ValueError("random-walk scales must be non-negative")

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([self.rw_sigma_t] * 3 + [self.rw_sigma_r] * 3)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PfConfig":
        return cls(**d)


def pf_predict(R, t, robot_twist, cfg: PfConfig, rng):
    """``T <- exp(xi_robot + eta) T`` with isotropic random-walk ``eta``."""
    n = len(R)
    tw = np.zeros(6) if robot_twist is None else np.asarray(robot_twist, dtype=float)
    eta = rng.normal(size=(n, 6)) * cfg.sigmas
    return geo.left_perturb_batch(tw[None] + eta, R, t)


def normalize_log(log_w) -> np.ndarray:
    lw = np.asarray(log_w, dtype=float)
    m = np.max(lw)
    return lw - (m + np.log(np.sum(np.exp(lw - m))))


def pf_update(log_w, nll) -> np.ndarray:
    """``log w <- log w - nll``, renormalised with log-sum-exp."""
    nll = np.asarray(nll, dtype=float)
    lw = np.asarray(log_w, dtype=float) - nll
    if not np.isfinite(lw).any():
        warnings.warn("all particle likelihoods are non-finite; resetting weights", AllZeroWeights)
        return np.full(len(lw), -np.log(len(lw)))
    lw = np.where(np.isfinite(lw), lw, -np.inf)
    return normalize_log(lw)


def ess(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w**2))


def systematic_resample(weights, rng) -> np.ndarray:
    """Offspring indices from one uniform offset and an even comb."""
    w = np.asarray(weights, dtype=float)
    n = len(w)
    c = np.cumsum(w)
    c[-1] = 1.0
    u = (rng.uniform() + np.arange(n)) / n
    return np.searchsorted(c, u, side="right")


@dataclass
class PfState:
    R: np.ndarray
    t: np.ndarray
    log_w: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_w)


def pf_step(state: PfState, lik: FrameLikelihood | None, robot_twist, cfg: PfConfig, rng):
    """Predict, weight, summarise, then resample if the ESS is low.

    Returns the new state, the summary of the weighted (pre-resampling)
    set, the weighted set itself and whether resampling happened.
    """
    R, t = pf_predict(state.R, state.t, robot_twist, cfg, rng)
    log_w = state.log_w
    if lik is not None:
        log_w = pf_update(log_w, lik.nll(R, t))
    weighted = ParticleSet(R, t, log_w)
    summary = summarize(weighted, extract_map(weighted), np.exp(log_w))
    resampled = ess(np.exp(log_w)) < cfg.ess_frac * len(R)
    if resampled:
        idx = systematic_resample(np.exp(log_w), rng)
        R, t = R[idx], t[idx]
        log_w = np.full(len(R), -np.log(len(R)))
    return PfState(R, t, log_w), summary, weighted, resampled


class PfTracker:
    """Frame-by-frame particle-filter session, same interface as SvnTracker."""

    def __init__(self, intr: CameraIntrinsics, model: NeedleModel, calib: NoiseCalibration,
                 cfg: PfConfig = PfConfig(), terms: TermMask = TermMask(), use_twist: bool = True):
        self.intr, self.model, self.calib, self.cfg = intr, model, calib, cfg
        # the random walk is the PF's motion model, so no extra prior term
        self.terms = TermMask(**{**asdict(terms), "motion_prior": False})
        self.use_twist = use_twist
        self.rng = np.random.default_rng(cfg.seed)
        self.state: PfState | None = None

    def _likelihood(self, obs):
        try:
            return FrameLikelihood(self.intr, self.model, obs, self.calib, self.terms)
        except EmptyObservation:
            return None

    def step(self, obs: Observation) -> FrameResult:
        n = self.cfg.n_particles
        lik = self._likelihood(obs)
        if self.state is None:
            ps = initialize(obs, self.model, n, self.rng, self.cfg.init_jitter)
            log_w = np.full(n, -np.log(n))
            if lik is not None:
                log_w = pf_update(log_w, lik.nll(ps.R, ps.t))
            weighted = ParticleSet(ps.R, ps.t, log_w)
            summary = summarize(weighted, extract_map(weighted), np.exp(log_w))
            self.state = PfState(ps.R, ps.t, log_w)
            if ess(np.exp(log_w)) < self.cfg.ess_frac * n:
                idx = systematic_resample(np.exp(log_w), self.rng)
                self.state = PfState(ps.R[idx], ps.t[idx], np.full(n, -np.log(n)))
        else:
            twist = obs.robot_twist if self.use_twist else None
            self.state, summary, weighted, _ = pf_step(self.state, lik, twist, self.cfg, self.rng)
        nll = float(-weighted.log_post.max()) if lik is None else float(lik.nll(
            summary.map_pose.rotation[None], summary.map_pose.translation[None])[0])
        return FrameResult(summary, weighted, 0, "pf" if lik is not None else "no_terms", nll)

    def coast(self, obs: Observation, error: str = "") -> FrameResult:
        """Random-walk prediction without a weight update."""
        if self.state is None:
            raise EmptyObservation("cannot coast before the first processed frame")
        twist = obs.robot_twist if self.use_twist else None
        R, t = pf_predict(self.state.R, self.state.t, twist, self.cfg, self.rng)
        self.state = PfState(R, t, self.state.log_w)
        weighted = ParticleSet(R, t, self.state.log_w)
        summary = summarize(weighted, extract_map(weighted), self.state.weights)
        return FrameResult(summary, weighted, 0, "prediction_only", error=error)
