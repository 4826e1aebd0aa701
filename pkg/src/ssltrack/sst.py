"""Multiple-source Kalman tracking on the unit sphere (M3K).

Each tracked source carries a 6-dimensional state ``[d, s]`` (direction and
velocity). Per frame the tracker predicts, re-projects onto the sphere,
enumerates every assignment of the potential sources to false detection,
new source or an existing track, then updates each track with a Kalman
gain scaled by the probability that the track was observed.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)

H = np.hstack([np.eye(3), np.zeros((3, 3))])
LOG_2PI = np.log(2.0 * np.pi)

FALSE, NEW = 0, 1  # assignment codes; track i has code 2 + i


class DegeneracyError(ArithmeticError):
    """A state or covariance became numerically unusable."""


@dataclass(frozen=True)
class TrackerParams:
    delta_t: float = 128 / 16000
    sigma_q2: float = 9e-6
    sigma_r2_prob: float = 0.0015
    sigma_r2_active: float = 0.0030
    mu_active: float = 0.20
    var_active: float = 0.0025
    mu_inactive: float = 0.10
    var_inactive: float = 0.0025
    p_false: float = 0.1
    p_new: float = 0.1
    p_track: float = 0.8
    theta_new: float = 0.7
    theta_prob: float = 0.8
    theta_dead: float = 0.9
    n_prob: int = 5
    n_dead: int = 150
    max_tracks: int = 10
    scan_coverage: float = 1.0

    def __post_init__(self):
        for name in ("delta_t", "sigma_q2", "sigma_r2_prob", "sigma_r2_active", "var_active", "var_inactive"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("theta_new", "theta_prob", "theta_dead"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.n_prob < 1 or self.n_dead < 1 or self.max_tracks < 1:
            raise ValueError("n_prob, n_dead and max_tracks must be at least 1")
        if not 0 <= self.scan_coverage <= 1:
            raise ValueError("scan_coverage must lie in [0, 1]")

    @property
    def F(self) -> np.ndarray:
        f = np.eye(6)
        f[0, 3] = f[1, 4] = f[2, 5] = self.delta_t
        return f

    @property
    def Q(self) -> np.ndarray:
        return np.diag([0.0, 0.0, 0.0] + [self.sigma_q2] * 3)

    def R(self, status: str) -> np.ndarray:
        var = self.sigma_r2_active if status == "active" else self.sigma_r2_prob
        return var * np.eye(3)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrackedSource:
    id: int
    mean: np.ndarray
    cov: np.ndarray
    status: str = "probation"
    probation_scores: list = field(default_factory=list)
    inactive_count: int = 0

    @property
    def direction(self) -> np.ndarray:
        return self.mean[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[3:]

    def copy(self) -> "TrackedSource":
        return replace(self, mean=self.mean.copy(), cov=self.cov.copy(),
                       probation_scores=list(self.probation_scores))


def new_track(track_id: int, direction, params: TrackerParams) -> TrackedSource:
    """Probation track at ``direction`` with zero velocity.

    The direction variance starts at the probation observation noise and
    the velocity variance at a hundred times the process noise.
    """
    d = np.asarray(direction, dtype=np.float64)
    cov = np.diag([params.sigma_r2_prob] * 3 + [100.0 * params.sigma_q2] * 3)
    return TrackedSource(track_id, np.concatenate([d / np.linalg.norm(d), np.zeros(3)]), cov)


# ------------------------------------------------------------ steps A, B

def predict(track: TrackedSource, params: TrackerParams) -> TrackedSource:
    F = params.F
    return replace(track, mean=F @ track.mean, cov=F @ track.cov @ F.T + params.Q)


def normalize_state(track: TrackedSource) -> TrackedSource:
    """Put the direction on the unit sphere and make the velocity tangential."""
    d, s = track.direction, track.velocity
    norm2 = float(d @ d)
    if not norm2 > 0 or not np.isfinite(norm2):
        raise DegeneracyError(f"track {track.id}: direction has zero or non-finite norm")
    s_new = s - d * (s @ d) / norm2
    d_new = d / np.sqrt(norm2)
    return replace(track, mean=np.concatenate([d_new, s_new]))


# ---------------------------------------------------------------- step D

def log_energy_likelihood(energy, params: TrackerParams, hypothesis: str = "active"):
    if hypothesis == "active":
        mu, var = params.mu_active, params.var_active
    elif hypothesis == "inactive":
        mu, var = params.mu_inactive, params.var_inactive
    else:
        raise ValueError(f"unknown energy hypothesis {hypothesis!r}")
    e = np.asarray(energy, dtype=np.float64)
    return -0.5 * (LOG_2PI + np.log(var) + (e - mu) ** 2 / var)


def energy_likelihood(energy, params: TrackerParams, hypothesis: str = "active"):
    """Normal density of the potential source energy under the active or inactive model."""
    return np.exp(log_energy_likelihood(energy, params, hypothesis))


def log_coherent_likelihood(mu_i, sigma_i, mu_v, sigma_v) -> float:
    """Log of the integral of the product of two trivariate Gaussians.

    Expanding the product gives a scale factor built from the combined
    covariance inv(inv(S_i) + inv(S_v)) and four quadratic terms. Those
    terms are large and nearly cancel when one covariance is small, so the
    equivalent closed form, the density of mu_i - mu_v under S_i + S_v, is
    evaluated instead.
    """
    diff = np.asarray(mu_i, dtype=np.float64) - np.asarray(mu_v, dtype=np.float64)
    total = np.asarray(sigma_i, dtype=np.float64) + np.asarray(sigma_v, dtype=np.float64)
    try:
        chol = np.linalg.cholesky(total)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError("covariance is not positive definite in coherent likelihood") from exc
    z = np.linalg.solve(chol, diff)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return float(-0.5 * (3 * LOG_2PI + logdet + z @ z))


def coherent_likelihood(track: TrackedSource, observation, params: TrackerParams) -> float:
    """Probability that ``track`` generated the direction ``observation`` (omega)."""
    sigma_i = H @ track.cov @ H.T
    return float(np.exp(log_coherent_likelihood(H @ track.mean, sigma_i, observation, params.R(track.status))))


def diffuse_likelihood(params: TrackerParams) -> float:
    """Uniform density over the scanned fraction of the sphere."""
    return params.scan_coverage / (4.0 * np.pi)


# ------------------------------------------------------------ steps C, E, F

@dataclass
class AssignmentDistribution:
    """Posteriors over all (I + 2)^V assignments and their marginals.

    ``codes[g, v]`` is 0 for a false detection, 1 for a new source and
    ``2 + i`` for track ``i``.
    """

    codes: np.ndarray
    posterior: np.ndarray
    track_given_obs: np.ndarray  # (I, V)  P(i | psi_v)
    new_given_obs: np.ndarray  # (V,)    P(new | psi_v)
    false_given_obs: np.ndarray  # (V,)
    track_observed: np.ndarray  # (I,)    P(i | Psi)
    degenerate: bool = False


_CODES: dict = {}


def assignment_codes(n_tracks: int, n_obs: int) -> np.ndarray:
    key = (n_tracks, n_obs)
    if key not in _CODES:
        _CODES[key] = np.array(list(itertools.product(range(n_tracks + 2), repeat=n_obs)), dtype=np.int64).reshape(-1, n_obs)
    return _CODES[key]


def observation_log_table(potentials, tracks, params: TrackerParams) -> np.ndarray:
    """Log of prior times likelihood for every (observation, assignment) pair, shape (V, I + 2)."""
    n_obs = len(potentials)
    table = np.empty((n_obs, len(tracks) + 2))
    with np.errstate(divide="ignore"):
        log_diffuse = np.log(diffuse_likelihood(params))
        log_prior = np.log([params.p_false, params.p_new, params.p_track])
    sigmas = [(H @ t.mean, H @ t.cov @ H.T, params.R(t.status)) for t in tracks]
    for v, (lam, energy) in enumerate(potentials):
        la = log_energy_likelihood(energy, params, "active")
        li = log_energy_likelihood(energy, params, "inactive")
        table[v, FALSE] = log_prior[0] + li + log_diffuse
        table[v, NEW] = log_prior[1] + la + log_diffuse
        for i, (mu_i, sigma_i, r) in enumerate(sigmas):
            table[v, 2 + i] = log_prior[2] + la + log_coherent_likelihood(mu_i, sigma_i, lam, r)
    return table


def posteriors_from_table(table: np.ndarray) -> AssignmentDistribution:
    n_obs, width = table.shape
    n_tracks = width - 2
    codes = assignment_codes(n_tracks, n_obs)
    # shifting each row by its maximum scales every assignment by the same constant
    top = table.max(axis=1, keepdims=True)
    shifted = table - np.where(np.isfinite(top), top, 0.0)
    logp = shifted[np.arange(n_obs)[None, :], codes].sum(axis=1)
    finite = np.isfinite(logp)
    degenerate = not finite.any()
    if degenerate:
        log.warning("assignment likelihoods are degenerate; falling back to all-false")
        post = (codes == FALSE).all(axis=1).astype(np.float64)
    else:
        w = np.where(finite, np.exp(logp - logp[finite].max()), 0.0)
        post = w / w.sum()
    per_obs = np.stack([np.bincount(codes[:, v], weights=post, minlength=width) for v in range(n_obs)])
    observed = np.zeros(n_tracks)
    for i in range(n_tracks):
        observed[i] = post[(codes == 2 + i).any(axis=1)].sum()
    return AssignmentDistribution(
        codes=codes,
        posterior=post,
        track_given_obs=per_obs[:, 2:].T.copy(),
        new_given_obs=per_obs[:, NEW].copy(),
        false_given_obs=per_obs[:, FALSE].copy(),
        track_observed=observed,
        degenerate=degenerate,
    )


def assignment_posteriors(potentials, tracks, params: TrackerParams) -> AssignmentDistribution:
    """Exact enumeration of the assignment posteriors.

    ``potentials`` is a sequence of ``(direction, energy)`` pairs.
    """
    if len(potentials) < 1:
        raise ValueError("need at least one potential source")
    if len(tracks) > params.max_tracks:
        raise ValueError("more tracks than max_tracks")
    return posteriors_from_table(observation_log_table(potentials, tracks, params))


# ------------------------------------------------------------- steps G, H, I

def update(track: TrackedSource, observation, weight: float, params: TrackerParams) -> TrackedSource:
    """Kalman update with the gain scaled by ``weight``."""
    P = track.cov
    S = H @ P @ H.T + params.R(track.status)
    try:
        K = np.linalg.solve(S, H @ P).T
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError(f"track {track.id}: singular innovation covariance") from exc
    innovation = np.asarray(observation, dtype=np.float64) - H @ track.mean
    mean = track.mean + weight * K @ innovation
    cov = P - weight * K @ H @ P
    return replace(track, mean=mean, cov=0.5 * (cov + cov.T))


def estimate_direction(track: TrackedSource) -> np.ndarray:
    d = H @ track.mean
    norm = np.linalg.norm(d)
    if not norm > 0 or not np.isfinite(norm):
        raise DegeneracyError(f"track {track.id}: zero direction")
    return d / norm


@dataclass
class TrackerState:
    tracks: list = field(default_factory=list)
    next_id: int = 1
    frame: int = 0


def lifecycle_step(state: TrackerState, dist: AssignmentDistribution, potentials, params: TrackerParams) -> list:
    """Confirm, delete and spawn tracks; returns the indices (into the
    incoming track list) of the tracks that survive, in order."""
    keep = []
    for i, track in enumerate(state.tracks):
        if track.status == "probation":
            v_hat = int(np.argmax(dist.track_given_obs[i]))
            track.probation_scores.append(float(dist.track_given_obs[i, v_hat]))
            if len(track.probation_scores) >= params.n_prob:
                if np.mean(track.probation_scores[-params.n_prob:]) >= params.theta_prob:
                    track.status = "active"
                else:
                    continue
        else:
            if dist.track_observed[i] < params.theta_dead:
                track.inactive_count += 1
            else:
                track.inactive_count = 0
            if track.inactive_count >= params.n_dead:
                continue
        keep.append(i)
    return keep


def _as_observation(p) -> tuple:
    if hasattr(p, "doa"):
        return np.asarray(p.doa, dtype=np.float64), float(p.energy)
    return np.asarray(p[0], dtype=np.float64), float(p[1])


def track_frame(potentials, state: TrackerState, params: TrackerParams):
    """Run one frame of tracking.

    ``potentials`` holds ``(direction, energy)`` pairs or objects with
    ``doa`` and ``energy`` attributes. Returns the emitted
    ``(id, direction, activity)`` tuples for active tracks and the new state.
    """
    obs = [_as_observation(p) for p in potentials]
    tracks = []
    for t in state.tracks:
        try:
            tracks.append(normalize_state(predict(t.copy(), params)))
        except DegeneracyError as exc:
            log.warning("dropping track: %s", exc)
    state = TrackerState(tracks, state.next_id, state.frame)
    if not obs:
        # nothing observed: every track scores zero and no update is applied
        n = len(tracks)
        empty = AssignmentDistribution(np.zeros((1, 0), np.int64), np.ones(1), np.zeros((n, 1)),
                                       np.zeros(0), np.zeros(0), np.zeros(n))
        state.tracks = [tracks[i] for i in lifecycle_step(state, empty, obs, params)]
        state.frame += 1
        return [], state
    dist = assignment_posteriors(obs, tracks, params)
    keep = lifecycle_step(state, dist, obs, params)
    survivors = []
    for i in keep:
        t = tracks[i]
        v_hat = int(np.argmax(dist.track_given_obs[i]))
        survivors.append(update(t, obs[v_hat][0], float(dist.track_observed[i]), params))
    v_new = int(np.argmax(dist.new_given_obs))
    if dist.new_given_obs[v_new] > params.theta_new and len(survivors) < params.max_tracks:
        survivors.append(new_track(state.next_id, obs[v_new][0], params))
        state.next_id += 1
    activity = {i: float(dist.track_observed[i]) for i in keep}
    out = []
    for i, t in zip(keep, survivors):
        if t.status == "active":
            out.append((t.id, estimate_direction(t), activity[i]))
    state.tracks = survivors
    state.frame += 1
    return out, state


class Tracker:
    """Stateful convenience wrapper around :func:`track_frame`."""

    def __init__(self, params: TrackerParams | None = None):
        self.params = params or TrackerParams()
        self.state = TrackerState()

    def step(self, potentials):
        out, self.state = track_frame(potentials, self.state, self.params)
        return out

    @property
    def tracks(self) -> list:
        return self.state.tracks
