"""EM identification of the bilinear HMM from aggregated power trajectories.

The E-step runs a Kalman filter and RTS smoother on the augmented linear-time-varying form of
each trajectory. The M-step solves the Kronecker-structured normal equations for all dynamics
blocks at once, with C1 held fixed.

This module consumes aggregated power and broadcast histories only; it never sees per-EV data.
"""

import logging
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from .bhmm import ModelParams, augment_batch, build_V, floor_psd
from .essm import NOMINAL_STATS, FleetStats, build_essm, input_dim, state_dim
from .models import FitReport

logger = logging.getLogger(__name__)

# Trajectories per E-step work unit; fixed so threaded and serial runs compute identical chunks
E_STEP_CHUNK = 16


class IdentificationError(Exception):
    """Base exception for identification failures."""
    pass


class PersistentExcitationError(IdentificationError):
    """Raised when the normalized information matrix is (near) singular."""

    def __init__(self, min_eig: float, message: Optional[str] = None):
        self.min_eig = min_eig
        super().__init__(message or f"Inputs are not persistently exciting: min eigenvalue {min_eig:.3e}")


class FilterBreakdownError(IdentificationError):
    """Raised when a Kalman innovation variance is not positive."""

    def __init__(self, trajectory: int, step: int):
        self.trajectory = trajectory
        self.step = step
        super().__init__(f"Innovation variance <= 0 in trajectory {trajectory} at step {step}")


class FitAbortedError(IdentificationError):
    """Raised when an EM fit stops early; carries the partial report."""

    def __init__(self, report: FitReport, message: str):
        self.report = report
        super().__init__(message)


class InsufficientHistoryError(IdentificationError):
    """Raised when the logs cannot supply the requested window."""
    pass


def _symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _swap(M: np.ndarray) -> np.ndarray:
    return np.swapaxes(M, -1, -2)


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., :, None] * b[..., None, :]


@dataclass
class AggregateLog:
    """Aggregated history of one day: input k is broadcast after power reading k."""
    inputs: np.ndarray
    power: np.ndarray
    dt: float = 15.0
    start_s: float = 0.0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.power = np.asarray(self.power, dtype=float)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.power):
            raise ValueError("inputs must be (T, Nu) aligned with a length-T power series")

    def __len__(self) -> int:
        return len(self.power)

    def to_frame(self) -> pd.DataFrame:
        """`k,u_1..u_Nu,p_kw` rows."""
        frame = pd.DataFrame(self.inputs, columns=[f"u_{j + 1}" for j in range(self.inputs.shape[1])])
        frame.insert(0, "k", np.arange(len(self)))
        frame["p_kw"] = self.power
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, dt: float = 15.0, start_s: float = 0.0) -> "AggregateLog":
        u_cols = [c for c in frame.columns if c.startswith("u_")]
        return cls(inputs=frame[u_cols].fillna(0.0).to_numpy(dtype=float),
                   power=frame["p_kw"].to_numpy(dtype=float), dt=dt, start_s=start_s)


@dataclass
class TrajectoryDataset:
    """L trajectories of K inputs and K+1 aggregated power readings (kW)."""
    inputs: np.ndarray
    outputs: np.ndarray
    dt: float = 15.0
    start_s: Optional[np.ndarray] = None

    def __post_init__(self):
        self.outputs = np.asarray(self.outputs, dtype=float)
        if self.outputs.ndim != 2 or self.outputs.shape[0] < 1 or self.outputs.shape[1] < 2:
            raise ValueError(f"outputs must be (L, K+1) with L >= 1 and K >= 1, got {self.outputs.shape}")
        L, K1 = self.outputs.shape
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.inputs.ndim == 2 and self.inputs.shape[1] == 0:
            self.inputs = self.inputs.reshape(L, K1 - 1, 0)
        if self.inputs.ndim != 3 or self.inputs.shape[:2] != (L, K1 - 1):
            raise ValueError(f"inputs must be (L, K, Nu) = ({L}, {K1 - 1}, Nu), got {self.inputs.shape}")
        if self.start_s is None:
            self.start_s = np.zeros(L)

    @property
    def n_traj(self) -> int:
        return self.outputs.shape[0]

    @property
    def window(self) -> int:
        return self.outputs.shape[1] - 1

    @property
    def n_input(self) -> int:
        return self.inputs.shape[2]

    def subset(self, index) -> "TrajectoryDataset":
        index = np.atleast_1d(np.asarray(index))
        return TrajectoryDataset(self.inputs[index], self.outputs[index], self.dt, self.start_s[index])


@dataclass
class FilterResult:
    """Forward-pass quantities for a batch of trajectories (leading axis L)."""
    mu_filt: np.ndarray
    sigma_filt: np.ndarray
    mu_pred: np.ndarray
    sigma_pred: np.ndarray
    a: np.ndarray
    b: np.ndarray
    innovation: np.ndarray
    innovation_var: np.ndarray
    loglik: np.ndarray


@dataclass
class SmoothedPosterior:
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    cross: np.ndarray


class PosteriorBatch(Sequence):
    """Smoothed posteriors of a dataset, stacked along the trajectory axis."""

    def __init__(self, mu_hat: np.ndarray, sigma_hat: np.ndarray, cross: np.ndarray, loglik: np.ndarray):
        self.mu_hat = mu_hat
        self.sigma_hat = sigma_hat
        self.cross = cross
        self.loglik = loglik

    def __len__(self) -> int:
        return self.mu_hat.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return PosteriorBatch(self.mu_hat[i], self.sigma_hat[i], self.cross[i], self.loglik[i])
        return SmoothedPosterior(self.mu_hat[i], self.sigma_hat[i], self.cross[i])

    @classmethod
    def concatenate(cls, parts: List["PosteriorBatch"]) -> "PosteriorBatch":
        return cls(
            np.concatenate([p.mu_hat for p in parts]),
            np.concatenate([p.sigma_hat for p in parts]),
            np.concatenate([p.cross for p in parts]),
            np.concatenate([p.loglik for p in parts]),
        )


def kalman_forward(params: ModelParams, inputs: np.ndarray, outputs: np.ndarray) -> FilterResult:
    """Kalman filter over one trajectory (inputs (K, Nu), outputs (K+1,)) or a batch of them.

    Raises:
        FilterBreakdownError: If an innovation variance is not positive
    """
    Y = np.asarray(outputs, dtype=float)
    U = np.asarray(inputs, dtype=float)
    if Y.ndim == 1:
        Y = Y[None]
        U = U.reshape(1, Y.shape[1] - 1, params.n_input)
    L, K1 = Y.shape
    K = K1 - 1
    n = params.n_state
    if U.shape != (L, K, params.n_input):
        raise ValueError(f"inputs must have shape {(L, K, params.n_input)}, got {U.shape}")

    a, b = augment_batch(params, U)
    c1 = params.c1
    mu_pred = np.empty((L, K1, n))
    sigma_pred = np.empty((L, K1, n, n))
    mu_filt = np.empty((L, K1, n))
    sigma_filt = np.empty((L, K1, n, n))
    innovation = np.empty((L, K1))
    innovation_var = np.empty((L, K1))

    m = np.broadcast_to(params.mu0, (L, n)).copy()
    S = np.broadcast_to(params.sigma0, (L, n, n)).copy()
    for k in range(K1):
        mu_pred[:, k] = m
        sigma_pred[:, k] = S
        Sc = S @ c1
        s = Sc @ c1 + params.sigma_v
        bad = ~(s > 0)
        if np.any(bad):
            raise FilterBreakdownError(int(np.argmax(bad)), k)
        e = Y[:, k] - params.c0 - m @ c1
        gain = Sc / s[:, None]
        m = m + gain * e[:, None]
        S = _symmetrize(S - _outer(gain, Sc))
        mu_filt[:, k] = m
        sigma_filt[:, k] = S
        innovation[:, k] = e
        innovation_var[:, k] = s
        if k < K:
            m = np.einsum("lij,lj->li", a[:, k], m) + b[:, k]
            S = _symmetrize(a[:, k] @ S @ _swap(a[:, k]) + params.sigma_w)

    loglik = -0.5 * np.sum(np.log(2.0 * np.pi * innovation_var) + innovation**2 / innovation_var, axis=1)
    return FilterResult(mu_filt, sigma_filt, mu_pred, sigma_pred, a, b, innovation, innovation_var, loglik)


def rts_smoother(filtered: FilterResult) -> PosteriorBatch:
    """Rauch-Tung-Striebel backward pass with lag-one cross-covariances Cov(x_k, x_{k+1})."""
    mu_hat = filtered.mu_filt.copy()
    sigma_hat = filtered.sigma_filt.copy()
    L, K1, n = mu_hat.shape
    cross = np.zeros((L, K1 - 1, n, n))
    for k in range(K1 - 2, -1, -1):
        P = filtered.sigma_pred[:, k + 1]
        aS = filtered.a[:, k] @ filtered.sigma_filt[:, k]
        try:
            X = np.linalg.solve(P, aS)
        except np.linalg.LinAlgError:
            logger.warning(f"Singular predicted covariance at step {k + 1}; regularizing with 1e-10*I")
            X = np.linalg.solve(P + 1e-10 * np.eye(n), aS)
        J = _swap(X)
        mu_hat[:, k] = filtered.mu_filt[:, k] + np.einsum("lij,lj->li", J, mu_hat[:, k + 1] - filtered.mu_pred[:, k + 1])
        sigma_hat[:, k] = _symmetrize(filtered.sigma_filt[:, k] + J @ (sigma_hat[:, k + 1] - P) @ _swap(J))
        cross[:, k] = J @ sigma_hat[:, k + 1]
    return PosteriorBatch(mu_hat, sigma_hat, cross, filtered.loglik.copy())


def e_step(params: ModelParams, dataset: TrajectoryDataset, workers: int = 1) -> PosteriorBatch:
    """Filter and smooth every trajectory; chunks run on a thread pool when ``workers`` > 1.

    Raises:
        FilterBreakdownError: With the dataset-level trajectory index
    """
    chunks = [np.arange(i, min(i + E_STEP_CHUNK, dataset.n_traj)) for i in range(0, dataset.n_traj, E_STEP_CHUNK)]

    def run(idx: np.ndarray) -> PosteriorBatch:
        try:
            return rts_smoother(kalman_forward(params, dataset.inputs[idx], dataset.outputs[idx]))
        except FilterBreakdownError as e:
            raise FilterBreakdownError(int(idx[e.trajectory]), e.step) from e

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(idx) for idx in chunks]
    return PosteriorBatch.concatenate(parts)


def log_likelihood(params: ModelParams, dataset: TrajectoryDataset) -> float:
    """Exact marginal log-likelihood by innovation decomposition."""
    return float(np.sum(kalman_forward(params, dataset.inputs, dataset.outputs).loglik))


@dataclass
class SufficientStats:
    """Posterior moments summed over a dataset; phi_k = [1, u_k] kron [1, x_k]."""
    info: np.ndarray
    cross: np.ndarray
    delta2: np.ndarray
    n_transitions: int
    n_points: int
    mu0_hat: np.ndarray
    sigma0_hat: np.ndarray
    y_sum: float
    y_sq: float
    y_mu: np.ndarray
    mu_sum: np.ndarray
    second: np.ndarray


def sufficient_stats(posteriors: PosteriorBatch, dataset: TrajectoryDataset) -> SufficientStats:
    mu, S, X = posteriors.mu_hat, posteriors.sigma_hat, posteriors.cross
    L, K1, n = mu.shape
    K = K1 - 1
    U1 = np.concatenate([np.ones((L, K, 1)), dataset.inputs], axis=2)
    m = U1.shape[2]

    mk, mk1 = mu[:, :-1], mu[:, 1:]
    Exx = S[:, :-1] + _outer(mk, mk)
    Ex1x = _swap(X) + _outer(mk1, mk)
    Ex1x1 = S[:, 1:] + _outer(mk1, mk1)

    G = np.empty((L, K, n + 1, n + 1))
    G[..., 0, 0] = 1.0
    G[..., 0, 1:] = mk
    G[..., 1:, 0] = mk
    G[..., 1:, 1:] = Exx
    H = np.empty((L, K, n, n + 1))
    H[..., 0] = mk1 - mk
    H[..., 1:] = Ex1x - Exx

    t = L * K
    Uf = U1.reshape(t, m)
    UU = _outer(Uf, Uf).reshape(t, m * m)
    info = (UU.T @ G.reshape(t, (n + 1) ** 2)).reshape(m, m, n + 1, n + 1)
    info = info.transpose(0, 2, 1, 3).reshape(m * (n + 1), m * (n + 1))
    cross = np.tensordot(Uf, H.reshape(t, n, n + 1), axes=(0, 0)).transpose(1, 0, 2).reshape(n, m * (n + 1))
    delta2 = np.sum(Ex1x1 - Ex1x - _swap(Ex1x) + Exx, axis=(0, 1))

    Y = dataset.outputs
    return SufficientStats(
        info=_symmetrize(info),
        cross=cross,
        delta2=_symmetrize(delta2),
        n_transitions=t,
        n_points=L * K1,
        mu0_hat=mu[:, 0],
        sigma0_hat=S[:, 0],
        y_sum=float(Y.sum()),
        y_sq=float(np.sum(Y**2)),
        y_mu=np.einsum("lk,lkn->n", Y, mu),
        mu_sum=mu.sum(axis=(0, 1)),
        second=np.sum(S + _outer(mu, mu), axis=(0, 1)),
    )


def _residual_sq(stats: SufficientStats, c0: float, c1: np.ndarray) -> float:
    """Sum of E[(y - c0 - c1 x)^2] over all readings."""
    return (stats.y_sq - 2 * c0 * stats.y_sum - 2 * c1 @ stats.y_mu + stats.n_points * c0**2
            + 2 * c0 * c1 @ stats.mu_sum + c1 @ stats.second @ c1)


def _min_info_eig(stats: SufficientStats) -> float:
    return float(np.linalg.eigvalsh(stats.info / stats.n_points)[0])


def m_step_from_stats(
    stats: SufficientStats,
    c1: np.ndarray,
    pe_threshold: Optional[float] = None,
    n_bins: Optional[int] = None,
) -> Tuple[ModelParams, float]:
    """Closed-form parameter update; returns the params and the min normalized information eigenvalue.

    Raises:
        PersistentExcitationError: If the min eigenvalue is at or below ``pe_threshold``
    """
    min_eig = _min_info_eig(stats)
    if pe_threshold is not None and min_eig <= pe_threshold:
        raise PersistentExcitationError(min_eig)
    try:
        W = np.linalg.solve(stats.info, stats.cross.T).T
    except np.linalg.LinAlgError:
        raise PersistentExcitationError(min_eig)

    n = len(c1)
    n_input = stats.info.shape[0] // (n + 1) - 1
    sigma_w = floor_psd((stats.delta2 - W @ stats.cross.T) / stats.n_transitions)
    mu0 = stats.mu0_hat.mean(axis=0)
    dev = stats.mu0_hat - mu0
    sigma0 = floor_psd(np.mean(stats.sigma0_hat + _outer(dev, dev), axis=0))
    c0 = (stats.y_sum - c1 @ stats.mu_sum) / stats.n_points
    sigma_v = max(_residual_sq(stats, c0, c1) / stats.n_points, 1e-12)

    template = ModelParams(
        A=np.eye(n), V=np.zeros((n_input, n, n)), c1=c1, c0=c0, sigma_w=sigma_w,
        sigma_v=sigma_v, mu0=mu0, sigma0=sigma0, n_bins=n_bins,
    )
    return template.with_blocks(W), min_eig


def m_step(
    posteriors: PosteriorBatch,
    dataset: TrajectoryDataset,
    c1_fixed: np.ndarray,
    pe_threshold: Optional[float] = None,
) -> ModelParams:
    """Maximize the expected complete-data log-likelihood with C1 held at ``c1_fixed``."""
    n_bins = None
    if dataset.n_input > 0 and (dataset.n_input - 2) % 4 == 0:
        n_bins = (dataset.n_input - 2) // 4
    params, _ = m_step_from_stats(sufficient_stats(posteriors, dataset), np.asarray(c1_fixed, dtype=float),
                                  pe_threshold, n_bins)
    return params


def elbo(params: ModelParams, posteriors: PosteriorBatch, dataset: TrajectoryDataset,
         stats: Optional[SufficientStats] = None) -> float:
    """Evidence lower bound without the posterior entropy (constant in ``params``)."""
    if stats is None:
        stats = sufficient_stats(posteriors, dataset)
    W = params.blocks()
    dyn = stats.delta2 - W @ stats.cross.T - stats.cross @ W.T + W @ stats.info @ W.T
    _, logdet_w = np.linalg.slogdet(2 * np.pi * params.sigma_w)
    q = -0.5 * (stats.n_transitions * logdet_w + np.trace(np.linalg.solve(params.sigma_w, dyn)))

    dev = stats.mu0_hat - params.mu0
    init = np.sum(stats.sigma0_hat + _outer(dev, dev), axis=0)
    _, logdet_0 = np.linalg.slogdet(2 * np.pi * params.sigma0)
    q += -0.5 * (len(dev) * logdet_0 + np.trace(np.linalg.solve(params.sigma0, init)))

    resid = _residual_sq(stats, params.c0, params.c1)
    q += -0.5 * (stats.n_points * np.log(2 * np.pi * params.sigma_v) + resid / params.sigma_v)
    return float(q)


def pe_check(posteriors: PosteriorBatch, dataset: TrajectoryDataset) -> float:
    """Smallest eigenvalue of sum(u u^T kron G_k) normalized by L(K+1)."""
    return _min_info_eig(sufficient_stats(posteriors, dataset))


def c1_template(n_bins: int) -> np.ndarray:
    """Sign pattern [-1_N, 0_N, 1_N, 0, 0, -1] of the power row."""
    N = n_bins
    return np.concatenate([-np.ones(N), np.zeros(N), np.ones(N), [0.0, 0.0, -1.0]])


def init_params(
    dataset: TrajectoryDataset,
    n_bins: int,
    n_ev_estimate: int,
    rng: np.random.Generator,
    dt: Optional[float] = None,
    prior: FleetStats = NOMINAL_STATS,
) -> ModelParams:
    """Physically structured initialization.

    C1 is eta times the sign template with eta uniform between the smallest and largest observed
    |P|. A comes from the eSSM built on population-average EV parameters, V from the template, and
    each covariance is beta*I with its own beta ~ U(0, 1).
    """
    if dataset.n_input != input_dim(n_bins):
        raise ValueError(f"dataset has {dataset.n_input} inputs, expected {input_dim(n_bins)} for N={n_bins}")
    n = state_dim(n_bins)
    magnitude = np.abs(dataset.outputs)
    p_lo, p_hi = float(magnitude.min()), float(magnitude.max())
    if p_hi <= 0:
        p_hi = 1.0
    p_lo = max(p_lo, 1e-3 * p_hi)
    eta = rng.uniform(p_lo, p_hi) if p_hi > p_lo else p_hi

    essm = build_essm(prior._replace(n_online=n_ev_estimate), n_bins, dt if dt is not None else dataset.dt)
    beta0, beta_w, beta_v = rng.uniform(0.0, 1.0, size=3)
    return ModelParams(
        A=essm.A,
        V=build_V(n_bins),
        c1=eta * c1_template(n_bins),
        c0=0.0,
        sigma_w=beta_w * np.eye(n),
        sigma_v=beta_v,
        mu0=rng.uniform(0.0, 1.0, size=n),
        sigma0=beta0 * np.eye(n),
        n_bins=n_bins,
    )


def em_fit(
    dataset: TrajectoryDataset,
    params0: ModelParams,
    eps_min: Optional[float] = None,
    n_iter_max: int = 100,
    rel_tol: float = 1e-4,
    pe_threshold: Optional[float] = 1e-8,
    workers: int = 1,
) -> Tuple[ModelParams, FitReport]:
    """Alternate E- and M-steps until the likelihood gain drops to ``eps_min``.

    Args:
        dataset: Training trajectories
        params0: Initial parameters; C1 stays fixed at params0.c1
        eps_min: Absolute stopping gain; defaults to rel_tol * |L(params0)|
        n_iter_max: Iteration cap
        rel_tol: Relative tolerance used when eps_min is not given
        pe_threshold: Reject fits whose normalized information eigenvalue is not above this
        workers: E-step threads

    Returns:
        Final parameters and the fit report

    Raises:
        PersistentExcitationError: If the inputs are not persistently exciting
        FitAbortedError: If an E-step breaks down (carries the partial report)
    """
    if n_iter_max < 1:
        raise ValueError(f"n_iter_max must be >= 1, got {n_iter_max}")
    start = time.perf_counter()
    report = FitReport()

    def abort(exc: Exception) -> FitAbortedError:
        report.wall_time_s = time.perf_counter() - start
        return FitAbortedError(report, f"E-step failed after {report.iterations} iterations: {exc}")

    try:
        posteriors = e_step(params0, dataset, workers)
    except FilterBreakdownError as e:
        raise abort(e) from e
    ll = float(np.sum(posteriors.loglik))
    report.loglik.append(ll)
    report.elapsed_s.append(time.perf_counter() - start)
    if eps_min is None:
        eps_min = rel_tol * max(abs(ll), 1.0)
    if eps_min <= 0:
        raise ValueError(f"eps_min must be positive, got {eps_min}")

    params = params0
    for iteration in range(1, n_iter_max + 1):
        stats = sufficient_stats(posteriors, dataset)
        new_params, min_eig = m_step_from_stats(stats, params.c1, pe_threshold, params.n_bins)
        report.min_eig.append(min_eig)
        try:
            new_posteriors = e_step(new_params, dataset, workers)
        except FilterBreakdownError as e:
            raise abort(e) from e
        new_ll = float(np.sum(new_posteriors.loglik))
        gain = new_ll - ll
        if gain < -1e-8 * max(1.0, abs(ll)):
            logger.warning(f"Log-likelihood decreased by {-gain:.3e} at iteration {iteration}")
        params, posteriors, ll = new_params, new_posteriors, new_ll
        report.loglik.append(ll)
        report.elapsed_s.append(time.perf_counter() - start)
        report.iterations = iteration
        logger.debug(f"EM iteration {iteration}: loglik={ll:.6f} gain={gain:.3e} min_eig={min_eig:.3e}")
        if gain <= eps_min:
            report.converged = True
            break

    report.wall_time_s = time.perf_counter() - start
    logger.info(f"EM stopped after {report.iterations} iterations (converged={report.converged}, "
                f"loglik={ll:.4f}, {report.wall_time_s:.2f}s)")
    return params, report


def fit_best_of(
    dataset: TrajectoryDataset,
    n_bins: int,
    n_ev_estimate: int,
    seeds: Sequence,
    **em_kwargs,
) -> Tuple[ModelParams, FitReport]:
    """Run one EM fit per seed and keep the highest final log-likelihood.

    Raises:
        IdentificationError: If every restart fails
    """
    best: Optional[Tuple[ModelParams, FitReport]] = None
    finals: List[float] = []
    last_error: Optional[IdentificationError] = None
    for seed in seeds:
        params0 = init_params(dataset, n_bins, n_ev_estimate, np.random.default_rng(seed))
        try:
            params, report = em_fit(dataset, params0, **em_kwargs)
        except IdentificationError as e:
            logger.warning(f"Restart with seed {seed} failed: {e}")
            finals.append(float("nan"))
            last_error = e
            continue
        finals.append(report.loglik[-1])
        if best is None or report.loglik[-1] > best[1].loglik[-1]:
            best = (params, report)
    if best is None:
        raise last_error or IdentificationError("no restarts requested")
    best[1].restart_logliks = finals
    return best


def build_dataset(
    history: Sequence,
    live: AggregateLog,
    k: int,
    window: int,
    n_traj: int,
) -> TrajectoryDataset:
    """Slice the window ending at step ``k`` from the latest L-1 historical days and the live day.

    Raises:
        InsufficientHistoryError: If there are too few days or steps
    """
    if k < window:
        raise InsufficientHistoryError(f"step {k} precedes a full window of {window} steps")
    n_hist = n_traj - 1
    if len(history) < n_hist:
        raise InsufficientHistoryError(f"{len(history)} historical days available, {n_hist} needed")
    days = (list(history[len(history) - n_hist:]) if n_hist > 0 else []) + [live]
    for i, day in enumerate(days):
        if len(day) < k + 1:
            raise InsufficientHistoryError(f"log {i} has {len(day)} steps, window needs {k + 1}")
    inputs = np.stack([day.inputs[k - window:k] for day in days])
    outputs = np.stack([day.power[k - window:k + 1] for day in days])
    start_s = np.array([day.start_s + (k - window) * day.dt for day in days])
    return TrajectoryDataset(inputs=inputs, outputs=outputs, dt=live.dt, start_s=start_s)


class LiveFilter:
    """Kalman filter tracking the current hidden state on the live power stream."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.mu = params.mu0.copy()
        self.sigma = params.sigma0.copy()

    def update(self, y: float) -> np.ndarray:
        """Condition the predicted state on power reading ``y``; returns the filtered mean."""
        p = self.params
        Sc = self.sigma @ p.c1
        s = float(Sc @ p.c1 + p.sigma_v)
        if not s > 0:
            raise FilterBreakdownError(0, 0)
        gain = Sc / s
        self.mu = self.mu + gain * (y - p.c0 - p.c1 @ self.mu)
        self.sigma = _symmetrize(self.sigma - np.outer(gain, Sc))
        return self.mu

    def predict(self, u: np.ndarray) -> None:
        a, b = augment_batch(self.params, np.asarray(u, dtype=float))
        self.mu = a @ self.mu + b
        self.sigma = _symmetrize(a @ self.sigma @ a.T + self.params.sigma_w)

    def reseed(self, params: ModelParams, inputs: np.ndarray, outputs: np.ndarray) -> np.ndarray:
        """Restart from mu0 under new params and replay a window; returns the filtered mean at its end."""
        self.params = params
        result = kalman_forward(params, inputs, outputs)
        self.mu = result.mu_filt[0, -1].copy()
        self.sigma = result.sigma_filt[0, -1].copy()
        return self.mu
