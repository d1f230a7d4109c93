"""Bilinear hidden Markov model of the aggregated fleet.

Dynamics and output:

    x+ = A x + sum_j u_j V_j x + d_0 + sum_j u_j d_j + w,    w ~ N(0, sigma_w)
    y  = c0 + c1 . x + v,                                      v ~ N(0, sigma_v)

V_j is stored in action orientation ([V_j]_{dest, src}), so ``V_j @ x`` moves the mass of the
arrow's source into its destination. The drift rows d_j are the augmented rows learned by EM;
they are zero for the physical template.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np

from .essm import EssmModel, arrows, bins_from_inputs, state_dim

logger = logging.getLogger(__name__)


class AugmentedDynamics(NamedTuple):
    """x_{k+1} = a x_k + b + w_k for one input u_k."""
    a: np.ndarray
    b: np.ndarray


def _symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def floor_psd(M: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Symmetrize and lift eigenvalues below ``floor``."""
    M = _symmetrize(M)
    w, Q = np.linalg.eigh(M)
    if np.all(w >= floor):
        return M
    return _symmetrize((Q * np.maximum(w, floor)) @ Q.T)


@dataclass
class ModelParams:
    """Parameter set {A, V, C1, c0, Sigma_w, Sigma_v, mu0, Sigma0} plus learned drift rows."""
    A: np.ndarray
    V: np.ndarray
    c1: np.ndarray
    c0: float
    sigma_w: np.ndarray
    sigma_v: float
    mu0: np.ndarray
    sigma0: np.ndarray
    drift: Optional[np.ndarray] = None
    n_bins: Optional[int] = field(default=None)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        n = self.A.shape[0]
        self.V = np.asarray(self.V, dtype=float).reshape(-1, n, n)
        self.c1 = np.asarray(self.c1, dtype=float).reshape(n)
        self.c0 = float(self.c0)
        self.sigma_w = np.asarray(self.sigma_w, dtype=float).reshape(n, n)
        self.sigma_v = float(self.sigma_v)
        self.mu0 = np.asarray(self.mu0, dtype=float).reshape(n)
        self.sigma0 = np.asarray(self.sigma0, dtype=float).reshape(n, n)
        if self.drift is None:
            self.drift = np.zeros((self.n_input + 1, n))
        self.drift = np.asarray(self.drift, dtype=float).reshape(self.n_input + 1, n)
        if self.n_bins is None and self.n_input > 0:
            try:
                self.n_bins = bins_from_inputs(self.n_input)
            except ValueError:
                self.n_bins = None
        if self.sigma_v < 0:
            raise ValueError(f"sigma_v must be nonnegative, got {self.sigma_v}")

    @property
    def n_state(self) -> int:
        return self.A.shape[0]

    @property
    def n_input(self) -> int:
        return self.V.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(
            A=self.A.copy(), V=self.V.copy(), c1=self.c1.copy(), c0=self.c0,
            sigma_w=self.sigma_w.copy(), sigma_v=self.sigma_v, mu0=self.mu0.copy(),
            sigma0=self.sigma0.copy(), drift=self.drift.copy(), n_bins=self.n_bins,
        )

    def transformed(self, T: np.ndarray) -> "ModelParams":
        """Input-output equivalent parameters for the hidden state T x."""
        T = np.asarray(T, dtype=float)
        T_inv = np.linalg.inv(T)
        return ModelParams(
            A=T @ self.A @ T_inv,
            V=np.einsum("ij,kjl,lm->kim", T, self.V, T_inv),
            c1=self.c1 @ T_inv,
            c0=self.c0,
            sigma_w=T @ self.sigma_w @ T.T,
            sigma_v=self.sigma_v,
            mu0=T @ self.mu0,
            sigma0=T @ self.sigma0 @ T.T,
            drift=self.drift @ T.T,
            n_bins=self.n_bins,
        )

    def blocks(self) -> np.ndarray:
        """Stacked [d_j | M_j] blocks, j = 0..Nu, with M_0 = A - I and M_j = V_j."""
        n = self.n_state
        M = np.concatenate([(self.A - np.eye(n))[None], self.V], axis=0)
        W = np.concatenate([self.drift[:, :, None], M], axis=2)  # (Nu+1, n, n+1)
        return W.transpose(1, 0, 2).reshape(n, -1)

    def with_blocks(self, W: np.ndarray) -> "ModelParams":
        """Copy with dynamics replaced by stacked blocks as produced by ``blocks``."""
        n = self.n_state
        W = np.asarray(W, dtype=float).reshape(n, self.n_input + 1, n + 1).transpose(1, 0, 2)
        params = self.copy()
        params.drift = W[:, :, 0].copy()
        params.A = W[0, :, 1:] + np.eye(n)
        params.V = W[1:, :, 1:].copy()
        return params

    def save(self, path: Union[str, Path]) -> None:
        """Write a self-describing npz bundle (bit-exact)."""
        header = np.array([self.n_bins or 0, self.n_state, self.n_input], dtype=np.int64)
        with open(path, "wb") as fh:
            np.savez(fh, header=header, A=self.A, V=self.V, drift=self.drift, c1=self.c1,
                     c0=np.array(self.c0), sigma_w=self.sigma_w, sigma_v=np.array(self.sigma_v),
                     mu0=self.mu0, sigma0=self.sigma0)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelParams":
        with np.load(path, allow_pickle=False) as data:
            n_bins, n, n_input = (int(v) for v in data["header"])
            params = cls(
                A=data["A"], V=data["V"].reshape(n_input, n, n), c1=data["c1"], c0=float(data["c0"]),
                sigma_w=data["sigma_w"], sigma_v=float(data["sigma_v"]), mu0=data["mu0"],
                sigma0=data["sigma0"], drift=data["drift"], n_bins=n_bins or None,
            )
        return params


def build_V(n_bins: int) -> np.ndarray:
    """Template matrices, one per control entry, each with a single -1/+1 pair in the source column."""
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    n = state_dim(n_bins)
    pairs = arrows(n_bins)
    V = np.zeros((len(pairs), n, n))
    for j, (src, dst) in enumerate(pairs):
        V[j, src, src] = -1.0
        V[j, dst, src] = 1.0
    return V


def template_params(
    model: EssmModel,
    sigma_w: float = 1e-6,
    sigma_v: float = 1.0,
    mu0: Optional[np.ndarray] = None,
    sigma0: float = 1e-6,
) -> ModelParams:
    """Physical bHMM equivalent to an eSSM (zero drift, C1 = power row of C)."""
    n = model.A.shape[0]
    if mu0 is None:
        mu0 = np.full(n, 1.0 / n)
    return ModelParams(
        A=model.A.copy(),
        V=build_V(model.n_bins),
        c1=model.C[0].copy(),
        c0=0.0,
        sigma_w=sigma_w * np.eye(n),
        sigma_v=sigma_v,
        mu0=mu0,
        sigma0=sigma0 * np.eye(n),
        n_bins=model.n_bins,
    )


def augment(params: ModelParams, u: np.ndarray) -> AugmentedDynamics:
    """a_k = A + sum_j u_j V_j, b_k = d_0 + sum_j u_j d_j."""
    u = np.asarray(u, dtype=float)
    a = params.A + np.tensordot(u, params.V, axes=1)
    b = params.drift[0] + u @ params.drift[1:]
    return AugmentedDynamics(a=a, b=b)


def augment_batch(params: ModelParams, U: np.ndarray) -> AugmentedDynamics:
    """augment over a leading batch of inputs U (..., Nu)."""
    U = np.asarray(U, dtype=float)
    a = params.A + np.einsum("...j,jmn->...mn", U, params.V)
    b = params.drift[0] + U @ params.drift[1:]
    return AugmentedDynamics(a=a, b=b)


def bhmm_step(params: ModelParams, x: np.ndarray, u: np.ndarray, w: Optional[np.ndarray] = None) -> np.ndarray:
    a, b = augment(params, u)
    x_next = a @ np.asarray(x, dtype=float) + b
    if w is not None:
        x_next = x_next + w
    return x_next


def output(params: ModelParams, x: np.ndarray) -> Union[float, np.ndarray]:
    """Noise-free aggregated power c0 + c1 . x (kW)."""
    y = params.c0 + np.asarray(x, dtype=float) @ params.c1
    return float(y) if np.ndim(y) == 0 else y


def mean_rollout(params: ModelParams, mu_start: np.ndarray, u_sequence: np.ndarray) -> np.ndarray:
    """Predicted power for each input of ``u_sequence`` propagated from ``mu_start`` with w = 0."""
    u_sequence = np.asarray(u_sequence, dtype=float).reshape(-1, params.n_input)
    x = np.asarray(mu_start, dtype=float)
    predictions = np.empty(len(u_sequence))
    for k, u in enumerate(u_sequence):
        x = bhmm_step(params, x, u)
        predictions[k] = output(params, x)
    return predictions


def extreme_inputs(n_bins: int) -> Tuple[np.ndarray, np.ndarray]:
    """Inputs activating every discharge-ward (upper) or charge-ward (lower) arrow."""
    N = n_bins
    upper = np.zeros(4 * N + 2)
    upper[: 2 * N] = 1.0  # u_a, u_b
    upper[4 * N + 1] = 1.0  # u_{b,N+1}
    lower = np.zeros(4 * N + 2)
    lower[2 * N: 4 * N] = 1.0  # u_c, u_d
    lower[4 * N] = 1.0  # u_{d,N+1}
    return upper, lower


def flexibility_rollout(params: ModelParams, mu_start: np.ndarray, horizon: int) -> Tuple[np.ndarray, np.ndarray]:
    """Predicted (p_upper, p_lower) sequences under the extreme inputs."""
    if params.n_bins is None:
        raise ValueError("flexibility needs a model with 4N+2 inputs")
    if horizon <= 0:
        return np.empty(0), np.empty(0)
    u_up, u_lo = extreme_inputs(params.n_bins)
    upper = mean_rollout(params, mu_start, np.tile(u_up, (horizon, 1)))
    lower = mean_rollout(params, mu_start, np.tile(u_lo, (horizon, 1)))
    return upper, lower
