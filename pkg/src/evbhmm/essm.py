"""Extended state-space model (eSSM): bin-occupancy aggregate model of the fleet.

State layout (0-based): CM bins 0..N-1, IM bins N..2N-1, DM bins 2N..3N-1,
idle at S_min 3N, idle at S_max 3N+1, forced charging 3N+2.

Input layout: u_a (CM->IM) 0..N-1, u_b (IM->DM) N..2N-1, u_c (DM->IM) 2N..3N-1,
u_d (IM->CM) 3N..4N-1, u_{d,N+1} (idle-min -> CM bin 1) 4N, u_{b,N+1} (idle-max -> DM bin N) 4N+1.
"""

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

from .models import Mode

logger = logging.getLogger(__name__)

MATRIX_COLUMNS = ["i", "j", "value"]


class EssmError(Exception):
    """Raised when an eSSM cannot be built or stepped."""
    pass


def state_dim(n_bins: int) -> int:
    return 3 * n_bins + 3


def input_dim(n_bins: int) -> int:
    return 4 * n_bins + 2


def arrows(n_bins: int) -> List[Tuple[int, int]]:
    """(source, destination) state of every control entry."""
    N = n_bins
    pairs = [(j, N + j) for j in range(N)]
    pairs += [(N + j, 2 * N + j) for j in range(N)]
    pairs += [(2 * N + j, N + j) for j in range(N)]
    pairs += [(N + j, j) for j in range(N)]
    pairs += [(3 * N, 0), (3 * N + 1, 3 * N - 1)]
    return pairs


def sources(n_bins: int) -> np.ndarray:
    return np.array([src for src, _ in arrows(n_bins)], dtype=np.int64)


def bins_from_inputs(n_inputs: int) -> int:
    """Recover N from an input dimension 4N+2."""
    n_bins, rem = divmod(n_inputs - 2, 4)
    if rem or n_bins < 1:
        raise ValueError(f"input dimension {n_inputs} is not of the form 4N+2")
    return n_bins


class FleetStats(NamedTuple):
    """Averages over connected EVs feeding the eSSM matrices."""
    n_online: int
    eff_mean: float
    capacity_mean: float
    p_ac: float
    p_ad: float


# Population means of the default scenario, used where no fleet snapshot is available
NOMINAL_STATS = FleetStats(n_online=1, eff_mean=0.915, capacity_mean=25.0, p_ac=6.40053, p_ad=6.40053)


class OutputTriple(NamedTuple):
    """Aggregate power and flexibility (kW)."""
    p: float
    p_upper: float
    p_lower: float


@dataclass
class EssmModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    n_bins: int
    n_ev: int
    p_ac: float
    p_ad: float


def build_essm(stats: FleetStats, n_bins: int, dt: float, s_min: float = 0.0, s_max: float = 1.0) -> EssmModel:
    """Build A, B, C from mean SOC drift per bin width.

    Args:
        stats: Averages over connected EVs
        n_bins: N
        dt: Step in seconds
        s_min: Lower SOC limit
        s_max: Upper SOC limit

    Returns:
        EssmModel

    Raises:
        EssmError: If a transition probability exceeds 1
    """
    if n_bins < 1:
        raise EssmError(f"n_bins must be >= 1, got {n_bins}")
    N = n_bins
    n = state_dim(N)
    dt_h = dt / 3600.0
    span = s_max - s_min
    width = span / N
    q_c = stats.p_ac * stats.eff_mean * dt_h / stats.capacity_mean / width
    q_d = stats.p_ad * dt_h / (stats.eff_mean * stats.capacity_mean) / width
    q_f = stats.p_ac * stats.eff_mean * dt_h / stats.capacity_mean / span
    if q_c > 1 or q_d > 1:
        raise EssmError(f"dt={dt}s too large for bin width {width}: q_c={q_c:.4f}, q_d={q_d:.4f}")

    A = np.zeros((n, n))
    for j in range(N):
        A[j, j] = 1.0 - q_c
        A[j + 1 if j < N - 1 else 3 * N + 1, j] += q_c
        A[N + j, N + j] = 1.0
        k = 2 * N + j
        A[k, k] = 1.0 - q_d
        A[k - 1 if j > 0 else 3 * N, k] += q_d
    A[3 * N, 3 * N] = 1.0
    A[3 * N + 1, 3 * N + 1] = 1.0
    A[3 * N + 2, 3 * N + 2] = 1.0 - q_f
    A[3 * N + 1, 3 * N + 2] = q_f

    B = np.zeros((n, input_dim(N)))
    for col, (src, dst) in enumerate(arrows(N)):
        B[src, col] = -1.0
        B[dst, col] = 1.0

    ones = np.ones(N)
    p_row = np.concatenate([-stats.p_ac * ones, 0 * ones, stats.p_ad * ones, [0.0, 0.0, -stats.p_ac]])
    upper_row = np.concatenate([stats.p_ad * np.ones(3 * N), [0.0, stats.p_ad, -stats.p_ac]])
    lower_row = np.concatenate([-stats.p_ac * np.ones(3 * N), [-stats.p_ac, 0.0, -stats.p_ac]])
    C = stats.n_online * np.vstack([p_row, upper_row, lower_row])

    logger.debug(f"Built eSSM N={N}: q_c={q_c:.6f}, q_d={q_d:.6f}, q_fcm={q_f:.6f}")
    return EssmModel(A=A, B=B, C=C, n_bins=N, n_ev=stats.n_online, p_ac=stats.p_ac, p_ad=stats.p_ad)


def essm_step(model: EssmModel, x: np.ndarray, u_prime: np.ndarray) -> np.ndarray:
    """Noise-free step x+ = A x + B u'.

    Mass is conserved for any u'. The result stays nonnegative when the outflow of each state
    is at most its staying mass A_ii x_i.

    Raises:
        EssmError: If u' is negative or the outflow of a state exceeds its mass
    """
    x = np.asarray(x, dtype=float)
    u_prime = np.asarray(u_prime, dtype=float)
    if np.any(u_prime < 0):
        raise EssmError("u' entries must be nonnegative")
    outflow = np.bincount(sources(model.n_bins), weights=u_prime, minlength=len(x))
    if np.any(outflow > x + 1e-12):
        raise EssmError("u' exceeds the mass of its source state")
    return model.A @ x + model.B @ u_prime


def essm_output(model: EssmModel, x: np.ndarray) -> OutputTriple:
    y = model.C @ np.asarray(x, dtype=float)
    return OutputTriple(p=float(y[0]), p_upper=float(y[1]), p_lower=float(y[2]))


def u_to_u_prime(u: np.ndarray, x: np.ndarray) -> np.ndarray:
    """u'_j = u_j * x_source(j)."""
    n_bins = bins_from_inputs(len(u))
    return np.asarray(u, dtype=float) * np.asarray(x, dtype=float)[sources(n_bins)]


def u_prime_to_u(u_prime: np.ndarray, x: np.ndarray) -> np.ndarray:
    """u_j = u'_j / x_source(j), with 0 where the source is empty."""
    n_bins = bins_from_inputs(len(u_prime))
    mass = np.asarray(x, dtype=float)[sources(n_bins)]
    u_prime = np.asarray(u_prime, dtype=float)
    out = np.zeros_like(u_prime)
    np.divide(u_prime, mass, out=out, where=mass > 0)
    return out


def fleet_state_vector(fleet, n_bins: int, use_reported: bool = False) -> np.ndarray:
    """Occupancy fractions of online agents.

    Args:
        fleet: Fleet snapshot
        n_bins: N
        use_reported: Locate agents by ``soc_reported`` (the baseline's view) instead of true SOC

    Raises:
        EssmError: If no agent is online
    """
    online = fleet.online
    count = int(np.count_nonzero(online))
    if count == 0:
        raise EssmError("no online EVs to build a state vector from")
    N = n_bins
    soc = np.clip(fleet.soc_reported if use_reported else fleet.soc, fleet.s_min, fleet.s_max)[online]
    mode = fleet.mode[online]
    width = (fleet.s_max - fleet.s_min) / N
    bins = np.clip(np.floor((soc - fleet.s_min) / width).astype(np.int64), 0, N - 1)

    state = np.full(count, -1, dtype=np.int64)
    state[mode == Mode.CM] = bins[mode == Mode.CM]
    state[mode == Mode.DM] = 2 * N + bins[mode == Mode.DM]
    idle = mode == Mode.IM
    state[idle] = N + bins[idle]
    state[idle & (soc <= fleet.s_min)] = 3 * N
    state[idle & (soc >= fleet.s_max)] = 3 * N + 1
    state[mode == Mode.FCM] = 3 * N + 2
    return np.bincount(state, minlength=state_dim(N)) / count


def fleet_stats(fleet) -> FleetStats:
    """Averages over online agents; falls back to nominal values for an empty fleet."""
    online = fleet.online
    if not np.any(online):
        return NOMINAL_STATS._replace(n_online=0)
    p = fleet.p_rated[online]
    return FleetStats(
        n_online=int(np.count_nonzero(online)),
        eff_mean=float(np.mean(fleet.efficiency[online])),
        capacity_mean=float(np.mean(fleet.capacity[online])),
        p_ac=float(np.mean(p)),
        p_ad=float(np.mean(p)),
    )


def matrix_frame(M: np.ndarray) -> pd.DataFrame:
    """Row-major `i,j,value` listing of a matrix."""
    M = np.atleast_2d(M)
    i, j = np.indices(M.shape)
    return pd.DataFrame({"i": i.ravel(), "j": j.ravel(), "value": M.ravel()})


def frame_matrix(frame: pd.DataFrame, shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Inverse of matrix_frame."""
    if shape is None:
        shape = (int(frame["i"].max()) + 1, int(frame["j"].max()) + 1)
    M = np.zeros(shape)
    M[frame["i"].to_numpy(), frame["j"].to_numpy()] = frame["value"].to_numpy()
    return M
