"""Closed-form performance metrics for a MISO-NOMA downlink.

Everything here is an exact evaluation of the system model: decoding SINRs
under successive interference cancellation, per-user and sum rates, Jain's
fairness index, transmit power, and the power-ordering check that makes SIC
decodable.  Rates use log base 2, so with bandwidth 1 they are in
bits/s/Hz; multiply by a bandwidth in Hz for bits/s.

All functions are stateless and safe for concurrent use.  User indices are
0-based: user 0 is the weakest (first decoded) user.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .channel import ChannelSet


@dataclass
class BeamformerSet:
    """K complex beamforming vectors of length N, row per user."""

    vectors: np.ndarray  # (K, N) complex128

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.complex128)
        if self.vectors.ndim != 2:
            raise ValueError("beamformers must form a (K, N) matrix")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("beamformers must be finite")

    @property
    def num_users(self) -> int:
        return self.vectors.shape[0]

    def to_pairs(self) -> list[list[list[float]]]:
        return [[[float(c.real), float(c.imag)] for c in row] for row in self.vectors]

    @classmethod
    def from_pairs(cls, pairs) -> "BeamformerSet":
        arr = np.asarray(pairs, dtype=float)
        return cls(arr[..., 0] + 1j * arr[..., 1])


def _as_matrix(W) -> np.ndarray:
    if isinstance(W, BeamformerSet):
        return W.vectors
    return np.asarray(W, dtype=np.complex128)


def received_powers(W, H: ChannelSet) -> np.ndarray:
    """|h_k^H w_i|^2 for every receiver k (rows) and signal i (columns)."""
    Wm = _as_matrix(W)
    if Wm.shape != H.vectors.shape:
        raise ValueError(
            f"beamformer shape {Wm.shape} does not match channels {H.vectors.shape}"
        )
    inner = H.vectors.conj() @ Wm.T
    return np.abs(inner) ** 2


def sinr_of_signal_at_user(W, H: ChannelSet, i: int, k: int) -> float:
    """SINR of user i's signal when decoded at user k (requires k >= i).

    Under SIC at receiver k only the not-yet-decoded signals j > i remain
    as interference.
    """
    K = H.num_users
    if not (0 <= i < K and 0 <= k < K):
        raise IndexError(f"user indices out of range: i={i}, k={k}, K={K}")
    if k < i:
        raise ValueError(f"signal {i} is not decoded at an earlier user {k}")
    P = received_powers(W, H)
    interference = float(np.sum(P[k, i + 1 :]))
    return float(P[k, i] / (interference + H.noise_variances[k]))


def effective_sinr(W, H: ChannelSet, i: int) -> float:
    """Worst-case decoding SINR of user i's signal over receivers k >= i."""
    K = H.num_users
    if not 0 <= i < K:
        raise IndexError(f"user index out of range: {i}")
    return min(sinr_of_signal_at_user(W, H, i, k) for k in range(i, K))


def user_rate(W, H: ChannelSet, i: int, bandwidth_hz: float = 1.0) -> float:
    """Achievable rate of user i in bits/s (bits/s/Hz for bandwidth 1)."""
    if bandwidth_hz <= 0:
        raise ValueError("bandwidth must be positive")
    return bandwidth_hz * float(np.log2(1.0 + effective_sinr(W, H, i)))


def all_user_rates(W, H: ChannelSet, bandwidth_hz: float = 1.0) -> np.ndarray:
    return np.array([user_rate(W, H, i, bandwidth_hz) for i in range(H.num_users)])


def sum_rate(W, H: ChannelSet, bandwidth_hz: float = 1.0) -> float:
    return float(np.sum(all_user_rates(W, H, bandwidth_hz)))


def fairness_index(rates) -> float:
    """Jain's index (sum r)^2 / (K sum r^2): 1 when equal, 1/K when one-hot.

    Raises ValueError on an all-zero rate vector (the index is 0/0 there).
    """
    r = np.asarray(rates, dtype=float)
    if r.size == 0:
        raise ValueError("need at least one rate")
    denom = r.size * float(np.sum(r**2))
    if denom == 0.0:
        raise ValueError("fairness index undefined for an all-zero rate vector")
    return float(np.sum(r)) ** 2 / denom


def transmit_power(W) -> float:
    """Total radiated power sum_i ||w_i||^2 in watts."""
    Wm = _as_matrix(W)
    return float(np.sum(np.abs(Wm) ** 2))


@dataclass
class SICCheck:
    ok: bool
    worst_violation: float


def check_sic_ordering(W, H: ChannelSet, tol: float = 0.0) -> SICCheck:
    """Verify |h_k^H w_0|^2 >= |h_k^H w_1|^2 >= ... at every receiver k.

    The decreasing power ordering is what lets each user decode (and cancel)
    all earlier signals.  ``worst_violation`` is the largest amount by which
    any adjacent inequality fails; ok means every violation is <= tol.
    """
    P = received_powers(W, H)
    if P.shape[1] < 2:
        return SICCheck(ok=True, worst_violation=0.0)
    gaps = P[:, 1:] - P[:, :-1]          # positive gap = violation
    worst = float(np.max(gaps))
    return SICCheck(ok=worst <= tol, worst_violation=max(worst, 0.0))


@dataclass
class MetricsReport:
    """Everything the optimizer output is judged on, from achieved rates."""

    rates: np.ndarray            # (K,) bits/s
    sum_rate: float
    fairness_index: float
    transmit_power: float
    sic_ok: bool
    sinr_table: np.ndarray       # (K, K), entry [i, k] = SINR of signal i at user k, NaN for k < i

    def to_dict(self) -> dict:
        return {
            "rates": [float(r) for r in self.rates],
            "sum_rate": float(self.sum_rate),
            "fairness_index": float(self.fairness_index),
            "transmit_power": float(self.transmit_power),
            "sic_ok": bool(self.sic_ok),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def compute_metrics(
    W, H: ChannelSet, bandwidth_hz: float = 1.0, sic_tol: float = 1e-6
) -> MetricsReport:
    K = H.num_users
    table = np.full((K, K), np.nan)
    for i in range(K):
        for k in range(i, K):
            table[i, k] = sinr_of_signal_at_user(W, H, i, k)
    sinr = np.nanmin(table, axis=1)
    rates = bandwidth_hz * np.log2(1.0 + sinr)
    return MetricsReport(
        rates=rates,
        sum_rate=float(np.sum(rates)),
        fairness_index=fairness_index(rates) if np.any(rates > 0) else 0.0,
        transmit_power=transmit_power(W),
        sic_ok=check_sic_ordering(W, H, tol=sic_tol).ok,
        sinr_table=table,
    )
