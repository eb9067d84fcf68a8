"""Random downlink channel generation and norm-based user ordering.

Channels follow the distance/path-loss Rayleigh model h_i = sqrt(d_i^-kappa) * g_i
with g_i having i.i.d. circularly-symmetric complex Gaussian entries of unit
variance (real and imaginary parts each of variance 1/2).  Users are relabelled
per realization so that ||h_1||^2 <= ... <= ||h_K||^2; the weakest user is
always index 0 after ordering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ChannelConfig:
    """Scenario parameters that fully determine the channel ensemble."""

    num_antennas: int
    num_users: int
    distances_m: tuple[float, ...]
    path_loss_exponent: float
    noise_variances: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        if self.num_antennas < 1:
            raise ValueError(f"num_antennas must be >= 1, got {self.num_antennas}")
        if self.num_users < 1:
            raise ValueError(f"num_users must be >= 1, got {self.num_users}")
        object.__setattr__(self, "distances_m", tuple(float(d) for d in self.distances_m))
        object.__setattr__(self, "noise_variances", tuple(float(s) for s in self.noise_variances))
        if len(self.distances_m) != self.num_users:
            raise ValueError("need one distance per user")
        if len(self.noise_variances) != self.num_users:
            raise ValueError("need one noise variance per user")
        if any(d <= 0 for d in self.distances_m):
            raise ValueError("distances must be positive")
        if self.path_loss_exponent < 0:
            raise ValueError("path_loss_exponent must be >= 0")
        if any(s <= 0 for s in self.noise_variances):
            raise ValueError("noise variances must be positive")


def default_config(seed: int = 0, sigma2: float = 1.0) -> ChannelConfig:
    """Four-antenna, five-user scenario at distances (50, 4, 3, 2, 1) m."""
    return ChannelConfig(
        num_antennas=4,
        num_users=5,
        distances_m=(50.0, 4.0, 3.0, 2.0, 1.0),
        path_loss_exponent=2.0,
        noise_variances=(sigma2,) * 5,
        seed=seed,
    )


@dataclass
class ChannelSet:
    """One ordered channel realization.

    ``vectors[k]`` is the length-N channel of the user at ordered position k
    (ascending squared norm).  ``noise_variances`` is permuted alongside, so
    index k always refers to the same physical user.
    ``ordering_permutation[g]`` gives the ordered position of the g-th
    generated user.
    """

    vectors: np.ndarray                  # (K, N) complex128
    noise_variances: np.ndarray          # (K,) float
    ordering_permutation: np.ndarray     # (K,) int
    config: ChannelConfig | None = field(default=None)

    @property
    def num_users(self) -> int:
        return self.vectors.shape[0]

    @property
    def num_antennas(self) -> int:
        return self.vectors.shape[1]

    def squared_norms(self) -> np.ndarray:
        return np.sum(np.abs(self.vectors) ** 2, axis=1)

    def to_json(self) -> str:
        """Channel vectors as a JSON array of per-user [re, im] pair lists."""
        payload = [
            [[float(c.real), float(c.imag)] for c in row] for row in self.vectors
        ]
        return json.dumps(payload)


def order_users(
    raw_channels: Sequence[np.ndarray] | np.ndarray,
    noise_variances: Sequence[float] | None = None,
    config: ChannelConfig | None = None,
) -> ChannelSet:
    """Sort users by ascending squared channel norm (stable on ties).

    Raises ValueError on an empty list or mismatched vector lengths.
    """
    rows = [np.asarray(v, dtype=np.complex128).ravel() for v in raw_channels]
    if not rows:
        raise ValueError("need at least one channel vector")
    n = rows[0].size
    if any(r.size != n for r in rows):
        raise ValueError("channel vectors must all have the same length")
    H = np.vstack(rows)
    K = H.shape[0]
    norms = np.sum(np.abs(H) ** 2, axis=1)
    order = np.argsort(norms, kind="stable")          # ordered position -> generated index
    perm = np.empty(K, dtype=np.intp)                 # generated index -> ordered position
    perm[order] = np.arange(K)
    if noise_variances is None:
        sigma2 = np.ones(K)
    else:
        sigma2 = np.asarray(noise_variances, dtype=float)
        if sigma2.size != K:
            raise ValueError("need one noise variance per user")
    return ChannelSet(
        vectors=H[order],
        noise_variances=sigma2[order],
        ordering_permutation=perm,
        config=config,
    )


def generate_channels(config: ChannelConfig) -> ChannelSet:
    """Draw one Rayleigh realization for ``config`` and order the users.

    Deterministic for a fixed seed: the same config always yields a
    bit-identical ChannelSet.
    """
    rng = np.random.default_rng(config.seed)
    return generate_channels_with_rng(config, rng)


def generate_channels_with_rng(config: ChannelConfig, rng: np.random.Generator) -> ChannelSet:
    """Like :func:`generate_channels` but advances a caller-owned generator."""
    K, N = config.num_users, config.num_antennas
    g = (rng.standard_normal((K, N)) + 1j * rng.standard_normal((K, N))) / np.sqrt(2.0)
    gains = np.asarray(config.distances_m) ** (-config.path_loss_exponent)
    raw = np.sqrt(gains)[:, None] * g
    return order_users(raw, config.noise_variances, config)
