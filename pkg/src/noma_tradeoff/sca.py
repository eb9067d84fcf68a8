"""Successive convex approximation engine for the rate/fairness trade-off.

The non-convex weighted design problem is solved as a sequence of cone
programs.  Each outer iteration linearizes the two bilinear couplings (signal
power vs. SINR slack, and fairness slack vs. rate norm) and the SIC power
ordering around the current iterate, solves the resulting program, then
re-anchors every slack variable on the achieved beamformers so the next
expansion point is exactly feasible.  The loop stops once the scalarized
objective moves less than ``rho`` between iterations.

Two caveats carried by the formulation itself, both surfaced in the run
report rather than hidden: the signal constraint restricts h_k^H w_i to its
real part (a restriction; receiver phases are canonicalized up front to make
it cheap), and every reported metric is recomputed from the beamformers, not
from optimizer slacks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import conic, metrics
from .channel import ChannelSet
from .conic import ConicProblem, SolverSettings
from .metrics import BeamformerSet, MetricsReport

ALPHA_CLAMP = 1e-3     # keeps the 1/(1-a) and 1/a rows finite near the endpoints
EPS_Z = 1e-6           # guard on z-1 before dividing in the signal linearization
EPS_GAMMA = 1e-9       # guard on gamma before dividing in the fairness linearization

MODE_TRADEOFF = "tradeoff"
MODE_SRM = "srm"       # alpha = 0: fairness branch disabled; objective is the sum rate
MODE_MMR = "mmr"       # alpha = 1: max-min rate, the equal-rate endpoint


class InitializationError(RuntimeError):
    """No feasible starting beamformer could be constructed."""


@dataclass(frozen=True)
class TradeoffWeights:
    """Weight factor and normalization constants of the scalarized objective.

    ``alpha`` weights fairness; 1 - alpha weights the normalized sum rate.
    ``f1_max`` is the utopia sum rate of the current channel realization
    (compute it with :func:`utopia_sum_rate`); the fairness index needs no
    normalization since its maximum is 1.
    """

    alpha: float
    f1_max: float
    f2_max: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.f1_max <= 0:
            raise ValueError("f1_max must be positive")
        if self.f2_max != 1.0:
            raise ValueError("the fairness index is already normalized; f2_max is 1")

    @property
    def alpha1(self) -> float:
        return 1.0 - self.alpha

    @property
    def alpha2(self) -> float:
        return self.alpha


@dataclass
class SCAOptions:
    rho: float = 1e-3
    max_iter: int = 100
    solver: SolverSettings = field(default_factory=SolverSettings)
    use_exp_cone: bool = True      # False: tangent + trust-cap surrogate of z >= 2^r
    trust_delta: float = 1.0       # |r - r_prev| cap when use_exp_cone is False
    init_power_fraction: float = 0.9
    init_decay: float = 0.5
    init_styles: tuple = ("matched", "common")  # multi-start; best final objective wins
    dump_subproblems: bool = False


@dataclass
class RestrictionFlags:
    """Everything that weakened or restricted a run, kept out in the open."""

    z_clamps: int = 0
    gamma_clamps: int = 0
    exp_fallback_used: bool = False
    receiver_dephased: bool = True
    init_rescued_users: list = field(default_factory=list)
    init_phase_failures: list = field(default_factory=list)
    init_decay_used: float = 0.0
    damping_events: int = 0


@dataclass
class SCAIterate:
    """One outer-iteration snapshot: beamformers plus all slack values.

    Slacks are anchored on W: r holds the rates certified by the real-part
    restricted constraints (hence r_i <= achieved R_i), z = 2^r, eta the
    interference-plus-noise amplitudes, and (gamma, beta, xi*) follow from
    their defining equalities.
    """

    n: int
    W: np.ndarray               # (K, N) complex
    r: np.ndarray               # (K,)
    z: np.ndarray               # (K,)
    eta: np.ndarray             # (K, K); eta[i, k] valid for k >= i, NaN below
    gamma: float
    beta: float
    xi1: float
    xi2: float
    xi: float


@dataclass
class RunReport:
    """Converged solution, per-iteration trace, and post-hoc feasibility."""

    alpha: float
    alpha_eff: float
    mode: str
    f1_max: float
    p_ava: float
    beamformers: BeamformerSet
    final_state: SCAIterate
    xi_trace: list
    converged: bool
    iterations: int
    subproblem_statuses: list
    metrics: MetricsReport            # recomputed from W, never from slacks
    power_ok: bool
    sic_ok: bool
    sic_violation: float
    slack_rate_gap: float             # max_i (r_i - achieved R_i); <= 0 up to tolerance
    max_start_violation: float        # prev-iterate infeasibility across clean builds
    min_xi_step: float                # most negative accepted objective step
    flags: RestrictionFlags = field(default_factory=RestrictionFlags)
    subproblem_dumps: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "alpha_eff": self.alpha_eff,
            "mode": self.mode,
            "f1_max": self.f1_max,
            "p_ava": self.p_ava,
            "beamformers": self.beamformers.to_pairs(),
            "xi_trace": [float(v) for v in self.xi_trace],
            "converged": self.converged,
            "iterations": self.iterations,
            "subproblem_statuses": list(self.subproblem_statuses),
            "metrics": self.metrics.to_dict(),
            "power_ok": self.power_ok,
            "sic_ok": self.sic_ok,
            "sic_violation": self.sic_violation,
            "slack_rate_gap": self.slack_rate_gap,
            "max_start_violation": self.max_start_violation,
            "min_xi_step": self.min_xi_step,
            "flags": asdict(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# --------------------------------------------------------------------------
# linearizations (each tangent at its expansion point)
# --------------------------------------------------------------------------

@dataclass
class SignalLinearization:
    """Affine minorant context for Re(h_k^H w_i) >= sqrt(z-1) * eta.

    rhs(eta, z) = sqrt(z0-1)*eta0 + sqrt(z0-1)*(eta-eta0) + 0.5*(z-z0)/sqrt(z0-1)
    """

    i: int
    k: int
    coef_eta: float
    coef_z: float
    constant: float
    clamped: bool

    def rhs(self, eta: float, z: float) -> float:
        return self.constant + self.coef_eta * eta + self.coef_z * z


def linearize_signal_constraint(state: SCAIterate, i: int, k: int) -> SignalLinearization:
    z0 = state.z[i]
    eta0 = state.eta[i, k]
    clamped = z0 - 1.0 < EPS_Z
    if clamped:
        z0 = 1.0 + EPS_Z
    root = math.sqrt(z0 - 1.0)
    return SignalLinearization(
        i=i,
        k=k,
        coef_eta=root,
        coef_z=0.5 / root,
        constant=-0.5 * z0 / root,
        clamped=clamped,
    )


@dataclass
class FairnessLinearization:
    """Affine surrogate for sum(r) >= sqrt(gamma) * beta.

    rhs(gamma, beta) = sqrt(g0)*b0 + 0.5*b0/sqrt(g0)*(gamma-g0) + sqrt(g0)*(beta-b0)
    """

    coef_gamma: float
    coef_beta: float
    constant: float
    clamped: bool

    def rhs(self, gamma: float, beta: float) -> float:
        return self.constant + self.coef_gamma * gamma + self.coef_beta * beta


def linearize_fairness_product(state: SCAIterate) -> FairnessLinearization:
    g0 = state.gamma
    b0 = state.beta
    clamped = g0 < EPS_GAMMA
    if clamped:
        g0 = EPS_GAMMA
    root = math.sqrt(g0)
    return FairnessLinearization(
        coef_gamma=0.5 * b0 / root,
        coef_beta=root,
        constant=-0.5 * b0 * root,
        clamped=clamped,
    )


@dataclass
class SICLinearization:
    """Tangent under-estimator of the convex term |h_k^H w_j|^2.

    value(re, im) = |g0|^2 + 2*Re(g0)*(re - Re(g0)) + 2*Im(g0)*(im - Im(g0))
    where g0 = h_k^H w_j at the expansion point; globally <= |h_k^H w_j|^2.
    """

    k: int
    j: int
    p: float   # Re(h_k^H w_j) at expansion
    q: float   # Im at expansion

    def value(self, re: float, im: float) -> float:
        return 2.0 * self.p * re + 2.0 * self.q * im - (self.p**2 + self.q**2)


def linearize_sic_terms(state: SCAIterate, H: ChannelSet, k: int, j: int) -> SICLinearization:
    g0 = np.vdot(H.vectors[k], state.W[j])   # h_k^H w_j
    return SICLinearization(k=k, j=j, p=float(g0.real), q=float(g0.imag))


def interference_amplitude(W: np.ndarray, H: ChannelSet, i: int, k: int) -> float:
    """||[h_k^H w_{i+1}, ..., h_k^H w_K, sigma_k]||_2 (the eta lower bound)."""
    inner = H.vectors[k].conj() @ W[i + 1 :].T if i + 1 < H.num_users else np.zeros(0)
    return float(np.sqrt(np.sum(np.abs(inner) ** 2) + H.noise_variances[k]))


def rate_norm_bound(r: np.ndarray) -> float:
    """sqrt(K) * ||r||_2 (the beta lower bound)."""
    return float(np.sqrt(len(r)) * np.linalg.norm(r))


# --------------------------------------------------------------------------
# receiver phase canonicalization and iterate anchoring
# --------------------------------------------------------------------------

def dephase_receivers(H: ChannelSet) -> ChannelSet:
    """Rotate each user's channel so its inner product with the strongest
    user's channel is real nonnegative.

    Per-receiver phase rotations change no SINR, rate, or power; they only
    make the real-part restriction in the signal constraint cheap to satisfy
    (for N = 1 it removes the restriction entirely).
    """
    ref = H.vectors[-1]
    ips = H.vectors.conj() @ ref
    phases = np.where(np.abs(ips) > 0, np.angle(ips), 0.0)
    rotated = H.vectors * np.exp(1j * phases)[:, None]
    return ChannelSet(
        vectors=rotated,
        noise_variances=H.noise_variances.copy(),
        ordering_permutation=H.ordering_permutation.copy(),
        config=H.config,
    )


def _restricted_rates(W: np.ndarray, H: ChannelSet):
    """Rates certified by the Re(.)-restricted constraint chain, plus the
    interference amplitudes; both anchored on W with equality.

    Each beam is first rotated to the common phase maximizing its worst
    Re(h_k^H w_i)/eta_{i,k}.  Phase rotations change no metric, SIC margin,
    or power, so this is a free renaming that keeps the certified rates as
    close to the achieved ones as the restriction allows.
    """
    K = H.num_users
    W = W.copy()
    G = H.vectors.conj() @ W.T                      # G[k, i] = h_k^H w_i
    P = np.abs(G) ** 2
    eta = np.full((K, K), np.nan)
    sinr = np.zeros(K)
    for i in range(K):
        for k in range(i, K):
            interf = float(np.sum(P[k, i + 1 :])) + H.noise_variances[k]
            eta[i, k] = math.sqrt(interf)
        col = np.arange(i, K)
        if np.any(np.abs(G[col, i]) > 0):
            phi, _ = _best_common_phase(G[col, i], weights=1.0 / eta[i, col])
            if phi != 0.0:
                W[i] *= np.exp(1j * phi)
                G[:, i] *= np.exp(1j * phi)
        sinr[i] = min(
            (max(G[k, i].real, 0.0) / eta[i, k]) ** 2 for k in range(i, K)
        )
    z = 1.0 + sinr
    r = np.log2(z)
    return W, r, z, eta


def recalibrate(
    W: np.ndarray,
    H: ChannelSet,
    weights: TradeoffWeights,
    n: int,
    mode: str = MODE_TRADEOFF,
    alpha_eff: float | None = None,
) -> SCAIterate:
    """Anchor every slack on W so all nonlinear couplings hold with equality.

    The next subproblem's linearizations are tangent at this point, which
    keeps the previous iterate feasible and the objective monotone.
    """
    W, r, z, eta = _restricted_rates(W, H)
    total = float(np.sum(r))
    if total > 0.0:
        gamma = metrics.fairness_index(r)
    else:
        gamma = 0.0
    beta = rate_norm_bound(r)
    if mode == MODE_SRM:
        xi1 = total / weights.f1_max
        xi2 = 0.0
        xi = xi1
    elif mode == MODE_MMR:
        xi1 = xi2 = 0.0
        xi = float(np.min(r))
    else:
        a = weights.alpha if alpha_eff is None else alpha_eff
        xi1 = (1.0 - a) * total / weights.f1_max
        xi2 = a * gamma
        xi = xi1 + xi2
    return SCAIterate(
        n=n, W=W, r=r, z=z, eta=eta, gamma=gamma, beta=beta,
        xi1=xi1, xi2=xi2, xi=xi,
    )


# --------------------------------------------------------------------------
# feasible initialization
# --------------------------------------------------------------------------

def _best_common_phase(
    ips: np.ndarray, weights: np.ndarray | None = None, grid: int = 1440
) -> tuple[float, float]:
    """Phase phi maximizing min_k w_k * Re(e^{j phi} ips_k); returns (phi, value)."""
    mags = np.abs(ips) * (weights if weights is not None else 1.0)
    angles = np.angle(ips)
    phis = np.linspace(0.0, 2.0 * np.pi, grid, endpoint=False)
    re = mags[None, :] * np.cos(phis[:, None] + angles[None, :])
    worst = re.min(axis=1)
    best = int(np.argmax(worst))
    return float(phis[best]), float(worst[best])


def _matched_directions(H: ChannelSet, flags: RestrictionFlags) -> np.ndarray:
    """Per-user matched-filter directions, phase-aligned for the real-part
    restriction; least-squares redirection where no common phase exists."""
    K = H.num_users
    norms = np.sqrt(H.squared_norms())
    dirs = (H.vectors / norms[:, None]).astype(np.complex128)
    for i in range(K):
        sub = H.vectors[i:]                       # decoding users k >= i
        ips = sub.conj() @ dirs[i]
        phi, worst = _best_common_phase(ips)
        scale = float(np.max(np.abs(ips)))
        if worst <= 1e-9 * max(scale, 1e-300):
            # no common phase: aim for the matched-filter magnitudes with
            # zero phases instead (exactly solvable when K - i <= N)
            targets = np.abs(ips)
            v, *_ = np.linalg.lstsq(sub.conj(), targets, rcond=None)
            nv = np.linalg.norm(v)
            if nv > 0:
                cand = v / nv
                ips2 = sub.conj() @ cand
                phi2, worst2 = _best_common_phase(ips2)
                if worst2 > worst:
                    dirs[i] = cand * np.exp(1j * phi2)
                    flags.init_rescued_users.append(i)
                    worst = worst2
                else:
                    dirs[i] = dirs[i] * np.exp(1j * phi)
            else:
                dirs[i] = dirs[i] * np.exp(1j * phi)
            if worst <= 0.0:
                flags.init_phase_failures.append(i)
        else:
            dirs[i] = dirs[i] * np.exp(1j * phi)
    return dirs


def initialize_feasible(
    H: ChannelSet,
    p_ava: float,
    weights: TradeoffWeights,
    options: SCAOptions | None = None,
    flags: RestrictionFlags | None = None,
    mode: str = MODE_TRADEOFF,
    alpha_eff: float | None = None,
    style: str = "matched",
) -> SCAIterate:
    """Feasible start: beam directions plus geometric power decay at 90% of
    budget, the decay factor halved until the SIC power ordering holds.

    ``matched`` points each beam along its own channel (phase-aligned so the
    real-part-restricted signal constraints hold at the start; least-squares
    redirection where no common phase exists).  ``common`` sends every beam
    along the strongest user's channel, a start that favors rate
    concentration; with canonicalized receiver phases its inner products are
    real-positive by construction.
    """
    if p_ava <= 0:
        raise InitializationError("power budget must be positive")
    options = options or SCAOptions()
    flags = flags if flags is not None else RestrictionFlags()
    K = H.num_users
    norms = np.sqrt(H.squared_norms())
    if np.any(norms == 0):
        raise InitializationError("zero channel vector")

    if style == "matched":
        dirs = _matched_directions(H, flags)
    elif style == "common":
        u = H.vectors[-1] / norms[-1]
        dirs = np.tile(u, (K, 1))
    else:
        raise ValueError(f"unknown init style {style!r}")

    decay = options.init_decay
    for _ in range(60):
        p = decay ** np.arange(K, dtype=float)
        p *= options.init_power_fraction * p_ava / np.sum(p)
        W = np.sqrt(p)[:, None] * dirs
        if metrics.check_sic_ordering(W, H, tol=0.0).ok:
            break
        decay *= 0.5
    else:
        raise InitializationError("could not order powers for SIC at any decay factor")
    flags.init_decay_used = decay
    return recalibrate(W, H, weights, n=0, mode=mode, alpha_eff=alpha_eff)


# --------------------------------------------------------------------------
# subproblem assembly
# --------------------------------------------------------------------------

def _re_row_vals(h: np.ndarray) -> np.ndarray:
    # Re(h^H w) over (Re w, Im w) coordinates
    return np.concatenate([h.real, h.imag])


def _im_row_vals(h: np.ndarray) -> np.ndarray:
    # Im(h^H w) over (Re w, Im w) coordinates
    return np.concatenate([-h.imag, h.real])


class _Layout:
    """Column layout shared by the builder and the iterate vectorizer."""

    def __init__(self, K: int, N: int, mode: str):
        self.K, self.N, self.mode = K, N, mode
        self.re = [np.arange(i * N, (i + 1) * N) for i in range(K)]
        self.im = [K * N + np.arange(i * N, (i + 1) * N) for i in range(K)]
        self.w_all = np.arange(2 * K * N)
        base = 2 * K * N
        self.xi, self.xi1, self.xi2 = base, base + 1, base + 2
        self.r = np.arange(base + 3, base + 3 + K)
        self.z = np.arange(base + 3 + K, base + 3 + 2 * K)
        self.eta = {}
        col = base + 3 + 2 * K
        for i in range(K):
            for k in range(i, K):
                self.eta[(i, k)] = col
                col += 1
        if mode == MODE_TRADEOFF:
            self.gamma = col
            self.beta = col + 1
            col += 2
        self.num_vars = col

    def wcol_pair(self, i: int) -> np.ndarray:
        return np.concatenate([self.re[i], self.im[i]])

    def names(self) -> list[str]:
        K, N = self.K, self.N
        out = [f"Re(w_{i+1}[{t+1}])" for i in range(K) for t in range(N)]
        out += [f"Im(w_{i+1}[{t+1}])" for i in range(K) for t in range(N)]
        out += ["xi", "xi1", "xi2"]
        out += [f"r_{i+1}" for i in range(K)]
        out += [f"z_{i+1}" for i in range(K)]
        out += [f"eta_{i+1}_{k+1}" for i in range(K) for k in range(i, K)]
        if self.mode == MODE_TRADEOFF:
            out += ["gamma", "beta"]
        return out


def iterate_vector(state: SCAIterate, mode: str = MODE_TRADEOFF) -> np.ndarray:
    """Flatten an iterate into the subproblem's variable layout."""
    K, N = state.W.shape
    lay = _Layout(K, N, mode)
    x = np.zeros(lay.num_vars)
    x[: K * N] = state.W.real.ravel()
    x[K * N : 2 * K * N] = state.W.imag.ravel()
    x[lay.xi], x[lay.xi1], x[lay.xi2] = state.xi, state.xi1, state.xi2
    x[lay.r] = state.r
    x[lay.z] = state.z
    for (i, k), col in lay.eta.items():
        x[col] = state.eta[i, k]
    if mode == MODE_TRADEOFF:
        x[lay.gamma] = state.gamma
        x[lay.beta] = state.beta
    return x


def build_subproblem(
    state: SCAIterate,
    weights: TradeoffWeights,
    H: ChannelSet,
    p_ava: float,
    options: SCAOptions | None = None,
    flags: RestrictionFlags | None = None,
    mode: str = MODE_TRADEOFF,
    alpha_eff: float | None = None,
) -> ConicProblem:
    """Assemble the convexified subproblem around ``state``.

    All linearizations are tangent at the state, so the state itself is
    feasible for the built program (modulo guard clamps, which are counted
    in ``flags``).
    """
    options = options or SCAOptions()
    flags = flags if flags is not None else RestrictionFlags()
    K, N = H.num_users, H.num_antennas
    lay = _Layout(K, N, mode)
    prob = ConicProblem()
    prob.add_variables(lay.names())
    prob.set_maximize({lay.xi: 1.0})

    a = weights.alpha if alpha_eff is None else alpha_eff
    nonneg: list = []

    if mode == MODE_MMR:
        # max-min endpoint: xi is a floor under every rate slack
        for i in range(K):
            nonneg.append(((lay.r[i], lay.xi), (1.0, -1.0), 0.0))
        prob.add_equality(
            [((lay.xi1,), (1.0,), 0.0), ((lay.xi2,), (1.0,), 0.0)]
        )
    else:
        # objective split: xi <= xi1 + xi2
        nonneg.append(((lay.xi1, lay.xi2, lay.xi), (1.0, 1.0, -1.0), 0.0))

    # sum-rate branch: sum r >= f1_max * xi1 / (1 - a)
    if mode == MODE_SRM:
        srm_coef = weights.f1_max            # xi1 = sum r / f1_max, xi2 pinned to 0
        nonneg.append((tuple(lay.r) + (lay.xi1,), (1.0,) * K + (-srm_coef,), 0.0))
        prob.add_equality([((lay.xi2,), (1.0,), 0.0)])
    elif mode == MODE_TRADEOFF:
        coef = weights.f1_max / (1.0 - a)
        nonneg.append((tuple(lay.r) + (lay.xi1,), (1.0,) * K + (-coef,), 0.0))

    # fairness branch
    if mode == MODE_TRADEOFF:
        # gamma >= xi2 / a, gamma in [0, 1]
        nonneg.append(((lay.gamma, lay.xi2), (1.0, -1.0 / a), 0.0))
        nonneg.append(((lay.gamma,), (1.0,), 0.0))
        nonneg.append(((lay.gamma,), (-1.0,), 1.0))
        lin = linearize_fairness_product(state)
        if lin.clamped:
            flags.gamma_clamps += 1
        nonneg.append(
            (
                tuple(lay.r) + (lay.gamma, lay.beta),
                (1.0,) * K + (-lin.coef_gamma, -lin.coef_beta),
                -lin.constant,
            )
        )
        # beta >= sqrt(K) ||r||
        rootK = math.sqrt(K)
        prob.add_soc(
            [((lay.beta,), (1.0,), 0.0)]
            + [((lay.r[i],), (rootK,), 0.0) for i in range(K)]
        )

    # rates nonnegative
    for i in range(K):
        nonneg.append(((lay.r[i],), (1.0,), 0.0))

    # z_i >= 2^{r_i}
    if options.use_exp_cone:
        for i in range(K):
            prob.encode_power_of_two(lay.r[i], lay.z[i])
    else:
        flags.exp_fallback_used = True
        for i in range(K):
            r0 = state.r[i]
            g = 2.0**r0
            # tangent of 2^r at r0 plus a trust cap on the step
            nonneg.append(
                ((lay.z[i], lay.r[i]), (1.0, -g * conic.LN2), g * conic.LN2 * r0 - g)
            )
            nonneg.append(((lay.r[i],), (-1.0,), r0 + options.trust_delta))
            nonneg.append(((lay.r[i],), (1.0,), options.trust_delta - r0))

    # signal constraints (linearized) and interference SOCs
    for i in range(K):
        wcols = lay.wcol_pair(i)
        for k in range(i, K):
            lin = linearize_signal_constraint(state, i, k)
            if lin.clamped:
                flags.z_clamps += 1
            h = H.vectors[k]
            nonneg.append(
                (
                    tuple(wcols) + (lay.eta[(i, k)], lay.z[i]),
                    tuple(_re_row_vals(h)) + (-lin.coef_eta, -lin.coef_z),
                    -lin.constant,
                )
            )
            rows = [((lay.eta[(i, k)],), (1.0,), 0.0)]
            for j in range(i + 1, K):
                cj = lay.wcol_pair(j)
                rows.append((tuple(cj), tuple(_re_row_vals(h)), 0.0))
                rows.append((tuple(cj), tuple(_im_row_vals(h)), 0.0))
            rows.append(((), (), math.sqrt(H.noise_variances[k])))
            prob.add_soc(rows)

    # SIC power ordering: tangent of the stronger term >= |h_k^H w_{j+1}|^2
    for k in range(K):
        h = H.vectors[k]
        rev, imv = _re_row_vals(h), _im_row_vals(h)
        for j in range(K - 1):
            lin = linearize_sic_terms(state, H, k, j)
            cj = lay.wcol_pair(j)
            cj1 = lay.wcol_pair(j + 1)
            tvals = 2.0 * lin.p * rev + 2.0 * lin.q * imv
            tconst = -(lin.p**2 + lin.q**2)
            prob.add_soc(
                [
                    (tuple(cj), tuple(0.5 * tvals), 0.5 * (tconst + 1.0)),
                    (tuple(cj), tuple(0.5 * tvals), 0.5 * (tconst - 1.0)),
                    (tuple(cj1), tuple(rev), 0.0),
                    (tuple(cj1), tuple(imv), 0.0),
                ]
            )

    # power budget as a single SOC
    prob.add_soc(
        [((), (), math.sqrt(p_ava))]
        + [((int(c),), (1.0,), 0.0) for c in lay.w_all]
    )

    prob.add_nonneg(nonneg)
    return prob


def _extract_W(sol_x: np.ndarray, K: int, N: int) -> np.ndarray:
    return sol_x[: K * N].reshape(K, N) + 1j * sol_x[K * N : 2 * K * N].reshape(K, N)


def _power_feasible(g: np.ndarray, sigma2: np.ndarray, p_ava: float, t: float):
    """Least-power allocation meeting decode SINR >= t on fixed directions.

    g[k, j] = |h_k^H dir_j|^2.  All decode-SINR rows, the SIC ordering, and
    the budget are linear in the powers, so this is a small LP; returns the
    power vector or None when the target t is infeasible.  Powers are solved
    as fractions of the budget to keep the LP well scaled.
    """
    K = g.shape[0]
    gp = g * p_ava
    prob = ConicProblem()
    cols = prob.add_variables([f"q_{j+1}" for j in range(K)])
    prob.set_maximize({c: -1.0 for c in cols})
    rows = [((c,), (1.0,), 0.0) for c in cols]
    rows.append((tuple(cols), (-1.0,) * K, 1.0))
    for i in range(K):
        for k in range(i, K):
            idx = list(range(i, K))
            vals = [gp[k, i]] + [-t * gp[k, j] for j in range(i + 1, K)]
            rows.append((tuple(cols[j] for j in idx), tuple(vals), -t * sigma2[k]))
    for k in range(K):
        for j in range(K - 1):
            rows.append(((cols[j], cols[j + 1]), (g[k, j], -g[k, j + 1]), 0.0))
    prob.add_nonneg(rows)
    sol = conic.solve(prob, SolverSettings(feas_tol=1e-8, max_iter=200))
    if sol.status != conic.OPTIMAL:
        return None
    q = np.array([sol.value(f"q_{j+1}") for j in range(K)])
    if np.sum(q) > 1.0 + 1e-9:
        return None
    return np.maximum(q, 0.0) * p_ava


def _equalize_refine(
    W: np.ndarray, H: ChannelSet, p_ava: float, passes: int = 12, ratio_tol: float = 1.02
) -> np.ndarray:
    """Squeeze achieved-rate spread at the max-min endpoint by re-solving with
    a decode-SINR cap alongside the usual floor.

    The cap |h_k^H w_i|^2 <= C * (interference tangent + noise) is a valid
    restriction of SINR <= C, so each pass is one cone program: maximize the
    common floor m subject to all decode SINRs certified >= m and capped at a
    level that shrinks toward the floor.  Passes that do not improve the
    spread (or that trade away the minimum rate) are rolled back.
    """
    K, N = H.num_users, H.num_antennas
    best = W
    weights_dummy = TradeoffWeights(alpha=1.0, f1_max=1.0)

    def true_sinrs(Wc):
        return np.array([metrics.effective_sinr(Wc, H, i) for i in range(K)])

    for _ in range(passes):
        s = true_sinrs(best)
        lo, hi = float(np.min(s)), float(np.max(s))
        if hi <= ratio_tol * lo + 1e-12:
            break
        cap = math.sqrt(lo * hi)                    # geometric shrink of the spread
        state = recalibrate(best, H, weights_dummy, 0, mode=MODE_MMR)
        prob = ConicProblem()
        lay = _Layout(K, N, MODE_SRM)               # w, xi..., r, z, eta columns
        prob.add_variables(lay.names())
        prob.set_maximize({lay.xi: 1.0})            # xi = common SINR floor here
        rows: list = []
        for i in range(K):
            rows.append(((lay.z[i], lay.xi), (1.0, -1.0), -1.0))   # z_i >= 1 + xi
            rows.append(((lay.r[i],), (1.0,), 0.0))
            wcols = lay.wcol_pair(i)
            for k in range(i, K):
                lin = linearize_signal_constraint(state, i, k)
                h = H.vectors[k]
                rows.append(
                    (
                        tuple(wcols) + (lay.eta[(i, k)], lay.z[i]),
                        tuple(_re_row_vals(h)) + (-lin.coef_eta, -lin.coef_z),
                        -lin.constant,
                    )
                )
                soc = [((lay.eta[(i, k)],), (1.0,), 0.0)]
                for j in range(i + 1, K):
                    cj = lay.wcol_pair(j)
                    soc.append((tuple(cj), tuple(_re_row_vals(h)), 0.0))
                    soc.append((tuple(cj), tuple(_im_row_vals(h)), 0.0))
                soc.append(((), (), math.sqrt(H.noise_variances[k])))
                prob.add_soc(soc)
                # cap: |h_k^H w_i|^2 <= cap * (tangent interference + noise)
                icols: list = []
                ivals: list = []
                iconst = cap * H.noise_variances[k]
                for j in range(i + 1, K):
                    linj = linearize_sic_terms(state, H, k, j)
                    cj = lay.wcol_pair(j)
                    icols.extend(cj)
                    ivals.extend(
                        cap * (2.0 * linj.p * _re_row_vals(h) + 2.0 * linj.q * _im_row_vals(h))
                    )
                    iconst += -cap * (linj.p**2 + linj.q**2)
                prob.add_soc(
                    [
                        (tuple(icols), tuple(0.5 * np.asarray(ivals)), 0.5 * (iconst + 1.0)),
                        (tuple(icols), tuple(0.5 * np.asarray(ivals)), 0.5 * (iconst - 1.0)),
                        (tuple(wcols), tuple(_re_row_vals(h)), 0.0),
                        (tuple(wcols), tuple(_im_row_vals(h)), 0.0),
                    ]
                )
        for k in range(K):
            h = H.vectors[k]
            rev, imv = _re_row_vals(h), _im_row_vals(h)
            for j in range(K - 1):
                lin = linearize_sic_terms(state, H, k, j)
                cj = lay.wcol_pair(j)
                cj1 = lay.wcol_pair(j + 1)
                tvals = 2.0 * lin.p * rev + 2.0 * lin.q * imv
                tconst = -(lin.p**2 + lin.q**2)
                prob.add_soc(
                    [
                        (tuple(cj), tuple(0.5 * tvals), 0.5 * (tconst + 1.0)),
                        (tuple(cj), tuple(0.5 * tvals), 0.5 * (tconst - 1.0)),
                        (tuple(cj1), tuple(rev), 0.0),
                        (tuple(cj1), tuple(imv), 0.0),
                    ]
                )
        prob.add_soc(
            [((), (), math.sqrt(p_ava))]
            + [((int(c),), (1.0,), 0.0) for c in lay.w_all]
        )
        prob.add_equality(
            [((lay.xi1,), (1.0,), 0.0), ((lay.xi2,), (1.0,), 0.0)]
        )
        prob.add_nonneg(rows)
        sol = conic.solve(prob, SolverSettings(feas_tol=1e-8, max_iter=200))
        if sol.status != conic.OPTIMAL or sol.x is None:
            break
        W_new = _extract_W(np.asarray(sol.x), K, N)
        if not metrics.check_sic_ordering(W_new, H, tol=1e-9).ok:
            break
        if metrics.transmit_power(W_new) > p_ava * (1.0 + 1e-9):
            break
        s_new = true_sinrs(W_new)
        lo_new, hi_new = float(np.min(s_new)), float(np.max(s_new))
        if lo_new < lo * (1.0 - 5e-3) or hi_new / lo_new >= hi / lo - 1e-9:
            break
        best = W_new
    return best


def _maxmin_power_balance(W: np.ndarray, H: ChannelSet, p_ava: float) -> np.ndarray:
    """Equalize achieved rates by re-balancing powers on fixed directions.

    Bisects the common decode-SINR target; each probe is an LP.  Starts from
    the current achieved minimum (always feasible with the current powers),
    so the max-min level never degrades.  Used at the alpha = 1 endpoint,
    where the real-part restriction can leave uneven achieved-rate surpluses
    that per-beam trimming cannot remove without breaking the SIC ordering.
    """
    K = H.num_users
    norms = np.linalg.norm(W, axis=1)
    if np.any(norms <= 1e-12 * np.max(norms)):
        return W
    dirs = W / norms[:, None]
    g = np.abs(H.vectors.conj() @ dirs.T) ** 2
    sigma2 = H.noise_variances
    t_lo = min(metrics.effective_sinr(W, H, i) for i in range(K))
    if t_lo <= 0:
        return W
    p_best = norms**2
    t_hi = t_lo
    for _ in range(14):
        t_hi *= 2.0
        if _power_feasible(g, sigma2, p_ava, t_hi) is None:
            break
    else:
        return W
    for _ in range(40):
        t_mid = math.sqrt(t_lo * t_hi)
        p = _power_feasible(g, sigma2, p_ava, t_mid)
        if p is None:
            t_hi = t_mid
        else:
            t_lo, p_best = t_mid, p
        if t_hi / t_lo < 1.0 + 1e-5:
            break
    # spend the whole budget: uniform scaling preserves SIC and raises SINRs
    scale = (1.0 - 1e-9) * p_ava / float(np.sum(p_best))
    if scale > 1.0:
        p_best = p_best * scale
    return np.sqrt(p_best)[:, None] * dirs


# --------------------------------------------------------------------------
# outer loop
# --------------------------------------------------------------------------

def sca_solve(
    H: ChannelSet,
    weights: TradeoffWeights,
    p_ava: float,
    rho: float = 1e-3,
    max_iter: int = 100,
    options: SCAOptions | None = None,
) -> RunReport:
    """Run the full SCA loop for one channel realization and weight factor.

    The endpoints degenerate as the weighting suggests: alpha = 0 drops the
    fairness branch and maximizes the sum rate; alpha = 1 is the equal-rate
    endpoint, solved as max-min rate on the same constraint machinery
    (maximizing the fairness index alone is degenerate, since the index is
    invariant to scaling all rates down).  Interior alpha runs the weighted
    form with alpha clamped to [1e-3, 1 - 1e-3] so both normalization rows
    stay finite.  Stops when |xi_n - xi_{n-1}| < rho or at max_iter.

    SCA only finds local optima, so the loop is restarted from each
    configured initialization style and the run with the best achieved
    scalarized objective is reported.
    """
    options = options or SCAOptions()
    best: RunReport | None = None
    for style in options.init_styles:
        report = _sca_run(H, weights, p_ava, rho, max_iter, options, style)
        if best is None or _achieved_objective(report) > _achieved_objective(best):
            best = report
    return best


def _achieved_objective(report: RunReport) -> float:
    """Scalarized objective recomputed from achieved metrics (not slacks)."""
    if report.mode == MODE_SRM:
        return report.metrics.sum_rate / report.f1_max
    if report.mode == MODE_MMR:
        return float(np.min(report.metrics.rates))
    a = report.alpha_eff
    return (1.0 - a) * report.metrics.sum_rate / report.f1_max + a * report.metrics.fairness_index


def _sca_run(
    H: ChannelSet,
    weights: TradeoffWeights,
    p_ava: float,
    rho: float,
    max_iter: int,
    options: SCAOptions,
    style: str,
) -> RunReport:
    flags = RestrictionFlags()
    Hd = dephase_receivers(H)
    if weights.alpha == 0.0:
        mode, alpha_eff = MODE_SRM, 0.0
    elif weights.alpha == 1.0:
        mode, alpha_eff = MODE_MMR, 1.0
    else:
        mode = MODE_TRADEOFF
        alpha_eff = float(np.clip(weights.alpha, ALPHA_CLAMP, 1.0 - ALPHA_CLAMP))

    state = initialize_feasible(
        Hd, p_ava, weights, options, flags, mode=mode, alpha_eff=alpha_eff, style=style
    )
    trace = [state.xi]
    statuses: list[str] = []
    dumps: list[str] = []
    converged = False
    max_start_violation = 0.0
    min_xi_step = 0.0

    for n in range(1, max_iter + 1):
        clamps_before = flags.z_clamps + flags.gamma_clamps
        prob = build_subproblem(
            state, weights, Hd, p_ava, options, flags, mode=mode, alpha_eff=alpha_eff
        )
        if options.dump_subproblems:
            dumps.append(prob.dump_text())
        if flags.z_clamps + flags.gamma_clamps == clamps_before:
            start_violation = prob.max_violation(iterate_vector(state, mode))
            max_start_violation = max(max_start_violation, start_violation)

        sol = conic.solve(prob, options.solver)
        statuses.append(sol.status)
        if sol.status != conic.OPTIMAL:
            retry = SolverSettings(
                feas_tol=options.solver.feas_tol,
                max_iter=options.solver.max_iter * 4,
                verbose=options.solver.verbose,
            )
            sol = conic.solve(prob, retry)
            statuses.append(sol.status)
        if sol.x is None:
            break

        W_new = _extract_W(np.asarray(sol.x), H.num_users, H.num_antennas)
        cand = recalibrate(W_new, Hd, weights, n, mode=mode, alpha_eff=alpha_eff)
        accepted = False
        stalled = False
        for _ in range(4):  # direct step, then up to 3 halvings
            sic = metrics.check_sic_ordering(cand.W, Hd, tol=1e-9)
            valid = sic.ok and metrics.transmit_power(cand.W) <= p_ava * (1.0 + 1e-9)
            if valid and cand.xi >= state.xi - 1e-6:
                accepted = True
                break
            if valid and abs(cand.xi - state.xi) < rho:
                # regression smaller than the stopping threshold: the loop is
                # oscillating at a fixed point; keep the better current state
                stalled = True
                break
            flags.damping_events += 1
            W_new = 0.5 * (state.W + W_new)
            cand = recalibrate(W_new, Hd, weights, n, mode=mode, alpha_eff=alpha_eff)
        if stalled:
            converged = True
            break
        if not accepted:
            break

        min_xi_step = min(min_xi_step, cand.xi - state.xi)
        state = cand
        trace.append(state.xi)
        if abs(trace[-1] - trace[-2]) < rho:
            converged = True
            break

    if mode == MODE_MMR:
        W_eq = _maxmin_power_balance(state.W, Hd, p_ava)
        W_eq = _equalize_refine(W_eq, Hd, p_ava)
        eq = recalibrate(W_eq, Hd, weights, state.n, mode=mode, alpha_eff=alpha_eff)
        min_before = float(np.min(metrics.all_user_rates(state.W, Hd)))
        min_after = float(np.min(metrics.all_user_rates(eq.W, Hd)))
        if min_after >= min_before * (1.0 - 5e-3) - 1e-9:
            state = eq

    achieved = metrics.compute_metrics(state.W, H, bandwidth_hz=1.0)
    sic_final = metrics.check_sic_ordering(state.W, H, tol=1e-6)
    return RunReport(
        alpha=weights.alpha,
        alpha_eff=alpha_eff,
        mode=mode,
        f1_max=weights.f1_max,
        p_ava=p_ava,
        beamformers=BeamformerSet(state.W),
        final_state=state,
        xi_trace=trace,
        converged=converged,
        iterations=len(trace) - 1,
        subproblem_statuses=statuses,
        metrics=achieved,
        power_ok=achieved.transmit_power <= p_ava * (1.0 + 1e-6),
        sic_ok=sic_final.ok,
        sic_violation=sic_final.worst_violation,
        slack_rate_gap=float(np.max(state.r - achieved.rates)),
        max_start_violation=max_start_violation,
        min_xi_step=min_xi_step,
        flags=flags,
        subproblem_dumps=dumps,
    )


def utopia_sum_rate(
    H: ChannelSet,
    p_ava: float,
    rho: float = 1e-3,
    max_iter: int = 100,
    options: SCAOptions | None = None,
) -> float:
    """Maximum achievable sum rate for this realization (normalizer f1_max).

    Runs the same SCA machinery with the fairness branch disabled and a
    placeholder normalization of 1, then scores the final beamformers.
    """
    weights = TradeoffWeights(alpha=0.0, f1_max=1.0)
    report = sca_solve(H, weights, p_ava, rho=rho, max_iter=max_iter, options=options)
    return report.metrics.sum_rate
