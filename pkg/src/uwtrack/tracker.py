"""Multi-object-particle multi-Bernoulli filter for eigenpath states.

Each candidate path is a Bernoulli component (existence weight w, Gaussian
mean m = [delay, doppler], covariance P). One recursion step runs:

  predict -> sample inclusion particles -> per-particle auction data
  association -> conditional Kalman updates -> particle reweighting ->
  moment-matched merge -> prune / confirm / extract -> births from
  measurements left unassociated in the best particle.

The state transition is the closed form of the mirror-geometry recursion
(range advances by -v*T per block); its Jacobian feeds the covariance
prediction. The observation matrix is identity: measurements live in the
same (delay, doppler) coordinates as the state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import PathState, ScenarioConfig
from .measure import ClutterModel

# Finite stand-in for log(0) inside association arithmetic: large enough to
# dominate any plausible score (gated Gaussian log-likelihoods stay within a
# few thousand), small enough that auction price arithmetic keeps precision.
LOG_STUB = -1.0e4

_LOG_2PI = math.log(2.0 * math.pi)


class DegenerateGeometryError(ValueError):
    """Transition undefined: the advanced range collapses onto the receiver."""


class SingularInnovationError(np.linalg.LinAlgError):
    """Innovation covariance not invertible."""


def predict_state(tau, a, v: float, c: float, t: float):
    """One-block state recursion for (delay, doppler).

    Equivalent to recovering (D1, D2), advancing D1 by -v*t, and recomputing;
    accepts scalars or arrays.
    """
    tau = np.asarray(tau, dtype=float)
    a = np.asarray(a, dtype=float)
    rad = v * v * t * t + c * c * tau * tau - 2.0 * c * c * a * tau * t
    if np.any(rad <= 0):
        raise DegenerateGeometryError("transition radicand <= 0 (transmitter collocated with receiver)")
    root = np.sqrt(rad)
    tau_next = root / c
    a_next = (c * c * a * tau - v * v * t) / (c * root)
    if tau_next.ndim == 0:
        return float(tau_next), float(a_next)
    return tau_next, a_next


def predict_path_state(x: PathState, v: float, c: float, t: float) -> PathState:
    tau, a = predict_state(x.delay_tau, x.doppler_a, v, c, t)
    return PathState(delay_tau=tau, doppler_a=a)


def transition_jacobian(tau: float, a: float, v: float, c: float, t: float) -> np.ndarray:
    """Analytic d(tau', a')/d(tau, a) of predict_state."""
    rad = v * v * t * t + c * c * tau * tau - 2.0 * c * c * a * tau * t
    if rad <= 0:
        raise DegenerateGeometryError("transition radicand <= 0 (transmitter collocated with receiver)")
    rho = math.sqrt(rad)
    num = c * c * a * tau - v * v * t
    dtau_dtau = c * (tau - a * t) / rho
    dtau_da = -c * tau * t / rho
    da_dtau = c * (a * rad - num * (tau - a * t)) / rho**3
    da_da = c * tau * (rad + num * t) / rho**3
    return np.array([[dtau_dtau, dtau_da], [da_dtau, da_da]])


@dataclass(frozen=True)
class TrackerConfig:
    p_survival: float
    p_detect: float
    clutter: ClutterModel
    q_process: np.ndarray            # 2x2 state noise covariance
    r_meas: np.ndarray               # 2x2 measurement noise covariance
    birth_weight_wb: float = 0.1
    birth_cov_pb: np.ndarray = field(default_factory=lambda: np.diag([1e-4, 1e-6]))
    num_particles_m: int = 200
    prune_tau_p: float = 1e-4
    confirm_tau_c: float = 0.75
    exist_tau_e: float = 0.25
    gate_radius: float = 4.0

    def __post_init__(self):
        if not (0.0 <= self.p_survival <= 1.0 and 0.0 <= self.p_detect <= 1.0):
            raise ValueError("p_survival and p_detect must lie in [0, 1]")
        if not (0.0 <= self.birth_weight_wb <= 1.0):
            raise ValueError("birth_weight_wb must lie in [0, 1]")
        if not (self.prune_tau_p < self.exist_tau_e < self.confirm_tau_c <= 1.0):
            raise ValueError("thresholds must satisfy prune < exist < confirm <= 1")
        if self.num_particles_m < 1:
            raise ValueError("num_particles_m must be >= 1")
        if self.gate_radius <= 0:
            raise ValueError("gate_radius must be positive")
        for name in ("q_process", "r_meas", "birth_cov_pb"):
            mat = np.asarray(getattr(self, name), dtype=float)
            if mat.shape != (2, 2) or not np.allclose(mat, mat.T):
                raise ValueError(f"{name} must be a symmetric 2x2 matrix")
            object.__setattr__(self, name, mat)


@dataclass
class MBComponent:
    """One Bernoulli track hypothesis."""

    weight: float
    mean: np.ndarray                 # (2,) [delay_tau, doppler_a]
    cov: np.ndarray                  # (2,2)
    track_id: int
    confirmed: bool = False
    amplitude: float | None = None   # last associated measurement amplitude

    def state(self) -> PathState:
        return PathState(delay_tau=float(self.mean[0]), doppler_a=float(self.mean[1]))


@dataclass
class MBDensity:
    components: list[MBComponent]
    epoch: int = 0

    @property
    def count(self) -> int:
        return len(self.components)


@dataclass(frozen=True)
class MultiObjectParticle:
    """One sampled hypothesis: which components exist and how they associate.

    association maps component index -> measurement index (1-based) or 0 for
    an undetected component; only included components appear as keys.
    """

    inclusion_set: frozenset[int]
    particle_weight: float
    association: dict[int, int]


@dataclass
class TrackerState:
    density: MBDensity
    next_track_id: int = 0


def ensure_psd(p: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Symmetrize and clamp negative eigenvalues at zero."""
    p = 0.5 * (p + p.T)
    ev = np.linalg.eigvalsh(p)
    if ev[0] < 0.0:
        if ev[0] < -tol * max(1.0, ev[-1]):
            w, v = np.linalg.eigh(p)
            p = (v * np.maximum(w, 0.0)) @ v.T
            p = 0.5 * (p + p.T)
        else:
            w, v = np.linalg.eigh(p)
            p = (v * np.maximum(w, 0.0)) @ v.T
            p = 0.5 * (p + p.T)
    return p


def birth(unassociated, cfg: TrackerConfig, start_id: int = 0) -> list[MBComponent]:
    """One fresh component per unassociated measurement."""
    out = []
    for k, meas in enumerate(unassociated):
        z = np.asarray(meas[:2], dtype=float)
        amp = float(meas[2]) if len(meas) > 2 and meas[2] is not None else None
        out.append(MBComponent(weight=cfg.birth_weight_wb, mean=z.copy(),
                               cov=cfg.birth_cov_pb.copy(), track_id=start_id + k,
                               amplitude=amp))
    return out


def predict(density: MBDensity, cfg: TrackerConfig, scenario: ScenarioConfig) -> MBDensity:
    """Survival-weighted one-step prediction of every component."""
    v, c, t = scenario.relative_speed_v, scenario.sound_speed_c, scenario.block_length_t
    out = []
    for comp in density.components:
        tau, a = predict_state(comp.mean[0], comp.mean[1], v, c, t)
        f = transition_jacobian(comp.mean[0], comp.mean[1], v, c, t)
        cov = ensure_psd(f @ comp.cov @ f.T + cfg.q_process)
        out.append(replace(comp, weight=cfg.p_survival * comp.weight,
                           mean=np.array([tau, a]), cov=cov))
    return MBDensity(out, epoch=density.epoch + 1)


def sample_particles(density: MBDensity, m: int, rng) -> list[MultiObjectParticle]:
    """m inclusion hypotheses, component i present iff u < w_i; uniform prior weights."""
    if m < 1:
        raise ValueError("need at least one particle")
    inc = _sample_inclusion(density, m, rng)
    return [MultiObjectParticle(inclusion_set=frozenset(np.nonzero(row)[0].tolist()),
                                particle_weight=1.0 / m, association={})
            for row in inc]


def _sample_inclusion(density: MBDensity, m: int, rng) -> np.ndarray:
    w = np.array([c.weight for c in density.components])
    u = rng.random((m, len(w)))
    return u < w[None, :]


def ekf_update(component: MBComponent, z, cfg: TrackerConfig) -> MBComponent:
    """Kalman update with identity observation matrix; z None leaves (m, P) as-is."""
    if z is None:
        return replace(component)
    z = np.asarray(z, dtype=float)
    s = component.cov + cfg.r_meas
    if abs(np.linalg.det(s)) < 1e-300:
        raise SingularInnovationError("innovation covariance is singular")
    k = component.cov @ np.linalg.inv(s)
    mean = component.mean + k @ (z - component.mean)
    cov = component.cov - (k @ s) @ k.T
    return replace(component, mean=mean, cov=ensure_psd(cov))


class _EpochWork:
    """Per-epoch memo: gates, scores and conditional updates shared by particles."""

    def __init__(self, predicted: MBDensity, z: np.ndarray, cfg: TrackerConfig):
        self.cfg = cfg
        self.nz = len(z)
        n = predicted.count
        self.log_miss = math.log(1.0 - cfg.p_detect) if cfg.p_detect < 1.0 else LOG_STUB
        lam = cfg.clutter.rate_lambda_c
        self.log_clutter = (math.log(lam / cfg.clutter.volume) if lam > 0.0 else LOG_STUB)
        self.lam = lam
        self.log_pd = math.log(cfg.p_detect) if cfg.p_detect > 0.0 else LOG_STUB

        self.post_means = np.empty((n, max(self.nz, 1), 2))
        self.post_covs = []
        self.log_gauss = np.full((n, max(self.nz, 1)), LOG_STUB)
        self.gate = np.zeros((n, max(self.nz, 1)), dtype=bool)
        for i, comp in enumerate(predicted.components):
            s = comp.cov + cfg.r_meas
            det = np.linalg.det(s)
            if det <= 1e-300:
                raise SingularInnovationError("innovation covariance is singular")
            k = comp.cov @ np.linalg.inv(s)
            self.post_covs.append(ensure_psd(comp.cov - (k @ s) @ k.T))
            if self.nz:
                innov = z - comp.mean[None, :]
                s_inv = np.linalg.inv(s)
                maha = np.einsum("nj,jk,nk->n", innov, s_inv, innov)
                self.gate[i, :] = maha <= cfg.gate_radius**2
                self.log_gauss[i, :] = -_LOG_2PI - 0.5 * math.log(det) - 0.5 * maha
                self.post_means[i, :, :] = comp.mean[None, :] + innov @ k.T
        self.detect_score = self.log_pd + self.log_gauss  # (n, nz)

    def associate_included(self, included: np.ndarray) -> tuple[np.ndarray, float]:
        """Best association for one inclusion vector: assign[i] in {-2 excluded,
        -1 missed, j >= 0 measurement}; returns (assign, log-likelihood)."""
        n = len(included)
        assign = np.full(n, -2, dtype=int)
        idx = np.nonzero(included)[0]
        if len(idx) == 0 or self.nz == 0:
            assign[idx] = -1
            n_fa = self.nz
            log_l = -self.lam + len(idx) * self.log_miss + n_fa * self.log_clutter
            return assign, log_l
        benefit = np.where(self.gate[idx][:, : self.nz],
                           self.detect_score[idx][:, : self.nz] - self.log_miss - self.log_clutter,
                           -np.inf)
        sub = auction_assign(benefit)
        assign[idx] = sub
        assigned = sub >= 0
        log_l = -self.lam
        log_l += float(np.sum(self.detect_score[idx[assigned], sub[assigned]]))
        log_l += float(np.sum(~assigned)) * self.log_miss
        log_l += (self.nz - int(np.sum(assigned))) * self.log_clutter
        return assign, log_l


def auction_assign(benefit: np.ndarray) -> np.ndarray:
    """Forward auction for the max-benefit one-to-one partial assignment.

    benefit[i, j] is the gain of pairing person i with object j over leaving
    both unassigned; -inf marks inadmissible pairs. Returns the measurement
    index per person, -1 for unassigned.

    Partial matching reduces to a perfect matching on a square (n+m) problem:
    each person also owns a zero-benefit personal null, each object gets an
    agent row that can absorb it for zero, and agents pair freely with unused
    nulls. On the square problem, forward auction with epsilon scaling and
    persistent prices is sound, and scaling is what defuses exact-tie bidding
    wars - those do occur here, because duplicate birth components over
    coincident paths produce identically scored rows.
    """
    n_p, n_o = benefit.shape
    if n_p == 0:
        return np.empty(0, dtype=int)
    n = n_p + n_o
    neg_inf = -math.inf
    # row value lists of the square problem, -inf for inadmissible pairs
    rows: list[list[float]] = []
    for i in range(n_p):
        row = [float(b) if np.isfinite(b) else neg_inf for b in benefit[i]]
        row += [neg_inf] * n_p
        row[n_o + i] = 0.0                               # personal null
        rows.append(row)
    for j in range(n_o):
        row = [neg_inf] * n
        row[j] = 0.0                                     # object agent
        for i in range(n_p):
            row[n_o + i] = 0.0                           # agents absorb unused nulls
        rows.append(row)
    finite = benefit[np.isfinite(benefit)]
    span = float(np.max(np.abs(finite))) if len(finite) else 1.0
    eps_final = 1e-9 / (n + 1)
    eps = max(span / 2.0, eps_final)
    prices = [0.0] * n
    assign = [-3] * n
    guard = 200000 + 2000 * n * n
    while True:
        for i in range(n):
            assign[i] = -3
        owner = [-1] * n
        queue = list(range(n))
        while queue:
            guard -= 1
            if guard <= 0:
                raise RuntimeError("auction failed to terminate")
            i = queue.pop()
            row = rows[i]
            v_best = v_second = neg_inf
            j_best = -1
            for j in range(n):
                v = row[j] - prices[j]
                if v > v_best:
                    v_second = v_best
                    v_best = v
                    j_best = j
                elif v > v_second:
                    v_second = v
            bid = (v_best - v_second + eps) if v_second > neg_inf else eps
            prices[j_best] += bid
            prev = owner[j_best]
            if prev >= 0:
                assign[prev] = -3
                queue.append(prev)
            owner[j_best] = i
            assign[i] = j_best
        if eps <= eps_final:
            break
        eps = max(eps / 16.0, eps_final)
    out = np.array(assign[:n_p], dtype=int)
    return np.where(out < n_o, out, -1)


def associate(particle: MultiObjectParticle, measurements, components: list[MBComponent],
              cfg: TrackerConfig) -> tuple[dict[int, int], float]:
    """Most probable association event for one particle and its log-likelihood."""
    z = _as_measurement_array(measurements)
    density = MBDensity(list(components))
    work = _EpochWork(density, z, cfg)
    included = np.zeros(density.count, dtype=bool)
    for i in particle.inclusion_set:
        included[i] = True
    assign, log_l = work.associate_included(included)
    theta = {i: (int(assign[i]) + 1 if assign[i] >= 0 else 0)
             for i in range(density.count) if included[i]}
    return theta, log_l


def _as_measurement_array(measurements) -> np.ndarray:
    if hasattr(measurements, "as_array"):
        return measurements.as_array()
    z = np.asarray(measurements, dtype=float)
    return z.reshape(-1, 2) if z.size else np.empty((0, 2))


def merge_posterior(particles: list[MultiObjectParticle], predicted: MBDensity,
                    measurements, cfg: TrackerConfig) -> MBDensity:
    """Moment-matched multi-Bernoulli from weighted, associated particles.

    Component weight is the particle mass that includes it; mean and
    covariance average the per-particle conditional updates, covariance
    picking up the spread-of-means term.
    """
    z = _as_measurement_array(measurements)
    work = _EpochWork(predicted, z, cfg)
    n = predicted.count
    omega = np.zeros((n, work.nz + 1))  # column 0 = undetected
    for p in particles:
        for i in p.inclusion_set:
            j = p.association.get(i, 0)
            omega[i, j] += p.particle_weight
    return _merge_from_omega(omega, predicted, work)


def _merge_from_omega(omega: np.ndarray, predicted: MBDensity, work: _EpochWork) -> MBDensity:
    out = []
    for i, comp in enumerate(predicted.components):
        w_i = float(np.sum(omega[i]))
        if w_i <= 0.0:
            out.append(replace(comp, weight=0.0))
            continue
        means = [comp.mean] + [work.post_means[i, j] for j in range(work.nz)]
        covs = [comp.cov] + [work.post_covs[i]] * work.nz
        m_i = np.zeros(2)
        for j in range(work.nz + 1):
            if omega[i, j] > 0.0:
                m_i += omega[i, j] * means[j]
        m_i /= w_i
        p_i = np.zeros((2, 2))
        for j in range(work.nz + 1):
            if omega[i, j] > 0.0:
                d = means[j] - m_i
                p_i += omega[i, j] * (covs[j] + np.outer(d, d))
        p_i /= w_i
        out.append(replace(comp, weight=min(w_i, 1.0), mean=m_i, cov=ensure_psd(p_i)))
    return MBDensity(out, epoch=predicted.epoch)


def prune_confirm(density: MBDensity, cfg: TrackerConfig) -> tuple[MBDensity, list[PathState], int]:
    """Drop weak components, latch confirmation, report currently existing paths."""
    kept = []
    estimates = []
    for comp in density.components:
        if comp.weight < cfg.prune_tau_p:
            continue
        if comp.weight > cfg.confirm_tau_c:
            comp = replace(comp, confirmed=True)
        kept.append(comp)
        if comp.confirmed and comp.weight > cfg.exist_tau_e:
            estimates.append(comp.state())
    return MBDensity(kept, epoch=density.epoch), estimates, len(estimates)


@dataclass
class TrackStepResult:
    state: TrackerState
    estimates: list[PathState]
    n_hat: int
    map_association: dict[int, int]  # track_id -> measurement index (0 = missed)


def track_step(state: TrackerState, measurement_set, cfg: TrackerConfig,
               scenario: ScenarioConfig, rng, validate: bool = False) -> TrackStepResult:
    """One full recursion over a measurement set; deterministic given rng."""
    z = _as_measurement_array(measurement_set)
    amps = getattr(measurement_set, "amplitudes", lambda: [None] * len(z))()

    predicted = predict(state.density, cfg, scenario)
    n = predicted.count

    if n:
        work = _EpochWork(predicted, z, cfg)
        inc = _sample_inclusion(predicted, cfg.num_particles_m, rng)
        masks, counts = np.unique(inc, axis=0, return_counts=True)
        assigns = []
        log_ls = np.empty(len(masks))
        for g, mask in enumerate(masks):
            assign, log_l = work.associate_included(mask)
            assigns.append(assign)
            log_ls[g] = log_l
        log_mass = log_ls + np.log(counts)
        log_norm = float(np.logaddexp.reduce(log_mass))
        mass = np.exp(log_mass - log_norm)

        omega = np.zeros((n, work.nz + 1))
        for g, mask in enumerate(masks):
            w_g = mass[g]
            for i in np.nonzero(mask)[0]:
                j = assigns[g][i]
                omega[i, 0 if j < 0 else j + 1] += w_g
        posterior = _merge_from_omega(omega, predicted, work)

        g_map = int(np.argmax(log_ls))
        map_assign = assigns[g_map]
        used = set(int(j) for j in map_assign if j >= 0)
        for i, comp in enumerate(posterior.components):
            if map_assign[i] >= 0 and amps[map_assign[i]] is not None:
                comp.amplitude = float(amps[map_assign[i]])
    else:
        posterior = MBDensity([], epoch=predicted.epoch)
        map_assign = np.empty(0, dtype=int)
        used = set()

    pruned, estimates, n_hat = prune_confirm(posterior, cfg)

    unassoc = [(z[j, 0], z[j, 1], amps[j]) for j in range(len(z)) if j not in used]
    babies = birth(unassoc, cfg, start_id=state.next_track_id)
    next_id = state.next_track_id + len(babies)
    new_density = MBDensity(pruned.components + babies, epoch=predicted.epoch)

    if validate:
        _check_invariants(new_density)

    map_by_track = {}
    for i, comp in enumerate(posterior.components):
        map_by_track[comp.track_id] = int(map_assign[i]) + 1 if map_assign[i] >= 0 else 0

    return TrackStepResult(state=TrackerState(new_density, next_id),
                           estimates=estimates, n_hat=n_hat,
                           map_association=map_by_track)


def _check_invariants(density: MBDensity) -> None:
    for comp in density.components:
        if not (0.0 <= comp.weight <= 1.0) or not np.isfinite(comp.weight):
            raise AssertionError(f"weight out of [0,1]: {comp.weight}")
        if not np.all(np.isfinite(comp.mean)) or not np.all(np.isfinite(comp.cov)):
            raise AssertionError("non-finite component state")
        if not np.allclose(comp.cov, comp.cov.T):
            raise AssertionError("covariance not symmetric")
        if np.linalg.eigvalsh(comp.cov)[0] < -1e-12:
            raise AssertionError("covariance not PSD")


def init_state() -> TrackerState:
    return TrackerState(MBDensity([], epoch=0), next_track_id=0)


def run_tracker(measurement_sets, cfg: TrackerConfig, scenario: ScenarioConfig, rng,
                validate: bool = False):
    """Convenience wrapper: iterate track_step over an epoch-ordered sequence."""
    state = init_state()
    results = []
    for mset in measurement_sets:
        res = track_step(state, mset, cfg, scenario, rng, validate=validate)
        state = res.state
        results.append(res)
    return results
