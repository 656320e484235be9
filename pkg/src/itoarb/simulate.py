"""Monte Carlo engine and ensemble estimators of stochastic derivatives.

Paths follow the log-Euler scheme for
``dS = S (alpha dt + sigma dW)``; forward, backward and mean stochastic
derivatives of path functionals are estimated by nearest-neighbour
regression on the present state (valid for Markov functionals of the
simulated state).  On top of these sit the portfolio instantaneous-return
estimator, the empirical arbitrage measure and the self-financing residual.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .gauges import Gauge, PortfolioNominals, forward_rate, short_rate
from .geometry import ItoCoefficients, kernel_basis

__all__ = [
    "PathEnsemble",
    "EstimatorConfig",
    "NelsonEstimates",
    "simulate",
    "brownian_paths",
    "nelson_derivatives",
    "instantaneous_return",
    "empirical_rho",
    "RhoEstimate",
    "self_financing_residual",
    "SelfFinancingReport",
    "save_ensemble",
    "load_ensemble",
    "ensemble_to_csv",
]

MAGIC = b"GATE"
FORMAT_VERSION = 1
_CHUNK = 4096  # paths per RNG stream (see _normal_chunks)


def _frozen(a) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=float))
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class PathEnsemble:
    """Simulated asset states and their driving noise.

    ``states`` has shape (M, n_steps + 1, N) and stays strictly positive by
    construction of the log scheme; ``noise`` is the Brownian state with
    shape (M, n_steps + 1, K) and zero initial value.
    """

    states: np.ndarray
    noise: np.ndarray
    dt: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states))
        object.__setattr__(self, "noise", _frozen(self.noise))
        if self.states.ndim != 3 or self.noise.ndim != 3:
            raise ValueError("states and noise must be (M, n_times, dim) arrays")
        if self.states.shape[:2] != self.noise.shape[:2]:
            raise ValueError("states and noise must share (M, n_times)")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_assets(self) -> int:
        return self.states.shape[2]

    @property
    def n_drivers(self) -> int:
        return self.noise.shape[2]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[1]) * self.dt


@dataclass(frozen=True)
class EstimatorConfig:
    """Controls for the conditional-expectation estimators.

    ``lag`` is the difference-quotient horizon (>= dt; default 5 dt trades
    O(lag) bias against variance), ``neighbors`` the regression neighbourhood
    (>= 8), and ``t_min`` the earliest admissible estimation time (>= 10 dt;
    the 1/(2t) noise correction is applied analytically, never estimated).
    """

    lag: float
    neighbors: int
    t_min: float

    def __post_init__(self):
        if self.neighbors < 8:
            raise ValueError("need at least 8 neighbors")
        if self.lag <= 0 or self.t_min <= 0:
            raise ValueError("lag and t_min must be positive")

    @classmethod
    def for_ensemble(cls, ens: PathEnsemble, lag_steps: int = 5) -> "EstimatorConfig":
        return cls(
            lag=lag_steps * ens.dt,
            neighbors=max(8, ens.n_paths // 200),
            t_min=10 * ens.dt,
        )

    def validate_against(self, dt: float) -> None:
        if self.lag < dt - 1e-12:
            raise ValueError("lag must be at least one time step")
        if self.t_min < 10 * dt - 1e-12:
            raise ValueError("t_min must be at least 10 time steps")


def _normal_chunks(seed: int, m_paths: int, n_steps: int, k: int):
    """Yield (lo, hi, increments) blocks of standard normals, (hi-lo, n_steps, K).

    Splitting rule: the master ``SeedSequence(seed)`` spawns one child stream
    per block of 4096 consecutive paths, so path blocks are independent,
    reproducible for a given seed, and generation can run block-parallel.
    """
    n_chunks = (m_paths + _CHUNK - 1) // _CHUNK
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    for c, child in enumerate(children):
        lo = c * _CHUNK
        hi = min(lo + _CHUNK, m_paths)
        rng = np.random.default_rng(child)
        yield lo, hi, rng.standard_normal((hi - lo, n_steps, k))


def _schedule_arrays(model, n_steps: int):
    """Per-step (alpha, sigma, r) arrays from a constant model or a sequence."""
    if isinstance(model, ItoCoefficients):
        alpha = np.broadcast_to(model.alpha, (n_steps,) + model.alpha.shape)
        sigma = np.broadcast_to(model.sigma, (n_steps,) + model.sigma.shape)
        rates = np.broadcast_to(model.r, (n_steps,) + model.r.shape)
        return alpha, sigma, rates
    models = list(model)
    if len(models) != n_steps:
        raise ValueError(f"schedule must supply {n_steps} coefficient sets")
    alpha = np.stack([m.alpha for m in models])
    sigma = np.stack([m.sigma for m in models])
    rates = np.stack([m.r for m in models])
    return alpha, sigma, rates


def simulate(
    model,
    m_paths: int,
    dt: float,
    horizon: float,
    seed: int,
    s0=None,
) -> PathEnsemble:
    """Log-Euler ensemble: ``S_{t+dt} = S_t exp((alpha - diag(sigma sigma^T)/2) dt
    + sigma dW)``.  Bitwise reproducible for a given seed.

    ``model`` is a constant :class:`~itoarb.geometry.ItoCoefficients` or a
    per-step sequence of them sampled on the time grid.
    """
    n_steps = int(round(horizon / dt))
    if n_steps < 1 or abs(n_steps * dt - horizon) > 1e-9 * max(horizon, 1.0):
        raise ValueError("horizon must be an integer number of steps")
    alpha, sigma, _ = _schedule_arrays(model, n_steps)
    n, k = sigma.shape[1], sigma.shape[2]
    if s0 is None:
        s0 = np.ones(n)
    s0 = np.asarray(s0, dtype=float)

    states = np.empty((m_paths, n_steps + 1, n))
    noise = np.empty((m_paths, n_steps + 1, k))
    ito = 0.5 * np.einsum("tnk,tnk->tn", sigma, sigma)  # diag(sigma sigma^T)/2
    drift = (alpha - ito) * dt
    for lo, hi, z in _normal_chunks(seed, m_paths, n_steps, k):
        dw = z * np.sqrt(dt)
        noise[lo:hi, 0] = 0.0
        np.cumsum(dw, axis=1, out=noise[lo:hi, 1:])
        dlog = drift[None, :, :] + np.einsum("mtk,tnk->mtn", dw, sigma)
        logs = np.cumsum(dlog, axis=1)
        states[lo:hi, 0] = s0
        states[lo:hi, 1:] = s0[None, None, :] * np.exp(logs)
    return PathEnsemble(states, noise, dt, seed)


def brownian_paths(m_paths: int, dt: float, horizon: float, seed: int, k: int = 1) -> np.ndarray:
    """Plain Brownian paths, (M, n_steps + 1, K), same splitting rule as
    :func:`simulate`."""
    n_steps = int(round(horizon / dt))
    noise = np.empty((m_paths, n_steps + 1, k))
    for lo, hi, z in _normal_chunks(seed, m_paths, n_steps, k):
        noise[lo:hi, 0] = 0.0
        np.cumsum(z * np.sqrt(dt), axis=1, out=noise[lo:hi, 1:])
    return noise


@dataclass(frozen=True)
class NelsonEstimates:
    """Per-time conditional derivative estimates evaluated at each path's state.

    ``forward[i]``, ``backward[i]`` and ``mean[i]`` are length-M arrays for
    estimation time ``times[i]``; ``se`` is the standard error of the
    ensemble mean computed from the raw (unsmoothed) difference quotients,
    since neighbour averaging does not reduce the sampling error of the
    mean.  ``raw_mean_responses`` keeps those quotients for downstream use.
    """

    times: np.ndarray
    forward: np.ndarray
    backward: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    raw_mean_responses: np.ndarray


def _neighbor_indices(state: np.ndarray, k: int) -> np.ndarray:
    """k-nearest-neighbour indices on the standardized state, (M, k)."""
    if state.ndim == 1:
        state = state[:, None]
    m = state.shape[0]
    if k > m:
        raise ValueError(f"insufficient neighbors: requested {k} of {m} paths")
    scale = state.std(axis=0)
    scale = np.where(scale == 0.0, 1.0, scale)
    scaled = state / scale
    tree = cKDTree(scaled)
    _, idx = tree.query(scaled, k=k)
    return np.atleast_2d(idx)


def _gathered_means(idx: np.ndarray, responses: np.ndarray, block: int = 16384) -> np.ndarray:
    """Neighbourhood means of a response vector, gathering in blocks to keep
    the (M, k) index expansion memory-bounded."""
    out = np.empty(idx.shape[0])
    for lo in range(0, idx.shape[0], block):
        hi = min(lo + block, idx.shape[0])
        out[lo:hi] = responses[idx[lo:hi]].mean(axis=1)
    return out


def _knn_mean(state: np.ndarray, responses: np.ndarray, k: int) -> np.ndarray:
    return _gathered_means(_neighbor_indices(state, k), responses)


def nelson_derivatives(
    values: np.ndarray,
    state: np.ndarray,
    dt: float,
    cfg: EstimatorConfig,
    t_indices,
) -> NelsonEstimates:
    """Forward, backward and mean stochastic derivatives of a path functional.

    ``values`` is (M, n_times); ``state`` is (M, n_times, d) and must carry
    the Markov state the functional depends on; conditioning is k-nearest-
    neighbour regression on the present state.  Estimation times must satisfy
    ``t >= max(cfg.t_min, cfg.lag)``.
    """
    values = np.asarray(values, dtype=float)
    state = np.asarray(state, dtype=float)
    if values.ndim != 2 or state.ndim != 3 or state.shape[:2] != values.shape:
        raise ValueError("values must be (M, n_times) and state (M, n_times, d)")
    cfg.validate_against(dt)
    m = int(round(cfg.lag / dt))
    t_indices = np.atleast_1d(np.asarray(t_indices, dtype=int))
    n_times = values.shape[1]
    out_f, out_b, out_m, out_se, out_raw = [], [], [], [], []
    for i in t_indices:
        t = i * dt
        if t < cfg.t_min - 1e-12:
            raise ValueError(f"estimation time {t} below t_min {cfg.t_min}")
        if i - m < 0 or i + m >= n_times:
            raise ValueError("lag window leaves the simulated horizon")
        fq = (values[:, i + m] - values[:, i]) / cfg.lag
        bq = (values[:, i] - values[:, i - m]) / cfg.lag
        idx = _neighbor_indices(state[:, i, :], cfg.neighbors)
        d_f = _gathered_means(idx, fq)
        d_b = _gathered_means(idx, bq)
        raw = 0.5 * (fq + bq)
        out_f.append(d_f)
        out_b.append(d_b)
        out_m.append(0.5 * (d_f + d_b))
        out_se.append(raw.std(ddof=1) / np.sqrt(raw.size))
        out_raw.append(raw)
    return NelsonEstimates(
        times=t_indices * dt,
        forward=np.stack(out_f),
        backward=np.stack(out_b),
        mean=np.stack(out_m),
        se=np.asarray(out_se),
        raw_mean_responses=np.stack(out_raw),
    )


def instantaneous_return(
    ens: PathEnsemble,
    x: PortfolioNominals,
    gauges,
    cfg: EstimatorConfig,
    t_indices,
):
    """Expected instantaneous growth of the synthetic-bond portfolio.

    Estimates the mean stochastic derivative of ``log(x . S_t)`` from the
    ensemble and adds the portfolio short rate; the gauges supply the term
    structures (their deflator components are superseded by the simulated
    paths), with per-path value weights.  Returns (times, mean, se).
    """
    if len(gauges) != ens.n_assets:
        raise ValueError("one gauge per simulated asset required")
    t_indices = np.atleast_1d(np.asarray(t_indices, dtype=int))
    wealth = np.einsum("mtn,n->mt", ens.states, x.x)
    if np.any(np.abs(wealth) <= 0.0):
        raise ValueError("portfolio deflator vanishes along some path")
    est = nelson_derivatives(np.log(np.abs(wealth)), ens.states, ens.dt, cfg, t_indices)
    rates = np.stack(
        [short_rate(forward_rate(g)) for g in gauges], axis=1
    )  # (n_gauge_times, N)
    mean = np.empty(t_indices.size)
    se = np.empty(t_indices.size)
    for j, i in enumerate(t_indices):
        g_row = _gauge_row_for_time(gauges[0], i * ens.dt)
        w = ens.states[:, i, :] * x.x / wealth[:, i][:, None]
        rx = w @ rates[g_row]
        vals = est.mean[j] + rx
        raw = est.raw_mean_responses[j] + rx
        mean[j] = vals.mean()
        se[j] = raw.std(ddof=1) / np.sqrt(raw.size)
    return est.times, mean, se


def _gauge_row_for_time(g: Gauge, t: float) -> int:
    i = int(np.argmin(np.abs(g.times - t)))
    if abs(g.times[i] - t) > 1e-9 + 1e-6 * max(t, 1.0):
        raise ValueError(f"gauge time grid does not cover t={t}")
    return i


@dataclass(frozen=True)
class RhoEstimate:
    """Empirical arbitrage measure per time bucket, with standard errors."""

    times: np.ndarray
    estimate: np.ndarray  # (n_times, B)
    se: np.ndarray        # (n_times, B)
    B: int


def empirical_rho(
    ens: PathEnsemble,
    model: ItoCoefficients,
    cfg: EstimatorConfig,
    t_indices,
) -> RhoEstimate:
    """Estimate the arbitrage measure from simulated paths.

    Per asset, the mean stochastic derivative of the log price is estimated
    by conditional regression; the correction
    ``+ diag(sigma sigma^T)/2 - sigma W_t/(2t)`` (the latter exact, from the
    stored noise) recovers drift plus rate per path, which is projected onto
    the kernel basis and averaged per time bucket.  With B = 0 the estimate
    is empty.  Standard errors come from the dispersion of the raw projected
    difference quotients.
    """
    t_indices = np.atleast_1d(np.asarray(t_indices, dtype=int))
    basis = kernel_basis(model.sigma)
    if basis.B == 0:
        empty = np.zeros((t_indices.size, 0))
        return RhoEstimate(t_indices * ens.dt, empty, empty.copy(), 0)
    cfg.validate_against(ens.dt)
    lag_steps = int(round(cfg.lag / ens.dt))
    ito = 0.5 * np.einsum("nk,nk->n", model.sigma, model.sigma)
    logs = np.log(ens.states)
    n = ens.n_assets
    out = np.empty((t_indices.size, basis.B))
    se = np.empty((t_indices.size, basis.B))
    for j, i in enumerate(t_indices):
        t = i * ens.dt
        if t < cfg.t_min - 1e-12:
            raise ValueError(f"estimation time {t} below t_min {cfg.t_min}")
        if i - lag_steps < 0 or i + lag_steps >= logs.shape[1]:
            raise ValueError("lag window leaves the simulated horizon")
        # one neighbourhood query per time, shared by assets and directions
        idx = _neighbor_indices(ens.states[:, i, :], cfg.neighbors)
        est_mean = np.empty((ens.n_paths, n))
        raw_mean = np.empty((ens.n_paths, n))
        for a in range(n):
            fq = (logs[:, i + lag_steps, a] - logs[:, i, a]) / cfg.lag
            bq = (logs[:, i, a] - logs[:, i - lag_steps, a]) / cfg.lag
            est_mean[:, a] = 0.5 * (_gathered_means(idx, fq) + _gathered_means(idx, bq))
            raw_mean[:, a] = 0.5 * (fq + bq)
        w_corr = ens.noise[:, i, :] / (2.0 * t)  # exact, never estimated
        alpha_hat = est_mean + ito[None, :] - w_corr @ model.sigma.T
        raw_hat = raw_mean + ito[None, :] - w_corr @ model.sigma.T
        proj = (alpha_hat + model.r[None, :]) @ basis.J
        raw_proj = (raw_hat + model.r[None, :]) @ basis.J
        out[j] = proj.mean(axis=0)
        se[j] = raw_proj.std(axis=0, ddof=1) / np.sqrt(raw_proj.shape[0])
    return RhoEstimate(t_indices * ens.dt, out, se, basis.B)


@dataclass(frozen=True)
class SelfFinancingReport:
    """Residual of the self-financing identity per time bucket.

    ``residual`` estimates ``D(x . S) - x . DS`` (mean derivatives); for a
    self-financing continuous strategy it vanishes.  The backward derivative
    of the discrete covariation between strategy and prices is estimated and
    reported separately in ``covariation_term`` (it is zero for
    continuous-path strategies but the estimator computes it regardless).
    """

    times: np.ndarray
    residual: np.ndarray
    residual_se: np.ndarray
    covariation_term: np.ndarray


def self_financing_residual(
    x_paths: np.ndarray,
    ens: PathEnsemble,
    cfg: EstimatorConfig,
    t_indices,
) -> SelfFinancingReport:
    """Check a sampled strategy against the self-financing identity.

    ``x_paths`` is (M, n_times, N) or (n_times, N) for deterministic
    strategies, sampled on the ensemble grid.  The residual is estimated from
    the combined pathwise response (wealth quotient minus the hedge quotient
    at the current holdings): conditional expectation is linear, so this is
    the same quantity as the difference of the separately smoothed
    derivatives, but free of cross-neighbourhood bias for path-dependent
    strategies.
    """
    x_paths = np.asarray(x_paths, dtype=float)
    if x_paths.ndim == 2:
        x_paths = np.broadcast_to(x_paths, (ens.n_paths,) + x_paths.shape)
    if x_paths.shape != ens.states.shape:
        raise ValueError("strategy grid does not match the ensemble grid")
    cfg.validate_against(ens.dt)
    t_indices = np.atleast_1d(np.asarray(t_indices, dtype=int))
    d = ens.states
    m = int(round(cfg.lag / ens.dt))
    wealth = np.einsum("mtn,mtn->mt", x_paths, d)
    # running discrete covariation sum_j sum_steps dx_j dD_j
    cov = np.zeros((ens.n_paths, d.shape[1]))
    cov[:, 1:] = np.cumsum(
        np.einsum("mtn,mtn->mt", np.diff(x_paths, axis=1), np.diff(d, axis=1)), axis=1
    )

    residual = np.empty(t_indices.size)
    residual_se = np.empty(t_indices.size)
    cov_term = np.empty(t_indices.size)
    for j, i in enumerate(t_indices):
        t = i * ens.dt
        if t < cfg.t_min - 1e-12:
            raise ValueError(f"estimation time {t} below t_min {cfg.t_min}")
        if i - m < 0 or i + m >= d.shape[1]:
            raise ValueError("lag window leaves the simulated horizon")
        wealth_q = (wealth[:, i + m] - wealth[:, i - m]) / (2 * cfg.lag)
        hedge_q = np.einsum(
            "mn,mn->m", x_paths[:, i, :], d[:, i + m, :] - d[:, i - m, :]
        ) / (2 * cfg.lag)
        responses = wealth_q - hedge_q
        smoothed = _knn_mean(d[:, i, :], responses, cfg.neighbors)
        residual[j] = smoothed.mean()
        residual_se[j] = responses.std(ddof=1) / np.sqrt(responses.size)
        back_cov = (cov[:, i] - cov[:, i - m]) / cfg.lag
        cov_term[j] = 0.5 * back_cov.mean()
    return SelfFinancingReport(t_indices * ens.dt, residual, residual_se, cov_term)


# ---------------------------------------------------------------------------
# persistence

_HEADER = struct.Struct("<4sIQIIQdQ")  # magic, version, M, N, K, steps, dt, seed


def save_ensemble(ens: PathEnsemble, path) -> None:
    """Flat binary layout: header then states then noise, little-endian
    float64 in C order."""
    n_steps = ens.states.shape[1] - 1
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        ens.n_paths,
        ens.n_assets,
        ens.n_drivers,
        n_steps,
        ens.dt,
        ens.seed & 0xFFFFFFFFFFFFFFFF,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ens.states.astype("<f8").tobytes(order="C"))
        fh.write(ens.noise.astype("<f8").tobytes(order="C"))


def load_ensemble(path) -> PathEnsemble:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, version, m, n, k, steps, dt, seed = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError("not an ensemble file (bad magic)")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported ensemble format version {version}")
        n_states = m * (steps + 1) * n
        n_noise = m * (steps + 1) * k
        states = np.frombuffer(fh.read(n_states * 8), dtype="<f8").reshape(
            m, steps + 1, n
        )
        noise = np.frombuffer(fh.read(n_noise * 8), dtype="<f8").reshape(
            m, steps + 1, k
        )
    return PathEnsemble(states, noise, float(dt), int(seed))


def ensemble_to_csv(ens: PathEnsemble, path, max_paths: int | None = None) -> None:
    """Long-format CSV export for small runs: path, t, S_1..S_N, W_1..W_K."""
    m = ens.n_paths if max_paths is None else min(max_paths, ens.n_paths)
    times = ens.times
    with open(path, "w", newline="") as fh:
        cols = (
            ["path", "t"]
            + [f"S_{j + 1}" for j in range(ens.n_assets)]
            + [f"W_{j + 1}" for j in range(ens.n_drivers)]
        )
        fh.write(",".join(cols) + "\n")
        for p in range(m):
            for i, t in enumerate(times):
                row = [str(p), f"{t:.12g}"]
                row += [f"{v:.12g}" for v in ens.states[p, i]]
                row += [f"{v:.12g}" for v in ens.noise[p, i]]
                fh.write(",".join(row) + "\n")
