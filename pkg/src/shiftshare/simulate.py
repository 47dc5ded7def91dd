"""Synthetic data-generating processes and Monte Carlo coverage experiments.

The central scenario interacts complete exposure shares with exogenous
shifts and lets the error term load on the same shares through a latent
per-shift shock, so units with similar share profiles have correlated
errors. That is the regime where unit-level conventional standard errors
undercover while shift-level exposure-robust ones stay calibrated. A
network-seeding variant builds shares as inverse neighbor counts on a ring
graph with binary seeding shifts.

Randomness is organized as counter-based streams keyed by
``(seed, replication, role)``; adding estimators or reordering roles never
perturbs the draws, and every estimator inside a replication sees the same
data.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace as dc_replace
from typing import Callable, Sequence

import numpy as np

from .construct import residualize_shifts, shift_weights_from
from .data import Dataset, ShareMatrix, ShiftTable
from .errors import EstimationError, ShiftShareWarning, ValidationError
from .estimate import estimate_inverted, invert, shiftshare_2sls

SHARE_MODELS = ("dirichlet", "sparse-block", "network-inverse-degree")
SHIFT_MODELS = ("iid-normal", "clustered", "exchangeable-groups", "bernoulli")
ERROR_MODELS = ("iid", "share-correlated")

_ROLE_SHARES = 0
_ROLE_SHIFTS = 1
_ROLE_FIRST_STAGE = 2
_ROLE_ERRORS = 3


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of the synthetic shift-share data-generating process."""

    n: int
    m: int
    beta_true: float = 1.0
    seed: int = 0
    share_model: str = "dirichlet"
    dirichlet_concentration: float = 1.0
    n_blocks: int = 5
    network_neighbors: int = 1
    shift_model: str = "iid-normal"
    shift_mean: float = 0.0
    shift_sd: float = 1.0
    shift_rho: float = 0.0
    n_shift_clusters: int = 10
    n_exchange_groups: int = 1
    group_mean_spread: float = 0.0
    seeding_prob: float = 0.3
    error_model: str = "iid"
    error_sd: float = 1.0
    share_error_frac: float = 0.5
    pi_mean: float = 1.0
    pi_sd: float = 0.0
    first_stage_noise_sd: float = 0.0
    first_stage_endog: float = 0.0

    def __post_init__(self):
        if self.n < 2 or self.m < 2:
            raise ValidationError("need at least 2 units and 2 shifts")
        if self.share_model not in SHARE_MODELS:
            raise ValidationError(f"unknown share model {self.share_model!r}")
        if self.shift_model not in SHIFT_MODELS:
            raise ValidationError(f"unknown shift model {self.shift_model!r}")
        if self.error_model not in ERROR_MODELS:
            raise ValidationError(f"unknown error model {self.error_model!r}")
        if not 0.0 <= self.shift_rho < 1.0:
            raise ValidationError("within-cluster correlation must be in [0, 1)")
        if not 0.0 <= self.share_error_frac <= 1.0:
            raise ValidationError("share_error_frac must be in [0, 1]")
        if not 0.0 < self.seeding_prob < 1.0:
            raise ValidationError("seeding probability must be in (0, 1)")
        if not -1.0 <= self.first_stage_endog <= 1.0:
            raise ValidationError("first-stage endogeneity must be a correlation in [-1, 1]")
        if self.share_model == "network-inverse-degree" and self.n != self.m:
            raise ValidationError("network shares need m == n (shifts are seeded nodes)")
        for name in ("shift_sd", "error_sd", "pi_sd", "first_stage_noise_sd",
                     "dirichlet_concentration"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class TruthRecord:
    """Latent quantities behind one simulated draw."""

    beta_true: float
    latent_error_shock: np.ndarray | None
    pi: np.ndarray | None
    first_stage_noise: np.ndarray
    errors: np.ndarray


@dataclass(frozen=True)
class SimulatedData:
    shares: ShareMatrix
    shifts: ShiftTable
    dataset: Dataset
    instrument: np.ndarray
    truth: TruthRecord


def _stream(seed: int, *path: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(seed=np.random.SeedSequence(seed, spawn_key=tuple(path)))
    )


def _draw_shares(config: DgpConfig, rng: np.random.Generator) -> np.ndarray:
    n, m = config.n, config.m
    if config.share_model == "dirichlet":
        return rng.dirichlet(np.full(m, config.dirichlet_concentration), size=n)
    if config.share_model == "sparse-block":
        blocks = np.array_split(np.arange(m), min(config.n_blocks, m))
        assignment = rng.integers(0, len(blocks), size=n)
        w = np.zeros((n, m))
        for b, cols in enumerate(blocks):
            rows = np.flatnonzero(assignment == b)
            if rows.size:
                w[np.ix_(rows, cols)] = rng.dirichlet(
                    np.full(cols.size, config.dirichlet_concentration), size=rows.size
                )
        # re-draw units that landed in an empty block (cannot happen with
        # nonempty blocks, kept for safety)
        empty = w.sum(axis=1) == 0
        if empty.any():
            w[empty] = rng.dirichlet(np.full(m, config.dirichlet_concentration),
                                     size=int(empty.sum()))
        return w
    # network-inverse-degree on a ring: neighbors within `network_neighbors`
    k = max(1, int(config.network_neighbors))
    if 2 * k >= n:
        raise ValidationError("network neighbor span too large for the node count")
    w = np.zeros((n, n))
    offsets = [o for s in range(1, k + 1) for o in (s, -s)]
    idx = np.arange(n)
    for o in offsets:
        w[idx, (idx + o) % n] = 1.0
    return w / w.sum(axis=1, keepdims=True)


def _draw_shifts(config: DgpConfig, rng: np.random.Generator):
    m = config.m
    cluster = None
    exchange = None
    if config.shift_model == "iid-normal":
        d = config.shift_mean + config.shift_sd * rng.standard_normal(m)
    elif config.shift_model == "bernoulli":
        d = rng.random(m) < config.seeding_prob
        d = d.astype(float)
    elif config.shift_model == "clustered":
        k = min(config.n_shift_clusters, m)
        codes = np.arange(m) % k
        shock = rng.standard_normal(k)
        noise = rng.standard_normal(m)
        rho = config.shift_rho
        d = config.shift_mean + config.shift_sd * (
            math.sqrt(rho) * shock[codes] + math.sqrt(1.0 - rho) * noise
        )
        cluster = np.array([f"c{c}" for c in codes], dtype=object)
    else:  # exchangeable-groups
        g = min(config.n_exchange_groups, m)
        codes = np.arange(m) % g
        centers = config.group_mean_spread * (np.arange(g) - (g - 1) / 2.0)
        d = config.shift_mean + centers[codes] + config.shift_sd * rng.standard_normal(m)
        exchange = np.array([f"g{c}" for c in codes], dtype=object)
    return np.asarray(d, dtype=float), cluster, exchange


def generate(config: DgpConfig, _path: tuple[int, ...] = ()) -> SimulatedData:
    """Draw one dataset from the configured process; deterministic given the seed."""
    rng_w = _stream(config.seed, *_path, _ROLE_SHARES)
    rng_d = _stream(config.seed, *_path, _ROLE_SHIFTS)
    rng_fs = _stream(config.seed, *_path, _ROLE_FIRST_STAGE)
    rng_e = _stream(config.seed, *_path, _ROLE_ERRORS)

    w = _draw_shares(config, rng_w)
    d, cluster, exchange = _draw_shifts(config, rng_d)

    n, m = config.n, config.m
    u = None
    if config.error_model == "share-correlated":
        u = rng_e.standard_normal(m)
        noise = rng_e.standard_normal(n)
        mean_sq = float(np.mean(np.sum(w**2, axis=1)))
        frac = config.share_error_frac
        scale_u = math.sqrt(frac * config.error_sd**2 / mean_sq) if mean_sq > 0 else 0.0
        eps = scale_u * (w @ u) + math.sqrt(1.0 - frac) * config.error_sd * noise
    else:
        eps = config.error_sd * rng_e.standard_normal(n)

    z = w @ d
    pi = None
    if config.pi_sd > 0 or config.pi_mean != 1.0:
        pi = config.pi_mean + config.pi_sd * rng_fs.standard_normal((n, m))
        x_signal = np.sum(w * pi * d[None, :], axis=1)
    else:
        x_signal = z
    if config.first_stage_noise_sd > 0:
        rho = config.first_stage_endog
        xi = rng_fs.standard_normal(n)
        eps_sd = float(np.std(eps))
        eps_unit = eps / eps_sd if eps_sd > 0 else np.zeros(n)
        v = config.first_stage_noise_sd * (rho * eps_unit + math.sqrt(1.0 - rho**2) * xi)
    else:
        v = np.zeros(n)
    x = x_signal + v
    y = config.beta_true * x + eps

    unit_ids = tuple(f"u{i}" for i in range(n))
    shift_ids = tuple(f"s{j}" for j in range(m))
    shares = ShareMatrix(w, unit_ids, shift_ids)
    shifts = ShiftTable(d, shift_ids, cluster=cluster, exchange_group=exchange)
    dataset = Dataset(outcome=y, unit_ids=unit_ids, regressor=x)
    truth = TruthRecord(
        beta_true=config.beta_true,
        latent_error_shock=u,
        pi=pi,
        first_stage_noise=v,
        errors=eps,
    )
    return SimulatedData(shares=shares, shifts=shifts, dataset=dataset, instrument=z, truth=truth)


# ---------------------------------------------------------------------------
# coverage experiments

Estimator = Callable[[SimulatedData], tuple[float, float]]


def _conventional_hc(data: SimulatedData) -> tuple[float, float]:
    rep = shiftshare_2sls(data.dataset, data.instrument)
    return rep.beta_hat, rep.se_variants["conventional_hc"]


def _conventional_cluster(data: SimulatedData) -> tuple[float, float]:
    # arbitrary geography-style unit clusters that ignore the share structure
    n = data.dataset.n_units
    groups = max(2, n // 10)
    labels = [f"c{i % groups}" for i in range(n)]
    rep = shiftshare_2sls(data.dataset, data.instrument, cluster=labels)
    return rep.beta_hat, rep.se_variants["conventional_cluster"]


def _exposure_robust(data: SimulatedData, clustered: bool) -> tuple[float, float]:
    w_j = shift_weights_from(data.dataset, data.shares)
    res = residualize_shifts(data.shifts, (), w_j, intercept=True)
    inv = invert(data.dataset, data.shares, data.shifts, residuals=res)
    rep = estimate_inverted(inv)
    if clustered and "cluster_exposure_robust" in rep.se_variants:
        return rep.beta_hat, rep.se_variants["cluster_exposure_robust"]
    # without shift cluster labels every shift is its own cluster, which is
    # exactly the heteroskedasticity-robust variant
    return rep.beta_hat, rep.se_variants["hc_exposure_robust"]


ESTIMATORS: dict[str, Estimator] = {
    "conventional-hc": _conventional_hc,
    "conventional-cluster": _conventional_cluster,
    "exposure-robust": lambda data: _exposure_robust(data, clustered=False),
    "exposure-cluster": lambda data: _exposure_robust(data, clustered=True),
}


@dataclass(frozen=True)
class CoverageResult:
    """Monte Carlo summary of one estimator over the replications."""

    estimator: str
    replications: int
    n_failed: int
    mean_bias: float
    sd_beta: float
    mean_se: float
    coverage95: float
    rejection_rate: float

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "replications": self.replications,
            "n_failed": self.n_failed,
            "mean_bias": self.mean_bias,
            "sd_beta": self.sd_beta,
            "mean_se": self.mean_se,
            "coverage95": self.coverage95,
            "rejection_rate": self.rejection_rate,
        }


def run_coverage(
    config: DgpConfig,
    estimators: Sequence[str | tuple[str, Estimator]],
    replications: int,
    seed: int = 0,
    critical: float = 1.959963984540054,
) -> list[CoverageResult]:
    """Coverage and size of nominal 95% intervals across replications.

    Every estimator sees the identical draw within a replication;
    replication streams are keyed by ``(seed, replication)``. Estimator
    failures are caught, counted, and excluded from the summary.
    """
    if replications < 100:
        warnings.warn(
            f"only {replications} replications; coverage estimates will be noisy",
            ShiftShareWarning,
            stacklevel=2,
        )
    resolved: list[tuple[str, Estimator]] = []
    for item in estimators:
        if isinstance(item, str):
            if item not in ESTIMATORS:
                raise ValidationError(
                    f"unknown estimator {item!r}; available: {sorted(ESTIMATORS)}"
                )
            resolved.append((item, ESTIMATORS[item]))
        else:
            name, fn = item
            resolved.append((str(name), fn))

    betas = {name: [] for name, _ in resolved}
    ses = {name: [] for name, _ in resolved}
    failed = {name: 0 for name, _ in resolved}
    base = dc_replace(config, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ShiftShareWarning)
        for rep in range(replications):
            data = generate(base, _path=(rep,))
            for name, fn in resolved:
                try:
                    b, s = fn(data)
                except (EstimationError, ValidationError, np.linalg.LinAlgError):
                    failed[name] += 1
                    continue
                betas[name].append(b)
                ses[name].append(s)

    results = []
    for name, _ in resolved:
        b = np.asarray(betas[name])
        s = np.asarray(ses[name])
        if b.size == 0:
            results.append(
                CoverageResult(name, replications, failed[name],
                               float("nan"), float("nan"), float("nan"),
                               float("nan"), float("nan"))
            )
            continue
        err = b - config.beta_true
        covered = np.abs(err) <= critical * s
        results.append(
            CoverageResult(
                estimator=name,
                replications=replications,
                n_failed=failed[name],
                mean_bias=float(err.mean()),
                sd_beta=float(b.std(ddof=1)) if b.size > 1 else 0.0,
                mean_se=float(s.mean()),
                coverage95=float(covered.mean()),
                rejection_rate=float(1.0 - covered.mean()),
            )
        )
    return results
