"""Noisy-ensemble generation, averaged noisy logits, and calibration statistics.

Noisy replicas are x + epsilon * v with v ~ N(0, I), clipped into [-1, 1]
before the network sees them.  Each sample draws from its own substream
keyed by (seed, sample index), so per-sample results do not depend on
processing order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import Model
from .seeding import substream


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseConfig:
    epsilon: float
    count: int = 128
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"noise epsilon must be positive, got {self.epsilon}")
        if self.count < 1:
            raise ValueError(f"replica count must be at least 1, got {self.count}")


@dataclass
class LogitSummary:
    clean_logits: np.ndarray
    mean_noisy_logits: np.ndarray
    replica_logits: np.ndarray | None = None


@dataclass
class CalibrationStats:
    """Per ordered class pair (y, z), y != z: mean and std of the logit gain.

    The gain for a sample predicted y is
    g_{y,z} = [f_z(x+delta) - f_y(x+delta)] - [f_z(x) - f_y(x)],
    pooled over calibration samples and noise replicas.  Std uses the
    population (1/N) convention and is floored at ``SIGMA_FLOOR`` so that
    degenerate pairs never divide by zero.
    """

    mu: np.ndarray
    sigma: np.ndarray
    counts: np.ndarray
    epsilon: float

    SIGMA_FLOOR = 1e-8

    @property
    def k(self) -> int:
        return self.mu.shape[0]


def replica_rng(cfg: NoiseConfig, sample_index: int = 0) -> np.random.Generator:
    return substream(cfg.seed, "noise-replicas", sample_index)


def make_noisy(
    x: np.ndarray,
    cfg: NoiseConfig,
    sample_index: int = 0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """cfg.count clipped noisy replicas of x, shape (count, d)."""
    x = np.asarray(x, dtype=np.float64)
    if rng is None:
        rng = replica_rng(cfg, sample_index)
    noise = rng.standard_normal((cfg.count, x.shape[-1]))
    return np.clip(x + cfg.epsilon * noise, -1.0, 1.0)


def logit_summary(
    model: Model,
    x: np.ndarray,
    cfg: NoiseConfig,
    sample_index: int = 0,
    keep_replicas: bool = False,
) -> LogitSummary:
    clean = model.logits(x)
    replicas = model.logits(make_noisy(x, cfg, sample_index))
    return LogitSummary(
        clean_logits=clean,
        mean_noisy_logits=replicas.mean(axis=0),
        replica_logits=replicas if keep_replicas else None,
    )


def batched_summaries(
    model: Model,
    X: np.ndarray,
    cfg: NoiseConfig,
    sample_indices,
    chunk: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """(clean logits, mean noisy logits) for a batch; one substream per sample."""
    X = np.asarray(X, dtype=np.float64)
    sample_indices = np.asarray(sample_indices)
    clean = model.logits(X)
    noisy = np.empty_like(clean)
    for start in range(0, len(X), chunk):
        rows = range(start, min(start + chunk, len(X)))
        stacked = np.concatenate(
            [make_noisy(X[i], cfg, int(sample_indices[i])) for i in rows], axis=0
        )
        z = model.logits(stacked).reshape(len(rows), cfg.count, model.k)
        noisy[list(rows)] = z.mean(axis=1)
    return clean, noisy


def benign_calibration(
    model: Model,
    X: np.ndarray,
    cfg: NoiseConfig,
    sample_indices,
    min_pair_obs: int = 30,
) -> CalibrationStats:
    """Pool the logit gain over benign samples and replicas, per ordered pair.

    Samples are grouped by the model's predicted class; every replica of a
    sample predicted y contributes one observation to each pair (y, z).
    """
    X = np.asarray(X, dtype=np.float64)
    sample_indices = np.asarray(sample_indices)
    k = model.k
    total = np.zeros((k, k))
    total_sq = np.zeros((k, k))
    counts = np.zeros((k, k), dtype=np.int64)

    clean = model.logits(X)
    preds = np.argmax(clean, axis=1)
    for i in range(len(X)):
        y_f = int(preds[i])
        zn = model.logits(make_noisy(X[i], cfg, int(sample_indices[i])))
        gains = (zn - zn[:, y_f][:, None]) - (clean[i] - clean[i, y_f])[None, :]
        total[y_f] += gains.sum(axis=0)
        total_sq[y_f] += (gains * gains).sum(axis=0)
        counts[y_f] += cfg.count

    off_diag = ~np.eye(k, dtype=bool)
    short = counts < min_pair_obs
    if np.any(short & off_diag):
        y, z = np.argwhere(short & off_diag)[0]
        raise CalibrationError(
            f"class pair (y={y}, z={z}) has {counts[y, z]} pooled observations; "
            f"need at least {min_pair_obs} for calibration"
        )
    safe = np.maximum(counts, 1)
    mu = total / safe
    var = np.maximum(total_sq / safe - mu * mu, 0.0)
    sigma = np.maximum(np.sqrt(var), CalibrationStats.SIGMA_FLOOR)
    mu[~off_diag] = 0.0
    sigma[~off_diag] = CalibrationStats.SIGMA_FLOOR
    return CalibrationStats(mu=mu, sigma=sigma, counts=counts, epsilon=cfg.epsilon)


def probability_curve(
    model: Model,
    x: np.ndarray,
    epsilons,
    count: int,
    seed: int,
    sample_index: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean class probabilities of noisy replicas, one row per epsilon."""
    x = np.asarray(x, dtype=np.float64)
    epsilons = [float(e) for e in epsilons]
    rows = np.empty((len(epsilons), model.k))
    for e_idx, eps in enumerate(epsilons):
        cfg = NoiseConfig(epsilon=eps, count=count, seed=seed)
        rng = substream(seed, f"curve-noise-{e_idx}", sample_index)
        z = model.logits(make_noisy(x, cfg, rng=rng))
        shifted = z - z.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        rows[e_idx] = probs.mean(axis=0)
    return np.asarray(epsilons), rows


@dataclass
class ConeGrid:
    """Mean true-class probability over the plane spanned by the attack
    direction and re-sampled random orthogonal directions."""

    alphas: np.ndarray
    betas: np.ndarray
    values: np.ndarray


def cone_probe(
    model: Model,
    x: np.ndarray,
    x_adv: np.ndarray,
    y_true: int,
    radial_steps: int = 13,
    angular_samples: int = 32,
    seed: int = 0,
) -> ConeGrid:
    """Probability map around x: alpha walks the adversarial direction
    (alpha=0 is x, alpha=1 is x_adv), beta walks a random orthogonal
    direction re-sampled per angular sample; every point is clipped into
    [-1, 1]^d before evaluation."""
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    delta = x_adv - x
    radius = float(np.linalg.norm(delta))
    if radius == 0.0:
        raise ValueError("x_adv equals x; the adversarial direction is undefined")
    u = delta / radius

    alphas = np.linspace(-1.0, 2.0, radial_steps)
    betas = np.linspace(0.0, 2.0, radial_steps)
    rng = substream(seed, "cone-directions")
    acc = np.zeros((radial_steps, radial_steps))
    for _ in range(angular_samples):
        w = rng.standard_normal(len(x))
        w -= (w @ u) * u
        norm = np.linalg.norm(w)
        while norm < 1e-12:
            w = rng.standard_normal(len(x))
            w -= (w @ u) * u
            norm = np.linalg.norm(w)
        w /= norm
        points = (
            x[None, None, :]
            + radius * alphas[:, None, None] * u[None, None, :]
            + radius * betas[None, :, None] * w[None, None, :]
        )
        flat = np.clip(points.reshape(-1, len(x)), -1.0, 1.0)
        z = model.logits(flat)
        shifted = z - z.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        acc += probs[:, y_true].reshape(radial_steps, radial_steps)
    return ConeGrid(alphas=alphas, betas=betas, values=acc / angular_samples)
