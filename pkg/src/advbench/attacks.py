"""PGD driver and attack losses: margin (CW), noisy-input, logit mimicry, adaptive.

All losses accept a single sample (d,) or a batch (n, d); per-sample loss
values are independent, so the batched scalar is their sum and batching is
exact.  Every loss is loss-minimizing: the driver steps along
-sign(grad) and projects into the L-inf ball intersected with [-1, 1]^d.

Noise draws inside the noisy losses are clipped into [-1, 1] before the
network, matching what the detection side sees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .models import Model, one_hot
from .noise import NoiseConfig
from .seeding import substream

TARGET_RULES = ("fixed", "least-likely", "random-other")
ATTACK_KINDS = ("cw", "cw-noisy", "lma", "adaptive")

# 8/255 of a unit dynamic range, expressed on the [-1, 1] scale.
DEFAULT_EPS_MAX = 2.0 * 8.0 / 255.0
_NEG_BIG = -1e9


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    eps_max: float = DEFAULT_EPS_MAX
    eps_step: float | None = None
    steps: int = 50
    kappa: float = 50.0
    alpha: float = 0.25
    noise_draws: int = 10
    target_rule: str = "random-other"
    target_fixed: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.eps_max > 0:
            raise ValueError(f"eps_max must be positive, got {self.eps_max}")
        if self.eps_step is not None and not 0 < self.eps_step <= self.eps_max:
            raise ValueError(f"eps_step must lie in (0, eps_max], got {self.eps_step}")
        if self.steps < 0:
            raise ValueError(f"steps must be nonnegative, got {self.steps}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.noise_draws < 1:
            raise ValueError(f"noise_draws must be at least 1, got {self.noise_draws}")
        if self.target_rule not in TARGET_RULES:
            raise ValueError(f"unknown target rule {self.target_rule!r}")

    @property
    def step_size(self) -> float:
        if self.eps_step is not None:
            return self.eps_step
        # standard schedule: reach the ball boundary with slack
        return 2.5 * self.eps_max / max(self.steps, 1)


@dataclass
class LogitProfile:
    """Per-class mean logits of benign samples, grouped by predicted class.

    ``clean[y]`` is the mean clean logit vector over samples predicted y;
    ``noisy[y]`` additionally averages over noise replicas.  Classes with
    no contributing samples are marked unavailable.
    """

    clean: np.ndarray
    noisy: np.ndarray
    counts: np.ndarray
    epsilon: float
    replica_count: int

    @property
    def available(self) -> np.ndarray:
        return self.counts > 0

    def require(self, targets: np.ndarray) -> None:
        missing = np.unique(targets[~self.available[targets]])
        if missing.size:
            raise AttackError(f"logit profile unavailable for class {int(missing[0])}")


def compute_profiles(
    model: Model, X: np.ndarray, noise_cfg: NoiseConfig, sample_indices
) -> LogitProfile:
    from .noise import batched_summaries

    clean, noisy = batched_summaries(model, X, noise_cfg, sample_indices)
    preds = np.argmax(clean, axis=1)
    k = model.k
    h = np.zeros((k, k))
    h_noisy = np.zeros((k, k))
    counts = np.zeros(k, dtype=np.int64)
    for y in range(k):
        members = preds == y
        counts[y] = members.sum()
        if counts[y]:
            h[y] = clean[members].mean(axis=0)
            h_noisy[y] = noisy[members].mean(axis=0)
    return LogitProfile(
        clean=h,
        noisy=h_noisy,
        counts=counts,
        epsilon=noise_cfg.epsilon,
        replica_count=noise_cfg.count,
    )


def _as_batch(x) -> tuple[ad.Tensor, bool]:
    if isinstance(x, ad.Tensor):
        t = x
    else:
        t = ad.Tensor(x)
    if t.ndim == 1:
        return ad.reshape(t, (1, t.shape[0])), True
    return t, False


def _as_targets(y_t, n: int) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(y_t, dtype=np.int64))
    if arr.size == 1 and n > 1:
        arr = np.full(n, arr[0], dtype=np.int64)
    if arr.size != n:
        raise ValueError(f"{arr.size} targets for {n} samples")
    return arr


def cw_loss_vector(logits, y_t, kappa: float) -> ad.Tensor:
    """Per-sample margin loss (-z_target + max other z + kappa)_+.

    Zero exactly when the target logit beats every other logit by kappa;
    the hinge uses the zero subgradient on the boundary.
    """
    z, _ = _as_batch(logits)
    n, k = z.shape
    if k < 2:
        raise ValueError(f"margin loss needs at least 2 classes, got k={k}")
    targets = _as_targets(y_t, n)
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"target class out of range for k={k}")
    onehot = one_hot(targets, k)
    z_target = ad.reduce_sum(ad.multiply(z, onehot), axis=1)
    z_other = ad.reduce_max(ad.add(z, onehot * _NEG_BIG), axis=1)
    return ad.relu(ad.add(ad.subtract(z_other, z_target), float(kappa)))


def cw_loss(logits, y_t, kappa: float) -> ad.Tensor:
    """Scalar margin loss; for a batch, the sum over rows."""
    return ad.reduce_sum(cw_loss_vector(logits, y_t, kappa))


def _clipped_noisy_forward(model: Model, x_b: ad.Tensor, delta: np.ndarray) -> ad.Tensor:
    return model.forward(ad.clip(ad.add(x_b, delta), -1.0, 1.0))


def cw_noisy_loss_vector(
    model: Model,
    x,
    y_t,
    cfg: AttackConfig,
    noise_cfg: NoiseConfig,
    draws: np.ndarray,
) -> ad.Tensor:
    """alpha * clean margin loss + (1-alpha) * mean margin loss over noisy draws.

    ``draws`` holds the noise offsets delta, shape (m, n, d) for a batch of
    n samples (or (m, d) for a single sample); noisy inputs are clipped
    before the network, the same transform the detector applies.
    """
    x_b, _ = _as_batch(x)
    n = x_b.shape[0]
    targets = _as_targets(y_t, n)
    draws = _as_draws(draws, n, x_b.shape[1])
    clean = cw_loss_vector(model.forward(x_b), targets, cfg.kappa)
    noisy_terms = [
        cw_loss_vector(_clipped_noisy_forward(model, x_b, d), targets, cfg.kappa) for d in draws
    ]
    noisy = _stack_mean(noisy_terms)
    return ad.add(ad.multiply(clean, cfg.alpha), ad.multiply(noisy, 1.0 - cfg.alpha))


def cw_noisy_loss(model, x, y_t, cfg, noise_cfg, draws) -> ad.Tensor:
    return ad.reduce_sum(cw_noisy_loss_vector(model, x, y_t, cfg, noise_cfg, draws))


def lma_loss_vector(
    model: Model,
    x,
    y_t,
    profiles: LogitProfile,
    cfg: AttackConfig,
    noise_cfg: NoiseConfig,
    draws: np.ndarray,
) -> ad.Tensor:
    """alpha * ||f(x) - clean profile||_2 + (1-alpha) * mean_j ||f(x+delta_j) - noisy profile||_2.

    The noisy term takes the mean of per-draw norms (not the norm of the
    mean), so each draw's mismatch is penalized individually.
    """
    x_b, _ = _as_batch(x)
    n = x_b.shape[0]
    targets = _as_targets(y_t, n)
    profiles.require(targets)
    draws = _as_draws(draws, n, x_b.shape[1])
    h_clean = profiles.clean[targets]
    h_noisy = profiles.noisy[targets]
    clean = ad.l2norm(ad.subtract(model.forward(x_b), h_clean), axis=1)
    noisy_terms = [
        ad.l2norm(ad.subtract(_clipped_noisy_forward(model, x_b, d), h_noisy), axis=1)
        for d in draws
    ]
    noisy = _stack_mean(noisy_terms)
    return ad.add(ad.multiply(clean, cfg.alpha), ad.multiply(noisy, 1.0 - cfg.alpha))


def lma_loss(model, x, y_t, profiles, cfg, noise_cfg, draws) -> ad.Tensor:
    return ad.reduce_sum(lma_loss_vector(model, x, y_t, profiles, cfg, noise_cfg, draws))


def adaptive_loss_vector(
    model: Model,
    detector,
    x,
    y_t,
    profiles: LogitProfile,
    cfg: AttackConfig,
    noise_cfg: NoiseConfig,
    draws: np.ndarray,
) -> ad.Tensor:
    """alpha * mimicry loss + (1-alpha) * (-log p_benign) through the detector.

    The same frozen draw set feeds the mimicry term and the detector's
    averaged-noisy-logit feature, so the detector input is well defined
    within a step.  p_benign is floored at 1e-12.
    """
    from .detectors import DetectorModel

    if not isinstance(detector, DetectorModel):
        raise TypeError(
            "adaptive loss requires the classifier-based detector; "
            "the statistical test is not differentiable"
        )
    x_b, _ = _as_batch(x)
    n = x_b.shape[0]
    targets = _as_targets(y_t, n)
    profiles.require(targets)
    draws = _as_draws(draws, n, x_b.shape[1])

    clean_logits = model.forward(x_b)
    noisy_logits = [_clipped_noisy_forward(model, x_b, d) for d in draws]

    h_clean = profiles.clean[targets]
    h_noisy = profiles.noisy[targets]
    mimic_clean = ad.l2norm(ad.subtract(clean_logits, h_clean), axis=1)
    mimic_noisy = _stack_mean(
        [ad.l2norm(ad.subtract(z, h_noisy), axis=1) for z in noisy_logits]
    )
    mimicry = ad.add(
        ad.multiply(mimic_clean, cfg.alpha), ad.multiply(mimic_noisy, 1.0 - cfg.alpha)
    )

    mean_noisy = _stack_mean(noisy_logits)
    feature = ad.concat([clean_logits, mean_noisy], axis=1)
    det_logits = detector.forward(feature)
    logp = ad.log_softmax(det_logits, axis=1)
    benign_col = np.zeros((n, 2))
    benign_col[:, 0] = 1.0
    logp_benign = ad.reduce_sum(ad.multiply(logp, benign_col), axis=1)
    detector_term = ad.multiply(ad.clip(logp_benign, np.log(1e-12), 0.0), -1.0)

    return ad.add(ad.multiply(mimicry, cfg.alpha), ad.multiply(detector_term, 1.0 - cfg.alpha))


def adaptive_loss(model, detector, x, y_t, profiles, cfg, noise_cfg, draws) -> ad.Tensor:
    return ad.reduce_sum(
        adaptive_loss_vector(model, detector, x, y_t, profiles, cfg, noise_cfg, draws)
    )


def _as_draws(draws: np.ndarray, n: int, d: int) -> np.ndarray:
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim == 2:
        draws = draws[:, None, :] if n == 1 else draws
    if draws.ndim != 3 or draws.shape[1] != n or draws.shape[2] != d:
        raise ValueError(f"draws shape {draws.shape} does not match batch ({n}, {d})")
    return draws


def _stack_mean(terms: list[ad.Tensor]) -> ad.Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.multiply(acc, 1.0 / len(terms))


def pgd(model: Model, x: np.ndarray, loss_fn, cfg: AttackConfig) -> np.ndarray:
    """Iterated signed-gradient steps projected into the L-inf ball around x.

    ``loss_fn(x_tensor, step)`` returns the scalar loss; its optional
    ``direction`` attribute is -1 for loss-minimizing plugins (the default)
    and +1 for loss-maximizing ones.  The projection clips each coordinate
    into [x_i - eps_max, x_i + eps_max] intersected with [-1, 1].
    """
    x0 = np.asarray(x, dtype=np.float64).copy()
    if np.any(np.abs(x0) > 1.0):
        raise ValueError("attack start point must lie in [-1, 1]^d")
    direction = float(getattr(loss_fn, "direction", -1.0))
    cur = x0.copy()
    for step in range(cfg.steps):
        xt = ad.Tensor(cur, requires_grad=True)
        loss = loss_fn(xt, step)
        loss.backward()
        g = xt.grad
        if g is None or not np.all(np.isfinite(g)):
            raise AttackError(f"non-finite gradient at pgd step {step}")
        cur = cur + direction * cfg.step_size * np.sign(g)
        cur = np.clip(cur, x0 - cfg.eps_max, x0 + cfg.eps_max)
        cur = np.clip(cur, -1.0, 1.0)
    return cur


class _Plugin:
    """Base for loss plugins: loss-minimizing, one RNG substream per sample."""

    direction = -1.0

    def __init__(self, cfg: AttackConfig, noise_cfg: NoiseConfig | None, sample_indices):
        self.cfg = cfg
        self.noise_cfg = noise_cfg
        if noise_cfg is not None:
            self._rngs = [
                substream(cfg.seed, "attack-noise", int(i)) for i in np.asarray(sample_indices)
            ]

    def fresh_draws(self, d: int) -> np.ndarray:
        """One (m, n, d) block of noise offsets, advanced per call."""
        eps = self.noise_cfg.epsilon
        m = self.cfg.noise_draws
        block = np.stack(
            [rng.standard_normal((m, d)) for rng in self._rngs], axis=1
        )
        return eps * block


class CWPlugin(_Plugin):
    def __init__(self, model, targets, cfg):
        super().__init__(cfg, None, [])
        self.model = model
        self.targets = targets

    def __call__(self, xt, step):
        xb, _ = _as_batch(xt)
        return cw_loss(self.model.forward(xb), self.targets, self.cfg.kappa)


class CWNoisyPlugin(_Plugin):
    def __init__(self, model, targets, cfg, noise_cfg, sample_indices):
        super().__init__(cfg, noise_cfg, sample_indices)
        self.model = model
        self.targets = targets

    def __call__(self, xt, step):
        draws = self.fresh_draws(xt.shape[-1])
        return cw_noisy_loss(self.model, xt, self.targets, self.cfg, self.noise_cfg, draws)


class LMAPlugin(_Plugin):
    def __init__(self, model, targets, cfg, noise_cfg, profiles, sample_indices):
        super().__init__(cfg, noise_cfg, sample_indices)
        self.model = model
        self.targets = targets
        self.profiles = profiles

    def __call__(self, xt, step):
        draws = self.fresh_draws(xt.shape[-1])
        return lma_loss(
            self.model, xt, self.targets, self.profiles, self.cfg, self.noise_cfg, draws
        )


class AdaptivePlugin(_Plugin):
    def __init__(self, model, detector, targets, cfg, noise_cfg, profiles, sample_indices):
        super().__init__(cfg, noise_cfg, sample_indices)
        self.model = model
        self.detector = detector
        self.targets = targets
        self.profiles = profiles

    def __call__(self, xt, step):
        draws = self.fresh_draws(xt.shape[-1])
        return adaptive_loss(
            self.model,
            self.detector,
            xt,
            self.targets,
            self.profiles,
            self.cfg,
            self.noise_cfg,
            draws,
        )


def select_targets(
    model: Model, X: np.ndarray, cfg: AttackConfig, sample_indices
) -> tuple[np.ndarray, np.ndarray]:
    """(predicted labels, target labels) under the configured rule."""
    logits = model.logits(np.atleast_2d(X))
    preds = np.argmax(logits, axis=1)
    k = model.k
    if cfg.target_rule == "fixed":
        if cfg.target_fixed is None:
            raise AttackError("target_rule=fixed requires target_fixed")
        targets = np.full(len(preds), int(cfg.target_fixed), dtype=np.int64)
    elif cfg.target_rule == "least-likely":
        targets = np.argmin(logits, axis=1)
    else:
        targets = np.empty(len(preds), dtype=np.int64)
        for i, sid in enumerate(np.asarray(sample_indices)):
            rng = substream(cfg.seed, "target-choice", int(sid))
            offset = int(rng.integers(1, k))
            targets[i] = (preds[i] + offset) % k
    return preds, targets


@dataclass
class AttackOutcome:
    x_adv: np.ndarray
    y_pred_clean: np.ndarray
    y_target: np.ndarray
    y_pred_adv: np.ndarray
    linf: np.ndarray
    final_loss: np.ndarray
    evaded: np.ndarray

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.evaded)) if len(self.evaded) else 0.0


def make_plugin(
    kind: str,
    model: Model,
    targets: np.ndarray,
    cfg: AttackConfig,
    noise_cfg: NoiseConfig | None = None,
    profiles: LogitProfile | None = None,
    detector=None,
    sample_indices=None,
):
    if kind == "cw":
        return CWPlugin(model, targets, cfg)
    if kind == "cw-noisy":
        return CWNoisyPlugin(model, targets, cfg, noise_cfg, sample_indices)
    if kind == "lma":
        return LMAPlugin(model, targets, cfg, noise_cfg, profiles, sample_indices)
    if kind == "adaptive":
        if detector is None:
            raise AttackError("adaptive attack requires a detector")
        return AdaptivePlugin(model, detector, targets, cfg, noise_cfg, profiles, sample_indices)
    raise AttackError(f"unknown attack kind {kind!r}; expected one of {ATTACK_KINDS}")


def attack_samples(
    model: Model,
    X: np.ndarray,
    sample_indices,
    kind: str,
    cfg: AttackConfig,
    noise_cfg: NoiseConfig | None = None,
    profiles: LogitProfile | None = None,
    detector=None,
    chunk: int = 512,
    workers: int = 1,
) -> AttackOutcome:
    """Run one attack kind over a batch; chunks are independent PGD runs."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    sample_indices = np.asarray(sample_indices)
    if kind not in ATTACK_KINDS:
        raise AttackError(f"unknown attack kind {kind!r}; expected one of {ATTACK_KINDS}")
    preds, targets = select_targets(model, X, cfg, sample_indices)

    spans = [slice(s, min(s + chunk, len(X))) for s in range(0, len(X), chunk)]

    def run(span: slice) -> tuple[np.ndarray, np.ndarray]:
        plugin = make_plugin(
            kind,
            model,
            targets[span],
            cfg,
            noise_cfg=noise_cfg,
            profiles=profiles,
            detector=detector,
            sample_indices=sample_indices[span],
        )
        adv = pgd(model, X[span], plugin, cfg)
        final = _final_loss_values(
            kind, model, adv, targets[span], cfg, noise_cfg, profiles, detector,
            sample_indices[span],
        )
        return adv, final

    if workers > 1 and len(spans) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, spans))
    else:
        results = [run(s) for s in spans]

    x_adv = np.concatenate([r[0] for r in results], axis=0)
    final_loss = np.concatenate([r[1] for r in results], axis=0)
    y_pred_adv = np.argmax(model.logits(x_adv), axis=1)
    linf = np.abs(x_adv - X).max(axis=1) if len(X) else np.zeros(0)
    return AttackOutcome(
        x_adv=x_adv,
        y_pred_clean=preds,
        y_target=targets,
        y_pred_adv=y_pred_adv,
        linf=linf,
        final_loss=final_loss,
        evaded=y_pred_adv == targets,
    )


def _final_loss_values(
    kind, model, adv, targets, cfg, noise_cfg, profiles, detector, sample_indices
) -> np.ndarray:
    """Per-sample loss at the final iterate, under one fresh draw set."""
    if kind == "cw":
        vec = cw_loss_vector(model.logits(adv), targets, cfg.kappa)
        return vec.data.copy()
    rngs = [substream(cfg.seed, "final-loss-noise", int(i)) for i in np.asarray(sample_indices)]
    draws = noise_cfg.epsilon * np.stack(
        [rng.standard_normal((cfg.noise_draws, adv.shape[1])) for rng in rngs], axis=1
    )
    if kind == "cw-noisy":
        vec = cw_noisy_loss_vector(model, adv, targets, cfg, noise_cfg, draws)
    elif kind == "lma":
        vec = lma_loss_vector(model, adv, targets, profiles, cfg, noise_cfg, draws)
    else:
        vec = adaptive_loss_vector(
            model, detector, adv, targets, profiles, cfg, noise_cfg, draws
        )
    return vec.data.copy()
