"""Logit-based detectors: the noise-gain statistical test and the classifier kind.

The statistical test scores an input by how much each competitor class's
logit gains under noise, normalized against benign calibration statistics;
the classifier detector is a small network over the concatenation of clean
and averaged noisy logits.  Both flag with a `score >= threshold` rule and
calibrate thresholds on held-out benign scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .models import DivergenceError, Model, one_hot
from .noise import CalibrationStats, LogitSummary, NoiseConfig, batched_summaries, make_noisy
from .seeding import substream
from .serial import (
    DETECTOR_MAGIC,
    FormatError,
    Reader,
    append_crc,
    pack_f64,
    pack_u32,
    strip_crc,
)

DETECTOR_HIDDEN = (100, 100)
_STD_FLOOR = 1e-8


@dataclass
class DetectionOutcome:
    verdict: str  # "benign" | "adversarial"
    score: float
    corrected_label: int | None = None


@dataclass(frozen=True)
class ThresholdTable:
    """Per-pair thresholds tau[y_f, y]; currently one global value per table.

    The per-pair shape is the extension point: the flag rule only ever
    reads ``value(y_f, y)``.
    """

    taus: np.ndarray
    fpr_target: float

    @property
    def k(self) -> int:
        return self.taus.shape[0]

    def value(self, y_f: int, y: int) -> float:
        return float(self.taus[y_f, y])

    def row(self, y_f: int) -> np.ndarray:
        return self.taus[y_f]

    @classmethod
    def from_global(cls, tau: float, k: int, fpr_target: float) -> "ThresholdTable":
        taus = np.full((k, k), float(tau))
        np.fill_diagonal(taus, np.nan)
        return cls(taus=taus, fpr_target=fpr_target)


def threshold_at_fpr(scores: np.ndarray, fpr_target: float) -> float:
    """Smallest observed score t with empirical FPR(s >= t) <= target.

    Candidates are the sorted benign scores themselves; when even the
    maximum score is flagged too often, the threshold is one unit above
    the maximum (flags nothing).
    """
    if not 0 < fpr_target <= 0.5:
        raise ValueError(f"fpr_target must lie in (0, 0.5], got {fpr_target}")
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    n = len(scores)
    counts_ge = n - np.searchsorted(scores, scores, side="left")
    ok = counts_ge / n <= fpr_target
    if not ok.any():
        return float(scores[-1]) + 1.0
    return float(scores[np.argmax(ok)])


def calibrate_thresholds(scores: np.ndarray, k: int, fpr_target: float) -> ThresholdTable:
    """Global threshold over benign max-statistics, replicated per pair."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) < 200:
        raise ValueError(f"need at least 200 benign scores to calibrate, got {len(scores)}")
    return ThresholdTable.from_global(threshold_at_fpr(scores, fpr_target), k, fpr_target)


def stat_test_scores(
    model: Model,
    X: np.ndarray,
    stats: CalibrationStats,
    noise_cfg: NoiseConfig,
    sample_indices,
) -> tuple[np.ndarray, np.ndarray]:
    """Normalized noise-gain statistics for a batch.

    Returns (predicted labels, gbar matrix); gbar[i, y] is the mean over
    replicas of (g - mu)/sigma for the pair (y_f_i, y), with -inf at the
    predicted class itself so row maxima ignore it.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    sample_indices = np.asarray(sample_indices)
    clean = model.logits(X)
    preds = np.argmax(clean, axis=1)
    gbar = np.empty((len(X), model.k))
    for i in range(len(X)):
        y_f = int(preds[i])
        zn = model.logits(make_noisy(X[i], noise_cfg, int(sample_indices[i])))
        gains = (zn - zn[:, y_f][:, None]) - (clean[i] - clean[i, y_f])[None, :]
        normalized = (gains - stats.mu[y_f][None, :]) / stats.sigma[y_f][None, :]
        gbar[i] = normalized.mean(axis=0)
        gbar[i, y_f] = -np.inf
    return preds, gbar


def stat_test_score(
    model: Model,
    x: np.ndarray,
    stats: CalibrationStats,
    noise_cfg: NoiseConfig,
    sample_index: int = 0,
) -> tuple[int, np.ndarray]:
    preds, gbar = stat_test_scores(model, x, stats, noise_cfg, [sample_index])
    return int(preds[0]), gbar[0]


def flag_from_scores(y_f: int, gbar_row: np.ndarray, thresholds: ThresholdTable) -> DetectionOutcome:
    """Apply the flag rule max_{y != y_f} (gbar - tau) >= 0 to one score row."""
    margins = gbar_row - thresholds.row(y_f)
    margins[y_f] = -np.inf
    best = int(np.argmax(margins))
    competitors = np.delete(gbar_row, y_f)
    score = float(np.max(competitors))
    if margins[best] >= 0:
        return DetectionOutcome(verdict="adversarial", score=score, corrected_label=best)
    return DetectionOutcome(verdict="benign", score=score, corrected_label=None)


def stat_test_detect(
    model: Model,
    x: np.ndarray,
    stats: CalibrationStats,
    thresholds: ThresholdTable,
    noise_cfg: NoiseConfig,
    sample_index: int = 0,
) -> DetectionOutcome:
    y_f, gbar = stat_test_score(model, x, stats, noise_cfg, sample_index)
    return flag_from_scores(y_f, gbar, thresholds)


def max_statistics(gbar: np.ndarray) -> np.ndarray:
    """Row maxima of the normalized statistics (the -inf diagonal drops out)."""
    return np.max(gbar, axis=1)


def build_feature(summary: LogitSummary) -> np.ndarray:
    """Clean logits first, mean noisy logits second; the detector input order."""
    return np.concatenate([summary.clean_logits, summary.mean_noisy_logits])


def build_features(clean: np.ndarray, noisy_mean: np.ndarray) -> np.ndarray:
    return np.concatenate([clean, noisy_mean], axis=1)


@dataclass
class DetectorHyper:
    hidden: tuple[int, ...] = DETECTOR_HIDDEN
    epochs: int = 200
    lr: float = 0.2
    momentum: float = 0.9
    patience: int = 25
    val_fraction: float = 0.2
    fpr_targets: tuple[float, ...] = (0.01, 0.05)
    seed: int = 0


class DetectorModel:
    """Binary classifier over 2k logit features, with stored normalization,
    per-FPR decision thresholds on p_adversarial, and provenance metadata."""

    def __init__(
        self,
        net: Model,
        feat_mean: np.ndarray,
        feat_std: np.ndarray,
        thresholds: dict[float, float] | None = None,
        meta: dict | None = None,
    ):
        if net.k != 2:
            raise ValueError("detector network must produce 2 logits")
        self.net = net
        self.feat_mean = np.asarray(feat_mean, dtype=np.float64)
        self.feat_std = np.maximum(np.asarray(feat_std, dtype=np.float64), _STD_FLOOR)
        self.thresholds = dict(thresholds or {})
        self.meta = dict(meta or {})

    @property
    def k(self) -> int:
        return self.net.d // 2

    def forward(self, features: ad.Tensor) -> ad.Tensor:
        """Tape path: standardize, then the network; used by the adaptive loss."""
        centered = ad.add_bias(features, -self.feat_mean)
        scaled = ad.scale_columns(centered, 1.0 / self.feat_std)
        return self.net.forward(scaled)

    def scores(self, features: np.ndarray) -> np.ndarray:
        """p_adversarial for each feature row (fast path)."""
        F = np.atleast_2d(np.asarray(features, dtype=np.float64))
        z = self.net.logits((F - self.feat_mean) / self.feat_std)
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        return probs[:, 1]

    def threshold(self, fpr_target: float) -> float:
        try:
            return self.thresholds[fpr_target]
        except KeyError:
            raise KeyError(
                f"detector has no threshold calibrated for FPR target {fpr_target}; "
                f"known targets: {sorted(self.thresholds)}"
            ) from None

    def detect(self, feature: np.ndarray, fpr_target: float) -> DetectionOutcome:
        score = float(self.scores(feature)[0])
        verdict = "adversarial" if score >= self.threshold(fpr_target) else "benign"
        return DetectionOutcome(verdict=verdict, score=score)

    def verdicts(self, features: np.ndarray, fpr_target: float) -> np.ndarray:
        return self.scores(features) >= self.threshold(fpr_target)

    def copy(self) -> "DetectorModel":
        return DetectorModel(
            net=self.net.copy(),
            feat_mean=self.feat_mean.copy(),
            feat_std=self.feat_std.copy(),
            thresholds=dict(self.thresholds),
            meta=dict(self.meta),
        )

    def save(self, path) -> None:
        meta_blob = json.dumps(self.meta, sort_keys=True).encode()
        parts = [
            DETECTOR_MAGIC,
            pack_u32(self.k),
            pack_u32(len(self.net.sizes), *self.net.sizes),
            pack_f64(self.feat_mean),
            pack_f64(self.feat_std),
            self.net.param_blob(),
            pack_u32(len(self.thresholds)),
        ]
        for fpr in sorted(self.thresholds):
            parts.append(pack_f64(np.array([fpr, self.thresholds[fpr]])))
        parts.append(pack_u32(len(meta_blob)))
        parts.append(meta_blob)
        with open(path, "wb") as fh:
            fh.write(append_crc(b"".join(parts)))

    @classmethod
    def load(cls, path) -> "DetectorModel":
        with open(path, "rb") as fh:
            blob = fh.read()
        r = Reader(strip_crc(blob))
        r.expect_magic(DETECTOR_MAGIC)
        k = r.u32("class count k")
        if k == 0:
            raise FormatError("detector checkpoint declares k=0", offset=5)
        n_sizes = r.u32("layer count")
        sizes = [r.u32(f"layer size {i}") for i in range(n_sizes)]
        if not sizes or sizes[0] != 2 * k or sizes[-1] != 2:
            raise FormatError(f"detector layer sizes {sizes} do not match k={k}")
        feat_mean = r.f64_array(2 * k, "feature means")
        feat_std = r.f64_array(2 * k, "feature stds")
        net = Model(sizes)
        net.load_param_blob(r)
        n_thresholds = r.u32("threshold count")
        thresholds = {}
        for i in range(n_thresholds):
            fpr, tau = r.f64_array(2, f"threshold {i}")
            thresholds[float(fpr)] = float(tau)
        meta_len = r.u32("metadata length")
        meta = json.loads(r.take(meta_len, "metadata").decode())
        r.done()
        return cls(net=net, feat_mean=feat_mean, feat_std=feat_std, thresholds=thresholds, meta=meta)


def _fit_binary(
    net: Model,
    F_train: np.ndarray,
    labels_train: np.ndarray,
    F_val: np.ndarray,
    labels_val: np.ndarray,
    hyper: DetectorHyper,
) -> None:
    """Full-batch gradient descent with momentum and early stopping in place."""
    onehot_train = one_hot(labels_train, 2)
    onehot_val = one_hot(labels_val, 2)
    vel = [np.zeros_like(a) for pair in zip(net.weights, net.biases) for a in pair]
    best_val = np.inf
    best_params = None
    stale = 0
    for _ in range(hyper.epochs):
        params = net.param_tensors()
        logits_t = net.forward(ad.Tensor(F_train), params=params)
        logp = ad.log_softmax(logits_t, axis=1)
        loss = ad.multiply(
            ad.reduce_sum(ad.multiply(logp, onehot_train)), -1.0 / len(F_train)
        )
        if not np.isfinite(loss.data):
            raise DivergenceError("detector training loss is not finite; lower the learning rate")
        loss.backward()
        flat = [p for pair in params for p in pair]
        arrays = [a for pair in zip(net.weights, net.biases) for a in pair]
        for slot, (tensor, arr) in enumerate(zip(flat, arrays)):
            g = tensor.grad if tensor.grad is not None else np.zeros_like(arr)
            vel[slot] = hyper.momentum * vel[slot] + g
            arr -= hyper.lr * vel[slot]

        if len(F_val):
            zv = net.logits(F_val)
            shifted = zv - zv.max(axis=1, keepdims=True)
            lse = np.log(np.exp(shifted).sum(axis=1))
            val_loss = float(np.mean(lse - (shifted * onehot_val).sum(axis=1)))
            if val_loss < best_val - 1e-9:
                best_val = val_loss
                best_params = ([W.copy() for W in net.weights], [b.copy() for b in net.biases])
                stale = 0
            else:
                stale += 1
                if stale > hyper.patience:
                    break
    if best_params is not None:
        net.weights, net.biases = best_params


def train_detector(
    model: Model,
    benign: tuple[np.ndarray, np.ndarray],
    adversarial: tuple[np.ndarray, np.ndarray],
    noise_cfg: NoiseConfig,
    hyper: DetectorHyper | None = None,
    meta: dict | None = None,
) -> DetectorModel:
    """Train the 2k -> 100 -> 100 -> 2 detector on benign vs adversarial features.

    ``benign`` and ``adversarial`` are (samples, sample_indices) pairs; the
    indices key the noise substreams.  Features are standardized with the
    benign training statistics, and provisional thresholds are set on the
    internal benign validation scores.
    """
    hyper = hyper or DetectorHyper()
    X_b, idx_b = benign
    X_a, idx_a = adversarial
    if len(X_b) == 0 or len(X_a) == 0:
        raise ValueError("detector training needs both benign and adversarial samples")

    clean_b, noisy_b = batched_summaries(model, X_b, noise_cfg, idx_b)
    clean_a, noisy_a = batched_summaries(model, X_a, noise_cfg, idx_a)
    F = np.concatenate([build_features(clean_b, noisy_b), build_features(clean_a, noisy_a)])
    labels = np.concatenate([np.zeros(len(X_b), dtype=np.int64), np.ones(len(X_a), dtype=np.int64)])

    rng = substream(hyper.seed, "detector-split")
    perm = rng.permutation(len(F))
    n_val = max(1, int(round(hyper.val_fraction * len(F))))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(np.unique(labels[train_idx])) < 2:
        raise ValueError("detector training split is degenerate (single class)")

    benign_train = F[train_idx][labels[train_idx] == 0]
    feat_mean = benign_train.mean(axis=0)
    feat_std = np.maximum(benign_train.std(axis=0), _STD_FLOOR)
    Fn = (F - feat_mean) / feat_std

    net = Model([2 * model.k, *hyper.hidden, 2], rng=substream(hyper.seed, "detector-init"))
    _fit_binary(net, Fn[train_idx], labels[train_idx], Fn[val_idx], labels[val_idx], hyper)

    detector = DetectorModel(
        net=net,
        feat_mean=feat_mean,
        feat_std=feat_std,
        meta={
            "epsilon": noise_cfg.epsilon,
            "replica_count": noise_cfg.count,
            "seed": hyper.seed,
            **(meta or {}),
        },
    )
    val_benign = F[val_idx][labels[val_idx] == 0]
    if len(val_benign):
        benign_scores = detector.scores(val_benign)
        detector.thresholds = {
            fpr: threshold_at_fpr(benign_scores, fpr) for fpr in hyper.fpr_targets
        }
    return detector


def recalibrate(detector: DetectorModel, benign_features: np.ndarray, fpr_targets) -> None:
    """Reset decision thresholds from held-out benign feature scores."""
    scores = detector.scores(benign_features)
    detector.thresholds = {fpr: threshold_at_fpr(scores, fpr) for fpr in fpr_targets}


@dataclass
class IterationRecord:
    iteration: int
    attack_success: float
    tpr: float
    threshold: float


def iterative_training(
    model: Model,
    benign_pool: tuple[np.ndarray, np.ndarray],
    noise_cfg: NoiseConfig,
    iterations: int,
    per_iter_epochs: int,
    per_iter_samples: int,
    attack_cfg,
    *,
    detector: DetectorModel,
    profiles,
    holdout_features: np.ndarray,
    fpr_targets: tuple[float, ...] = (0.01, 0.05),
    trace_fpr: float = 0.05,
    hyper: DetectorHyper | None = None,
    workers: int = 1,
) -> tuple[DetectorModel, list[IterationRecord]]:
    """Alternate adaptive attacks against the current detector with fine-tuning.

    Each iteration attacks a rotating slice of the benign pool with the
    adaptive loss, fine-tunes the detector for ``per_iter_epochs`` on the
    fresh adversarial features plus the same samples' benign features, and
    recalibrates thresholds on the held-out benign features.  Aborts when
    an iteration's attack evades the classifier on fewer than half the
    samples.
    """
    from .attacks import AttackError, attack_samples

    if iterations < 1:
        raise ValueError(f"iterations must be at least 1, got {iterations}")
    hyper = hyper or DetectorHyper()
    X_pool, idx_pool = benign_pool
    current = detector.copy()
    trace: list[IterationRecord] = []

    clean_pool, noisy_pool = batched_summaries(model, X_pool, noise_cfg, idx_pool)
    benign_feats_pool = build_features(clean_pool, noisy_pool)

    for it in range(iterations):
        pick = substream(attack_cfg.seed, "iterative-pick", it).permutation(len(X_pool))[
            :per_iter_samples
        ]
        outcome = attack_samples(
            model,
            X_pool[pick],
            idx_pool[pick],
            "adaptive",
            attack_cfg,
            noise_cfg=noise_cfg,
            profiles=profiles,
            detector=current,
            workers=workers,
        )
        if outcome.success_rate < 0.5:
            raise AttackError(
                f"iteration {it}: adaptive attack evaded the classifier on only "
                f"{outcome.success_rate:.1%} of {per_iter_samples} samples; aborting"
            )
        clean_a, noisy_a = batched_summaries(model, outcome.x_adv, noise_cfg, idx_pool[pick])
        adv_feats = build_features(clean_a, noisy_a)
        benign_feats = benign_feats_pool[pick]

        F = np.concatenate([benign_feats, adv_feats])
        labels = np.concatenate(
            [np.zeros(len(benign_feats), dtype=np.int64), np.ones(len(adv_feats), dtype=np.int64)]
        )
        Fn = (F - current.feat_mean) / current.feat_std
        fit_hyper = DetectorHyper(
            hidden=hyper.hidden,
            epochs=per_iter_epochs,
            lr=hyper.lr,
            momentum=hyper.momentum,
            patience=per_iter_epochs + 1,
            seed=hyper.seed,
        )
        _fit_binary(current.net, Fn, labels, np.empty((0, F.shape[1])), np.empty(0, dtype=np.int64), fit_hyper)

        recalibrate(current, holdout_features, fpr_targets)
        tpr = float(np.mean(current.verdicts(adv_feats, trace_fpr)))
        trace.append(
            IterationRecord(
                iteration=it,
                attack_success=outcome.success_rate,
                tpr=tpr,
                threshold=current.threshold(trace_fpr),
            )
        )
        current.meta["iterations"] = it + 1
    return current, trace


def encode_stat_test(
    stats: CalibrationStats, thresholds: ThresholdTable, y_f: int
) -> DetectorModel:
    """Hand-constructed detector weights implementing the flag rule exactly.

    For a fixed predicted class y_f, each competitor statistic is an affine
    function of the feature vector [f(x), mean noisy f(x)]; a two-hidden-
    layer ReLU network computes the running pairwise maximum of up to four
    such statistics, so the output margin equals max(gbar - tau) and a 0.5
    probability threshold reproduces the flag rule, ties included.
    """
    k = stats.k
    competitors = [y for y in range(k) if y != y_f]
    if len(competitors) > 4:
        raise ValueError(
            "exact two-hidden-layer encoding supports at most 4 competitor classes "
            f"(k <= 5), got k={k}"
        )

    # a_y = gbar_{y_f, y} - tau as an affine map over the 2k feature vector
    coeffs = np.zeros((len(competitors), 2 * k))
    biases = np.zeros(len(competitors))
    for row, y in enumerate(competitors):
        sigma = stats.sigma[y_f, y]
        coeffs[row, k + y] = 1.0 / sigma
        coeffs[row, k + y_f] = -1.0 / sigma
        coeffs[row, y] = -1.0 / sigma
        coeffs[row, y_f] = 1.0 / sigma
        biases[row] = -stats.mu[y_f, y] / sigma - thresholds.value(y_f, y)

    h1, h2 = DETECTOR_HIDDEN
    W1 = np.zeros((2 * k, h1))
    b1 = np.zeros(h1)
    W2 = np.zeros((h1, h2))
    b2 = np.zeros(h2)
    W3 = np.zeros((h2, 2))
    b3 = np.zeros(2)

    def set_unit(W, b, col, coeff_vec, bias):
        W[:, col] = coeff_vec
        b[col] = bias

    # layer 1: for each leading pair (a, b) emit relu(a-b), relu(b), relu(-b)
    # so that max(a, b) = relu(a-b) + relu(b) - relu(-b) is linear in h1;
    # an unpaired statistic is carried as relu(a), relu(-a).
    lin1 = []  # list of (weights over h1, bias) giving pairwise maxima
    col = 0
    for i in range(0, len(competitors), 2):
        if i + 1 < len(competitors):
            a_w, a_b = coeffs[i], biases[i]
            b_w, b_b = coeffs[i + 1], biases[i + 1]
            set_unit(W1, b1, col, a_w - b_w, a_b - b_b)
            set_unit(W1, b1, col + 1, b_w, b_b)
            set_unit(W1, b1, col + 2, -b_w, -b_b)
            sel = np.zeros(h1)
            sel[col], sel[col + 1], sel[col + 2] = 1.0, 1.0, -1.0
            lin1.append(sel)
            col += 3
        else:
            set_unit(W1, b1, col, coeffs[i], biases[i])
            set_unit(W1, b1, col + 1, -coeffs[i], -biases[i])
            sel = np.zeros(h1)
            sel[col], sel[col + 1] = 1.0, -1.0
            lin1.append(sel)
            col += 2

    # layer 2: max of the (at most two) first-level maxima, same construction
    if len(lin1) == 1:
        W2[:, 0] = lin1[0]
        W2[:, 1] = -lin1[0]
        final = np.zeros(h2)
        final[0], final[1] = 1.0, -1.0
    else:
        W2[:, 0] = lin1[0] - lin1[1]
        W2[:, 1] = lin1[1]
        W2[:, 2] = -lin1[1]
        final = np.zeros(h2)
        final[0], final[1], final[2] = 1.0, 1.0, -1.0

    W3[:, 1] = final  # adversarial logit = max margin; benign logit stays 0

    net = Model([2 * k, h1, h2, 2])
    net.weights = [W1, W2, W3]
    net.biases = [b1, b2, b3]
    return DetectorModel(
        net=net,
        feat_mean=np.zeros(2 * k),
        feat_std=np.ones(2 * k),
        thresholds={0.01: 0.5, 0.05: 0.5},
        meta={"construction": "threshold-rule", "predicted_class": y_f},
    )
