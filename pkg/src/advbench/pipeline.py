"""Experiment orchestration: provisioning, attack/detect/armsrace pipelines, CSV emission.

Every pipeline is a pure function of (config, master seed); reruns produce
byte-identical CSVs.  Emitted CSVs start with a `# config_hash=` comment
line so outputs are traceable; wall-clock timestamps go to a sidecar run
log, never into table bytes.

Split discipline: the validation split is partitioned into a calibration
part (statistics, profiles, detector training) and a holdout part
(threshold calibration); TPR/FPR are always measured on the test split,
which is asserted to never enter calibration.
"""

from __future__ import annotations

import csv
import datetime
import os
from dataclasses import dataclass, field

import numpy as np

from .attacks import (
    ATTACK_KINDS,
    AttackConfig,
    AttackOutcome,
    LogitProfile,
    attack_samples,
    compute_profiles,
)
from .config import ConfigError, ExperimentConfig
from .data import Dataset, load_external, save_dataset, synth_dataset
from .detectors import (
    DetectorHyper,
    DetectorModel,
    ThresholdTable,
    build_features,
    calibrate_thresholds,
    iterative_training,
    max_statistics,
    recalibrate,
    stat_test_scores,
    train_detector,
)
from .models import Model, TrainReport, accuracy, train
from .noise import NoiseConfig, batched_summaries, benign_calibration, cone_probe, probability_curve
from .seeding import derive_seed, substream


class PipelineError(RuntimeError):
    pass


class LeakageError(PipelineError):
    pass


MODEL_FILE = "model.ckpt"
TRAIN_REPORT_FILE = "train_report.csv"


@dataclass
class ResultRow:
    detector: str
    attack: str
    epsilon: float
    fpr_target: float
    tpr: float
    fpr: float
    n: int

    def __post_init__(self):
        if not (0.0 <= self.tpr <= 1.0 and 0.0 <= self.fpr <= 1.0):
            raise ValueError(f"rates out of range: tpr={self.tpr}, fpr={self.fpr}")


@dataclass
class ResultTable:
    rows: list[ResultRow]
    config_hash: str
    timestamp: str = field(
        default_factory=lambda: datetime.datetime.now(datetime.timezone.utc).isoformat()
    )

    HEADER = ("detector", "attack", "epsilon", "fpr_target", "tpr", "fpr", "n")

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# config_hash={self.config_hash}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.HEADER)
            for r in self.rows:
                writer.writerow(
                    [
                        r.detector,
                        r.attack,
                        _fmt(r.epsilon),
                        _fmt(r.fpr_target),
                        _fmt(r.tpr),
                        _fmt(r.fpr),
                        r.n,
                    ]
                )


def _fmt(x: float) -> str:
    return f"{float(x):.10g}"


def _write_run_log(out_dir: str, command: str, cfg_hash: str) -> None:
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    with open(os.path.join(out_dir, "run.log"), "a", encoding="utf-8") as fh:
        fh.write(f"{stamp} {command} config_hash={cfg_hash}\n")


def _refuse_existing(paths, force: bool) -> None:
    existing = [p for p in paths if os.path.exists(p)]
    if existing and not force:
        raise PipelineError(
            f"refusing to overwrite existing outputs (use --force): {', '.join(existing)}"
        )


def assert_disjoint(eval_ids, calibration_ids, what: str) -> None:
    overlap = np.intersect1d(np.asarray(eval_ids), np.asarray(calibration_ids))
    if overlap.size:
        raise LeakageError(
            f"{what}: {overlap.size} evaluation samples (e.g. id {int(overlap[0])}) "
            "were used for calibration; evaluation on the calibration split is refused"
        )


def prepare_dataset(cfg: ExperimentConfig) -> Dataset:
    ratios = (cfg.train_fraction, cfg.val_fraction, cfg.test_fraction)
    if cfg.dataset_kind == "synth":
        return synth_dataset(
            cfg.classes,
            cfg.dim,
            cfg.per_class,
            derive_seed(cfg.master_seed, "dataset"),
            center_norm=cfg.center_norm,
            cluster_std=cfg.cluster_std,
            ratios=ratios,
        )
    if cfg.dataset_kind == "external":
        if not cfg.dataset_path:
            raise ConfigError("dataset_kind=external requires dataset_path")
        if not os.path.exists(cfg.dataset_path):
            raise ConfigError(f"dataset path does not exist: {cfg.dataset_path}")
        return load_external(cfg.dataset_path, ratios=ratios)
    raise ConfigError(f"unknown dataset kind {cfg.dataset_kind!r}")


def calibration_split(cfg: ExperimentConfig, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Partition the validation split into (calibration ids, holdout ids)."""
    val_idx = dataset.indices("validation")
    perm = substream(cfg.master_seed, "calibration-split").permutation(len(val_idx))
    n_cal = int(round(cfg.calibration_fraction * len(val_idx)))
    return val_idx[perm[:n_cal]], val_idx[perm[n_cal:]]


def attack_config(cfg: ExperimentConfig, purpose: str = "attack") -> AttackConfig:
    return AttackConfig(
        eps_max=cfg.eps_max,
        eps_step=cfg.eps_step if cfg.eps_step > 0 else None,
        steps=cfg.steps,
        kappa=cfg.kappa,
        alpha=cfg.alpha,
        noise_draws=cfg.noise_draws,
        target_rule=cfg.target_rule,
        seed=derive_seed(cfg.master_seed, purpose),
    )


def noise_config(cfg: ExperimentConfig, epsilon: float) -> NoiseConfig:
    return NoiseConfig(
        epsilon=epsilon,
        count=cfg.noise_count,
        seed=derive_seed(cfg.master_seed, "detect-noise"),
    )


def train_pipeline(cfg: ExperimentConfig, out_dir: str, force: bool = False):
    os.makedirs(out_dir, exist_ok=True)
    model_path = os.path.join(out_dir, MODEL_FILE)
    report_path = os.path.join(out_dir, TRAIN_REPORT_FILE)
    _refuse_existing([model_path, report_path], force)

    dataset = prepare_dataset(cfg)
    model = Model(
        [dataset.d, *cfg.hidden, dataset.k],
        rng=substream(cfg.master_seed, "model-init"),
    )
    report = train(
        model,
        dataset,
        epochs=cfg.epochs,
        lr=cfg.lr,
        batch=cfg.batch,
        seed=derive_seed(cfg.master_seed, "model-train"),
        momentum=cfg.momentum,
    )
    model.save(model_path)
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["stage", "epoch", "value"])
        for i, loss in enumerate(report.epoch_losses):
            writer.writerow(["train_loss", i, _fmt(loss)])
        if report.final_test_accuracy is not None:
            writer.writerow(["test_accuracy", "", _fmt(report.final_test_accuracy)])
    _write_run_log(out_dir, "train", cfg.config_hash())
    return model, report


def load_model(cfg: ExperimentConfig, out_dir: str) -> Model:
    model_path = os.path.join(out_dir, MODEL_FILE)
    if not os.path.exists(model_path):
        raise PipelineError(f"model checkpoint not found: {model_path}; run `train` first")
    return Model.load(model_path)


def ensure_model(cfg: ExperimentConfig, out_dir: str) -> Model:
    model_path = os.path.join(out_dir, MODEL_FILE)
    if os.path.exists(model_path):
        return Model.load(model_path)
    model, _ = train_pipeline(cfg, out_dir, force=True)
    return model


MANIFEST_HEADER = (
    "sample_id",
    "y",
    "y_t",
    "y_pred_adv",
    "linf",
    "final_loss",
    "evaded",
    "attack",
    "noise_eps",
)


def write_manifest(
    path, cfg_hash: str, ids, y, outcome: AttackOutcome, kind: str, noise_eps: float | None
) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for i in range(len(ids)):
            writer.writerow(
                [
                    int(ids[i]),
                    int(y[i]),
                    int(outcome.y_target[i]),
                    int(outcome.y_pred_adv[i]),
                    _fmt(outcome.linf[i]),
                    _fmt(outcome.final_loss[i]),
                    int(outcome.evaded[i]),
                    kind,
                    "" if noise_eps is None else _fmt(noise_eps),
                ]
            )


@dataclass
class Manifest:
    ids: np.ndarray
    y: np.ndarray
    y_t: np.ndarray
    y_pred_adv: np.ndarray
    evaded: np.ndarray
    attack: str
    noise_eps: float | None


def read_manifest(path) -> Manifest:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    ids, y, y_t, y_pred, evaded = [], [], [], [], []
    attack, noise_eps = "", None
    for row in reader:
        ids.append(int(row["sample_id"]))
        y.append(int(row["y"]))
        y_t.append(int(row["y_t"]))
        y_pred.append(int(row["y_pred_adv"]))
        evaded.append(bool(int(row["evaded"])))
        attack = row["attack"]
        noise_eps = float(row["noise_eps"]) if row["noise_eps"] else None
    return Manifest(
        ids=np.array(ids, dtype=np.int64),
        y=np.array(y, dtype=np.int64),
        y_t=np.array(y_t, dtype=np.int64),
        y_pred_adv=np.array(y_pred, dtype=np.int64),
        evaded=np.array(evaded, dtype=bool),
        attack=attack,
        noise_eps=noise_eps,
    )


def attack_artifacts(out_dir: str, kind: str) -> tuple[str, str]:
    return (
        os.path.join(out_dir, f"adv_{kind}.advd"),
        os.path.join(out_dir, f"manifest_{kind}.csv"),
    )


def attack_pipeline(
    cfg: ExperimentConfig,
    kind: str,
    out_dir: str,
    force: bool = False,
    detector_path: str | None = None,
    workers: int | None = None,
) -> AttackOutcome:
    """Attack the test split, persist the adversarial dataset and manifest."""
    if kind not in ATTACK_KINDS:
        raise PipelineError(f"unknown attack kind {kind!r}; expected one of {ATTACK_KINDS}")
    os.makedirs(out_dir, exist_ok=True)
    adv_path, manifest_path = attack_artifacts(out_dir, kind)
    _refuse_existing([adv_path, manifest_path], force)

    dataset = prepare_dataset(cfg)
    model = load_model(cfg, out_dir)
    X_test, y_test, test_ids = dataset.arrays("test")
    acfg = attack_config(cfg)
    noise_cfg = noise_config(cfg, cfg.detect_epsilon)

    profiles = None
    detector = None
    if kind in ("lma", "adaptive"):
        cal_ids, _ = calibration_split(cfg, dataset)
        assert_disjoint(cal_ids, dataset.indices("test"), "profile computation")
        profiles = compute_profiles(model, dataset.X[cal_ids], noise_cfg, cal_ids)
    if kind == "adaptive":
        if not detector_path:
            raise PipelineError("adaptive attack requires --detector pointing to a checkpoint")
        detector = DetectorModel.load(detector_path)

    outcome = attack_samples(
        model,
        X_test,
        test_ids,
        kind,
        acfg,
        noise_cfg=noise_cfg if kind != "cw" else None,
        profiles=profiles,
        detector=detector,
        workers=workers or cfg.workers,
    )
    adv_set = Dataset(
        X=outcome.x_adv, y=y_test, split=np.full(len(y_test), 2, dtype=np.int8), k=dataset.k
    )
    save_dataset(adv_set, adv_path)
    noise_eps = None if kind == "cw" else cfg.detect_epsilon
    write_manifest(manifest_path, cfg.config_hash(), test_ids, y_test, outcome, kind, noise_eps)
    _write_run_log(out_dir, f"attack {kind}", cfg.config_hash())
    return outcome


def _stat_test_cells(
    model: Model,
    dataset: Dataset,
    cfg: ExperimentConfig,
    noise_cfg: NoiseConfig,
    adv_X: np.ndarray,
    adv_ids: np.ndarray,
    cal_ids: np.ndarray,
    hold_ids: np.ndarray,
    fpr_targets,
    attack_name: str,
) -> list[ResultRow]:
    stats = benign_calibration(model, dataset.X[cal_ids], noise_cfg, cal_ids)
    _, gbar_hold = stat_test_scores(model, dataset.X[hold_ids], stats, noise_cfg, hold_ids)
    hold_scores = max_statistics(gbar_hold)

    test_ids = dataset.indices("test")
    assert_disjoint(test_ids, cal_ids, "statistical-test FPR evaluation")
    _, gbar_test = stat_test_scores(model, dataset.X[test_ids], stats, noise_cfg, test_ids)
    test_scores = max_statistics(gbar_test)
    _, gbar_adv = stat_test_scores(model, adv_X, stats, noise_cfg, adv_ids)
    adv_scores = max_statistics(gbar_adv)

    rows = []
    for fpr_target in fpr_targets:
        table = calibrate_thresholds(hold_scores, dataset.k, fpr_target)
        tau = table.value(0, 1)
        rows.append(
            ResultRow(
                detector="stat-test",
                attack=attack_name,
                epsilon=noise_cfg.epsilon,
                fpr_target=fpr_target,
                tpr=float(np.mean(adv_scores >= tau)) if len(adv_scores) else 0.0,
                fpr=float(np.mean(test_scores >= tau)),
                n=len(adv_scores),
            )
        )
    return rows


def _classifier_cells(
    model: Model,
    dataset: Dataset,
    cfg: ExperimentConfig,
    noise_cfg: NoiseConfig,
    adv_X: np.ndarray,
    adv_ids: np.ndarray,
    cal_ids: np.ndarray,
    hold_ids: np.ndarray,
    fpr_targets,
    attack_name: str,
    train_outcome: AttackOutcome,
    train_ids: np.ndarray,
    detector_out: list | None = None,
) -> list[ResultRow]:
    hyper = DetectorHyper(
        hidden=cfg.det_hidden,
        epochs=cfg.det_epochs,
        lr=cfg.det_lr,
        patience=cfg.det_patience,
        fpr_targets=tuple(fpr_targets),
        seed=derive_seed(cfg.master_seed, "detector"),
    )
    detector = train_detector(
        model,
        benign=(dataset.X[train_ids], train_ids),
        adversarial=(train_outcome.x_adv, train_ids),
        noise_cfg=noise_cfg,
        hyper=hyper,
        meta={"trained_on": cfg.det_train_attack},
    )
    clean_h, noisy_h = batched_summaries(model, dataset.X[hold_ids], noise_cfg, hold_ids)
    recalibrate(detector, build_features(clean_h, noisy_h), fpr_targets)
    if detector_out is not None:
        detector_out.append(detector)

    test_ids = dataset.indices("test")
    assert_disjoint(test_ids, cal_ids, "classifier-detector FPR evaluation")
    clean_t, noisy_t = batched_summaries(model, dataset.X[test_ids], noise_cfg, test_ids)
    benign_scores = detector.scores(build_features(clean_t, noisy_t))
    clean_a, noisy_a = batched_summaries(model, adv_X, noise_cfg, adv_ids)
    adv_scores = detector.scores(build_features(clean_a, noisy_a))

    rows = []
    for fpr_target in fpr_targets:
        t = detector.threshold(fpr_target)
        rows.append(
            ResultRow(
                detector="classifier",
                attack=attack_name,
                epsilon=noise_cfg.epsilon,
                fpr_target=fpr_target,
                tpr=float(np.mean(adv_scores >= t)) if len(adv_scores) else 0.0,
                fpr=float(np.mean(benign_scores >= t)),
                n=len(adv_scores),
            )
        )
    return rows


def detect_pipeline(
    cfg: ExperimentConfig,
    detector_kind: str,
    manifest_path: str,
    out_dir: str,
    eps_list=None,
    fpr_list=None,
) -> ResultTable:
    """Evaluate one detector kind against a persisted attack, per (eps, FPR) cell."""
    if detector_kind not in ("stat-test", "classifier"):
        raise PipelineError(
            f"unknown detector kind {detector_kind!r}; expected stat-test or classifier"
        )
    if not os.path.exists(manifest_path):
        raise PipelineError(f"manifest not found: {manifest_path}")

    dataset = prepare_dataset(cfg)
    model = load_model(cfg, out_dir)
    manifest = read_manifest(manifest_path)
    adv_path = manifest_path.replace("manifest_", "adv_").replace(".csv", ".advd")
    if not os.path.exists(adv_path):
        raise PipelineError(f"adversarial dataset not found next to manifest: {adv_path}")
    adv_set = load_external(adv_path)

    keep = manifest.evaded
    adv_X = adv_set.X[keep]
    adv_ids = manifest.ids[keep]

    eps_values = tuple(eps_list) if eps_list else tuple(cfg.noise_epsilons)
    fpr_targets = tuple(fpr_list) if fpr_list else tuple(cfg.fpr_targets)
    if manifest.noise_eps is not None:
        mismatched = [e for e in eps_values if e != manifest.noise_eps]
        if mismatched:
            raise PipelineError(
                f"attack {manifest.attack!r} was generated against noise eps "
                f"{manifest.noise_eps}; cannot evaluate at eps {mismatched}"
            )

    cal_ids, hold_ids = calibration_split(cfg, dataset)
    assert_disjoint(dataset.indices("test"), cal_ids, "detector calibration")

    train_outcome = None
    train_ids = None
    if detector_kind == "classifier":
        train_ids = cal_ids[: cfg.det_train_samples]
        train_outcome = _training_attack(cfg, model, dataset, train_ids)

    rows: list[ResultRow] = []
    for eps in eps_values:
        noise_cfg = noise_config(cfg, eps)
        if detector_kind == "stat-test":
            rows.extend(
                _stat_test_cells(
                    model, dataset, cfg, noise_cfg, adv_X, adv_ids, cal_ids, hold_ids,
                    fpr_targets, manifest.attack,
                )
            )
        else:
            rows.extend(
                _classifier_cells(
                    model, dataset, cfg, noise_cfg, adv_X, adv_ids, cal_ids, hold_ids,
                    fpr_targets, manifest.attack, train_outcome, train_ids,
                )
            )
    table = ResultTable(rows=rows, config_hash=cfg.config_hash())
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, f"results_{detector_kind}_{manifest.attack}.csv")
    table.write_csv(out_path)
    _write_run_log(out_dir, f"detect {detector_kind} {manifest.attack}", cfg.config_hash())
    return table


def _training_attack(
    cfg: ExperimentConfig, model: Model, dataset: Dataset, train_ids: np.ndarray
) -> AttackOutcome:
    """Adversarial examples for detector training, from calibration samples."""
    kind = cfg.det_train_attack
    if kind not in ("cw", "cw-noisy", "lma"):
        raise PipelineError(
            f"det_train_attack must be cw, cw-noisy or lma, got {kind!r}"
        )
    acfg = attack_config(cfg, purpose="detector-train-attack")
    noise_cfg = noise_config(cfg, cfg.detect_epsilon)
    profiles = None
    if kind == "lma":
        cal_ids, _ = calibration_split(cfg, dataset)
        profiles = compute_profiles(model, dataset.X[cal_ids], noise_cfg, cal_ids)
    return attack_samples(
        model,
        dataset.X[train_ids],
        train_ids,
        kind,
        acfg,
        noise_cfg=noise_cfg if kind != "cw" else None,
        profiles=profiles,
        workers=cfg.workers,
    )


def armsrace_pipeline(
    cfg: ExperimentConfig, out_dir: str, force: bool = False, workers: int | None = None
) -> tuple[ResultTable, list]:
    """Mimicry-trained detector, adaptive attack, iterative retraining, final attack."""
    os.makedirs(out_dir, exist_ok=True)
    table_path = os.path.join(out_dir, "armsrace.csv")
    trace_path = os.path.join(out_dir, "armsrace_trace.csv")
    _refuse_existing([table_path, trace_path], force)
    workers = workers or cfg.workers

    dataset = prepare_dataset(cfg)
    model = ensure_model(cfg, out_dir)
    eps = cfg.detect_epsilon
    noise_cfg = noise_config(cfg, eps)
    fpr_targets = tuple(cfg.fpr_targets)
    cal_ids, hold_ids = calibration_split(cfg, dataset)
    test_ids = dataset.indices("test")
    assert_disjoint(test_ids, cal_ids, "arms-race calibration")

    profiles = compute_profiles(model, dataset.X[cal_ids], noise_cfg, cal_ids)
    acfg = attack_config(cfg, purpose="armsrace-attack")

    # mimicry-trained ("adaptive") detector
    train_ids = cal_ids[: cfg.per_iter_samples]
    lma_train = attack_samples(
        model, dataset.X[train_ids], train_ids, "lma", acfg,
        noise_cfg=noise_cfg, profiles=profiles, workers=workers,
    )
    hyper = DetectorHyper(
        hidden=cfg.det_hidden,
        epochs=cfg.det_epochs,
        lr=cfg.det_lr,
        patience=cfg.det_patience,
        fpr_targets=fpr_targets,
        seed=derive_seed(cfg.master_seed, "armsrace-detector"),
    )
    adaptive_det = train_detector(
        model,
        benign=(dataset.X[train_ids], train_ids),
        adversarial=(lma_train.x_adv, train_ids),
        noise_cfg=noise_cfg,
        hyper=hyper,
        meta={"trained_on": "lma"},
    )
    clean_h, noisy_h = batched_summaries(model, dataset.X[hold_ids], noise_cfg, hold_ids)
    holdout_features = build_features(clean_h, noisy_h)
    recalibrate(adaptive_det, holdout_features, fpr_targets)

    # test-split material
    X_test = dataset.X[test_ids]
    clean_t, noisy_t = batched_summaries(model, X_test, noise_cfg, test_ids)
    benign_test_features = build_features(clean_t, noisy_t)

    lma_test = attack_samples(
        model, X_test, test_ids, "lma", acfg,
        noise_cfg=noise_cfg, profiles=profiles, workers=workers,
    )
    adaptive_vs_adaptive = attack_samples(
        model, X_test, test_ids, "adaptive", acfg,
        noise_cfg=noise_cfg, profiles=profiles, detector=adaptive_det, workers=workers,
    )

    # iterative retraining starting from the mimicry-trained detector
    iter_det, trace = iterative_training(
        model,
        (dataset.X[cal_ids], cal_ids),
        noise_cfg,
        cfg.iterations,
        cfg.per_iter_epochs,
        cfg.per_iter_samples,
        acfg,
        detector=adaptive_det,
        profiles=profiles,
        holdout_features=holdout_features,
        fpr_targets=fpr_targets,
        hyper=hyper,
        workers=workers,
    )
    adaptive_vs_iter = attack_samples(
        model, X_test, test_ids, "adaptive", acfg,
        noise_cfg=noise_cfg, profiles=profiles, detector=iter_det, workers=workers,
    )

    rows: list[ResultRow] = []

    def eval_cells(detector: DetectorModel, det_name: str, outcome: AttackOutcome, attack_name: str):
        keep = outcome.evaded
        clean_a, noisy_a = batched_summaries(
            model, outcome.x_adv[keep], noise_cfg, test_ids[keep]
        )
        adv_scores = detector.scores(build_features(clean_a, noisy_a))
        benign_scores = detector.scores(benign_test_features)
        for fpr_target in fpr_targets:
            t = detector.threshold(fpr_target)
            rows.append(
                ResultRow(
                    detector=det_name,
                    attack=attack_name,
                    epsilon=eps,
                    fpr_target=fpr_target,
                    tpr=float(np.mean(adv_scores >= t)) if len(adv_scores) else 0.0,
                    fpr=float(np.mean(benign_scores >= t)),
                    n=int(keep.sum()),
                )
            )

    eval_cells(adaptive_det, "adaptive-detector", lma_test, "lma")
    eval_cells(adaptive_det, "adaptive-detector", adaptive_vs_adaptive, "adaptive")
    eval_cells(iter_det, "iterative-detector", lma_test, "lma")
    eval_cells(iter_det, "iterative-detector", adaptive_vs_iter, "adaptive")

    table = ResultTable(rows=rows, config_hash=cfg.config_hash())
    table.write_csv(table_path)
    with open(trace_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "attack_success", "tpr", "threshold"])
        for rec in trace:
            writer.writerow(
                [rec.iteration, _fmt(rec.attack_success), _fmt(rec.tpr), _fmt(rec.threshold)]
            )
    adaptive_det.save(os.path.join(out_dir, "detector_adaptive.ckpt"))
    iter_det.save(os.path.join(out_dir, "detector_iterative.ckpt"))
    _write_run_log(out_dir, "armsrace", cfg.config_hash())
    return table, trace


def curves_pipeline(
    cfg: ExperimentConfig,
    sample_ids,
    out_dir: str,
    manifest_path: str | None = None,
) -> list[str]:
    """One probability-vs-noise CSV per sample; with a manifest, the
    adversarial examples are probed instead of the benign originals."""
    dataset = prepare_dataset(cfg)
    model = load_model(cfg, out_dir)
    os.makedirs(out_dir, exist_ok=True)
    seed = derive_seed(cfg.master_seed, "curves")

    source = "benign"
    X_by_id = {}
    if manifest_path:
        manifest = read_manifest(manifest_path)
        adv_path = manifest_path.replace("manifest_", "adv_").replace(".csv", ".advd")
        adv_set = load_external(adv_path)
        X_by_id = {int(i): adv_set.X[row] for row, i in enumerate(manifest.ids)}
        source = manifest.attack

    paths = []
    for sid in sample_ids:
        sid = int(sid)
        if manifest_path:
            if sid not in X_by_id:
                raise PipelineError(f"sample id {sid} not present in manifest")
            x = X_by_id[sid]
        else:
            if sid < 0 or sid >= dataset.n:
                raise PipelineError(f"sample id {sid} out of range [0, {dataset.n})")
            x = dataset.X[sid]
        eps_arr, probs = probability_curve(
            model, x, cfg.noise_epsilons, cfg.noise_count, seed, sample_index=sid
        )
        path = os.path.join(out_dir, f"curve_{source}_{sid}.csv")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# config_hash={cfg.config_hash()}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epsilon"] + [f"p_class_{c}" for c in range(model.k)])
            for row in range(len(eps_arr)):
                writer.writerow([_fmt(eps_arr[row])] + [_fmt(p) for p in probs[row]])
        paths.append(path)
    _write_run_log(out_dir, "curves", cfg.config_hash())
    return paths


def cone_pipeline(
    cfg: ExperimentConfig, sample_id: int, manifest_path: str, out_dir: str
) -> str:
    """Probability map spanning the adversarial and random directions."""
    dataset = prepare_dataset(cfg)
    model = load_model(cfg, out_dir)
    manifest = read_manifest(manifest_path)
    adv_path = manifest_path.replace("manifest_", "adv_").replace(".csv", ".advd")
    adv_set = load_external(adv_path)
    rows = np.flatnonzero(manifest.ids == sample_id)
    if not rows.size:
        raise PipelineError(f"sample id {sample_id} not present in manifest")
    row = int(rows[0])

    grid = cone_probe(
        model,
        dataset.X[sample_id],
        adv_set.X[row],
        int(manifest.y[row]),
        seed=derive_seed(cfg.master_seed, "cone"),
    )
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"cone_{manifest.attack}_{sample_id}.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["alpha"] + [_fmt(b) for b in grid.betas])
        for i, alpha in enumerate(grid.alphas):
            writer.writerow([_fmt(alpha)] + [_fmt(v) for v in grid.values[i]])
    _write_run_log(out_dir, "cone", cfg.config_hash())
    return path
