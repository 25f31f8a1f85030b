"""Optimization loop, early stopping, evaluation, cross-patient validation and
ablation suites."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import diffcore
from .data import EegTrial, PreprocessConfig, WindowSet, patient_folds, preprocess_trial, segment, stack_windows
from .errors import DataError, InfeasibleFoldError, MissingBandCacheError, NumericError
from .losses import DistillConfig, LossBreakdown, compute_losses
from .metrics import MetricsReport, compute_metrics, majority_vote
from .model import ENSEMBLE_MODES, MBMDTransformer, ModelConfig
from .wpd import attach_bands, band_grouping_preset

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "l_ce", "l_distill", "l_norm", "l_imp", "total", "val_loss", "val_acc", "val_bca", "val_f1"]
RESULT_COLUMNS = ["suite", "variant", "fold", "repeat", "acc", "bca", "weighted_f1"]
METRICS = ("acc", "bca", "weighted_f1")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    distill: DistillConfig = field(default_factory=DistillConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ensemble_mode: str = "wavelet_attention"
    gate_importance_weight: float = 0.01
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.ensemble_mode not in ENSEMBLE_MODES:
            raise ValueError(f"ensemble_mode must be one of {ENSEMBLE_MODES}")

    def model_for(self, windows: WindowSet) -> ModelConfig:
        """Model config with the data-determined shape fields filled in."""
        n_branches = windows.bands.shape[1] if windows.bands is not None else self.model.num_branches
        return replace(
            self.model,
            channels=windows.x.shape[1],
            window_len=windows.x.shape[2],
            num_classes=windows.num_classes,
            num_branches=n_branches,
        )


@dataclass
class TrainResult:
    model: MBMDTransformer
    history: list[dict]
    best_epoch: int
    best_val_loss: float


def prepare_windows(
    trials: Sequence[EegTrial],
    num_classes: int,
    num_branches: int | None = 6,
    preprocess: PreprocessConfig | None = PreprocessConfig(),
) -> WindowSet:
    """Preprocess, segment and stack trials; attach band signals unless ``num_branches`` is None."""
    windows = []
    for trial in trials:
        windows.extend(segment(preprocess_trial(trial, preprocess) if preprocess is not None else trial))
    if not windows:
        raise DataError("no trial is long enough for a single window")
    ws = stack_windows(windows, num_classes)
    return attach_bands(ws, band_grouping_preset(num_branches)) if num_branches else ws


def _tensor(a: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)


def _batches(n: int, size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, size):
        yield order[start : start + size]


def _loss_for(model: MBMDTransformer, cfg: TrainConfig, x, bands, y) -> LossBreakdown:
    out = model.forward_train(x, bands)
    imp_w = cfg.gate_importance_weight if cfg.ensemble_mode == "gate_network" else 0.0
    return compute_losses(out, y, cfg.distill, model.norm_vector(), imp_w)


def predict(model: MBMDTransformer, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    model.eval()
    preds = []
    with torch.no_grad():
        for idx in _batches(len(x), batch_size):
            preds.append(model.forward_infer(_tensor(x[idx], dtype)).argmax(dim=-1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def validation_loss(model: MBMDTransformer, cfg: TrainConfig, windows: WindowSet, batch_size: int = 256) -> float:
    dtype = next(model.parameters()).dtype
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for idx in _batches(len(windows), batch_size):
            bands = _tensor(windows.bands[idx], dtype) if windows.bands is not None else None
            lb = _loss_for(model, cfg, _tensor(windows.x[idx], dtype), bands, torch.from_numpy(windows.labels[idx]))
            total += float(lb.total) * len(idx)
            count += len(idx)
    return total / count


def _check_bands(windows: WindowSet, model_cfg: ModelConfig, what: str) -> None:
    if model_cfg.multi_branch and windows.bands is None:
        raise MissingBandCacheError(f"{what}: band signals missing (run decompose first)")


def train(
    train_set: WindowSet,
    val_set: WindowSet,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    dtype: torch.dtype | None = None,
) -> TrainResult:
    """AdamW on the total loss with early stopping on validation total loss.

    Returns the model restored to its best-validation state.
    """
    if len(train_set) == 0:
        raise DataError("empty training set")
    if len(val_set) == 0:
        raise DataError("empty validation set")
    model_cfg = cfg.model_for(train_set)
    _check_bands(train_set, model_cfg, "train")
    _check_bands(val_set, model_cfg, "validation")
    dtype = dtype or diffcore.default_dtype()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = MBMDTransformer(model_cfg, cfg.ensemble_mode).to(dtype)
    opt = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.learning_rate,
        betas=cfg.betas,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    x_all = _tensor(train_set.x, dtype)
    b_all = _tensor(train_set.bands, dtype) if train_set.bands is not None and model_cfg.multi_branch else None
    y_all = torch.from_numpy(train_set.labels)

    history: list[dict] = []
    best_loss, best_epoch, best_state, stale = math.inf, 0, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        sums = dict.fromkeys(("l_ce", "l_distill", "l_norm", "l_imp", "total"), 0.0)
        for idx in _batches(len(train_set), cfg.batch_size, rng):
            idx_t = torch.from_numpy(idx)
            lb = _loss_for(model, cfg, x_all[idx_t], None if b_all is None else b_all[idx_t], y_all[idx_t])
            diffcore.check_finite(lb.total, f"training loss (epoch {epoch})")
            opt.zero_grad()
            lb.total.backward()
            opt.step()
            for key, val in lb.as_floats().items():
                sums[key] += val * len(idx)
        row = {"epoch": epoch, **{k: v / len(train_set) for k, v in sums.items()}}

        val_loss = validation_loss(model, cfg, val_set)
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        rep = compute_metrics(val_set.labels, predict(model, val_set.x), val_set.num_classes)
        row.update(val_loss=val_loss, val_acc=rep.acc, val_bca=rep.bca, val_f1=rep.weighted_f1)
        history.append(row)
        log.debug("epoch %d total %.4f val %.4f bca %.3f", epoch, row["total"], val_loss, rep.bca)

        if val_loss < best_loss:
            best_loss, best_epoch, stale = val_loss, epoch, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    if log_path is not None:
        write_training_log(history, log_path)
    return TrainResult(model, history, best_epoch, best_loss)


def write_training_log(history: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


def evaluate(model: MBMDTransformer | str | Path, windows: WindowSet, trial_level: bool = False) -> MetricsReport | tuple[MetricsReport, MetricsReport]:
    """Window-level metrics from argmax of the raw-path logits."""
    if not isinstance(model, MBMDTransformer):
        from .checkpoint import load_checkpoint

        model, _ = load_checkpoint(model)
    if model.cfg.num_classes != windows.num_classes:
        raise DataError(f"checkpoint has {model.cfg.num_classes} classes, data has {windows.num_classes}")
    pred = predict(model, windows.x)
    report = compute_metrics(windows.labels, pred, windows.num_classes)
    if trial_level:
        return report, majority_vote(windows.trial_ids, windows.labels, pred, windows.num_classes)
    return report


# ---------------------------------------------------------------- cross-validation


@dataclass
class CvEntry:
    fold: int
    repeat: int
    report: MetricsReport
    train_patients: list[str]
    val_patients: list[str]
    test_patients: list[str]
    best_epoch: int
    epochs_run: int
    history: list[dict] = field(repr=False, default_factory=list)


@dataclass
class CvResult:
    entries: list[CvEntry]

    def values(self, metric: str) -> np.ndarray:
        return np.array([getattr(e.report, metric) for e in self.entries])

    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {}
        for m in METRICS:
            v = self.values(m)
            out[m] = (float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0)
        return out


def split_validation(patients: Sequence[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Hold out ``fraction`` of patients (at least one) for early stopping."""
    patients = sorted(patients)
    if len(patients) < 2:
        raise InfeasibleFoldError("need at least 2 training patients to carve a validation holdout")
    n_val = min(len(patients) - 1, max(1, int(round(fraction * len(patients)))))
    order = np.random.default_rng(seed).permutation(len(patients))
    val = sorted(patients[i] for i in order[:n_val])
    return [p for p in patients if p not in val], val


def _run_fold(windows: WindowSet, cfg: TrainConfig, train_p, val_p, test_p, fold, repeat, log_dir) -> CvEntry:
    if set(test_p) & (set(train_p) | set(val_p)):
        raise AssertionError(f"patient leakage in fold {fold} repeat {repeat}")
    train_set, val_set, test_set = (windows.for_patients(p) for p in (train_p, val_p, test_p))
    if set(train_set.patients) & set(test_set.patients):
        raise AssertionError("test patient windows found in training set")
    log_path = Path(log_dir) / f"train_r{repeat}_f{fold}.csv" if log_dir else None
    res = train(train_set, val_set, cfg, log_path)
    report = evaluate(res.model, test_set)
    return CvEntry(fold, repeat, report, list(train_p), list(val_p), list(test_p), res.best_epoch, len(res.history), res.history)


def cross_validate(
    windows: WindowSet,
    cfg: TrainConfig,
    k: int = 3,
    repeats: int = 10,
    jobs: int = 1,
    log_dir: str | Path | None = None,
) -> CvResult:
    """k-fold cross-patient validation repeated ``repeats`` times.

    Repeat r re-draws the fold plan with seed ``cfg.seed + 1000 r``; fold f
    trains with seed ``cfg.seed + 1000 r + f``.
    """
    patients = sorted(set(windows.patients))
    if len(patients) < k:
        raise InfeasibleFoldError(f"{len(patients)} patients cannot form {k} folds")
    jobs_args = []
    for r in range(repeats):
        plan = patient_folds(patients, k, cfg.seed + 1000 * r)
        for f in range(k):
            seed = cfg.seed + 1000 * r + f
            test_p = plan.patients_in(f)
            train_p, val_p = split_validation([p for p in patients if p not in test_p], cfg.val_fraction, seed)
            jobs_args.append((windows, replace(cfg, seed=seed), train_p, val_p, test_p, f, r, log_dir))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, mp_context=get_context("spawn")) as pool:
            entries = list(pool.map(_run_fold, *zip(*jobs_args)))
    else:
        entries = [_run_fold(*a) for a in jobs_args]
    return CvResult(entries)


# ---------------------------------------------------------------- ablations


def _loss_type_variants(cfg: TrainConfig):
    yield "L_ce", replace(cfg, distill=replace(cfg.distill, mode="none")), None
    yield "L_ce+L_kl^e", replace(cfg, distill=replace(cfg.distill, mode="single_direction")), None
    yield "L_ce+L_distill", replace(cfg, distill=replace(cfg.distill, mode="mutual")), None


def _ensemble_variants(cfg: TrainConfig):
    yield "average", replace(cfg, ensemble_mode="average"), None
    yield "gate_network", replace(cfg, ensemble_mode="gate_network", gate_importance_weight=0.0), None
    yield "gate_network+L_imp", replace(cfg, ensemble_mode="gate_network", gate_importance_weight=cfg.gate_importance_weight or 0.01), None
    yield "wavelet_attention", replace(cfg, ensemble_mode="wavelet_attention", distill=replace(cfg.distill, lam=0.0)), None
    yield "wavelet_attention+L_norm", replace(cfg, ensemble_mode="wavelet_attention", distill=replace(cfg.distill, lam=cfg.distill.lam or 0.01)), None


def _block_pattern_variants(cfg: TrainConfig):
    for pattern in ("TTTT", "TTTM", "TTMM", "TMTM"):
        yield pattern, replace(cfg, model=replace(cfg.model, block_pattern=pattern, num_blocks=4)), None


def _temperature_variants(cfg: TrainConfig):
    for t in range(3, 10):
        yield f"T={t}", replace(cfg, distill=replace(cfg.distill, temperature=float(t))), None


def _branch_variants(cfg: TrainConfig):
    for b in (2, 3, 6):
        yield f"B={b}", cfg, b


SUITES: dict[str, Callable] = {
    "loss_type": _loss_type_variants,
    "ensemble": _ensemble_variants,
    "block_pattern": _block_pattern_variants,
    "temperature": _temperature_variants,
    "branches": _branch_variants,
}


def suite_variants(name: str, cfg: TrainConfig) -> list[tuple[str, TrainConfig, int | None]]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; known: {', '.join(SUITES)}")
    return list(SUITES[name](cfg))


@dataclass
class SuiteResult:
    suite: str
    variant: str
    cv: CvResult


def ablation_suite(
    name: str,
    windows: WindowSet,
    cfg: TrainConfig,
    k: int = 3,
    repeats: int = 10,
    jobs: int = 1,
    variants: Sequence[str] | None = None,
) -> list[SuiteResult]:
    """Run each variant of a suite as a full cross-validation.

    ``windows`` must carry raw windows; band signals are recomputed when a
    variant needs a different branch count.
    """
    results = []
    band_cache: dict[int, WindowSet] = {}
    if windows.bands is not None:
        band_cache[windows.bands.shape[1]] = windows
    for variant, vcfg, n_branches in suite_variants(name, cfg):
        if variants is not None and variant not in variants:
            continue
        b = n_branches or vcfg.model.num_branches
        if b not in band_cache:
            ws = replace(windows, bands=None, band_names=())
            band_cache[b] = attach_bands(ws, band_grouping_preset(b))
        log.info("suite %s variant %s", name, variant)
        results.append(SuiteResult(name, variant, cross_validate(band_cache[b], vcfg, k, repeats, jobs)))
    return results


def write_results_csv(results: Sequence[SuiteResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for res in results:
            for e in res.cv.entries:
                writer.writerow([res.suite, res.variant, e.fold, e.repeat] + [repr(getattr(e.report, m)) for m in METRICS])


def write_aggregate_csv(results: Sequence[SuiteResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["suite", "variant", "n"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")])
        for res in results:
            agg = res.cv.aggregate()
            writer.writerow([res.suite, res.variant, len(res.cv.entries)] + [repr(v) for m in METRICS for v in agg[m]])


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
