"""Training and evaluation orchestration.

Every run is a pure function of its config: rng streams are derived from
the config seed per concern (data order, flow pretraining, evaluation
grids are deterministic), so reruns produce byte-identical CSV and PGM
artifacts. One run directory holds the config echo, metric CSVs, theory
report, heatmaps, figures, checkpoints, and a manifest of artifact
hashes.
"""

import csv
import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, nn, report
from .data import (_draw_real, generate_dense_toy, generate_toy2d,
                   make_rect_mask, paste)
from .flow import (alt_flow_loss, build_coupling_flow, flow_grads_vec,
                   flow_inverse, flow_params, flow_total_loss, loss_mle,
                   set_flow_params)
from .losses import LossWeights, MixedBatch, compound_loss_and_grad_vec
from .metrics import (EvalFold, auroc, average_precision, calibrate_threshold,
                      closed_miou, confusion_tally, cross_calibrated_open_miou,
                      fpr_at_tpr, mean_f1, open_gap, open_iou,
                      write_metrics_csv)
from .model import (build_hybrid_model, dense_scores, model_params,
                    open_set_predict, set_model_params)
from .theory import (condition_lhs, ensemble_stats, rank_correlation,
                     standardize, write_theory_csv)

THREADS_ENV = "DENSEHYBRID_LAB_THREADS"


class ConfigError(ValueError):
    """Bad configuration: unknown keys, invalid values."""


@dataclass
class ExperimentConfig:
    # dataset
    dataset: str = "toy2d"            # "toy2d" | "dense"
    seed: int = 7
    n_train: int = 1000
    n_test: int = 1000
    n_negative: int = 500
    n_anomaly: int = 1000
    dense_classes: int = 4
    dense_grid: int = 32
    dense_channels: int = 3
    # model
    hidden: int = 64
    depth: int = 3                    # hidden layers before the class head
    posterior_hidden: int = 32
    # optimization
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2   # decoupled decay; anchors the logit scale
                                 # (the negative LSE term is unbounded below)
    pretrain_steps: int = 500
    finetune_steps: int = 2000
    batch_size: int = 64
    # loss weights
    beta1: float = 1.0
    beta2: float = 0.3
    beta3: float = 0.3
    beta4: float = 0.03
    likelihood_term: str = "exact"    # "exact" | "ub"; few-class toy models
                                      # need the two-sided density anchor
    # anomaly score weighting
    weight_disc: float = 1.0
    weight_gen: float = 1.0
    # negatives
    b_real: float = 1.0               # probability of a real negative
    mask_frac_lo: float = 0.05
    mask_frac_hi: float = 0.20
    patch_side_lo: int = 4
    patch_side_hi: int = 16
    # flow
    flow_depth: int = 8
    flow_hidden: int = 32
    flow_lr: float = 1e-3
    flow_pretrain_steps: int = 500
    sample_temperature: float = 3.0   # widened latents bias synthetic
                                      # negatives toward the boundary
    lambda_jsd: float = 0.03
    jsd_sign: float = 1.0
    alt_flow_objective: bool = False  # detector-driven flow loss instead of JSD
    alt_weight_d: float = 1.0
    alt_weight_x: float = 1.0
    # evaluation
    tpr_target: float = 0.95
    calib_frac: float = 0.2
    heatmap_grid: int = 101
    heatmap_extent: float = 5.0
    out_dir: str = "runs/default"

    def weights(self):
        return LossWeights(self.beta1, self.beta2, self.beta3, self.beta4)

    def validate(self):
        if self.dataset not in ("toy2d", "dense"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if not 0.0 <= self.b_real <= 1.0:
            raise ConfigError("b_real must lie in [0, 1]")
        if self.lambda_jsd < 0:
            raise ConfigError("lambda_jsd must be non-negative")
        if self.likelihood_term not in ("exact", "ub"):
            raise ConfigError("likelihood_term must be 'exact' or 'ub'")
        return self


def load_config(path):
    with open(path) as fh:
        raw = json.load(fh)
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**raw).validate()


def apply_overrides(config, pairs):
    """Apply repeatable key=value overrides; values parse as JSON with a
    bare-string fallback."""
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, value = pair.split("=", 1)
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        setattr(config, key, parsed)
    return config.validate()


def save_config(config, path):
    with open(path, "w") as fh:
        json.dump(dataclasses.asdict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return Path(path)


@dataclass
class RunReport:
    run_dir: Path
    metrics_csv: Path = None
    theory_csv: Path = None
    losses_csv: Path = None
    heatmaps: list = field(default_factory=list)
    figures: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    config_path: Path = None
    manifest: Path = None
    summary: dict = field(default_factory=dict)

    def artifacts(self):
        paths = [self.metrics_csv, self.theory_csv, self.losses_csv,
                 self.config_path]
        paths += self.heatmaps + self.figures + self.checkpoints
        for p in paths:
            if p is not None:
                yield Path(p)
        # sibling raw-value CSVs ride along with the PGM heatmaps
        for p in self.heatmaps:
            yield Path(p).with_suffix(".csv")


def _eval_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _parallel_map(fn, items):
    threads = _eval_threads()
    if threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- training loops ------------------------------------------------------------

def _check_finite(loss, step, phase):
    if not np.isfinite(loss):
        raise RuntimeError(f"{phase} diverged at step {step}: loss={loss!r}")


def _decayed_step(opt, params, grad, config):
    """Optimizer update with decoupled weight decay."""
    shrink = config.learning_rate * config.weight_decay
    return nn.optimizer_step(opt, params, grad) - shrink * params


def _pretrain_classifier(model, x, labels, config, rng):
    weights = LossWeights(config.beta1, 0.0, 0.0, 0.0)
    params = model_params(model)
    opt = nn.make_optimizer(config.optimizer, config.learning_rate, params.size)
    losses = []
    for step in range(config.pretrain_steps):
        idx = rng.choice(len(x), size=min(config.batch_size, len(x)),
                         replace=False)
        batch = MixedBatch(x[idx], labels[idx],
                           np.zeros(len(idx), dtype=bool))
        loss, grad = compound_loss_and_grad_vec(model, batch, weights)
        _check_finite(loss, step, "pretraining")
        params = _decayed_step(opt, params, grad, config)
        set_model_params(model, params)
        losses.append(loss)
    return losses


def _pretrain_flow(flow, x, config, rng):
    params = flow_params(flow)
    opt = nn.make_optimizer(config.optimizer, config.flow_lr, params.size)
    for step in range(config.flow_pretrain_steps):
        idx = rng.choice(len(x), size=min(128, len(x)), replace=False)
        value, grads = loss_mle(flow, x[idx])
        _check_finite(value, step, "flow pretraining")
        params = nn.optimizer_step(opt, params, flow_grads_vec(grads))
        set_flow_params(flow, params)


def _toy_mixed_batch(ds, flow, config, rng):
    """One mixed-content batch of toy points, plus the deleted inlier
    points and the latents when the negatives came from the flow."""
    idx = rng.choice(len(ds.train_x), size=config.batch_size, replace=False)
    x = ds.train_x[idx]
    y = ds.train_labels[idx]
    frac = rng.uniform(config.mask_frac_lo, config.mask_frac_hi)
    n_neg = max(1, int(round(frac * config.batch_size)))
    mask = np.zeros(config.batch_size, dtype=bool)
    mask[rng.choice(config.batch_size, size=n_neg, replace=False)] = True

    latents = None
    if rng.random() < config.b_real:
        patch = _draw_real(ds.negatives, n_neg, rng)
    else:
        latents = rng.standard_normal((n_neg, flow.dim)) * config.sample_temperature
        patch = flow_inverse(flow, latents)
    deleted = x[mask].copy()
    return paste(x, patch, mask, y), deleted, latents


def _dense_mixed_batch(world, flow, config, rng):
    """One mixed-content scene, flattened to an element batch."""
    scene = world.train[int(rng.integers(0, len(world.train)))]
    h, w, c = scene.features.shape
    frac = rng.uniform(config.mask_frac_lo, config.mask_frac_hi)
    side = int(round(np.sqrt(frac * h * w)))
    side = int(np.clip(side, config.patch_side_lo,
                       min(config.patch_side_hi, h, w)))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    mask = make_rect_mask((h, w), top, left, side, side)

    latents = None
    if rng.random() < config.b_real:
        patch = _draw_real(world.texture_bank, (side, side), rng)
    else:
        latents = (rng.standard_normal((side * side, flow.dim))
                   * config.sample_temperature)
        patch = flow_inverse(flow, latents).reshape(side, side, flow.dim)
    deleted = scene.features[mask].copy()
    mixed = paste(scene.features, patch, mask, scene.labels)
    flat = MixedBatch(mixed.inputs.reshape(-1, c), mixed.labels.ravel(),
                      mixed.mask.ravel())
    return flat, deleted, latents


def _finetune(model, flow, dataset, config, rng):
    weights = config.weights()
    params = model_params(model)
    opt = nn.make_optimizer(config.optimizer, config.learning_rate, params.size)
    f_params = f_opt = None
    if flow is not None:
        f_params = flow_params(flow)
        f_opt = nn.make_optimizer(config.optimizer, config.flow_lr,
                                  f_params.size)
    make_batch = _toy_mixed_batch if config.dataset == "toy2d" else _dense_mixed_batch
    losses = []
    for step in range(config.finetune_steps):
        batch, deleted, latents = make_batch(dataset, flow, config, rng)
        loss, grad = compound_loss_and_grad_vec(model, batch, weights,
                                                config.likelihood_term)
        _check_finite(loss, step, "fine-tuning")
        losses.append(loss)
        params = _decayed_step(opt, params, grad, config)
        set_model_params(model, params)

        if flow is not None:
            if config.alt_flow_objective and latents is not None:
                f_value, f_grads = alt_flow_loss(
                    flow, model, deleted, latents,
                    config.alt_weight_d, config.alt_weight_x)
            else:
                f_value, f_grads = flow_total_loss(
                    flow, deleted, model,
                    lam=config.lambda_jsd if latents is not None else 0.0,
                    latents=latents, jsd_sign=config.jsd_sign)
            _check_finite(f_value, step, "flow fine-tuning")
            f_params = nn.optimizer_step(f_opt, f_params,
                                         flow_grads_vec(f_grads))
            set_flow_params(flow, f_params)
    return losses


# -- toy detection evaluation ----------------------------------------------------

@dataclass
class DetectionEval:
    rows: list          # metric CSV rows
    scores: dict        # per-detector test-fold scores
    is_outlier: np.ndarray
    thresholds: dict
    stats: object       # EnsembleStats on standardized test scores


def _toy_detection_eval(model, ds, config):
    n_cal_in = int(round(config.calib_frac * len(ds.test_x)))
    n_cal_an = int(round(config.calib_frac * len(ds.anomalies)))
    points = {
        "calib": (np.concatenate([ds.test_x[:n_cal_in], ds.anomalies[:n_cal_an]]),
                  np.concatenate([np.zeros(n_cal_in, bool), np.ones(n_cal_an, bool)])),
        "test": (np.concatenate([ds.test_x[n_cal_in:], ds.anomalies[n_cal_an:]]),
                 np.concatenate([np.zeros(len(ds.test_x) - n_cal_in, bool),
                                 np.ones(len(ds.anomalies) - n_cal_an, bool)])),
    }
    per_split = {}
    for split, (x, is_outlier) in points.items():
        s = dense_scores(model, x, config.weight_disc, config.weight_gen)
        per_split[split] = ({"hybrid": s.hybrid, "disc": s.disc, "gen": s.gen},
                            is_outlier)

    rows, thresholds = [], {}
    cal_scores, cal_out = per_split["calib"]
    test_scores, test_out = per_split["test"]
    for name in ("hybrid", "disc", "gen"):
        thr = calibrate_threshold(cal_scores[name], cal_out, config.tpr_target)
        thresholds[name] = thr
        rows.append((f"auroc_{name}", "test",
                     auroc(test_scores[name], test_out), thr, config.seed))
        rows.append((f"ap_{name}", "test",
                     average_precision(test_scores[name], test_out), thr,
                     config.seed))
        rows.append((f"fpr95_{name}", "test",
                     fpr_at_tpr(test_scores[name], test_out,
                                config.tpr_target)[0], thr, config.seed))

    f = np.where(test_out, 1.0, -1.0)
    stats = ensemble_stats(standardize(test_scores["disc"]),
                           standardize(test_scores["gen"]), f)
    return DetectionEval(rows, test_scores, test_out, thresholds, stats)


def _toy_heatmaps(model, config, run_dir):
    grid = np.linspace(-config.heatmap_extent, config.heatmap_extent,
                       config.heatmap_grid)
    xx, yy = np.meshgrid(grid, grid)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    scores = dense_scores(model, pts, config.weight_disc, config.weight_gen)
    extent = [-config.heatmap_extent, config.heatmap_extent,
              -config.heatmap_extent, config.heatmap_extent]
    pgms, figs = [], []
    for name in ("hybrid", "disc", "gen"):
        values = getattr(scores, name).reshape(config.heatmap_grid,
                                               config.heatmap_grid)
        pgms.append(report.emit_heatmap(values, run_dir / f"score_{name}.pgm"))
        figs.append(report.save_score_figure(
            values, run_dir / f"score_{name}.png", extent=extent,
            title=f"{name} anomaly score"))
    return pgms, figs


# -- top-level runs ----------------------------------------------------------------

def _build_dataset(config):
    if config.dataset == "toy2d":
        return generate_toy2d(config.seed, config.n_train, config.n_test,
                              config.n_negative, config.n_anomaly)
    return generate_dense_toy(config.seed, config.dense_classes,
                              config.dense_grid, config.dense_channels)


def run_training(config):
    """Closed-set pretraining, then open-set fine-tuning on mixed-content
    batches; negatives come from the real pool, the flow, or their
    mixture according to b_real."""
    config.validate()
    run_dir = Path(config.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dataset = _build_dataset(config)

    if config.dataset == "toy2d":
        in_dim, n_classes = 2, dataset.n_classes
        train_x, train_labels = dataset.train_x, dataset.train_labels
    else:
        in_dim, n_classes = config.dense_channels, config.dense_classes
        train_x = np.concatenate([s.features.reshape(-1, in_dim)
                                  for s in dataset.train])
        train_labels = np.concatenate([s.labels.ravel()
                                       for s in dataset.train])

    model = build_hybrid_model(in_dim, n_classes, config.hidden, config.depth,
                               config.posterior_hidden, seed=config.seed)
    flow = None
    if config.b_real < 1.0:
        flow = build_coupling_flow(in_dim, config.flow_depth,
                                   config.flow_hidden, seed=config.seed)
        _pretrain_flow(flow, train_x, config,
                       np.random.default_rng([config.seed, 2]))

    pre_losses = _pretrain_classifier(model, train_x, train_labels, config,
                                      np.random.default_rng([config.seed, 1]))
    tune_losses = _finetune(model, flow, dataset, config,
                            np.random.default_rng([config.seed, 3]))

    rep = RunReport(run_dir)
    rep.config_path = save_config(config, run_dir / "config.json")
    rep.losses_csv = _write_losses_csv(run_dir / "losses.csv", pre_losses,
                                       tune_losses)
    rep.figures.append(report.save_curve(pre_losses + tune_losses,
                                         run_dir / "loss_curve.png"))

    ckpt = run_dir / "model.ckpt"
    checkpoint.save_model(model, ckpt)
    rep.checkpoints.append(ckpt)
    if flow is not None:
        f_ckpt = run_dir / "flow.ckpt"
        checkpoint.save_flow(flow, f_ckpt)
        rep.checkpoints.append(f_ckpt)

    if config.dataset == "toy2d":
        ev = _toy_detection_eval(model, dataset, config)
        rep.metrics_csv = write_metrics_csv(run_dir / "metrics.csv", ev.rows)
        rep.theory_csv = write_theory_csv(run_dir / "theory.csv", [ev.stats])
        pgms, figs = _toy_heatmaps(model, config, run_dir)
        rep.heatmaps += pgms
        rep.figures += figs
        rep.figures.append(report.save_toy_scatter(dataset,
                                                   run_dir / "dataset.png"))
        rep.summary = {name: value for name, _, value, _, _ in ev.rows
                       if name.startswith(("auroc", "ap", "fpr"))}
        rep.summary["rank_agreement"] = rank_correlation(
            ev.scores["hybrid"],
            0.5 * standardize(ev.scores["disc"])
            + 0.5 * standardize(ev.scores["gen"]))
    else:
        ose = evaluate_open_set(model, dataset, config)
        rep.metrics_csv = write_metrics_csv(run_dir / "metrics.csv", ose["rows"])
        rep.summary = {k: ose[k] for k in
                       ("closed_miou", "open_miou", "mean_f1", "gap")}

    rep.manifest = report.write_manifest(run_dir, list(rep.artifacts()))
    rep.summary["run_dir"] = str(run_dir)
    return rep


def train_hybrid(config):
    """Training on real negatives only (b_real pinned to 1)."""
    config = dataclasses.replace(config, b_real=1.0)
    return run_training(config)


def train_joint_with_flow(config):
    """Joint training with flow-synthesized negatives (requires b_real < 1)."""
    if config.b_real >= 1.0:
        raise ConfigError("joint flow training requires b_real < 1")
    return run_training(config)


def _write_losses_csv(path, pre_losses, tune_losses):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("phase", "step", "loss"))
        for i, v in enumerate(pre_losses):
            writer.writerow(("pretrain", i, repr(float(v))))
        for i, v in enumerate(tune_losses):
            writer.writerow(("finetune", i, repr(float(v))))
    return Path(path)


# -- component ablation --------------------------------------------------------------

def ablate_components(model, dataset, config, out_path=None):
    """Detection metrics for the two component scores and their
    combination under the same calibration protocol, plus the ensemble
    statistics and the condition value."""
    ev = _toy_detection_eval(model, dataset, config)
    rows = list(ev.rows)
    stats = ev.stats
    rows.append(("condition_lhs", "test", condition_lhs(stats), "", config.seed))
    rows.append(("rho", "test", stats.rho, "", config.seed))
    rows.append(("alpha", "test", stats.alpha, "", config.seed))
    rows.append(("e", "test", stats.e, "", config.seed))
    if out_path is not None:
        write_metrics_csv(out_path, rows)
    return rows, stats


# -- mixing sweep ----------------------------------------------------------------------

def sweep_mixing(config, b_values, out_path=None):
    """One full train/eval cycle per mixing probability b."""
    rows = []
    for b in b_values:
        sub = dataclasses.replace(
            config, b_real=float(b),
            out_dir=str(Path(config.out_dir) / f"b_{b:g}"))
        rep = run_training(sub)
        for metric in ("auroc_hybrid", "ap_hybrid", "fpr95_hybrid"):
            rows.append((metric, f"b={b:g}", rep.summary[metric], "",
                         config.seed))
    if out_path is not None:
        write_metrics_csv(out_path, rows)
    return rows


# -- dense open-set evaluation ------------------------------------------------------------

def evaluate_open_set(model, world, config, calib_scenes=None, test_scenes=None):
    """Threshold at the target TPR on the calibration fold, then open-set
    metrics on the test fold, plus a two-fold swapped aggregate."""
    calib_scenes = world.calib if calib_scenes is None else calib_scenes
    test_scenes = world.test if test_scenes is None else test_scenes
    if any(a is b for a in calib_scenes for b in test_scenes):
        raise ConfigError("calibration and test folds overlap")
    k = world.n_classes

    def score_scene(scene):
        s = dense_scores(model, scene.features, config.weight_disc,
                         config.weight_gen)
        return s.labels, s.hybrid, scene.labels

    calib_scored = _parallel_map(score_scene, calib_scenes)
    test_scored = _parallel_map(score_scene, test_scenes)

    cal_scores = np.concatenate([s.ravel() for _, s, _ in calib_scored])
    cal_outlier = np.concatenate([(gt == k).ravel()
                                  for _, _, gt in calib_scored])
    threshold = calibrate_threshold(cal_scores, cal_outlier, config.tpr_target)

    tally = None
    closed_preds, gts = [], []
    for closed, scores, gt in test_scored:
        pred = open_set_predict(closed, scores, threshold, k).labels
        t = confusion_tally(pred, gt, k)
        tally = t if tally is None else tally.merge(t)
        closed_preds.append(closed)
        gts.append(gt)

    closed = closed_miou(np.concatenate([p.ravel() for p in closed_preds]),
                         np.concatenate([g.ravel() for g in gts]), k)
    _, omiou = open_iou(tally)
    f1 = mean_f1(tally)
    gap = open_gap(closed, omiou)

    half = max(1, len(test_scored) // 2)
    folds = [EvalFold("fold-a", test_scored[:half]),
             EvalFold("fold-b", test_scored[half:])]
    swap_overall, swap_rows = cross_calibrated_open_miou(folds, k,
                                                         config.tpr_target)

    rows = [("closed_miou", "test", closed, threshold, config.seed),
            ("open_miou", "test", omiou, threshold, config.seed),
            ("mean_f1", "test", f1, threshold, config.seed),
            ("gap", "test", gap, threshold, config.seed),
            ("open_miou_foldswap", "test", swap_overall, "", config.seed)]
    return {"rows": rows, "closed_miou": closed, "open_miou": omiou,
            "mean_f1": f1, "gap": gap, "threshold": threshold,
            "foldswap": swap_rows, "tally": tally}
