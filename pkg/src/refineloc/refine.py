"""Training loop and iterative pseudo-label refinement."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pseudogen
from .dataio import DatasetManifest, derive_seed, foreground_fraction, load_all_features
from .evalkit import DEFAULT_THRESHOLDS, EvalReport, evaluate
from .numcore import adam_step
from .pseudogen import GeneratorKind, PseudoLabels
from .segpred import PostprocConfig, predict_segments, write_predictions
from .wstal import ConfigError, Model, ModelConfig, forward, init_model, loss_and_grad, save_checkpoint, total_loss

log = logging.getLogger(__name__)


@dataclass
class RefineConfig:
    eta_max: int = 3
    beta: float = 4.0
    generator: GeneratorKind = field(default_factory=GeneratorKind)
    S: float = 0.8
    epochs_per_iter: int = 50
    lr: float = 1e-4
    lr_decay: float = 0.9
    plateau_patience: int = 5
    seed: int = 0
    warm_start: bool = False
    postproc: PostprocConfig = field(default_factory=PostprocConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.eta_max < 0:
            raise ConfigError(f"eta_max must be >= 0, got {self.eta_max}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 <= self.S <= 1.0:
            raise ConfigError(f"S must be in [0, 1], got {self.S}")
        if self.epochs_per_iter < 0 or self.plateau_patience < 1:
            raise ConfigError("epochs_per_iter must be >= 0 and plateau_patience >= 1")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be > 0 and lr_decay in (0, 1]")
        self.generator.validate()
        try:
            self.postproc.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None


@dataclass
class TrainResult:
    model: Model
    best_epoch: int
    train_loss: float
    val_loss: float
    initial_train_loss: float
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss, lr)


@dataclass
class IterationReport:
    eta: int
    best_epoch: int
    train_loss: float
    val_loss: float
    eval: EvalReport | None
    pseudo_stats: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "eta": self.eta,
            "best_epoch": self.best_epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "eval": self.eval.to_json() if self.eval is not None else None,
            "pseudo_stats": self.pseudo_stats,
        }


@dataclass
class RefineResult:
    reports: list[IterationReport]
    model: Model
    predictions: dict = field(default_factory=dict)  # eta -> predictions on the eval split

    def best(self) -> IterationReport:
        return max(self.reports, key=lambda r: (r.eval.average_map if r.eval else -1.0, -r.eta))


def mean_loss(model: Model, manifest: DatasetManifest, features, ids, pseudo, beta: float) -> float:
    if not ids:
        return float("nan")
    total = 0.0
    for vid in ids:
        p = pseudo.get(vid) if pseudo else None
        total += total_loss(forward(model, features[vid]), manifest.video(vid).y, p, beta).loss
    return total / len(ids)


def train_one_iteration(manifest: DatasetManifest, features, model: Model, pseudo, cfg: RefineConfig,
                        eta: int = 0) -> TrainResult:
    """Train ``model`` (a copy) for ``cfg.epochs_per_iter`` epochs, one Adam step per video.

    Returns the snapshot with the lowest validation loss. Without pseudo
    labels only the video loss is used.
    """
    train_ids = manifest.ids("train")
    if not train_ids:
        raise ValueError("train split is empty")
    val_ids = manifest.ids("val")
    beta = cfg.beta if pseudo else 0.0
    model = model.copy()
    params = model.param_list()
    initial = mean_loss(model, manifest, features, train_ids, pseudo, beta)
    best = TrainResult(model.copy(), 0, initial, mean_loss(model, manifest, features, val_ids, pseudo, beta), initial)
    lr, since_best, best_val = cfg.lr, 0, float("inf")
    for epoch in range(1, cfg.epochs_per_iter + 1):
        rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle", eta, epoch))
        epoch_loss = 0.0
        for i in rng.permutation(len(train_ids)):
            vid = train_ids[i]
            p = pseudo.get(vid) if pseudo else None
            res = loss_and_grad(model, features[vid], manifest.video(vid).y, p, beta)
            epoch_loss += res.loss
            model.step += 1
            adam_step(params, lr, model.step)
        train_loss = epoch_loss / len(train_ids)
        # no val split: select on training loss
        val_loss = mean_loss(model, manifest, features, val_ids, pseudo, beta) if val_ids else train_loss
        best.history.append((epoch, train_loss, val_loss, lr))
        if val_loss < best_val:
            best_val, since_best = val_loss, 0
            best.model, best.best_epoch = model.copy(), epoch
            best.train_loss, best.val_loss = train_loss, val_loss
        else:
            since_best += 1
            if since_best >= cfg.plateau_patience:
                lr *= cfg.lr_decay
                since_best = 0
    return best


def predict_all(model: Model, features, ids, postproc: PostprocConfig, threads: int = 1):
    """Forward + post-process every video; results keep ``ids`` order."""
    def one(vid):
        maps = forward(model, features[vid])
        return vid, maps, predict_segments(maps, postproc, vid)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(one, ids))
    return [one(vid) for vid in ids]


def make_pseudo(manifest, outputs, gen: GeneratorKind, S: float, seed: int, eta: int) -> dict:
    pseudo = {}
    for vid, maps, preds in outputs:
        T = maps.T
        vseed = derive_seed(seed, "pseudo", eta, vid)
        if gen.kind == "uniform_random":
            labels = pseudogen.gen_uniform(T, vseed)
        elif gen.kind == "distribution_aware":
            labels = pseudogen.gen_distribution_aware(T, gen.rho, vseed)
        elif gen.kind == "class_activation":
            labels = pseudogen.gen_class_activation(maps, gen.theta)
        elif gen.kind == "attention":
            labels = pseudogen.gen_attention(maps, gen.theta)
        else:
            labels = pseudogen.gen_segment_prediction(preds, T)
        mask = pseudogen.sample_pseudo(labels, S, derive_seed(seed, "sample", eta, vid))
        pseudo[vid] = PseudoLabels(vid, labels, mask)
    return pseudo


def pseudo_stats(manifest, pseudo: dict) -> dict:
    fg = total = agree = 0
    for vid, p in pseudo.items():
        gt = manifest.video(vid).foreground_mask()
        fg += int(p.labels.sum())
        total += p.labels.size
        agree += int(np.sum(p.labels.astype(bool) == gt))
    return {
        "foreground_fraction": fg / total if total else 0.0,
        "gt_agreement": agree / total if total else 0.0,
    }


def _eval_ids(manifest):
    return manifest.ids("test") or manifest.ids("val")


def refine_loop(manifest: DatasetManifest, cfg: RefineConfig, features=None, run_dir=None,
                threads: int = 1, thresholds=DEFAULT_THRESHOLDS) -> RefineResult:
    """Train the base model, then ``eta_max`` rounds of pseudo-label supervised retraining."""
    cfg.validate()
    features = load_all_features(manifest) if features is None else features
    gen = cfg.generator
    if gen.kind == "distribution_aware" and gen.rho is None:
        if not any(manifest.video(v).gt_segments for v in manifest.ids("train")):
            raise ConfigError("distribution_aware generator needs rho or training ground truth")
        gen = replace(gen, rho=foreground_fraction(manifest, manifest.ids("train")))
    pseudo_ids = manifest.ids("train") + manifest.ids("val")
    eval_ids = _eval_ids(manifest)
    has_gt = any(manifest.video(v).gt_segments for v in eval_ids)
    run_dir = Path(run_dir) if run_dir is not None else None

    reports, predictions = [], {}
    model, pseudo = None, None
    for eta in range(cfg.eta_max + 1):
        if eta > 0:
            outputs = predict_all(model, features, pseudo_ids, cfg.postproc, threads)
            pseudo = make_pseudo(manifest, outputs, gen, cfg.S, cfg.seed, eta)
        if eta == 0 or not cfg.warm_start:
            mcfg = replace(cfg.model, D=manifest.D, N=manifest.N, init_seed=derive_seed(cfg.seed, "init", eta))
            start = init_model(mcfg)
        else:
            start = model
        res = train_one_iteration(manifest, features, start, pseudo, cfg, eta)
        model = res.model
        outputs = predict_all(model, features, eval_ids, cfg.postproc, threads)
        preds = [p for _, _, ps in outputs for p in ps]
        predictions[eta] = preds
        report = evaluate(preds, manifest, thresholds, eval_ids) if has_gt else None
        stats = pseudo_stats(manifest, pseudo) if pseudo else {}
        rep = IterationReport(eta, res.best_epoch, res.train_loss, res.val_loss, report, stats)
        reports.append(rep)
        log.info("eta=%d val_loss=%.4f avg_mAP=%s", eta, res.val_loss,
                 f"{report.average_map:.4f}" if report else "n/a")
        if run_dir is not None:
            _write_iteration(run_dir, rep, model, pseudo, preds)
    if run_dir is not None:
        write_summary(reports, run_dir / "summary.csv")
    return RefineResult(reports, model, predictions)


def _write_iteration(run_dir: Path, rep: IterationReport, model: Model, pseudo, preds) -> None:
    d = run_dir / f"iter_{rep.eta}"
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, d / "checkpoint")
    if pseudo:
        pseudogen.write_pseudo([pseudo[k] for k in sorted(pseudo)], d / "pseudo.jsonl")
    write_predictions(preds, d / "predictions.jsonl")
    with open(d / "report.json", "w") as f:
        json.dump(rep.to_json(), f, indent=1)
        f.write("\n")


def summary_row(rep: IterationReport) -> list[str]:
    m05 = rep.eval.map_per_threshold.get(0.5, float("nan")) if rep.eval else float("nan")
    avg = rep.eval.average_map if rep.eval else float("nan")
    return [str(rep.eta), f"{rep.val_loss:.6f}", f"{m05:.6f}", f"{avg:.6f}"]


def write_summary(reports, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["eta", "val_loss", "mAP@0.5", "average_mAP"])
        for rep in reports:
            w.writerow(summary_row(rep))


@dataclass
class GridCell:
    generator: str
    beta: float
    best_avg_map: float
    best_eta: int


def ablation_grid(manifest, generators, betas, cfg: RefineConfig, features=None, threads: int = 1,
                  thresholds=DEFAULT_THRESHOLDS) -> list[GridCell]:
    """Best-over-iterations average mAP for every (generator, beta) pair."""
    features = load_all_features(manifest) if features is None else features
    cells = []
    for g in generators:
        gen = g if isinstance(g, GeneratorKind) else GeneratorKind(g, cfg.generator.theta, cfg.generator.rho)
        for beta in betas:
            res = refine_loop(manifest, replace(cfg, generator=gen, beta=float(beta)), features,
                              threads=threads, thresholds=thresholds)
            best = res.best()
            cells.append(GridCell(gen.kind, float(beta), best.eval.average_map if best.eval else float("nan"), best.eta))
    return cells


def write_grid(cells, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["generator", "beta", "best_avg_map", "best_eta"])
        for c in cells:
            w.writerow([c.generator, f"{c.beta:g}", f"{c.best_avg_map:.6f}", c.best_eta])


def config_to_json(cfg: RefineConfig) -> dict:
    return asdict(cfg)
