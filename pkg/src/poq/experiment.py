"""Training, evaluation and the query-mode comparison experiments."""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .assignment import aligned_loss, decode_predictions, exhaustive_loss
from .autodiff import no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SPLITS, Dataset, DatasetSpec, generate, load_dataset
from .errors import ConfigError, InfeasibleAssignment
from .metrics import (CSV_HEADER, MetricReport, convergence_epoch, evaluate_predictions,
                      speedup_percentage)
from .mixup import Batch, MixupConfig, MixupMode, apply_mixup
from .model import ModelConfig, QueryMode, Transformer
from .optim import SGD, Adam
from .plots import curves_svg

logger = logging.getLogger(__name__)

_ORDER_STREAM, _MIXUP_STREAM = 101, 102


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mixup: MixupConfig = field(default_factory=MixupConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    dataset_path: Optional[str] = None
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    seeds: tuple = (0, 1, 2)
    # None picks 1e-3 for primal queries and 1e-4 for the additive baselines
    lr_backbone: Optional[float] = None
    lr_transformer: float = 1e-4
    momentum: float = 0.9
    loss: str = "aligned"
    eval_batch_size: int = 250
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.loss not in ("aligned", "exhaustive"):
            raise ConfigError(f"loss must be 'aligned' or 'exhaustive', got {self.loss!r}")
        if self.loss == "exhaustive" and self.model.num_queries != self.model.num_classes:
            raise ConfigError(
                f"exhaustive loss needs num_queries == num_classes "
                f"({self.model.num_queries} != {self.model.num_classes})"
            )
        if self.mixup.mode is MixupMode.RESTRICTED_HARD and self.batch_size % 2:
            raise ConfigError("restricted hard mixup needs an even batch size")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.model.num_classes != self.data.num_classes:
            raise ConfigError(
                f"model has {self.model.num_classes} classes, dataset {self.data.num_classes}"
            )
        if self.model.image_size != self.data.image_size:
            raise ConfigError(
                f"model image_size {self.model.image_size} != dataset {self.data.image_size}"
            )

    def backbone_lr(self) -> float:
        if self.lr_backbone is not None:
            return self.lr_backbone
        return 1e-3 if self.model.query_mode is QueryMode.PRIMAL else 1e-4

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, model=replace(self.model, seed=seed))


# -- flat key=value config files -------------------------------------------------

_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"seed"}
_DATA_KEYS = {
    "num_classes": "num_classes", "max_labels": "max_labels", "train_size": "train_size",
    "val_size": "val_size", "test_size": "test_size", "data_seed": "seed",
    "cooccurrence_strength": "cooccurrence_strength",
    "cooccurrence_pairs": "cooccurrence_pairs", "image_size": "image_size",
}
_TOP_KEYS = {"dataset", "epochs", "batch_size", "seed", "seeds", "lr_backbone",
             "lr_transformer", "momentum", "loss", "out", "mixup", "alpha", "residual_cross",
             "eval_batch_size"}
CONFIG_KEYS = sorted(_MODEL_KEYS | set(_DATA_KEYS) | _TOP_KEYS)


def _parse_bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _parse_pairs(v: str):
    pairs = []
    for item in filter(None, (p.strip() for p in str(v).split(";"))):
        a, _, b = item.partition("-")
        pairs.append((int(a), int(b)))
    return tuple(pairs)


def parse_config_text(text: str) -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key = key.strip().replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def build_config(values: Dict[str, str]) -> ExperimentConfig:
    """ExperimentConfig from flat string values (config file merged with CLI flags)."""
    try:
        model_kw, data_kw, top = {}, {}, {}
        ints = {"num_encoder_layers", "num_decoder_layers", "d_model", "num_queries",
                "num_classes", "image_size", "patch_size", "channels", "feature_channels",
                "n_heads", "max_labels", "train_size", "val_size", "test_size", "data_seed",
                "epochs", "batch_size", "seed", "eval_batch_size"}
        floats = {"lr_backbone", "lr_transformer", "momentum", "alpha", "cooccurrence_strength"}
        conv = {}
        for k, v in values.items():
            if v is None:
                continue
            if k in ints:
                conv[k] = int(v)
            elif k in floats:
                conv[k] = float(v)
            elif k in ("residual_cross_enabled", "residual_cross"):
                conv["residual_cross_enabled"] = _parse_bool(v)
            elif k == "cooccurrence_pairs":
                conv[k] = _parse_pairs(v)
            elif k == "seeds":
                conv[k] = tuple(int(s) for s in str(v).split(",") if s.strip())
            else:
                conv[k] = v
        for k, v in conv.items():
            if k in _MODEL_KEYS:
                model_kw[k] = v
            if k in _DATA_KEYS:
                data_kw[_DATA_KEYS[k]] = v
        seed = conv.get("seed", 0)
        model = ModelConfig(seed=seed, **model_kw)
        data = DatasetSpec(**data_kw)
        mixup = MixupConfig(mode=conv.get("mixup", "none"), alpha=conv.get("alpha", 0.4), seed=seed)
        for k in ("epochs", "batch_size", "seeds", "lr_backbone", "lr_transformer", "momentum",
                  "loss", "eval_batch_size"):
            if k in conv:
                top[k] = conv[k]
        return ExperimentConfig(model=model, mixup=mixup, data=data,
                                dataset_path=conv.get("dataset"), seed=seed,
                                out_dir=conv.get("out"), **top)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def config_to_text(cfg: ExperimentConfig) -> str:
    m, d = cfg.model, cfg.data
    lines = [f"{k} = {getattr(m, k).value if k == 'query_mode' else getattr(m, k)}"
             for k in sorted(_MODEL_KEYS)]
    for key, attr in sorted(_DATA_KEYS.items()):
        if key in _MODEL_KEYS:
            continue
        val = getattr(d, attr)
        if key == "cooccurrence_pairs":
            val = ";".join(f"{a}-{b}" for a, b in val)
        lines.append(f"{key} = {val}")
    lines += [f"mixup = {cfg.mixup.mode.value}", f"alpha = {cfg.mixup.alpha}",
              f"epochs = {cfg.epochs}", f"batch_size = {cfg.batch_size}", f"seed = {cfg.seed}",
              f"seeds = {','.join(str(s) for s in cfg.seeds)}",
              f"lr_backbone = {cfg.backbone_lr()}", f"lr_transformer = {cfg.lr_transformer}",
              f"momentum = {cfg.momentum}", f"loss = {cfg.loss}",
              f"eval_batch_size = {cfg.eval_batch_size}"]
    if cfg.dataset_path:
        lines.append(f"dataset = {cfg.dataset_path}")
    return "\n".join(lines) + "\n"


# -- runs -------------------------------------------------------------------------

@dataclass
class RunLog:
    rows: List[tuple] = field(default_factory=list)  # (epoch, split, MetricReport)
    train_loss: List[float] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)
    test: Optional[MetricReport] = None
    best_epoch: Optional[int] = None
    convergence: Optional[int] = None
    batch_hash: str = ""
    model: Optional[Transformer] = None

    def series(self, split: str = "val", metric: str = "cf1") -> List[float]:
        return [getattr(r, metric) for _, s, r in self.rows if s == split]

    def metrics_csv(self) -> str:
        lines = [CSV_HEADER] + [r.csv_row(e, s) for e, s, r in self.rows]
        if self.test is not None:
            lines.append(self.test.csv_row(self.best_epoch, "test"))
        return "\n".join(lines) + "\n"


def resolve_dataset(cfg: ExperimentConfig, dataset: Optional[Dataset] = None) -> Dataset:
    if dataset is not None:
        return dataset
    if cfg.dataset_path:
        return load_dataset(cfg.dataset_path)
    return generate(cfg.data)


def _check_feasible(cfg: ExperimentConfig, ds: Dataset) -> None:
    if cfg.loss != "aligned":
        return
    most = max((len(ls) for s in SPLITS for ls in ds[s].labels), default=0)
    if cfg.mixup.mode in (MixupMode.HARD, MixupMode.RESTRICTED_HARD, MixupMode.SOFT):
        most = min(2 * most, ds.spec.num_classes)
    if most > cfg.model.num_queries:
        raise InfeasibleAssignment(
            f"images may carry {most} labels (max_labels={ds.spec.max_labels}, "
            f"mixup={cfg.mixup.mode.value}) but the model has only "
            f"{cfg.model.num_queries} object queries"
        )


def predict(model: Transformer, images: np.ndarray, batch_size: int = 250):
    preds, scores = [], []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model(images[start:start + batch_size])
            p, s = decode_predictions(logits)
            preds.extend(p)
            scores.append(s)
    c = model.config.num_classes
    return preds, np.concatenate(scores) if scores else np.zeros((0, c))


def evaluate_model(model: Transformer, ds: Dataset, split: str, batch_size: int = 250) -> MetricReport:
    data = ds[split]
    preds, scores = predict(model, data.images, batch_size)
    return evaluate_predictions(preds, scores, data.labels, model.config.num_classes)


def evaluate(checkpoint, dataset: Dataset, split: str,
             config: Optional[ModelConfig] = None) -> MetricReport:
    """MetricReport of a checkpoint (path, with ``config``) or a model on one split."""
    if split not in SPLITS:
        raise KeyError(f"unknown split {split!r}; valid splits: {', '.join(SPLITS)}")
    if isinstance(checkpoint, Transformer):
        model = checkpoint
    else:
        if config is None:
            raise ConfigError("a model config is needed to load a checkpoint file")
        model = load_checkpoint(checkpoint, Transformer(config))
    return evaluate_model(model, dataset, split)


def train(cfg: ExperimentConfig, dataset: Optional[Dataset] = None,
          out_dir: Union[str, Path, None] = None) -> RunLog:
    """Minibatch training with per-epoch validation and best-val-C-F1 snapshotting."""
    ds = resolve_dataset(cfg, dataset)
    _check_feasible(cfg, ds)
    out_dir = out_dir if out_dir is not None else cfg.out_dir
    model = Transformer(cfg.model)
    c = cfg.model.num_classes
    sgd = SGD(model.backbone_parameters(), lr=cfg.backbone_lr(), momentum=cfg.momentum)
    adam = Adam(model.transformer_parameters(), lr=cfg.lr_transformer)
    order_rng = np.random.default_rng([cfg.seed, _ORDER_STREAM])
    mix_rng = np.random.default_rng([cfg.seed, _MIXUP_STREAM])
    loss_fn = aligned_loss if cfg.loss == "aligned" else exhaustive_loss
    train_split = ds["train"]
    n = len(train_split)
    n_batches = n // cfg.batch_size
    log = RunLog(model=model)
    best_cf1, best_state = -1.0, model_state_copy(model)
    hasher = hashlib.sha256()

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = order_rng.permutation(n)
        hasher.update(order[:n_batches * cfg.batch_size].astype("<i8").tobytes())
        losses, preds, scores, truths = [], [], [], []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = Batch(train_split.images[idx], [train_split.labels[i] for i in idx], c, epoch)
            batch = apply_mixup(batch, cfg.mixup, mix_rng)
            logits = model(batch.images)
            if cfg.loss == "aligned":
                loss = aligned_loss(logits, batch.labels, batch.weights, relax=True)
            else:
                loss = loss_fn(logits, batch.labels, batch.weights)
            sgd.zero_grad()
            adam.zero_grad()
            loss.backward()
            sgd.step()
            adam.step()
            losses.append(loss.item())
            p, s = decode_predictions(logits)
            preds.extend(p)
            scores.append(s)
            truths.extend(batch.labels)
        log.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        if preds:
            log.rows.append((epoch, "train",
                             evaluate_predictions(preds, np.concatenate(scores), truths, c)))
        val = evaluate_model(model, ds, "val", cfg.eval_batch_size)
        log.rows.append((epoch, "val", val))
        if val.cf1 > best_cf1:
            best_cf1, log.best_epoch = val.cf1, epoch
            best_state = model_state_copy(model)
        log.epoch_seconds.append(time.perf_counter() - t0)
        logger.info("epoch %d loss %.4f val C-F1 %.4f (%.1fs)", epoch, log.train_loss[-1],
                    val.cf1, log.epoch_seconds[-1])

    log.batch_hash = hasher.hexdigest()
    model.load_state_dict(best_state)
    if cfg.epochs > 0:
        log.test = evaluate_model(model, ds, "test", cfg.eval_batch_size)
        series = log.series("val")
        if len(series) >= 5:
            log.convergence = convergence_epoch(series)
    if out_dir is not None:
        write_run(log, model, cfg, out_dir)
    return log


def model_state_copy(model: Transformer) -> dict:
    return {k: v.copy() for k, v in model.state_dict().items()}


def write_run(log: RunLog, model: Transformer, cfg: ExperimentConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(log.metrics_csv())
    (out / "losses.csv").write_text(
        "epoch,train_loss\n" + "".join(f"{e},{v:.6f}\n" for e, v in enumerate(log.train_loss))
    )
    (out / "config.txt").write_text(config_to_text(cfg))
    save_checkpoint(model, out / "model.ckpt")


# -- query comparison ---------------------------------------------------------------

@dataclass
class Arm:
    mode: QueryMode
    depth: int
    seed: int
    residual_cross: bool = True

    @property
    def name(self) -> str:
        tag = "" if self.residual_cross else "-nores"
        return f"{self.mode.value}-L{self.depth}{tag}"


@dataclass
class ConvergenceReport:
    arms: List[Arm]
    logs: List[RunLog]
    window: int = 5
    delta: float = 0.005

    def curve(self, i: int) -> List[float]:
        return self.logs[i].series("val", "cf1")

    def convergence(self, i: int) -> Optional[int]:
        curve = self.curve(i)
        if len(curve) < self.window:
            return None
        return convergence_epoch(curve, self.window, self.delta)

    def epochs_to_converge(self, i: int) -> int:
        """1-based epoch count of the plateau start; a run without a plateau counts its full length."""
        e = self.convergence(i)
        return len(self.curve(i)) if e is None else e + 1

    def find(self, mode: QueryMode, depth: int, seed: int, residual_cross: bool = True) -> int:
        for i, a in enumerate(self.arms):
            if (a.mode, a.depth, a.seed, a.residual_cross) == (mode, depth, seed, residual_cross):
                return i
        raise KeyError((mode, depth, seed))

    def speedup(self, ours: QueryMode = QueryMode.PRIMAL,
                baseline: QueryMode = QueryMode.ADDITIVE_SHARED, max_depth: int = 3) -> float:
        """Mean relative reduction in epochs-to-converge over depths <= max_depth."""
        depths = sorted({a.depth for a in self.arms if a.depth <= max_depth})
        seeds = sorted({a.seed for a in self.arms})
        b_epochs, o_epochs = [], []
        for d in depths:
            try:
                b = [self.epochs_to_converge(self.find(baseline, d, s)) for s in seeds]
                o = [self.epochs_to_converge(self.find(ours, d, s)) for s in seeds]
            except KeyError:
                continue
            b_epochs.append(np.mean(b))
            o_epochs.append(np.mean(o))
        if not b_epochs:
            raise ValueError("speedup undefined: no setup has both query modes")
        return speedup_percentage(b_epochs, o_epochs)

    def curves_csv(self) -> str:
        lines = ["arm,seed,epoch,cf1"]
        for i, arm in enumerate(self.arms):
            lines += [f"{arm.name},{arm.seed},{e},{v:.6f}" for e, v in enumerate(self.curve(i))]
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        lines = ["arm,seed,convergence_epoch,best_cf1,test_cf1"]
        for i, arm in enumerate(self.arms):
            e = self.convergence(i)
            curve = self.curve(i)
            best = max(curve) if curve else float("nan")
            test = self.logs[i].test.cf1 if self.logs[i].test else float("nan")
            lines.append(f"{arm.name},{arm.seed},{'' if e is None else e},{best:.6f},{test:.6f}")
        return "\n".join(lines) + "\n"


def compare_queries(base: ExperimentConfig, modes: Sequence, decoder_layer_counts: Sequence[int],
                    seeds: Optional[Sequence[int]] = None, dataset: Optional[Dataset] = None,
                    out_dir: Union[str, Path, None] = None,
                    residual_cross: Sequence[bool] = (True,)) -> ConvergenceReport:
    """Train every (mode, depth, seed) arm on the same data stream and compare convergence."""
    modes = [QueryMode.parse(m) for m in modes]
    if len(set(modes)) < 2:
        raise ConfigError("compare_queries needs at least two query modes")
    ds = resolve_dataset(base, dataset)
    seeds = list(base.seeds if seeds is None else seeds)
    arms, logs = [], []
    for depth in decoder_layer_counts:
        for mode in modes:
            for res in residual_cross:
                for seed in seeds:
                    arm = Arm(mode, depth, seed, res)
                    cfg = base.with_seed(seed)
                    cfg = replace(cfg, model=replace(cfg.model, query_mode=mode,
                                                     num_decoder_layers=depth,
                                                     residual_cross_enabled=res))
                    logger.info("arm %s seed %d", arm.name, seed)
                    arms.append(arm)
                    logs.append(train(cfg, ds))
    report = ConvergenceReport(arms, logs)
    if out_dir is not None:
        write_comparison(report, out_dir)
    return report


def write_comparison(report: ConvergenceReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curves.csv").write_text(report.curves_csv())
    (out / "convergence.csv").write_text(report.summary_csv())
    series = {}
    for i, arm in enumerate(report.arms):
        series[f"{arm.name} s{arm.seed}"] = report.curve(i)
    (out / "curves.svg").write_text(curves_svg(series, title="validation C-F1"))


def read_curves_csv(text: str) -> Dict[tuple, List[float]]:
    curves: Dict[tuple, List[float]] = {}
    for line in text.strip().splitlines()[1:]:
        arm, seed, epoch, cf1 = line.split(",")
        curves.setdefault((arm, int(seed)), []).append(float(cf1))
    return curves


# -- query specialization -------------------------------------------------------------

def query_specialization(model: Transformer, dataset: Dataset, split: str = "test",
                         batch_size: int = 250):
    """Per-query counts of non-empty argmax classes, and their row-normalised matrix."""
    cfg = model.config
    O, c = cfg.num_queries, cfg.num_classes
    counts = np.zeros((O, c), dtype=np.int64)
    images = dataset[split].images
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model(images[start:start + batch_size]).data
            argmax = logits.argmax(axis=-1)
            for j in range(O):
                col = argmax[:, j]
                counts[j] += np.bincount(col[col < c], minlength=c)
    totals = counts.sum(axis=1, keepdims=True)
    normalized = np.where(totals > 0, counts / np.maximum(totals, 1), 0.0)
    return counts, normalized


def specialization_csv(normalized: np.ndarray) -> str:
    c = normalized.shape[1]
    lines = ["query," + ",".join(f"class{k}" for k in range(c))]
    lines += [f"{j}," + ",".join(f"{v:.6f}" for v in row) for j, row in enumerate(normalized)]
    return "\n".join(lines) + "\n"


def class_concentration(counts: np.ndarray) -> np.ndarray:
    """For each class, the share of its predictions made by its most active query (NaN if never predicted)."""
    totals = counts.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, counts.max(axis=0) / np.maximum(totals, 1), np.nan)


def chance_cf1(labels: Sequence, num_classes: int,
               prediction_rates: Optional[np.ndarray] = None) -> float:
    """Expected C-F1 of predictions made independently of the image labels.

    If class k is predicted on a fraction q_k of images, independently of
    whether it is present (frequency f_k), then P_k = f_k and R_k = q_k in
    expectation.  ``prediction_rates=None`` is the uniform-logits case: every
    query argmaxes class 0, so q = (1, 0, ..., 0).
    """
    freq = np.zeros(num_classes)
    for ls in labels:
        for k in ls:
            freq[k] += 1
    f = freq / max(len(labels), 1)
    if prediction_rates is None:
        q = np.zeros(num_classes)
        q[0] = 1.0
    else:
        q = np.asarray(prediction_rates, dtype=np.float64)
    active = (f > 0) | (q > 0)
    if not active.any():
        return 0.0
    cp = float(np.where(q > 0, f, 0.0)[active].mean())
    cr = float(np.where(f > 0, q, 0.0)[active].mean())
    return 0.0 if cp + cr == 0 else 2 * cp * cr / (cp + cr)
