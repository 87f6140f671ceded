"""Composite-loss training: cross-entropy + lambda * RBF-MMD domain loss under AdamW."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .dicom import load_metadata
from .errors import ConfigError, ContractError, FuseError, ShapeError
from .fmri import PatchSpec, atomic_write, extract_patches, load_volume
from .metadata import (
    MetadataSchema,
    NormStats,
    default_schema,
    encode_record,
    fit_normalization,
    impute_missing,
)
from .model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .synth import Dataset
from .tensor import Graph, Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
UNKNOWN_DOMAIN = "unknown"


class TrainingDiverged(FuseError):
    """Loss became non-finite during training."""


# ---------------------------------------------------------------------------
# losses


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of -log(max(probs[label], 1e-12)); probs is (C,) or (B, C)."""
    batched = probs.ndim == 2
    p = probs if batched else probs.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (p.shape[0],):
        raise ContractError(f"{labels.size} labels for {p.shape[0]} probability rows")
    C = p.shape[1]
    if np.any(labels < 0) or np.any(labels >= C):
        raise ContractError(f"label outside [0, {C}): {labels.tolist()}")
    if np.any(np.abs(p.data.sum(axis=1) - 1.0) > 1e-9):
        raise ContractError("probabilities do not sum to 1")
    picked = tn.take(p, (np.arange(p.shape[0]), labels))
    return -tn.log(tn.clamp_min(picked, PROB_FLOOR)).mean()


def _pairwise_sq_dists(z: Tensor) -> Tensor:
    sq = (z * z).sum(axis=1, keepdims=True)
    return tn.clamp_min(sq + sq.T - 2.0 * (z @ z.T), 0.0)


def median_bandwidth(z: np.ndarray) -> float:
    """Median pairwise Euclidean distance (upper triangle); 1.0 when degenerate."""
    diff = z[:, None, :] - z[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    upper = dist[np.triu_indices(len(z), k=1)]
    med = float(np.median(upper)) if upper.size else 0.0
    return med if med > 0 else 1.0


def mmd_domain_loss(z: Tensor, domains, bandwidth="median"):
    """Mean squared RBF-MMD over all unordered pairs of domains in the batch.

    ``domains`` holds one label per row; ``None`` rows are left out. Returns
    ``(loss, degenerate)``; fewer than two domains gives a constant zero with
    ``degenerate=True``.
    """
    domains = list(domains)
    if len(domains) != z.shape[0]:
        raise ShapeError(f"{len(domains)} domain labels for {z.shape[0]} rows")
    rows = [i for i, dom in enumerate(domains) if dom is not None]
    groups: dict = {}
    for i in rows:
        groups.setdefault(domains[i], []).append(i)
    if len(groups) < 2:
        return Tensor(0.0), True
    if len(rows) != z.shape[0]:
        z = tn.take(z, np.array(rows))
    position = {row: j for j, row in enumerate(rows)}

    sigma = median_bandwidth(z.data) if bandwidth == "median" else float(bandwidth)
    if not sigma > 0:
        raise ConfigError(f"MMD bandwidth must be positive, got {sigma}")
    kernel = tn.exp(_pairwise_sq_dists(z) * (-1.0 / (2.0 * sigma * sigma)))

    # MMD^2(a, b) = w^T K w with w = 1/|a| on a and -1/|b| on b; average the w w^T over pairs.
    keys = sorted(groups, key=str)
    weights = np.zeros((len(rows), len(rows)))
    n_pairs = 0
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            w = np.zeros(len(rows))
            w[[position[r] for r in groups[a]]] = 1.0 / len(groups[a])
            w[[position[r] for r in groups[b]]] = -1.0 / len(groups[b])
            weights += np.outer(w, w)
            n_pairs += 1
    return (kernel * Tensor._wrap(weights / n_pairs)).sum(), False


def total_loss(l_ce, l_da, lam: float):
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return l_ce + lam * l_da


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> OptimState:
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float,
               beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0) -> OptimState:
    """One AdamW update; decoupled decay theta *= (1 - lr*wd) happens before the Adam step.

    Parameter tensors receive fresh data arrays.
    """
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        theta = p.data * (1.0 - lr * weight_decay) if weight_decay else p.data.copy()
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        theta = theta - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = tn._frozen(theta)
    return state


def lr_at(step: int, lr_peak: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to ``lr_peak`` then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if warmup_steps > 0 and step < warmup_steps:
        return lr_peak * step / warmup_steps
    if step >= total_steps:
        return 0.0
    span = total_steps - warmup_steps
    progress = (step - warmup_steps) / span if span > 0 else 1.0
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# configuration and data preparation


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr_peak: float = 3e-3
    warmup_steps: int = 20
    weight_decay: float = 0.01
    lam: float = 0.1
    mmd_bandwidth: float | str = "median"
    seed: int = 0
    dropout_rate: float | None = None  # overrides the model config when set

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.lr_peak > 0:
            raise ConfigError(f"lr_peak must be > 0, got {self.lr_peak}")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ConfigError("warmup_steps and weight_decay must be >= 0")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.lam > 0 and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when lambda > 0")
        if self.mmd_bandwidth != "median" and not (isinstance(self.mmd_bandwidth, (int, float)) and self.mmd_bandwidth > 0):
            raise ConfigError(f"mmd_bandwidth must be 'median' or a positive number, got {self.mmd_bandwidth!r}")
        if self.dropout_rate is not None and not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @classmethod
    def from_dict(cls, obj: dict) -> TrainConfig:
        obj = dict(obj)
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        unknown = sorted(set(obj) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out


@dataclass
class Prepared:
    fmri: np.ndarray  # (n, N, p)
    meta: np.ndarray  # (n, K, f)
    labels: np.ndarray
    domains: list  # domain label per sample, None when unknown
    class_count: int


def load_records(dataset: Dataset, schema: MetadataSchema) -> list:
    return [load_metadata(s.meta, schema) for s in dataset.samples]


def sample_domain(sample, record) -> str | None:
    return sample.domain or record.domain_hint


def prepare(dataset: Dataset, spec: PatchSpec, schema: MetadataSchema, stats: NormStats, records=None) -> Prepared:
    records = records if records is not None else load_records(dataset, schema)
    fmri, meta, domains = [], [], []
    for sample, record in zip(dataset.samples, records):
        fmri.append(extract_patches(load_volume(sample.volume), spec).values)
        meta.append(encode_record(impute_missing(record, stats, schema), stats, schema).values)
        domains.append(sample_domain(sample, record))
    shapes = {a.shape for a in fmri}
    if len(shapes) != 1:
        raise ShapeError(f"volumes produce differing token shapes: {sorted(shapes)}")
    return Prepared(np.stack(fmri), np.stack(meta), dataset.labels, domains, dataset.class_count)


# ---------------------------------------------------------------------------
# metrics and evaluation


@dataclass
class Metrics:
    accuracy: float
    mean_ce: float
    mean_da: float
    confusion: list
    per_domain: dict
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def _metrics(probs: np.ndarray, fused: np.ndarray, data: Prepared, bandwidth) -> Metrics:
    labels = data.labels
    pred = probs.argmax(axis=1)
    C = data.class_count
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    picked = np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR)
    per_domain = {}
    names = [UNKNOWN_DOMAIN if d is None else d for d in data.domains]
    for name in sorted(set(names)):
        idx = [i for i, d in enumerate(names) if d == name]
        per_domain[name] = float(np.mean(pred[idx] == labels[idx]))
    da, _ = mmd_domain_loss(Tensor._wrap(fused), data.domains, bandwidth)
    return Metrics(
        accuracy=float(np.mean(pred == labels)),
        mean_ce=float(np.mean(-np.log(picked))),
        mean_da=da.item(),
        confusion=confusion.tolist(),
        per_domain=per_domain,
        n=int(len(labels)),
    )


def predict(params: dict, cfg: ModelConfig, data: Prepared, batch_size: int = 64, meta_names=None):
    """Inference pass (dropout off, no tape). Returns (probs, fused)."""
    probs, fused = [], []
    for start in range(0, len(data.labels), batch_size):
        sl = slice(start, start + batch_size)
        out = forward(params, cfg, data.fmri[sl], data.meta[sl], training=False, meta_names=meta_names)
        probs.append(out.probs.data)
        fused.append(out.fused.data)
    return np.concatenate(probs), np.concatenate(fused)


def evaluate_prepared(params, cfg, data: Prepared, bandwidth="median") -> Metrics:
    probs, fused = predict(params, cfg, data)
    return _metrics(probs, fused, data, bandwidth)


def evaluate(checkpoint, dataset: Dataset) -> Metrics:
    cfg, params, extra = load_checkpoint(checkpoint)
    schema = MetadataSchema.from_dict(extra["schema"])
    spec = PatchSpec.from_sequence(extra["patch_spec"])
    stats = NormStats.from_dict(extra["norm_stats"])
    if dataset.class_count != cfg.C:
        raise ConfigError(f"checkpoint predicts {cfg.C} classes, dataset has {dataset.class_count}")
    data = prepare(dataset, spec, schema, stats)
    if data.fmri.shape[1:] != (cfg.N, cfg.p) or data.meta.shape[1:] != (cfg.K, cfg.f):
        raise ConfigError(
            f"dataset tokens {data.fmri.shape[1:]}/{data.meta.shape[1:]} do not match "
            f"checkpoint shapes {(cfg.N, cfg.p)}/{(cfg.K, cfg.f)}"
        )
    return evaluate_prepared(params, cfg, data, extra.get("mmd_bandwidth", "median"))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: dict
    model_cfg: ModelConfig
    history: list = field(default_factory=list)
    final_checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    stats: NormStats | None = None
    extra: dict = field(default_factory=dict)


def _seed_streams(seed: int):
    init, shuffle, dropout = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(shuffle), np.random.default_rng(dropout)


def train_step(params, cfg, fmri, meta, labels, domains, train_cfg: TrainConfig, rng):
    """Forward + composite loss + backward. Returns (grads, l_ce, l_da, loss, forward output)."""
    with Graph() as graph:
        out = forward(params, cfg, fmri, meta, rng=rng, training=True)
        l_ce = cross_entropy(out.probs, labels)
        l_da, _ = mmd_domain_loss(out.fused, domains, train_cfg.mmd_bandwidth)
        loss = total_loss(l_ce, l_da, train_cfg.lam)
    grads = tn.backward(graph, loss, params)
    return grads, l_ce.item(), l_da.item(), loss.item(), out


def train_loop(
    dataset: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    patch_spec: PatchSpec,
    schema: MetadataSchema | None = None,
    out_dir=None,
    eval_dataset: Dataset | None = None,
) -> TrainResult:
    """Train from a seed; writes metrics.jsonl, final.ckpt and best.ckpt when ``out_dir`` is set."""
    train_cfg.validate()
    schema = schema or default_schema()
    if dataset.class_count != model_cfg.C:
        model_cfg = model_cfg.with_shapes(C=dataset.class_count)
    records = load_records(dataset, schema)
    stats = fit_normalization(records, schema)
    data = prepare(dataset, patch_spec, schema, stats, records)
    held_out = prepare(eval_dataset, patch_spec, schema, stats) if eval_dataset is not None else None

    cfg = model_cfg.with_shapes(N=data.fmri.shape[1], p=data.fmri.shape[2], K=data.meta.shape[1], f=data.meta.shape[2])
    if train_cfg.dropout_rate is not None:
        cfg = cfg.with_shapes(dropout_rate=train_cfg.dropout_rate)
    init_rng, shuffle_rng, dropout_rng = _seed_streams(train_cfg.seed)
    params = init_params(cfg, init_rng)
    state = OptimState.zeros(params)

    n = len(data.labels)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    extra = {
        "schema": schema.to_dict(),
        "patch_spec": list(patch_spec.dims),
        "norm_stats": stats.to_dict(),
        "mmd_bandwidth": train_cfg.mmd_bandwidth,
        "train": train_cfg.to_dict(),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    result = TrainResult(params, cfg, stats=stats, extra=extra)
    best = -1.0
    log_lines = []

    with tn.check_finite(False):
        for epoch in range(1, train_cfg.epochs + 1):
            order = shuffle_rng.permutation(n)
            sums = np.zeros(3)
            lr = 0.0
            for b in range(steps_per_epoch):
                idx = order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
                doms = [data.domains[i] for i in idx]
                grads, l_ce, l_da, loss, _ = train_step(
                    params, cfg, data.fmri[idx], data.meta[idx], data.labels[idx], doms, train_cfg, dropout_rng
                )
                if not all(math.isfinite(x) for x in (l_ce, l_da, loss)):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {state.step + 1}: "
                        f"ce={l_ce} da={l_da} total={loss}"
                    )
                lr = lr_at(state.step + 1, train_cfg.lr_peak, train_cfg.warmup_steps, total_steps)
                adamw_step(params, grads, state, lr, weight_decay=train_cfg.weight_decay)
                sums += (l_ce, l_da, loss)

            train_metrics = evaluate_prepared(params, cfg, data, train_cfg.mmd_bandwidth)
            record = {
                "epoch": epoch,
                "loss_ce": sums[0] / steps_per_epoch,
                "loss_da": sums[1] / steps_per_epoch,
                "loss_total": sums[2] / steps_per_epoch,
                "accuracy": train_metrics.accuracy,
                "lr": lr,
                "per_domain": train_metrics.per_domain,
            }
            score = train_metrics.accuracy
            if held_out is not None:
                held = evaluate_prepared(params, cfg, held_out, train_cfg.mmd_bandwidth)
                record["eval_accuracy"] = held.accuracy
                record["eval_per_domain"] = held.per_domain
                score = held.accuracy
            result.history.append(record)
            line = json.dumps(record, sort_keys=True)
            log_lines.append(line)
            log.info("epoch %d: %s", epoch, line)
            if out_dir is not None:
                atomic_write(out_dir / "metrics.jsonl", ("\n".join(log_lines) + "\n").encode())
                if score > best:
                    best = score
                    save_checkpoint(out_dir / "best.ckpt", cfg, params, {**extra, "epoch": epoch})
                    result.best_checkpoint = out_dir / "best.ckpt"
    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", cfg, params, {**extra, "epoch": train_cfg.epochs})
        result.final_checkpoint = out_dir / "final.ckpt"
    return result


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
