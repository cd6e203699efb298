"""Training, calibration, per-input pruned inference and soft-gate fine-tuning."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import atomic_write_bytes, read_record, write_record
from .data import Dataset
from .errors import ConfigError, ContractError, DataError, DivergenceError, NumericError
from .model import GateSet, ViTModel, forward, loss, predict
from .policy import (GateDecision, PruningPolicy, anneal_gamma, binarize, induced_threshold,
                     lowest, prune_count, select, soft_gateset)
from .sensitivity import (CalibrationStats, ComponentRef, SensitivityReport, normalize, score_all)

# ---------------------------------------------------------------------------
# Configuration and run records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    warmup_epochs: int = 5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    patience: int = 10
    grad_clip: float = 1.0
    shift_aug: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size > 0")
        if self.shift_aug < 0:
            raise ConfigError("shift_aug must be >= 0")
        if not 0 <= self.patience <= self.epochs:
            raise ConfigError(f"patience {self.patience} must lie in [0, epochs={self.epochs}]")
        if not (self.lr > 0 and self.adam_eps > 0 and self.grad_clip > 0 and self.weight_decay >= 0):
            raise ConfigError("learning rate, adam_eps and grad_clip must be positive; weight_decay >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optimizer moments must lie in [0, 1)")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")


@dataclass(frozen=True)
class FinetuneConfig:
    """Phase C settings.

    ``rescore_size`` training inputs are rescored each epoch (in a fixed
    rotation); the others keep their most recent scores.  ``None`` rescores
    the whole training set every epoch.
    """

    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    grad_clip: float = 1.0
    gamma0: float = 1.0
    gamma_max: float = 50.0
    rescore_size: int | None = 32
    schedule: str = "constant"
    shift_patches: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size > 0")
        if not 0 < self.gamma0 <= self.gamma_max:
            raise ConfigError("need 0 < gamma0 <= gamma_max")
        if self.rescore_size is not None and self.rescore_size <= 0:
            raise ConfigError("rescore_size must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not (self.lr > 0 and self.grad_clip > 0):
            raise ConfigError("learning rate and grad_clip must be positive")
        if self.shift_patches < 0:
            raise ConfigError("shift_patches must be >= 0")


class RunRecord:
    """Append-only per-epoch log, mirrored to a JSON-lines file when a path is set.

    Wall-clock timings are kept apart from the epoch entries so the record
    file itself is reproducible byte for byte.
    """

    def __init__(self, path=None, entries=None):
        self.path = Path(path) if path is not None else None
        self.entries: list[dict] = list(entries or [])
        self.timings: list[dict] = []
        self.summary: dict = {}

    def append(self, entry: dict, seconds: float | None = None):
        self.entries.append(entry)
        if seconds is not None:
            self.timings.append({"phase": entry.get("phase"), "epoch": entry.get("epoch"), "seconds": seconds})
        self.flush()

    def lines(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)

    def flush(self):
        if self.path is not None:
            atomic_write_bytes(self.path, self.lines().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "RunRecord":
        text = Path(path).read_text(encoding="utf-8")
        return cls(path, [json.loads(l) for l in text.splitlines() if l.strip()])


METRIC_FIELDS = ("epoch", "split", "loss", "accuracy", "gamma", "pred_dl", "meas_dl")


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in METRIC_FIELDS})
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def _decays(name: str) -> bool:
    """Weight decay applies to weight matrices only."""
    return name.endswith(("w", "wq", "wk", "wv", "wo")) and not name.startswith("patch.b")


class AdamW:
    def __init__(self, names, beta1, beta2, eps, weight_decay):
        self.names = list(names)
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in self.names:
            g = grads[k]
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and _decays(k):
                upd = upd + self.wd * params[k]
            params[k] = params[k] - lr * upd


def _clip(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def lr_at(step: int, total: int, warmup: int, peak: float) -> float:
    """Linear warmup to ``peak`` then cosine decay to zero."""
    if step < warmup:
        return peak * (step + 1) / warmup
    span = max(total - warmup, 1)
    return 0.5 * peak * (1 + math.cos(math.pi * (step - warmup) / span))


def augment(images, max_shift: int, rng):
    """Random cyclic translation by up to ``max_shift`` pixels per axis."""
    if max_shift == 0:
        return images
    shifts = rng.integers(-max_shift, max_shift + 1, size=(images.shape[0], 2))
    return np.stack([np.roll(x, tuple(s), axis=(1, 2)) for x, s in zip(images, shifts)])


def shift_with_gates(images, gates: GateSet, max_shift: int, patch: int, rng):
    """Cyclic translation by whole patches, carrying each token's gate along.

    Shifts are drawn per input from ``[-max_shift, max_shift]`` patches per
    axis.  Head gates are position-free and stay as they are.
    """
    if max_shift == 0:
        return images, gates
    B = images.shape[0]
    side = images.shape[-1] // patch
    tok = np.array(ad.value_of(gates.token), dtype=np.float64)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(B, 2))
    out = np.empty_like(images)
    for b, (dy, dx) in enumerate(shifts):
        out[b] = np.roll(images[b], (dy * patch, dx * patch), axis=(1, 2))
        grid = tok[b, :, 1:].reshape(-1, side, side)
        tok[b, :, 1:] = np.roll(grid, (dy, dx), axis=(1, 2)).reshape(grid.shape[0], -1)
    return out, GateSet(tok, gates.head, gates.soft)


def _loss_and_grads(model: ViTModel, xb, yb, smoothing, rng, gates=None):
    names = list(model.params)

    def f(*vs):
        logits, _ = forward(model, xb, gates, params=dict(zip(names, vs)), train=True, rng=rng, record=False)
        return loss(logits, yb, smoothing=smoothing)

    value, grads = ad.value_and_grad(f, [model.params[k] for k in names])
    return value, dict(zip(names, grads))


# ---------------------------------------------------------------------------
# Training state (crash resume)
# ---------------------------------------------------------------------------


def _save_state(path: Path, meta: dict, arrays: dict):
    fh = io.BytesIO()
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    fh.write(len(header).to_bytes(8, "little"))
    fh.write(header)
    for name in sorted(arrays):
        write_record(fh, name, arrays[name])
    atomic_write_bytes(path, fh.getvalue())


def _load_state(path: Path) -> tuple[dict, dict]:
    buf = path.read_bytes()
    hlen = int.from_bytes(buf[:8], "little")
    meta = json.loads(buf[8:8 + hlen].decode("utf-8"))
    pos = 8 + hlen
    arrays = {}
    while pos < len(buf):
        name, arr, pos = read_record(buf, pos)
        arrays[name] = arr
    return meta, arrays


def _state_path(record_path) -> Path | None:
    return None if record_path is None else Path(str(record_path) + ".state")


def _accuracy_and_loss(model, ds: Dataset, gates=None, mode="mask"):
    logits = predict(model, ds.images, gates, mode)
    per = ad.cross_entropy(logits, ds.labels, reduction="none")
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels)), float(np.mean(per))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train(model: ViTModel, dataset: Dataset, cfg: TrainConfig, val: Dataset | None = None,
          record_path=None) -> tuple[ViTModel, RunRecord]:
    """AdamW with warmup+cosine schedule; keeps the best model by validation accuracy.

    Without ``val`` the training set doubles as the selection set.  When
    ``record_path`` is set, state is saved after every epoch and a rerun
    continues from the last completed epoch.
    """
    if len(dataset) == 0:
        raise DataError("training set is empty")
    record = RunRecord(record_path)
    if cfg.epochs == 0:
        record.flush()
        return model.copy(), record
    sel = val if val is not None else dataset
    N = len(dataset)
    spe = math.ceil(N / cfg.batch_size)
    total, warm = cfg.epochs * spe, cfg.warmup_epochs * spe
    rng = ad.make_rng(cfg.seed)
    params = {k: v.copy() for k, v in model.params.items()}
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    best = {k: v.copy() for k, v in params.items()}
    best_acc, bad, start = -1.0, 0, 0

    state_path = _state_path(record_path)
    if state_path is not None and state_path.exists():
        meta, arrays = _load_state(state_path)
        if meta.get("kind") != "train" or meta.get("config") != asdict(cfg):
            raise ContractError(f"{state_path} belongs to a different run")
        start, best_acc, bad, opt.t = meta["epoch"] + 1, meta["best_acc"], meta["bad"], meta["t"]
        rng.bit_generator.state = meta["rng"]
        record.entries = meta["entries"]
        for k in params:
            params[k] = arrays["p/" + k]
            best[k] = arrays["best/" + k]
            if ("m/" + k) in arrays:
                opt.m[k], opt.v[k] = arrays["m/" + k], arrays["v/" + k]
        record.flush()
        if meta.get("stopped"):
            return model.with_params(best), record

    last_good = str(state_path) if state_path is not None else "initial parameters"
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(N)
        losses = []
        for s in range(spe):
            idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            cur = model.with_params(params)
            xb = augment(dataset.images[idx], cfg.shift_aug, rng)
            try:
                value, grads = _loss_and_grads(cur, xb, dataset.labels[idx],
                                               cfg.label_smoothing, rng)
            except NumericError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}: {exc}", last_good) from exc
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"non-finite gradient at epoch {epoch}", last_good)
            _clip(grads, cfg.grad_clip)
            opt.step(params, grads, lr_at(epoch * spe + s, total, warm, cfg.lr))
            losses.append(value)
        cur = model.with_params(params)
        train_acc, train_loss = _accuracy_and_loss(cur, dataset)
        val_acc, val_loss = (train_acc, train_loss) if val is None else _accuracy_and_loss(cur, val)
        if val_acc > best_acc:
            best_acc, bad = val_acc, 0
            best = {k: v.copy() for k, v in params.items()}
        else:
            bad += 1
        stopped = bad >= cfg.patience > 0
        entry = {"phase": "train", "epoch": epoch, "batch_loss": float(np.mean(losses)),
                 "train_loss": train_loss, "train_acc": train_acc,
                 "val_loss": val_loss, "val_acc": val_acc, "best_val_acc": best_acc,
                 "lr": lr_at(min((epoch + 1) * spe, total) - 1, total, warm, cfg.lr)}
        if state_path is not None:
            arrays = {"p/" + k: v for k, v in params.items()}
            arrays.update({"best/" + k: v for k, v in best.items()})
            arrays.update({"m/" + k: v for k, v in opt.m.items()})
            arrays.update({"v/" + k: v for k, v in opt.v.items()})
            meta = {"kind": "train", "config": asdict(cfg), "epoch": epoch, "best_acc": best_acc,
                    "bad": bad, "t": opt.t, "rng": rng.bit_generator.state,
                    "entries": record.entries + [entry], "stopped": stopped}
            _save_state(state_path, meta, arrays)
            last_good = str(state_path)
        record.append(entry, time.perf_counter() - t0)
        if stopped:
            break
    record.summary = {"best_val_acc": best_acc, "epochs_run": len(record.entries)}
    return model.with_params(best), record


# ---------------------------------------------------------------------------
# Phase A: calibration
# ---------------------------------------------------------------------------


def calibrate(model: ViTModel, images, policy: PruningPolicy, labels=None,
              scope: str = "per-layer-by-kind", chunk: int = 8) -> tuple[CalibrationStats, SensitivityReport]:
    """Batch-averaged scores, layerwise statistics and thresholds.

    Thresholds sit between the k-th and (k+1)-th smallest normalized score
    of each candidate set, with k the policy's prune count.  Budget policies
    record the per-layer budget split instead.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] < 1:
        raise DataError("calibration needs a batch of at least one image")
    report = score_all(model, images, labels, chunk=chunk)
    scores, stats = normalize(report, scope)
    stats.policy = policy.to_text()
    L, n, H = report.layers, report.tokens, report.heads
    if policy.mode == "percentile":
        kt, kh = prune_count(policy.token_ratio, n - 1), prune_count(policy.head_ratio, H)
        stats.tau["token-agg"] = induced_threshold(scores.token_agg, kt)
        for l in range(L):
            stats.tau[f"token:{l}"] = induced_threshold(scores.token[l], kt)
            stats.tau[f"head:{l}"] = induced_threshold(scores.head[l], kh)
    else:
        stats.epsilon_per_layer = [policy.epsilon / L] * L
    return stats, report


def check_stats(model: ViTModel, stats: CalibrationStats):
    L = model.config.layers
    need = [f"token:{l}" for l in range(L)] + [f"head:{l}" for l in range(L)]
    if stats.scope == "per-layer-mixed":
        need = [f"layer:{l}" for l in range(L)]
    missing = [k for k in need + ["token-agg"] if k not in stats.mu]
    if missing:
        raise ContractError(f"calibration stats do not match a {L}-layer model (missing {missing[0]})")


# ---------------------------------------------------------------------------
# Phase B: per-input hard selection
# ---------------------------------------------------------------------------


@dataclass
class PrunedBatch:
    predictions: np.ndarray
    logits: np.ndarray
    dense_logits: np.ndarray
    decisions: list
    report: SensitivityReport
    gates: GateSet
    cache: object = None


def stack_decisions(decisions: list[GateDecision]) -> GateSet:
    return GateSet(np.stack([d.gateset.token for d in decisions]),
                   np.stack([d.gateset.head for d in decisions]))


def _dense_logits(model, images):
    return predict(model, images)


def infer_pruned_batch(model: ViTModel, images, policy: PruningPolicy, stats: CalibrationStats | None = None,
                       chunk: int = 8, keep_cache: bool = False) -> PrunedBatch:
    """Score each input against its own prediction, select gates, re-run compactly.

    Hard selection depends only on score order within each candidate set,
    so the calibration statistics are checked for compatibility but do not
    change which components are pruned.
    """
    if stats is not None:
        check_stats(model, stats)
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    report = score_all(model, images, None, chunk=chunk)
    decisions = [select(report, policy, input=b) for b in range(images.shape[0])]
    gates = stack_decisions(decisions)
    logits, cache = forward(model, images, gates, mode="compact")
    logits = np.array(ad.value_of(logits))
    dense = _dense_logits(model, images)
    # nothing pruned: the compact pass is the dense pass, so report dense logits bit for bit
    full = np.array([not d.pruned_refs for d in decisions])
    logits[full] = dense[full]
    return PrunedBatch(np.argmax(logits, axis=1), logits, dense, decisions,
                       report, gates, cache if keep_cache else None)


def infer_pruned(model: ViTModel, image, policy: PruningPolicy, stats: CalibrationStats | None = None):
    """Single input: ``(prediction, GateDecision, cache)``."""
    out = infer_pruned_batch(model, np.asarray(image)[None] if np.ndim(image) == 3 else image,
                             policy, stats, keep_cache=True)
    return int(out.predictions[0]), out.decisions[0], out.cache


def random_decisions(decisions: list[GateDecision], report: SensitivityReport, rng) -> list[GateDecision]:
    """Random gates pruning the same number of tokens and heads per layer as ``decisions``."""
    out = []
    L, n, H = report.layers, report.tokens, report.heads
    for d in decisions:
        tok = np.asarray(d.gateset.token)
        head = np.asarray(d.gateset.head)
        new_tok = np.ones_like(tok)
        new_head = np.ones_like(head)
        pruned = []
        if np.all(tok == tok[0]):
            drop = rng.choice(np.arange(1, n), size=int((tok[0] == 0).sum()), replace=False)
            new_tok[:, drop] = 0.0
            pruned += [ComponentRef("token", l, int(j)) for l in range(L) for j in drop]
        else:
            raise ContractError("random baseline needs layer-constant token masks")
        for l in range(L):
            drop = rng.choice(H, size=int((head[l] == 0).sum()), replace=False)
            new_head[l, drop] = 0.0
            pruned += [ComponentRef("head", l, int(k)) for k in drop]
        dec = GateDecision(GateSet(new_tok, new_head), [], sorted(pruned), 0.0, d.input)
        dec.predicted_delta_loss = 0.5 * math.fsum(report.score(r, d.input) for r in dec.pruned_refs)
        out.append(dec)
    return out


def measured_delta_loss(model: ViTModel, images, gates: GateSet, labels, mode: str = "compact") -> np.ndarray:
    """Per-input ``L(pruned) - L(dense)`` with plain cross-entropy."""
    dense = predict(model, images)
    if mode == "compact":
        pruned = ad.value_of(forward(model, images, gates, mode="compact")[0])
    else:
        pruned = predict(model, images, gates, mode)
    return (ad.cross_entropy(pruned, labels, reduction="none")
            - ad.cross_entropy(dense, labels, reduction="none"))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    pred_dl: float = 0.0
    meas_dl: float = 0.0
    dense_accuracy: float = 0.0
    dense_loss: float = 0.0
    inputs: int = 0
    per_input: dict = field(default_factory=dict)

    def rows(self, epoch="") -> list[dict]:
        out = [{"epoch": epoch, "split": "dense", "loss": self.dense_loss, "accuracy": self.dense_accuracy,
                "pred_dl": 0.0, "meas_dl": 0.0}]
        if self.per_input:
            out.append({"epoch": epoch, "split": "pruned", "loss": self.loss, "accuracy": self.accuracy,
                        "pred_dl": self.pred_dl, "meas_dl": self.meas_dl})
        return out


def evaluate(model: ViTModel, dataset: Dataset, policy: PruningPolicy | None = None,
             stats: CalibrationStats | None = None, gates: GateSet | None = None) -> EvalResult:
    """Dense metrics, plus pruned metrics when a policy (or explicit gates) is given.

    Measured and predicted loss changes use the label each input was scored
    against (its dense prediction), so both describe the same loss.
    """
    dense_logits = predict(model, dataset.images)
    dense_ce = ad.cross_entropy(dense_logits, dataset.labels, reduction="none")
    dense_acc = float(np.mean(np.argmax(dense_logits, axis=1) == dataset.labels))
    base = EvalResult(dense_acc, float(np.mean(dense_ce)), 0.0, 0.0, dense_acc, float(np.mean(dense_ce)),
                      len(dataset))
    if policy is None and gates is None:
        return base
    pseudo = np.argmax(dense_logits, axis=1)
    if gates is None:
        pb = infer_pruned_batch(model, dataset.images, policy, stats)
        logits, gates = pb.logits, pb.gates
        pred = np.array([d.predicted_delta_loss for d in pb.decisions])
    else:
        logits = ad.value_of(forward(model, dataset.images, gates, mode="compact")[0])
        pred = np.full(len(dataset), np.nan)
    ce = ad.cross_entropy(logits, dataset.labels, reduction="none")
    meas = (ad.cross_entropy(logits, pseudo, reduction="none")
            - ad.cross_entropy(dense_logits, pseudo, reduction="none"))
    base.accuracy = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    base.loss = float(np.mean(ce))
    base.pred_dl = float(np.mean(pred))
    base.meas_dl = float(np.mean(meas))
    base.per_input = {"pred_dl": pred, "meas_dl": meas, "kept_tokens": gates.kept_tokens()}
    return base


# ---------------------------------------------------------------------------
# Phase C: soft-gate fine-tuning
# ---------------------------------------------------------------------------


def gate_hardness(gates: GateSet) -> float:
    """Mean distance of the gates from the nearest binary value."""
    vals = np.concatenate([np.asarray(gates.token)[..., 1:].ravel(), np.asarray(gates.head).ravel()])
    return float(np.mean(np.abs(vals - np.round(vals))))


def final_gates(model: ViTModel, images, policy: PruningPolicy, stats: CalibrationStats,
                gamma: float) -> GateSet:
    """Soft gates at ``gamma`` from fresh scores, binarized at 0.5."""
    report = score_all(model, images, None)
    return binarize(soft_gateset(report, policy, stats, gamma))


def finetune(model: ViTModel, dataset: Dataset, policy: PruningPolicy, stats: CalibrationStats,
             cfg: FinetuneConfig, eval_set: Dataset | None = None,
             record_path=None) -> tuple[ViTModel, RunRecord]:
    """Train under per-input soft gates whose temperature rises each epoch.

    Every training input is scored once up front.  Each epoch then rescores
    the next ``rescore_size`` inputs of a fixed rotation with the current
    weights, rebuilds ``G = sigmoid(gamma (s_hat - tau))`` for all inputs and
    runs one pass of mini-batch AdamW.  Afterwards gates are binarized at
    0.5 and ``eval_set`` (if given) is evaluated in compact mode.
    """
    check_stats(model, stats)
    if len(dataset) == 0:
        raise DataError("fine-tuning set is empty")
    rng = ad.make_rng(cfg.seed)
    params = {k: v.copy() for k, v in model.params.items()}
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    record = RunRecord(record_path)
    N = len(dataset)
    size = N if cfg.rescore_size is None else min(cfg.rescore_size, N)
    spe = math.ceil(N / cfg.batch_size)
    total = max(cfg.epochs * spe, 1)
    rotation = rng.permutation(N)
    report = score_all(model, dataset.images, None) if cfg.epochs else None
    last_good = "pre-fine-tune parameters"
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        gamma = anneal_gamma(epoch, cfg.epochs - 1, cfg.gamma0, cfg.gamma_max)
        if epoch > 0:
            fresh = np.sort(rotation[np.arange((epoch - 1) * size, epoch * size) % N])
            part = score_all(model.with_params(params), dataset.images[fresh], None)
            report.token_scores[fresh] = part.token_scores
            report.head_scores[fresh] = part.head_scores
        gates = soft_gateset(report, policy, stats, gamma)
        order = rng.permutation(N)
        losses = []
        for s in range(spe):
            b = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            xb, g = shift_with_gates(dataset.images[b], GateSet(gates.token[b], gates.head[b], soft=True),
                                     cfg.shift_patches, model.config.patch_size, rng)
            try:
                value, grads = _loss_and_grads(model.with_params(params), xb,
                                               dataset.labels[b], cfg.label_smoothing, rng, g)
            except NumericError as exc:
                raise DivergenceError(f"fine-tuning diverged at epoch {epoch}: {exc}", last_good) from exc
            _clip(grads, cfg.grad_clip)
            lr = cfg.lr if cfg.schedule == "constant" else lr_at(epoch * spe + s, total, 0, cfg.lr)
            opt.step(params, grads, lr)
            losses.append(value)
        pruned_mass = (report.token_scores * (1 - gates.token[:, :, 1:])).sum(axis=(1, 2)) + \
            (report.head_scores * (1 - gates.head)).sum(axis=(1, 2))
        entry = {"phase": "finetune", "epoch": epoch, "gamma": gamma, "loss": float(np.mean(losses)),
                 "gate_hardness": gate_hardness(gates), "rescored": int(N if epoch == 0 else size),
                 "pred_dl": float(np.mean(0.5 * pruned_mass))}
        record.append(entry, time.perf_counter() - t0)
    tuned = model.with_params(params)
    if eval_set is not None and len(eval_set):
        gates = final_gates(tuned, eval_set.images, policy, stats, cfg.gamma_max)
        res = evaluate(tuned, eval_set, gates=gates)
        record.summary = {"accuracy": res.accuracy, "loss": res.loss, "dense_accuracy": res.dense_accuracy,
                          "meas_dl": res.meas_dl}
    return tuned, record


# ---------------------------------------------------------------------------
# Ordering efficacy
# ---------------------------------------------------------------------------


def ordering_trial(model: ViTModel, images, report: SensitivityReport, q: float, rng) -> dict:
    """Mean measured loss change when pruning the lowest, random or highest scored q-fraction."""
    labels = np.asarray(report_labels(model, images))
    bottom = [select(report, PruningPolicy("percentile", q, q), input=b) for b in range(report.inputs)]
    flipped = SensitivityReport(-report.token_scores, -report.head_scores, report.input_ids, report.label_mode)
    top = [select(flipped, PruningPolicy("percentile", q, q), input=b) for b in range(report.inputs)]
    rand = random_decisions(bottom, report, rng)
    out = {}
    for name, decs in (("bottom", bottom), ("random", rand), ("top", top)):
        out[name] = float(np.mean(measured_delta_loss(model, images, stack_decisions(decs), labels)))
    return out


def report_labels(model: ViTModel, images):
    return np.argmax(predict(model, images), axis=1)
