"""Curvature-weighted component importance.

For a cached activation ``z`` (a token row after a block, or one head's
full ``n x d_k`` output) the score is ``S = <H_z z, z>`` where ``H_z`` is
the Hessian of the per-example loss with respect to ``z`` with the network
re-entered at that site.  ``H_z z`` comes from the symmetric gradient
difference used by :func:`heartvit.autodiff.hvp`.

:func:`score_all` evaluates every component of an input with a handful of
batched passes: each row of a pass carries one perturbed copy of the
activations, and rows never interact, so the gradient of the summed loss
splits into independent per-component gradients.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, NumericError, RefError
from .model import ViTModel, block_heads, block_tail, classify, forward, loss as task_loss

KINDS = ("token", "head")
SCOPES = ("per-layer-by-kind", "per-layer-mixed")


@dataclass(frozen=True, order=True)
class ComponentRef:
    kind: str
    layer: int
    index: int

    def check(self, layers: int, tokens: int, heads: int):
        if self.kind not in KINDS:
            raise RefError(f"unknown component kind {self.kind!r}")
        if not 0 <= self.layer < layers:
            raise RefError(f"layer {self.layer} out of range [0, {layers})")
        if self.kind == "token":
            if self.index == 0:
                raise RefError("the CLS token is not a pruning candidate")
            if not 0 < self.index < tokens:
                raise RefError(f"token index {self.index} out of range [1, {tokens})")
        elif not 0 <= self.index < heads:
            raise RefError(f"head index {self.index} out of range [0, {heads})")


def default_loss(logits, labels):
    """Per-example cross-entropy summed over rows (each row is its own example)."""
    return task_loss(logits, labels, smoothing=0.0, reduction="sum")


@dataclass
class SensitivityReport:
    """Per-input scores for every token and head candidate.

    ``token_scores[b, l, j-1]`` scores token ``j`` after block ``l``;
    ``head_scores[b, l, k]`` scores head ``k`` of block ``l``.
    """

    token_scores: np.ndarray  # (B, L, n-1)
    head_scores: np.ndarray  # (B, L, H)
    input_ids: list = field(default_factory=list)
    label_mode: str = "true"

    def __post_init__(self):
        self.token_scores = np.asarray(self.token_scores, dtype=np.float64)
        self.head_scores = np.asarray(self.head_scores, dtype=np.float64)
        if not self.input_ids:
            self.input_ids = list(range(self.token_scores.shape[0]))

    @classmethod
    def from_arrays(cls, token_scores, head_scores, label_mode="true", input_ids=None):
        tok = np.asarray(token_scores, dtype=np.float64)
        head = np.asarray(head_scores, dtype=np.float64)
        if tok.ndim == 2:
            tok = tok[None]
        if head.ndim == 2:
            head = head[None]
        return cls(tok, head, list(input_ids or []), label_mode)

    @property
    def inputs(self) -> int:
        return self.token_scores.shape[0]

    @property
    def layers(self) -> int:
        return self.token_scores.shape[1]

    @property
    def tokens(self) -> int:
        return self.token_scores.shape[2] + 1

    @property
    def heads(self) -> int:
        return self.head_scores.shape[2]

    def refs(self) -> list[ComponentRef]:
        out = []
        for l in range(self.layers):
            out += [ComponentRef("token", l, j) for j in range(1, self.tokens)]
            out += [ComponentRef("head", l, k) for k in range(self.heads)]
        return out

    def _arrays(self, input):
        if input is None:
            return self.token_scores.mean(axis=0), self.head_scores.mean(axis=0)
        return self.token_scores[input], self.head_scores[input]

    def score(self, ref: ComponentRef, input: int | None = None) -> float:
        ref.check(self.layers, self.tokens, self.heads)
        tok, head = self._arrays(input)
        if ref.kind == "token":
            return float(tok[ref.layer, ref.index - 1])
        return float(head[ref.layer, ref.index])

    @property
    def batch_avg_tokens(self) -> np.ndarray:
        return self.token_scores.mean(axis=0)

    @property
    def batch_avg_heads(self) -> np.ndarray:
        return self.head_scores.mean(axis=0)

    def token_agg(self, input: int | None = None) -> np.ndarray:
        """Layer-summed token scores for positions ``1..n-1``."""
        tok, _ = self._arrays(input)
        return tok.sum(axis=0)

    def subset(self, rows) -> "SensitivityReport":
        rows = list(rows)
        return SensitivityReport(self.token_scores[rows], self.head_scores[rows],
                                 [self.input_ids[r] for r in rows], self.label_mode)

    # -- serialization ------------------------------------------------------

    def _entries(self, tok, head):
        out = []
        for ref in self.refs():
            s = tok[ref.layer, ref.index - 1] if ref.kind == "token" else head[ref.layer, ref.index]
            out.append({"kind": ref.kind, "layer": ref.layer, "index": ref.index, "s": float(s)})
        return out

    def to_json(self) -> str:
        doc = {
            "inputs": [
                {"id": _jsonable(self.input_ids[b]), "scores": self._entries(self.token_scores[b], self.head_scores[b])}
                for b in range(self.inputs)
            ],
            "batch_avg": self._entries(self.batch_avg_tokens, self.batch_avg_heads),
            "token_agg": [{"index": j, "s": float(v)} for j, v in enumerate(self.token_agg(), start=1)],
            "label_mode": self.label_mode,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SensitivityReport":
        doc = json.loads(text)
        entries = doc["inputs"][0]["scores"] if doc["inputs"] else doc["batch_avg"]
        L = 1 + max(e["layer"] for e in entries)
        n = 1 + max([e["index"] for e in entries if e["kind"] == "token"], default=0)
        H = 1 + max([e["index"] for e in entries if e["kind"] == "head"], default=-1)
        tok = np.zeros((len(doc["inputs"]), L, n - 1))
        head = np.zeros((len(doc["inputs"]), L, H))
        for b, item in enumerate(doc["inputs"]):
            for e in item["scores"]:
                if e["kind"] == "token":
                    tok[b, e["layer"], e["index"] - 1] = e["s"]
                else:
                    head[b, e["layer"], e["index"]] = e["s"]
        return cls(tok, head, [i["id"] for i in doc["inputs"]], doc["label_mode"])


def _jsonable(x):
    return x.item() if isinstance(x, np.generic) else x


# ---------------------------------------------------------------------------
# Resume-from-site losses (reference path)
# ---------------------------------------------------------------------------


def _run_tail(model: ViTModel, X, start: int):
    cfg, p = model.config, model.params
    for i in range(start, cfg.layers):
        X = block_tail(p, i, cfg, X, block_heads(p, i, cfg, X))
    return classify(p, X)[0]


def site_loss(model: ViTModel, cache, b: int, ref: ComponentRef, label: int, loss_fn=default_loss):
    """``z -> loss`` with the dense network re-entered at ``ref``'s activation.

    Returns ``(loss_fn_of_z, z)`` where ``z`` is the cached activation.
    """
    cfg = model.config
    ref.check(cfg.layers, cfg.tokens, cfg.heads)
    labels = np.array([label])
    if ref.kind == "token":
        X0 = cache.tokens[ref.layer][b]
        z = X0[ref.index].copy()
        rows = np.arange(cfg.tokens) == ref.index

        def fn(u):
            X = np.where(rows[:, None], 0.0, X0) + ad.reshape(u, (1, -1)) * rows[:, None]
            return loss_fn(_run_tail(model, ad.reshape(X, (1,) + X0.shape), ref.layer + 1), labels)

        return fn, z

    heads0 = cache.heads[ref.layer][b]
    X_in = cache.inputs[ref.layer][b][None]
    z = heads0[ref.index].copy()
    sel = (np.arange(cfg.heads) == ref.index)[:, None, None]

    def fn(u):
        heads = np.where(sel, 0.0, heads0) + ad.reshape(u, (1,) + z.shape) * sel
        X = block_tail(model.params, ref.layer, cfg, X_in, ad.reshape(heads, (1,) + heads0.shape))
        return loss_fn(_run_tail(model, X, ref.layer + 1), labels)

    return fn, z


def resolve_labels(model: ViTModel, logits: np.ndarray, labels):
    if labels is None:
        return np.argmax(logits, axis=-1), "predicted"
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return labels, "true"


def component_score(model: ViTModel, image, label: int | None, ref: ComponentRef, loss_fn=default_loss) -> float:
    """Score one component via the generic :func:`heartvit.autodiff.hvp`."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    logits, cache = forward(model, image)
    labels, _ = resolve_labels(model, logits, None if label is None else [label])
    fn, z = site_loss(model, cache, 0, ref, int(labels[0]), loss_fn)
    s = float(np.vdot(ad.hvp(fn, z, z), z))
    if not np.isfinite(s):
        raise NumericError(f"non-finite score for {ref}")
    return s


# ---------------------------------------------------------------------------
# Batched scoring (fast path)
# ---------------------------------------------------------------------------


def _perturbed_grads(loss_of, base: np.ndarray, z: np.ndarray):
    """Gradients at ``base +/- h z`` for each row's site.

    ``base`` has shape ``(R, ...)`` and ``z[r]`` is row ``r``'s component
    activation laid out in place, zero elsewhere.  Returns full-row
    gradients ``(g_plus, g_minus)`` and the per-row steps ``h``.
    """
    R = base.shape[0]
    zinf = np.abs(z).reshape(R, -1).max(axis=1)
    h = np.cbrt(ad.EPS) * (1.0 + zinf) / (1.0 + zinf)  # fd_step with v = z, vectorized
    shape = (R,) + (1,) * (base.ndim - 1)
    step = h.reshape(shape) * z
    both = np.concatenate([base + step, base - step])
    (g,) = ad.grad(loss_of, [both])
    return g[:R], g[R:], h


def _score_chunk(model: ViTModel, images: np.ndarray, labels, loss_fn):
    cfg = model.config
    L, n, H, d, dk = cfg.layers, cfg.tokens, cfg.heads, cfg.hidden_dim, cfg.head_dim
    logits, cache = forward(model, images)
    labels, mode = resolve_labels(model, logits, labels)
    B = images.shape[0]
    tok_scores = np.zeros((B, L, n - 1))
    head_scores = np.zeros((B, L, H))
    eye_tok = np.eye(n, dtype=bool)[1:]  # (n-1, n)
    eye_head = np.eye(H, dtype=bool)

    for l in range(L):
        # token rows: one row per (input, token j); site = row j of the block output
        X = cache.tokens[l]  # (B, n, d)
        base = np.repeat(X, n - 1, axis=0)  # (B*(n-1), n, d)
        site = np.tile(eye_tok, (B, 1))[:, :, None] & np.ones((1, 1, d), dtype=bool)
        zfull = np.where(site, base, 0.0)
        rl = np.repeat(labels, n - 1)
        rl2 = np.concatenate([rl, rl])

        def tok_loss(Xb, start=l + 1, lab=rl2):
            return loss_fn(_run_tail(model, Xb, start), lab)

        if l == L - 1:
            # the classifier reads only CLS: non-CLS rows after the last block carry no loss
            gp = gm = np.zeros_like(base)
            h = np.ones(base.shape[0])
        else:
            gp, gm, h = _perturbed_grads(tok_loss, base, zfull)
        hv = (gp - gm) / (2.0 * h[:, None, None])
        tok_scores[:, l, :] = (hv * zfull).sum(axis=(1, 2)).reshape(B, n - 1)

        # head rows: one row per (input, head k); site = head k's (n, d_k) output
        heads = cache.heads[l]  # (B, H, n, dk)
        hbase = np.repeat(heads, H, axis=0)  # (B*H, H, n, dk)
        hsite = np.tile(eye_head, (B, 1))[:, :, None, None] & np.ones((1, 1, n, dk), dtype=bool)
        hz = np.where(hsite, hbase, 0.0)
        X_in = np.repeat(cache.inputs[l], H, axis=0)
        X_in2 = np.concatenate([X_in, X_in])
        hl = np.repeat(labels, H)
        hl2 = np.concatenate([hl, hl])

        def head_loss(hb, layer=l, xin=X_in2, lab=hl2):
            Xo = block_tail(model.params, layer, cfg, xin, hb)
            return loss_fn(_run_tail(model, Xo, layer + 1), lab)

        gp, gm, h = _perturbed_grads(head_loss, hbase, hz)
        hv = (gp - gm) / (2.0 * h[:, None, None, None])
        head_scores[:, l, :] = (hv * hz).sum(axis=(1, 2, 3)).reshape(B, H)

    if not (np.all(np.isfinite(tok_scores)) and np.all(np.isfinite(head_scores))):
        bad = np.argwhere(~np.isfinite(np.concatenate([tok_scores, head_scores], axis=2)))[0]
        raise NumericError(f"non-finite score at input {bad[0]}, layer {bad[1]}, slot {bad[2]}")
    return tok_scores, head_scores, mode


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("PRUNE_THREADS", "1")))
    except ValueError:
        return 1


def score_all(model: ViTModel, batch, labels=None, *, chunk: int = 8, workers: int | None = None,
              loss_fn=default_loss, input_ids=None) -> SensitivityReport:
    """Score every non-CLS token (all blocks) and every head for each input.

    ``labels=None`` scores against the model's own predictions.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.shape[0] == 0:
        raise DataError("score_all needs a non-empty batch")
    lab = None if labels is None else np.asarray(labels, dtype=np.int64).reshape(-1)
    starts = list(range(0, batch.shape[0], chunk))

    def job(s):
        return _score_chunk(model, batch[s:s + chunk], None if lab is None else lab[s:s + chunk], loss_fn)

    workers = default_workers() if workers is None else workers
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, starts))
    else:
        parts = [job(s) for s in starts]
    tok = np.concatenate([p[0] for p in parts])
    head = np.concatenate([p[1] for p in parts])
    ids = list(input_ids) if input_ids is not None else list(range(batch.shape[0]))
    return SensitivityReport(tok, head, ids, parts[0][2])


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass
class CalibrationStats:
    """Layerwise statistics and thresholds fixed during calibration.

    Keys are ``"token:<l>"``, ``"head:<l>"`` (by-kind scope), ``"layer:<l>"``
    (mixed scope) and ``"token-agg"`` for the layer-summed token scores.
    Thresholds live in normalized units.
    """

    scope: str
    mu: dict = field(default_factory=dict)
    sigma: dict = field(default_factory=dict)
    tau: dict = field(default_factory=dict)
    policy: str = ""
    epsilon_per_layer: list | None = None
    label_mode: str = "true"
    inputs: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationStats":
        return cls(**json.loads(text))


def _groups(layers: int, scope: str):
    if scope == "per-layer-by-kind":
        return [(f"token:{l}", l, ("token",)) for l in range(layers)] + [
            (f"head:{l}", l, ("head",)) for l in range(layers)]
    if scope == "per-layer-mixed":
        return [(f"layer:{l}", l, ("token", "head")) for l in range(layers)]
    raise ConfigError(f"unknown normalization scope {scope!r}")


def zscore(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Population z-scores; a constant set maps to zeros."""
    values = np.asarray(values, dtype=np.float64)
    mu = float(values.mean())
    sigma = float(values.std())
    if sigma == 0.0:
        return np.zeros_like(values), mu, 0.0
    return (values - mu) / sigma, mu, sigma


@dataclass
class NormalizedScores:
    token: np.ndarray  # (L, n-1)
    head: np.ndarray  # (L, H)
    token_agg: np.ndarray  # (n-1,)


def normalize(report: SensitivityReport, scope: str = "per-layer-by-kind") -> tuple[NormalizedScores, CalibrationStats]:
    """Normalize batch-averaged scores within each candidate set."""
    stats = CalibrationStats(scope=scope, label_mode=report.label_mode, inputs=report.inputs)
    tok = report.batch_avg_tokens
    head = report.batch_avg_heads
    ntok = np.zeros_like(tok)
    nhead = np.zeros_like(head)
    for key, l, kinds in _groups(report.layers, scope):
        parts = []
        if "token" in kinds:
            parts.append(tok[l])
        if "head" in kinds:
            parts.append(head[l])
        z, mu, sigma = zscore(np.concatenate(parts))
        stats.mu[key], stats.sigma[key] = mu, sigma
        off = 0
        if "token" in kinds:
            ntok[l] = z[: tok.shape[1]]
            off = tok.shape[1]
        if "head" in kinds:
            nhead[l] = z[off:]
    zagg, mu, sigma = zscore(report.token_agg())
    stats.mu["token-agg"], stats.sigma["token-agg"] = mu, sigma
    return NormalizedScores(ntok, nhead, zagg), stats


def _apply(values, mu, sigma):
    if sigma == 0.0:
        return np.zeros_like(values)
    return (values - mu) / sigma


def apply_stats(report: SensitivityReport, stats: CalibrationStats, input: int) -> NormalizedScores:
    """Normalize one input's raw scores with calibration statistics."""
    tok, head = report.token_scores[input], report.head_scores[input]
    ntok = np.zeros_like(tok)
    nhead = np.zeros_like(head)
    for l in range(report.layers):
        if stats.scope == "per-layer-by-kind":
            tk, hk = f"token:{l}", f"head:{l}"
        else:
            tk = hk = f"layer:{l}"
        ntok[l] = _apply(tok[l], stats.mu[tk], stats.sigma[tk])
        nhead[l] = _apply(head[l], stats.mu[hk], stats.sigma[hk])
    agg = _apply(report.token_agg(input), stats.mu["token-agg"], stats.sigma["token-agg"])
    return NormalizedScores(ntok, nhead, agg)
