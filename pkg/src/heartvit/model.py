"""Gated Vision Transformer.

The forward pass is written once against :mod:`heartvit.autodiff` so that
parameters, inputs or gates may be plain arrays (inference) or tape
variables (training, sensitivity, gate gradients).

Token gates are stored per block: ``token[b, j]`` gates token ``j`` at the
input of block ``b``.  In mask mode a zero gate removes the token from the
attention keys of block ``b`` and zeroes its row in the block output; a
soft gate only scales the token's key weight, so a nearly closed gate fades
the token out of attention without distorting its own row.  In compact mode
the token is physically dropped before block ``b``, which requires the
masks to be non-increasing over blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Var, value_of
from .errors import ConfigError, ContractError, DataError, GateError


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    layers: int = 4
    heads: int = 4
    hidden_dim: int = 64
    ffn_dim: int | None = None
    classes: int = 8
    droppath_rate: float = 0.0
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)
        self.validate()

    def validate(self):
        positive = ("image_size", "patch_size", "channels", "layers", "heads", "hidden_dim", "ffn_dim", "classes")
        for name in positive:
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.droppath_rate < 1.0:
            raise ConfigError("droppath_rate must lie in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ViTConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = float(val) if key in ("droppath_rate", "label_smoothing") else int(val)
        return cls(**kw)


VIT_B16 = ViTConfig(
    image_size=224, patch_size=16, channels=3, layers=12, heads=12, hidden_dim=768,
    ffn_dim=3072, classes=1000, droppath_rate=0.1, label_smoothing=0.1,
)

TINY = ViTConfig()


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.hidden_dim, cfg.ffn_dim
    shapes = {
        "patch.w": (cfg.channels * cfg.patch_size**2, d),
        "patch.b": (d,),
        "cls": (d,),
        "pos": (cfg.tokens, d),
    }
    for i in range(cfg.layers):
        b = f"blocks.{i}."
        shapes.update({
            b + "ln1.g": (d,), b + "ln1.b": (d,),
            b + "wq": (d, d), b + "bq": (d,),
            b + "wk": (d, d), b + "bk": (d,),
            b + "wv": (d, d), b + "bv": (d,),
            b + "wo": (d, d), b + "bo": (d,),
            b + "ln2.g": (d,), b + "ln2.b": (d,),
            b + "fc1.w": (d, f), b + "fc1.b": (f,),
            b + "fc2.w": (f, d), b + "fc2.b": (d,),
        })
    shapes.update({"norm.g": (d,), "norm.b": (d,), "head.w": (d, cfg.classes), "head.b": (cfg.classes,)})
    return shapes


class ViTModel:
    """Configuration plus a closed registry of named float64 parameters."""

    def __init__(self, config: ViTConfig, params: dict[str, np.ndarray]):
        shapes = param_shapes(config)
        if set(params) != set(shapes):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise ConfigError(f"parameter registry mismatch: missing={missing} extra={extra}")
        for name, shape in shapes.items():
            if tuple(np.shape(params[name])) != shape:
                raise ConfigError(f"parameter {name} has shape {np.shape(params[name])}, expected {shape}")
        self.config = config
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in shapes}

    def copy(self) -> "ViTModel":
        return ViTModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def with_params(self, params: dict[str, np.ndarray]) -> "ViTModel":
        return ViTModel(self.config, params)


def init_model(config: ViTConfig, seed: int) -> ViTModel:
    config.validate()
    rng = ad.make_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif leaf.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = ad.truncated_normal(rng, shape, std=0.02)
    return ViTModel(config, params)


# ---------------------------------------------------------------------------
# Gates and caches
# ---------------------------------------------------------------------------


@dataclass
class GateSet:
    """Token gates ``(L, n)`` and head gates ``(L, H)``.

    Either array may carry a leading batch axis for per-input gates.  Entries
    are binary unless ``soft`` is set, in which case they lie in [0, 1].
    Gate arrays may also be tape variables so gradients can reach them.
    """

    token: object
    head: object
    soft: bool = False

    @classmethod
    def ones(cls, cfg: ViTConfig, batch: int | None = None) -> "GateSet":
        lead = () if batch is None else (batch,)
        return cls(np.ones(lead + (cfg.layers, cfg.tokens)), np.ones(lead + (cfg.layers, cfg.heads)))

    @classmethod
    def from_masks(cls, cfg: ViTConfig, token_keep, head_keep) -> "GateSet":
        """Global token mask (length n) broadcast to every block."""
        token_keep = np.asarray(token_keep, dtype=np.float64)
        head_keep = np.asarray(head_keep, dtype=np.float64)
        tok = np.broadcast_to(token_keep[..., None, :], token_keep.shape[:-1] + (cfg.layers, cfg.tokens)).copy()
        return cls(tok, head_keep.copy())

    @property
    def batched(self) -> bool:
        return np.ndim(value_of(self.token)) == 3

    def validate(self, cfg: ViTConfig, batch: int | None = None):
        tok = value_of(self.token)
        head = value_of(self.head)
        if tok.shape[-2:] != (cfg.layers, cfg.tokens):
            raise GateError(f"token gates shape {tok.shape} incompatible with (L={cfg.layers}, n={cfg.tokens})")
        if head.shape[-2:] != (cfg.layers, cfg.heads):
            raise GateError(f"head gates shape {head.shape} incompatible with (L={cfg.layers}, H={cfg.heads})")
        if tok.ndim != head.ndim or tok.ndim not in (2, 3):
            raise GateError("token and head gates must both be per-model or both per-input")
        if tok.ndim == 3:
            if batch is not None and (tok.shape[0] != batch or head.shape[0] != batch):
                raise GateError(f"per-input gates for {tok.shape[0]} inputs, batch has {batch}")
        if np.any(tok[..., 0] != 1.0):
            raise GateError("CLS token gate must be 1")
        for arr in (tok, head):
            if self.soft:
                if np.any((arr < 0) | (arr > 1)) or not np.all(np.isfinite(arr)):
                    raise GateError("soft gates must lie in [0, 1]")
            elif np.any((arr != 0) & (arr != 1)):
                raise GateError("hard gates must be binary")

    def example(self, b: int) -> "GateSet":
        return GateSet(value_of(self.token)[b], value_of(self.head)[b], self.soft)

    def kept_tokens(self) -> np.ndarray:
        """Number of tokens entering each block, shape ``([B,] L)``."""
        return (value_of(self.token) > 0).sum(axis=-1)


@dataclass
class ActivationCache:
    """Per-layer activations recorded during a forward pass.

    ``tokens[l]`` holds the output of block ``l`` with shape ``(B, n_l, d)``,
    ``heads[l]`` the per-head outputs ``(B, H_l, n_l, d_k)`` as they enter
    the output projection, ``inputs[l]`` the block input.  ``positions[l]``
    lists the original token indices present in block ``l``.  For compact
    runs with per-input gates each entry is a list with one array per input.
    """

    inputs: list = field(default_factory=list)
    tokens: list = field(default_factory=list)
    heads: list = field(default_factory=list)
    positions: list = field(default_factory=list)
    head_index: list = field(default_factory=list)
    cls: np.ndarray | None = None
    logits: np.ndarray | None = None
    ragged: bool = False

    @property
    def layers(self) -> int:
        return len(self.tokens)

    def rows(self, layer: int, b: int) -> tuple[np.ndarray, np.ndarray]:
        """(original positions, activations) of example ``b`` after ``layer``."""
        if self.ragged:
            return self.positions[layer][b], self.tokens[layer][b]
        pos = self.positions[layer]
        if np.ndim(pos) == 2:
            keep = pos[b]
            return np.nonzero(keep)[0], self.tokens[layer][b][keep.astype(bool)]
        return pos, self.tokens[layer][b]

    def cls_token(self, layer: int) -> np.ndarray:
        if self.ragged:
            return np.stack([t[0] for t in self.tokens[layer]])
        return self.tokens[layer][:, 0]

    def input_rows(self, layer: int, b: int) -> np.ndarray:
        """Block input rows of example ``b`` aligned with :meth:`rows`."""
        if self.ragged:
            return self.inputs[layer][b]
        pos = self.positions[layer]
        if np.ndim(pos) == 2:
            return self.inputs[layer][b][pos[b].astype(bool)]
        return self.inputs[layer][b]

    def batch_size(self) -> int:
        return len(self.tokens[0]) if self.ragged else self.tokens[0].shape[0]

    def io_norms(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-token input/output norms of block ``layer`` over live tokens."""
        ins, outs = [], []
        for b in range(self.batch_size()):
            ins.append(np.linalg.norm(self.input_rows(layer, b), axis=-1))
            outs.append(np.linalg.norm(self.rows(layer, b)[1], axis=-1))
        return np.concatenate(ins), np.concatenate(outs)


# ---------------------------------------------------------------------------
# Forward building blocks
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    B, C, S, _ = images.shape
    g = S // patch
    x = images.reshape(B, C, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, g * g, C * patch * patch)


def embed(p, cfg: ViTConfig, images: np.ndarray):
    patches = patchify(np.asarray(images, dtype=np.float64), cfg.patch_size)
    x = patches @ p["patch.w"] + p["patch.b"]
    B = patches.shape[0]
    cls = ad.reshape(p["cls"], (1, 1, cfg.hidden_dim)) * np.ones((B, 1, 1))
    return ad.concat([cls, x], axis=1) + p["pos"]


def _split_heads(x, B, n, H, dk):
    return ad.transpose(ad.reshape(x, (B, n, H, dk)), (0, 2, 1, 3))


def block_heads(p, i: int, cfg: ViTConfig, X, key_weight=None, head_cols=None):
    """Per-head attention outputs of block ``i``: ``(B, H', n, d_k)``.

    ``key_weight`` (B, n) scales attention to each key; ``head_cols`` selects
    the projection columns of surviving heads (compact mode).
    """
    pre = f"blocks.{i}."
    B, n, _ = value_of(X).shape
    dk = cfg.head_dim
    h = ad.layer_norm(X, p[pre + "ln1.g"], p[pre + "ln1.b"])
    wq, wk, wv = p[pre + "wq"], p[pre + "wk"], p[pre + "wv"]
    bq, bk, bv = p[pre + "bq"], p[pre + "bk"], p[pre + "bv"]
    if head_cols is not None:
        wq, wk, wv = (ad.getitem(w, (slice(None), head_cols)) for w in (wq, wk, wv))
        bq, bk, bv = (ad.getitem(b_, head_cols) for b_ in (bq, bk, bv))
    H = value_of(wq).shape[1] // dk
    if H == 0:
        return np.zeros((B, 0, n, dk))
    q = _split_heads(h @ wq + bq, B, n, H, dk)
    k = _split_heads(h @ wk + bk, B, n, H, dk)
    v = _split_heads(h @ wv + bv, B, n, H, dk)
    scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
    if key_weight is None:
        attn = ad.softmax(scores)
    else:
        attn = ad.weighted_softmax(scores, ad.reshape(key_weight, (B, 1, 1, n)))
    return attn @ v


def block_tail(p, i: int, cfg: ViTConfig, X, heads, head_cols=None, token_scale=None, drop=None):
    """Output projection, MLP and residuals of block ``i``.

    ``token_scale`` (B, n) multiplies the output rows; ``drop`` is a pair of
    per-sample residual-branch multipliers used by DropPath.
    """
    pre = f"blocks.{i}."
    B, n, d = value_of(X).shape
    wo, bo = p[pre + "wo"], p[pre + "bo"]
    if head_cols is not None:
        wo = ad.getitem(wo, head_cols)
    Hk = value_of(heads).shape[1]
    if Hk == 0:
        attn_out = bo * np.ones((B, n, 1))
    else:
        merged = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (B, n, Hk * cfg.head_dim))
        attn_out = merged @ wo + bo
    if drop is not None:
        attn_out = attn_out * drop[0]
    X = X + attn_out
    h = ad.layer_norm(X, p[pre + "ln2.g"], p[pre + "ln2.b"])
    mlp = ad.gelu(h @ p[pre + "fc1.w"] + p[pre + "fc1.b"]) @ p[pre + "fc2.w"] + p[pre + "fc2.b"]
    if drop is not None:
        mlp = mlp * drop[1]
    X = X + mlp
    if token_scale is not None:
        X = X * ad.reshape(token_scale, (B, n, 1))
    return X


def classify(p, X):
    cls = ad.getitem(X, (slice(None), 0))
    feat = ad.layer_norm(cls, p["norm.g"], p["norm.b"])
    return feat @ p["head.w"] + p["head.b"], feat


def _head_cols(keep: np.ndarray, dk: int) -> np.ndarray:
    kept = np.nonzero(np.asarray(keep) > 0)[0]
    return (kept[:, None] * dk + np.arange(dk)).reshape(-1)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def forward(model: ViTModel, batch, gates: GateSet | None = None, mode: str = "mask", *,
            params=None, train: bool = False, rng: np.random.Generator | None = None,
            record: bool = True):
    """Run the gated transformer; returns ``(logits, cache)``.

    ``params`` overrides the model's arrays (e.g. with tape variables).
    DropPath is applied only when ``train`` is set.
    """
    cfg = model.config
    p = model.params if params is None else params
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ContractError(
            f"batch shape {batch.shape} != (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size})")
    B = batch.shape[0]
    if mode not in ("mask", "compact"):
        raise ContractError(f"unknown execution mode {mode!r}")
    if gates is not None:
        gates.validate(cfg, B)
        if mode == "compact" and gates.soft:
            raise ContractError("compact mode cannot execute soft gates")
    if mode == "compact" and gates is not None:
        if gates.batched:
            return _forward_compact_ragged(model, batch, gates, p)
        return _forward_compact(model, batch, gates, p)
    return _forward_mask(model, batch, gates, p, train, rng, record)


def _droppath(cfg, i, B, train, rng):
    if not train or cfg.droppath_rate <= 0:
        return None
    rate = cfg.droppath_rate * i / max(cfg.layers - 1, 1)
    if rate <= 0:
        return None
    keep = 1.0 - rate
    return tuple((rng.random((B, 1, 1)) < keep) / keep for _ in range(2))


def _forward_mask(model, batch, gates, p, train, rng, record):
    cfg = model.config
    B = batch.shape[0]
    if train and cfg.droppath_rate > 0 and rng is None:
        raise ContractError("training forward with DropPath needs an rng")
    cache = ActivationCache()
    X = embed(p, cfg, batch)
    for i in range(cfg.layers):
        tok_w = head_w = None
        if gates is not None:
            tok = gates.token
            head = gates.head
            if gates.batched:
                tok_w = ad.getitem(tok, (slice(None), i))
                head_w = ad.getitem(head, (slice(None), i))
            else:
                tok_w = ad.reshape(ad.getitem(tok, i), (1, cfg.tokens)) * np.ones((B, 1))
                head_w = ad.reshape(ad.getitem(head, i), (1, cfg.heads)) * np.ones((B, 1))
        heads = block_heads(p, i, cfg, X, key_weight=tok_w)
        if head_w is not None:
            heads = heads * ad.reshape(head_w, (B, cfg.heads, 1, 1))
        row_scale = None if gates is None or gates.soft else tok_w
        X_out = block_tail(p, i, cfg, X, heads, token_scale=row_scale, drop=_droppath(cfg, i, B, train, rng))
        if record:
            cache.inputs.append(value_of(X))
            cache.heads.append(value_of(heads))
            cache.tokens.append(value_of(X_out))
            if gates is None:
                cache.positions.append(np.arange(cfg.tokens))
            else:
                cache.positions.append((value_of(tok_w) > 0).astype(np.int8))
            cache.head_index.append(np.arange(cfg.heads))
        X = X_out
    logits, feat = classify(p, X)
    cache.cls = value_of(feat)
    cache.logits = value_of(logits)
    return logits, cache


def _compact_one(model, images, tok, head, p):
    """Compact forward for inputs sharing one hard GateSet."""
    cfg = model.config
    tok = np.asarray(value_of(tok))
    head = np.asarray(value_of(head))
    X = embed(p, cfg, images)
    live = np.arange(cfg.tokens)
    cache = ActivationCache()
    for i in range(cfg.layers):
        want = tok[i] > 0
        if np.any(want & ~np.isin(np.arange(cfg.tokens), live)):
            raise GateError(f"compact mode needs non-increasing token masks (block {i} revives a token)")
        sel = want[live]
        if not np.all(sel):
            X = ad.getitem(X, (slice(None), np.nonzero(sel)[0]))
            live = live[sel]
        cols = _head_cols(head[i], cfg.head_dim)
        heads = block_heads(p, i, cfg, X, head_cols=cols)
        X_out = block_tail(p, i, cfg, X, heads, head_cols=cols)
        cache.inputs.append(value_of(X))
        cache.heads.append(value_of(heads))
        cache.tokens.append(value_of(X_out))
        cache.positions.append(live.copy())
        cache.head_index.append(np.nonzero(head[i] > 0)[0])
        X = X_out
    logits, feat = classify(p, X)
    cache.cls = value_of(feat)
    cache.logits = value_of(logits)
    return logits, cache


def _forward_compact(model, batch, gates, p):
    return _compact_one(model, batch, gates.token, gates.head, p)


def _forward_compact_ragged(model, batch, gates, p):
    tok = value_of(gates.token)
    head = value_of(gates.head)
    logits, caches = [], []
    for b in range(batch.shape[0]):
        lg, c = _compact_one(model, batch[b:b + 1], tok[b], head[b], p)
        logits.append(value_of(lg))
        caches.append(c)
    L = model.config.layers
    merged = ActivationCache(ragged=True)
    merged.inputs = [[c.inputs[i][0] for c in caches] for i in range(L)]
    merged.tokens = [[c.tokens[i][0] for c in caches] for i in range(L)]
    merged.heads = [[c.heads[i][0] for c in caches] for i in range(L)]
    merged.positions = [[c.positions[i] for c in caches] for i in range(L)]
    merged.head_index = [[c.head_index[i] for c in caches] for i in range(L)]
    merged.cls = np.concatenate([c.cls for c in caches])
    merged.logits = np.concatenate(logits)
    return merged.logits, merged


def predict(model: ViTModel, batch, gates: GateSet | None = None, mode: str = "mask", chunk: int = 256):
    """Logits only, evaluated in chunks without recording a cache."""
    batch = np.asarray(batch, dtype=np.float64)
    out = []
    for s in range(0, batch.shape[0], chunk):
        g = gates
        if gates is not None and gates.batched:
            g = GateSet(value_of(gates.token)[s:s + chunk], value_of(gates.head)[s:s + chunk], gates.soft)
        if mode == "compact" and g is not None:
            lg, _ = forward(model, batch[s:s + chunk], g, mode)
        else:
            if g is not None:
                g.validate(model.config, batch[s:s + chunk].shape[0])
            lg, _ = _forward_mask(model, batch[s:s + chunk], g, model.params, False, None, record=False)
        out.append(value_of(lg))
    return np.concatenate(out) if out else np.zeros((0, model.config.classes))


def loss(logits, labels, smoothing: float = 0.0, reduction: str = "mean"):
    """Cross-entropy with label smoothing; ``smoothing=0`` is plain CE."""
    labels = np.asarray(labels)
    classes = np.shape(value_of(logits))[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"labels must lie in [0, {classes})")
    return ad.cross_entropy(logits, labels, smoothing=smoothing, reduction=reduction)
