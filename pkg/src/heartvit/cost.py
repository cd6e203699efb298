"""Analytic multiply-accumulate counts for gated ViTs.

Counts exclude element-wise work (softmax, LayerNorm, activations).  In
``masked_heads`` mode head gates save nothing because gated heads are still
computed; ``compact_heads`` charges only the kept heads.  The patch embedding
always runs on the full token set.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ConfigError
from .model import VIT_B16, ViTConfig

MODES = ("masked_heads", "compact_heads")
_ALIASES = {"masked": "masked_heads", "compact": "compact_heads"}

# Reference GMAC totals for ViT-B/16 under symmetric or asymmetric pruning,
# keyed by (token %, head %); checked by ``check_reference``.
REFERENCE_DENSE_G = 17.6
REFERENCE_FLOPS_G = {
    (20, 20): 13.45,
    (20, 80): 13.45,
    (40, 40): 10.14,
    (50, 50): 8.52,
    (60, 60): 6.83,
    (80, 80): 3.51,
}
REFERENCE_DENSE_TOL = 0.02
REFERENCE_TOL = 0.05


def canonical_mode(mode: str) -> str:
    mode = _ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigError(f"unknown cost mode {mode!r}; expected masked or compact")
    return mode


def _round_half_up(x) -> int:
    return int(math.floor(x + Fraction(1, 2)))


def kept_counts(n: int, H: int, alpha, beta, mode: str, rounded: bool = True):
    """Tokens ``n'`` (including CLS) and heads ``h'`` that a block processes."""
    mode = canonical_mode(mode)
    a, b = Fraction(alpha), Fraction(beta)
    if not (0 < a <= 1 and 0 < b <= 1):
        raise ConfigError(f"kept fractions must lie in (0, 1], got alpha={alpha}, beta={beta}")
    if rounded:
        n_kept = 1 + _round_half_up(a * (n - 1))
        h_kept = H if mode == "masked_heads" else _round_half_up(b * H)
    else:
        n_kept = 1 + a * (n - 1)
        h_kept = Fraction(H) if mode == "masked_heads" else b * H
    if h_kept == 0:
        raise ConfigError(f"beta={beta} keeps no heads out of {H}")
    return n_kept, h_kept


@dataclass(frozen=True)
class LayerCost:
    qkv: int
    attn_logits: int
    attn_values: int
    out_proj: int
    ffn: int

    @property
    def total(self):
        return self.qkv + self.attn_logits + self.attn_values + self.out_proj + self.ffn


def layer_cost(n: int, d: int, H: int, d_k: int, d_ff: int, alpha=1.0, beta=1.0,
               mode: str = "masked_heads", rounded: bool = True) -> LayerCost:
    """MACs of one encoder block with kept fractions ``alpha`` (tokens) and ``beta`` (heads).

    With ``rounded`` the kept counts are integers.  Otherwise they are the
    exact rationals ``1 + alpha (n - 1)`` and ``beta H``, which makes cost an
    exact polynomial in ``alpha`` and ``beta``.
    """
    nk, hk = kept_counts(n, H, alpha, beta, mode, rounded)
    width = hk * d_k
    return LayerCost(
        qkv=3 * nk * d * width,
        attn_logits=nk * nk * width,
        attn_values=nk * nk * width,
        out_proj=nk * width * d,
        ffn=2 * nk * d * d_ff,
    )


@dataclass
class CostReport:
    mode: str
    alpha: float
    beta: float
    layers: list = field(default_factory=list)
    patch_embed: int = 0
    classifier: int = 0

    @property
    def total(self):
        return sum(l.total for l in self.layers) + self.patch_embed + self.classifier

    @property
    def gmacs(self) -> float:
        return float(self.total) / 1e9


def model_cost(config: ViTConfig, alpha=1.0, beta=1.0, mode: str = "masked_heads",
               rounded: bool = True) -> CostReport:
    cfg = config
    mode = canonical_mode(mode)
    per = layer_cost(cfg.tokens, cfg.hidden_dim, cfg.heads, cfg.head_dim, cfg.ffn_dim, alpha, beta, mode, rounded)
    return CostReport(
        mode=mode, alpha=float(alpha), beta=float(beta),
        layers=[per] * cfg.layers,
        patch_embed=cfg.num_patches * cfg.channels * cfg.patch_size ** 2 * cfg.hidden_dim,
        classifier=cfg.hidden_dim * cfg.classes,
    )


_GRID_ITEM = re.compile(r"^\d+(\.\d+)?$")


def parse_grid(text: str) -> list[tuple[float, float]]:
    """``sym:20,40`` or ``asym:20/80,40/60`` into (token %, head %) pairs."""
    kind, sep, body = text.partition(":")
    if not sep or kind not in ("sym", "asym") or not body:
        raise ConfigError(f"bad grid {text!r}; expected sym:20,40 or asym:20/80")
    out = []
    for item in body.split(","):
        parts = item.strip().split("/")
        if kind == "sym" and len(parts) != 1 or kind == "asym" and len(parts) != 2:
            raise ConfigError(f"bad grid entry {item!r} in {text!r}")
        if not all(_GRID_ITEM.match(p) for p in parts):
            raise ConfigError(f"bad grid entry {item!r} in {text!r}")
        t = float(parts[0])
        h = t if kind == "sym" else float(parts[1])
        if not (0 <= t < 100 and 0 <= h < 100):
            raise ConfigError(f"prune percentages must lie in [0, 100), got {item!r}")
        out.append((t, h))
    return out


@dataclass(frozen=True)
class ReductionRow:
    tokens_pruned: float
    heads_pruned: float
    mode: str
    flops: int
    reduction_pct: float


def reduction_table(config: ViTConfig, grid, mode: str = "masked_heads") -> tuple[CostReport, list[ReductionRow]]:
    """Dense report plus one row per (token %, head %) grid point, sorted."""
    if not grid:
        raise ConfigError("ratio grid is empty")
    mode = canonical_mode(mode)
    dense = model_cost(config, 1, 1, mode)
    rows = []
    for t, h in sorted(grid):
        alpha = 1 - Fraction(str(t)) / 100
        beta = 1 - Fraction(str(h)) / 100
        rep = model_cost(config, alpha, beta, mode)
        red = (dense.total - rep.total) / dense.total * 100
        rows.append(ReductionRow(t, h, mode, int(rep.total), float(red)))
    return dense, rows


def _pct(x: float) -> str:
    return f"{x:g}"


def table_csv(dense: CostReport, rows: list[ReductionRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tokens_pruned", "heads_pruned", "mode", "flops", "reduction_pct"])
    w.writerow(["0", "0", dense.mode, int(dense.total), "0.00"])
    for r in rows:
        w.writerow([_pct(r.tokens_pruned), _pct(r.heads_pruned), r.mode, r.flops, f"{r.reduction_pct:.2f}"])
    return buf.getvalue()


def check_reference(dense: CostReport, rows: list[ReductionRow]) -> list[str]:
    """Deviations from the reference ViT-B/16 totals; empty when all agree.

    Only rows whose grid point has a reference value are compared.
    """
    problems = []
    dev = abs(dense.gmacs - REFERENCE_DENSE_G) / REFERENCE_DENSE_G
    if dev > REFERENCE_DENSE_TOL:
        problems.append(f"dense {dense.gmacs:.3f} G vs {REFERENCE_DENSE_G} G ({dev:.1%})")
    for r in rows:
        target = REFERENCE_FLOPS_G.get((r.tokens_pruned, r.heads_pruned))
        if target is None:
            continue
        got = r.flops / 1e9
        dev = abs(got - target) / target
        if dev > REFERENCE_TOL:
            problems.append(f"{_pct(r.tokens_pruned)}/{_pct(r.heads_pruned)}: {got:.3f} G vs {target} G ({dev:.1%})")
    return problems


@dataclass(frozen=True)
class Dominance:
    d_alpha: float
    d_beta: float
    ffn_share: float

    @property
    def margin(self) -> float:
        """Excess of the token slope over the head slope, relative to the token slope."""
        return (self.d_alpha - self.d_beta) / self.d_alpha


def token_dominance(config: ViTConfig = VIT_B16) -> Dominance:
    """Slopes of compact-mode cost at the dense point, from the unrounded closed form."""
    cfg = config
    n, d, dk, H, dff, L = cfg.tokens, cfg.hidden_dim, cfg.head_dim, cfg.heads, cfg.ffn_dim, cfg.layers
    width = H * dk
    # cost/L = 4 n' d w beta + 2 n'^2 w beta + 2 n' d dff, with n' = 1 + alpha (n - 1)
    d_alpha = L * (n - 1) * (4 * d * width + 4 * n * width + 2 * d * dff)
    d_beta = L * (4 * n * d * width + 2 * n * n * width)
    dense = layer_cost(n, d, H, dk, dff)
    return Dominance(float(d_alpha), float(d_beta), dense.ffn / dense.total)
