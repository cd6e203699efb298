"""Turn sensitivity scores into gates.

Two hard selection rules are provided.  Percentile mode keeps the top
fraction of tokens and heads.  Budget mode prunes the cheapest candidates of
each layer while the summed score stays inside a loss budget.  Soft sigmoid
gates with an annealed temperature relax either decision for fine-tuning.
"""

from __future__ import annotations

import math
import shlex
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RefError
from .model import GateSet
from .sensitivity import CalibrationStats, ComponentRef, SensitivityReport, apply_stats

MODES = ("percentile", "budget")
# Guards floor(p * count) against products such as 0.29 * 100 = 28.999...
_FLOOR_SLACK = 1e-9


@dataclass(frozen=True)
class PruningPolicy:
    """Prune fractions (``0.2`` prunes 20%) or a loss budget.

    ``global_tokens`` selects one token mask from layer-summed scores and
    applies it to every block; otherwise each layer picks its own tokens.
    """

    mode: str = "percentile"
    token_ratio: float = 0.0
    head_ratio: float = 0.0
    epsilon: float = 0.0
    epsilon_split: str = "uniform"
    global_tokens: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown policy mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "percentile":
            for name in ("token_ratio", "head_ratio"):
                v = getattr(self, name)
                if not 0.0 <= v <= 1.0:
                    raise ConfigError(f"{name} must lie in [0, 1], got {v}")
            if self.epsilon:
                raise ConfigError("epsilon is a budget-mode field")
        else:
            if not self.epsilon >= 0.0 or not math.isfinite(self.epsilon):
                raise ConfigError(f"epsilon must be a finite non-negative number, got {self.epsilon}")
            if self.token_ratio or self.head_ratio:
                raise ConfigError("token/head ratios are percentile-mode fields")
        if self.epsilon_split != "uniform":
            raise ConfigError(f"unsupported epsilon split {self.epsilon_split!r}")

    @property
    def symmetric(self) -> bool:
        return self.token_ratio == self.head_ratio

    @classmethod
    def parse(cls, text: str) -> "PruningPolicy":
        """Parse ``mode=percentile tokens=0.2 heads=0.8`` or ``mode=budget epsilon=0.05``."""
        fields_ = {}
        for item in shlex.split(text.replace(",", " ")):
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"policy item {item!r} is not key=value")
            fields_[key.strip()] = value.strip()
        if "mode" not in fields_:
            raise ConfigError("policy needs a mode=")
        known = {"mode", "tokens", "heads", "epsilon", "split", "global"}
        unknown = sorted(set(fields_) - known)
        if unknown:
            raise ConfigError(f"unknown policy key(s): {', '.join(unknown)}")
        try:
            return cls(
                mode=fields_["mode"],
                token_ratio=float(fields_.get("tokens", 0.0)),
                head_ratio=float(fields_.get("heads", 0.0)),
                epsilon=float(fields_.get("epsilon", 0.0)),
                epsilon_split=fields_.get("split", "uniform"),
                global_tokens=fields_.get("global", "true").lower() in ("1", "true", "yes"),
            )
        except ValueError as exc:
            raise ConfigError(f"bad policy value: {exc}") from exc

    def to_text(self) -> str:
        if self.mode == "budget":
            return f"mode=budget epsilon={self.epsilon!r}"
        text = f"mode=percentile tokens={self.token_ratio!r} heads={self.head_ratio!r}"
        if not self.global_tokens:
            text += " global=false"
        return text


@dataclass
class GateDecision:
    gateset: GateSet
    kept_refs: list = field(default_factory=list)
    pruned_refs: list = field(default_factory=list)
    predicted_delta_loss: float = 0.0
    input: int | None = None

    def summary(self) -> dict:
        tok = sum(1 for r in self.pruned_refs if r.kind == "token")
        return {"pruned_tokens": tok, "pruned_heads": len(self.pruned_refs) - tok,
                "predicted_delta_loss": self.predicted_delta_loss}


def prune_count(ratio: float, size: int) -> int:
    return min(size, int(math.floor(ratio * size + _FLOOR_SLACK)))


def lowest(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest scores; ties go to the lower index."""
    order = np.argsort(np.asarray(scores), kind="stable")
    return np.sort(order[:k])


def induced_threshold(values: np.ndarray, k: int) -> float:
    """Cutoff between the k-th and (k+1)-th smallest values."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        return 0.0
    if k <= 0:
        return float(v[0] - 1.0)
    if k >= v.size:
        return float(v[-1] + 1.0)
    return float(0.5 * (v[k - 1] + v[k]))


def _finish(report: SensitivityReport, tok_keep, head_keep, pruned, input) -> GateDecision:
    pruned_set = set(pruned)
    kept = [r for r in report.refs() if r not in pruned_set]
    decision = GateDecision(GateSet(tok_keep, head_keep), kept, sorted(pruned), 0.0, input)
    decision.predicted_delta_loss = predicted_loss_increase(decision, report)
    return decision


def select_percentile(report: SensitivityReport, p_T: float, p_A: float, input: int | None = None,
                      global_tokens: bool = True) -> GateDecision:
    """Prune the lowest-scoring fractions of tokens and heads.

    ``input=None`` uses batch-averaged scores.  With ``global_tokens`` the
    token decision uses layer-summed scores and removes the chosen tokens
    from every block, so each pruned token contributes one ref per layer.
    """
    PruningPolicy("percentile", p_T, p_A)
    tok, head = report._arrays(input)
    L, n, H = report.layers, report.tokens, report.heads
    kt, kh = prune_count(p_T, n - 1), prune_count(p_A, H)
    tok_keep = np.ones((L, n))
    head_keep = np.ones((L, H))
    pruned = []
    if global_tokens:
        drop = lowest(tok.sum(axis=0), kt) + 1
        tok_keep[:, drop] = 0.0
        pruned += [ComponentRef("token", l, int(j)) for l in range(L) for j in drop]
    else:
        for l in range(L):
            drop = lowest(tok[l], kt) + 1
            tok_keep[l, drop] = 0.0
            pruned += [ComponentRef("token", l, int(j)) for j in drop]
    for l in range(L):
        drop = lowest(head[l], kh)
        head_keep[l, drop] = 0.0
        pruned += [ComponentRef("head", l, int(k)) for k in drop]
    return _finish(report, tok_keep, head_keep, pruned, input)


def greedy_budget(scores, cap) -> np.ndarray:
    """Largest ascending prefix whose clamped sum stays within ``cap``.

    Negative scores count as zero in the running sum.  Sums are exact
    rationals so the cap holds without rounding slack.  Returns indices into
    ``scores``; ties go to the lower index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(scores, kind="stable")
    cap = Fraction(cap)
    total = Fraction(0)
    take = 0
    for i in order:
        total += Fraction(max(float(scores[i]), 0.0))
        if total > cap:
            break
        take += 1
    return order[:take]


def select_budget(report: SensitivityReport, epsilon: float, input: int | None = None) -> GateDecision:
    """Per layer, prune ascending-score candidates while their sum stays within ``2 * epsilon / L``.

    Tokens and heads of a layer compete in one pool.  A pruned token ref
    ``(l, j)`` removes the output of block ``l`` for token ``j``, so the token
    is excluded from block ``l + 1`` onward.
    """
    PruningPolicy("budget", epsilon=epsilon)
    tok, head = report._arrays(input)
    L, n, H = report.layers, report.tokens, report.heads
    cap = Fraction(2.0 * epsilon) / L
    tok_keep = np.ones((L, n))
    head_keep = np.ones((L, H))
    pruned = []
    for l in range(L):
        pool = np.concatenate([tok[l], head[l]])
        for c in greedy_budget(pool, cap):
            if c < n - 1:
                j = int(c) + 1
                pruned.append(ComponentRef("token", l, j))
                tok_keep[l + 1:, j] = 0.0
            else:
                k = int(c) - (n - 1)
                pruned.append(ComponentRef("head", l, k))
                head_keep[l, k] = 0.0
    return _finish(report, tok_keep, head_keep, pruned, input)


def select(report: SensitivityReport, policy: PruningPolicy, input: int | None = None) -> GateDecision:
    if policy.mode == "budget":
        return select_budget(report, policy.epsilon, input)
    return select_percentile(report, policy.token_ratio, policy.head_ratio, input, policy.global_tokens)


def predicted_loss_increase(decision: GateDecision, report: SensitivityReport) -> float:
    """Half the summed raw scores of the pruned refs."""
    if decision.input is not None and not 0 <= decision.input < report.inputs:
        raise RefError(f"input {decision.input} is not in the report")
    return 0.5 * math.fsum(report.score(ref, decision.input) for ref in decision.pruned_refs)


def soft_gate(s_hat, tau, gamma):
    """Sigmoid gate ``1 / (1 + exp(-gamma * (s_hat - tau)))``, computed stably."""
    if not np.all(np.asarray(gamma) > 0):
        raise ConfigError("gamma must be positive")
    x = np.asarray(gamma * (np.asarray(s_hat, dtype=np.float64) - tau))
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def anneal_gamma(t: int, total: int, gamma0: float, gamma_max: float) -> float:
    """Geometric ramp from ``gamma0`` at ``t=0`` to ``gamma_max`` at ``t=total``."""
    if not 0 < gamma0 <= gamma_max:
        raise ConfigError(f"need 0 < gamma0 <= gamma_max, got {gamma0}, {gamma_max}")
    if total == 0:
        return float(gamma_max)
    if not 0 <= t <= total:
        raise ConfigError(f"step {t} outside [0, {total}]")
    return float(gamma0 * (gamma_max / gamma0) ** (t / total))


def soft_gateset(report: SensitivityReport, policy: PruningPolicy, stats: CalibrationStats,
                 gamma: float, inputs=None) -> GateSet:
    """Per-input soft gates ``G = sigmoid(gamma * (s_hat - tau))``.

    ``s_hat`` is normalized with the calibration statistics.  ``tau`` is the
    cutoff the policy's prune counts induce on that input's normalized
    scores, so binarizing at 0.5 reproduces the hard percentile decision
    whenever scores are distinct.
    """
    if policy.mode != "percentile":
        raise ConfigError("soft gating needs a percentile policy")
    rows = range(report.inputs) if inputs is None else inputs
    L, n, H = report.layers, report.tokens, report.heads
    kt, kh = prune_count(policy.token_ratio, n - 1), prune_count(policy.head_ratio, H)
    toks, heads = [], []
    for b in rows:
        z = apply_stats(report, stats, b)
        g_tok = np.ones((L, n))
        if policy.global_tokens:
            g_tok[:, 1:] = soft_gate(z.token_agg, induced_threshold(z.token_agg, kt), gamma)[None, :]
        else:
            for l in range(L):
                g_tok[l, 1:] = soft_gate(z.token[l], induced_threshold(z.token[l], kt), gamma)
        g_head = np.stack([soft_gate(z.head[l], induced_threshold(z.head[l], kh), gamma) for l in range(L)])
        toks.append(g_tok)
        heads.append(g_head)
    return GateSet(np.stack(toks), np.stack(heads), soft=True)


def binarize(gates: GateSet) -> GateSet:
    """Hard gates keeping entries with ``G > 0.5``."""
    tok = (np.asarray(gates.token) > 0.5).astype(np.float64)
    tok[..., 0] = 1.0
    return GateSet(tok, (np.asarray(gates.head) > 0.5).astype(np.float64))
