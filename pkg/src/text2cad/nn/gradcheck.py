"""Finite-difference verification of the analytic gradients."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, ModelParameters, forward, init_params, loss, param_family

# Gradients below this magnitude are compared in absolute terms; central
# differences on a loss of order 10 carry roughly 1e-11 of rounding noise.
REL_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    per_family: dict[str, float]

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def tiny_config(seed: int = 0) -> ModelConfig:
    return ModelConfig(L=3, heads=2, d=8, d_p=8, N_p=8, N_c=8, vocab_text=12, dropout=0.0,
                       cross_attention_skip_blocks=2, ffn_multiplier=2, seed=seed)


def tiny_batch(cfg: ModelConfig, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Two prompts and two CAD sequences, one of each padded."""
    rng = np.random.default_rng([seed, 5])
    ids = rng.integers(3, cfg.vocab_text, size=(2, cfg.N_p))
    ids[:, 0] = 2
    ids[1, 5:] = 0
    toks = rng.integers(11, cfg.vocab_cad, size=(2, cfg.N_c, 2))
    toks[:, 0] = (1, 0)
    toks[:, 3] = (5, 0)
    toks[1, 6:] = 0
    return ids, toks


def _loss_value(params: ModelParameters, ids, toks) -> float:
    lx, ly, _ = forward(ids, toks[:, :-1], params)
    return float(loss(lx, ly, toks[:, 1:]).data)


def _candidates(name: str, shape, ids, toks, rng) -> list[tuple]:
    """Entries worth checking: used rows for embedding tables, anything otherwise."""
    if name == "text.embed":
        rows = np.unique(ids)
    elif name in ("cad.wx", "cad.wy"):
        rows = np.unique(toks[:, :-1, 0 if name.endswith("x") else 1])
    else:
        return [tuple(int(rng.integers(s)) for s in shape)]
    return [(int(rng.choice(rows)), int(rng.integers(shape[1])))]


def gradient_check(
    n_params: int = 240,
    seed: int = 0,
    h: float = 1e-4,
    families: list[str] | None = None,
    config: ModelConfig | None = None,
) -> GradCheckResult:
    """Compare backprop with central differences on a tiny float64 model.

    Parameters are drawn evenly from every family (parameter names with the
    block number dropped), or only from ``families`` when given; a family
    matches when its name contains one of the given strings.
    """
    cfg = config or tiny_config(seed)
    params = init_params(cfg, dtype=np.float64)
    rng = np.random.default_rng([seed, 3])
    # move off the symmetric initial point so norm gains and biases matter
    for t in params.tensors.values():
        t.data += rng.normal(0.0, 0.05, size=t.shape)
    ids, toks = tiny_batch(cfg, seed)

    params.zero_grad()
    lx, ly, _ = forward(ids, toks[:, :-1], params)
    loss(lx, ly, toks[:, 1:]).backward()

    by_family: dict[str, list[str]] = defaultdict(list)
    for name in params.names():
        fam = param_family(name)
        if families is None or any(f in fam for f in families):
            by_family[fam].append(name)
    if not by_family:
        raise ValueError(f"no parameter family matches {families}")
    per = max(1, -(-n_params // len(by_family)))
    worst: dict[str, float] = {}
    checked = 0
    for fam in sorted(by_family):
        names = by_family[fam]
        for k in range(per):
            name = names[int(rng.integers(len(names)))]
            t = params[name]
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)
            for idx in _candidates(name, t.shape, ids, toks, rng):
                old = t.data[idx]
                t.data[idx] = old + h
                up = _loss_value(params, ids, toks)
                t.data[idx] = old - h
                down = _loss_value(params, ids, toks)
                t.data[idx] = old
                numeric = (up - down) / (2 * h)
                analytic = float(grad[idx])
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)
                worst[fam] = max(worst.get(fam, 0.0), rel)
                checked += 1
    return GradCheckResult(max(worst.values()), checked, worst)
