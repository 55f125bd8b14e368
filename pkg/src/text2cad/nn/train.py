"""Teacher-forced training with AdamW, gradient clipping and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..codec import CadSequence
from ..errors import CheckpointError, ConfigError, DivergedLoss
from . import autograd as ag
from .checkpoint import load_checkpoint, save_checkpoint
from .model import ModelConfig, ModelParameters, forward, generate, init_params, loss, token_hits
from .text import TextVocabulary, pad_ids

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 20
    grad_clip_norm: float = 1.0
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 1
    eval_every: int = 1
    target_accuracy: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class Sample:
    text_ids: np.ndarray  # (n,)
    tokens: np.ndarray  # (m, 2), trimmed


def make_samples(pairs, vocab: TextVocabulary, n_p: int) -> list[Sample]:
    """``pairs`` of (prompt text, CadSequence)."""
    return [Sample(vocab.encode(text, n_p), seq.trimmed().tokens) for text, seq in pairs]


def collate(batch: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    ids = pad_ids([s.text_ids for s in batch])
    m = max(len(s.tokens) for s in batch)
    toks = np.zeros((len(batch), m, 2), dtype=np.int64)
    for i, s in enumerate(batch):
        toks[i, : len(s.tokens)] = s.tokens
    return ids, toks


def batches(samples: list[Sample], batch_size: int, rng: np.random.Generator | None) -> list[list[int]]:
    """Index batches grouped by similar length; shuffled when ``rng`` is given."""
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    chunk = batch_size * 8
    out = []
    for s in range(0, len(order), chunk):
        part = sorted(order[s : s + chunk], key=lambda i: (len(samples[i].tokens) + len(samples[i].text_ids), i))
        out.extend(part[k : k + batch_size] for k in range(0, len(part), batch_size))
    if rng is not None:
        out = [out[i] for i in rng.permutation(len(out))]
    return out


class AdamW:
    """Adam with decoupled weight decay on matrices (not on biases or norms)."""

    def __init__(self, params: ModelParameters, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}

    def lr(self) -> float:
        if self.cfg.warmup_steps > 0:
            return self.cfg.lr * min(1.0, (self.step_count + 1) / self.cfg.warmup_steps)
        return self.cfg.lr

    def clip(self) -> float:
        """Scale gradients to at most ``grad_clip_norm``; returns the pre-clip norm."""
        grads = [t.grad for t in self.params.tensors.values() if t.grad is not None]
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
        limit = self.cfg.grad_clip_norm
        if limit and limit > 0 and norm > limit:
            for g in grads:
                g *= limit / (norm + 1e-12)
        return norm

    def step(self) -> None:
        c = self.cfg
        lr = self.lr()
        self.step_count += 1
        b1t = 1.0 - c.beta1**self.step_count
        b2t = 1.0 - c.beta2**self.step_count
        for name, t in self.params.tensors.items():
            g = t.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if c.weight_decay and t.data.ndim >= 2:
                t.data -= (lr * c.weight_decay) * t.data
            t.data -= (lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)).astype(t.data.dtype)


def evaluate(params: ModelParameters, samples: list[Sample], batch_size: int = 32) -> dict:
    """Teacher-forced loss and token accuracy in evaluation mode."""
    total_loss = hits = count = 0.0
    with ag.no_grad():
        for idx in batches(samples, batch_size, None):
            ids, toks = collate([samples[i] for i in idx])
            lx, ly, _ = forward(ids, toks[:, :-1], params)
            tgt = toks[:, 1:]
            h, n = token_hits(lx.data, ly.data, tgt)
            total_loss += float(loss(lx, ly, tgt).data) * n
            hits += h
            count += n
    return {"loss": total_loss / max(count, 1), "token_accuracy": hits / max(count, 1)}


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


class Trainer:
    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        vocab: TextVocabulary,
        out_dir: str | Path | None = None,
        params: ModelParameters | None = None,
    ):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.vocab = vocab
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.params = params or init_params(model_cfg)
        self.opt = AdamW(self.params, train_cfg)
        self.rng = np.random.default_rng([train_cfg.seed, 99])
        self.epoch = 0
        self.history: list[dict] = []

    # -- persistence --

    def checkpoint_bytes_meta(self) -> tuple[dict, dict]:
        tensors = dict(self.params.arrays())
        tensors.update({f"adam.m.{k}": v for k, v in self.opt.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in self.opt.v.items()})
        meta = {
            "train_config": asdict(self.cfg),
            "epoch": self.epoch,
            "step": self.opt.step_count,
            "rng": _rng_state(self.rng),
            "vocab": list(self.vocab.words),
        }
        return tensors, meta

    def save(self, path: str | Path) -> None:
        tensors, meta = self.checkpoint_bytes_meta()
        save_checkpoint(path, self.model_cfg.to_dict(), tensors, meta)

    @classmethod
    def resume(cls, path: str | Path, out_dir: str | Path | None = None, train_cfg: TrainConfig | None = None) -> Trainer:
        config, tensors, meta = load_checkpoint(path)
        model_cfg = ModelConfig.from_dict(config)
        params = _params_from(model_cfg, tensors)
        cfg = train_cfg or TrainConfig.from_dict(meta["train_config"])
        tr = cls(model_cfg, cfg, TextVocabulary(tuple(meta["vocab"])), out_dir, params)
        for k in params.names():
            tr.opt.m[k] = tensors[f"adam.m.{k}"].copy()
            tr.opt.v[k] = tensors[f"adam.v.{k}"].copy()
        tr.opt.step_count = meta["step"]
        tr.epoch = meta["epoch"]
        tr.rng = _restore_rng(meta["rng"])
        return tr

    # -- training --

    def train_epoch(self, samples: list[Sample]) -> dict:
        total_loss = hits = count = 0.0
        for idx in batches(samples, self.cfg.batch_size, self.rng):
            ids, toks = collate([samples[i] for i in idx])
            self.params.zero_grad()
            lx, ly, _ = forward(ids, toks[:, :-1], self.params, training=True, rng=self.rng)
            tgt = toks[:, 1:]
            value = loss(lx, ly, tgt)
            lv = float(value.data)
            if not math.isfinite(lv):
                raise DivergedLoss(f"non-finite loss at epoch {self.epoch + 1}, step {self.opt.step_count + 1}")
            value.backward()
            self.opt.clip()
            self.opt.step()
            h, n = token_hits(lx.data, ly.data, tgt)
            total_loss += lv * n
            hits += h
            count += n
        return {"loss": total_loss / max(count, 1), "token_accuracy": hits / max(count, 1)}

    def _log(self, record: dict) -> None:
        self.history.append(record)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with open(self.out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def fit(self, train: list[Sample], val: list[Sample] | None = None, epochs: int | None = None) -> list[dict]:
        """Train until ``epochs`` total epochs (or the target accuracy) are reached."""
        last = epochs if epochs is not None else self.cfg.epochs
        while self.epoch < last:
            stats = self.train_epoch(train)
            self.epoch += 1
            self._log({"epoch": self.epoch, "split": "train", **stats})
            log.info("epoch %d loss %.4f acc %.4f", self.epoch, stats["loss"], stats["token_accuracy"])
            reached = False
            if self.cfg.eval_every and self.epoch % self.cfg.eval_every == 0:
                if self.cfg.target_accuracy is not None:
                    ev = evaluate(self.params, train)
                    self._log({"epoch": self.epoch, "split": "train_eval", **ev})
                    reached = ev["token_accuracy"] >= self.cfg.target_accuracy
                if val:
                    self._log({"epoch": self.epoch, "split": "val", **evaluate(self.params, val)})
            if self.out_dir is not None and (reached or self.epoch == last or (
                self.cfg.checkpoint_every and self.epoch % self.cfg.checkpoint_every == 0
            )):
                self.save(self.out_dir / f"epoch_{self.epoch:04d}.ckpt")
                self.save(self.out_dir / "last.ckpt")
            if reached:
                break
        return self.history


def _params_from(cfg: ModelConfig, tensors: dict[str, np.ndarray]) -> ModelParameters:
    try:
        return ModelParameters(cfg, {k: v.copy() for k, v in tensors.items() if not k.startswith("adam.")})
    except Exception as exc:
        raise CheckpointError(f"checkpoint tensors do not match the config: {exc}") from None


def load_model(path: str | Path) -> tuple[ModelParameters, TextVocabulary]:
    config, tensors, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(config)
    return _params_from(cfg, tensors), TextVocabulary(tuple(meta["vocab"]))


def generate_texts(
    params: ModelParameters, vocab: TextVocabulary, texts: list[str], batch_size: int = 32
) -> list[CadSequence]:
    """Greedy generation for prompt strings, in input order."""
    n_p = params.config.N_p
    samples = [Sample(vocab.encode(t, n_p), np.zeros((1, 2), np.int64)) for t in texts]
    out: list[CadSequence | None] = [None] * len(texts)
    order = sorted(range(len(texts)), key=lambda i: (len(samples[i].text_ids), i))
    for s in range(0, len(order), batch_size):
        idx = order[s : s + batch_size]
        ids = pad_ids([samples[i].text_ids for i in idx])
        for i, seq in zip(idx, generate(params, ids)):
            out[i] = seq
    return out
