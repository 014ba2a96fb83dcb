"""Training loop: Adam, linear warmup then cosine decay, cross-entropy, eval and checkpoints."""
from __future__ import annotations

import ctypes
import ctypes.util
import json
import math
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .net import LaConvNet, NetConfig
from .synth import ANSWER_KINDS, Example, render_all
from .text import Vocabulary, pad_batch, tokenize


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    epochs: int = 40
    warmup_epochs: int = 3
    batch_size: int = 32
    seed: int = 0
    eval_interval: int = 1
    checkpoint_dir: str | None = None
    clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be in [0, epochs)")
        if self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("batch_size and eval_interval must be positive")


def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr0: float) -> float:
    """Linear ramp 0 -> lr0 over the warmup, then half-cosine down to 0 at total_steps."""
    if step < warmup_steps:
        return lr0 * step / warmup_steps
    if total_steps == warmup_steps:
        return lr0
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t))


class AdamState:
    def __init__(self):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out


def adam_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam, updating ``params[name].data`` in place."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise T.ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all grads by one factor so the global L2 norm is at most max_norm; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


class Dataset:
    """Rendered images, token ids and targets for a list of examples."""

    def __init__(self, examples: Sequence[Example], vocab: Vocabulary, max_len: int = 16):
        if not examples:
            raise ValueError("empty dataset")
        self.examples = list(examples)
        self.images = render_all(self.examples)
        self.ids = pad_batch([tokenize(e.expression, vocab) for e in self.examples], max_len)
        self.targets = np.array([e.target for e in self.examples], dtype=np.int64)
        self.kinds = np.array([e.kind for e in self.examples])

    def __len__(self) -> int:
        return len(self.examples)


class NonFiniteLoss(FloatingPointError):
    pass


def _batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for i in range(0, n, size):
        yield idx[i:i + size]


def _dump_batch(path: Path, data: Dataset, idx: np.ndarray, model: LaConvNet, note: str) -> None:
    path.mkdir(parents=True, exist_ok=True)
    np.savez(path / "nonfinite_batch.npz", images=data.images[idx], ids=data.ids[idx], targets=data.targets[idx])
    bad = [n for n, p in model.named_parameters() if not np.isfinite(p.data).all()]
    (path / "nonfinite.json").write_text(json.dumps({"note": note, "nonfinite_params": bad,
                                                     "seeds": [data.examples[i].seed for i in idx]}, indent=1))


def train_epoch(model: LaConvNet, data: Dataset, cfg: TrainConfig, state: AdamState,
                rng: np.random.Generator, step: int, total_steps: int, warmup_steps: int) -> tuple[dict, int]:
    """One shuffled pass; returns ({loss, accuracy, lr}, next step index)."""
    model.train()
    params = dict(model.named_parameters())
    loss_sum = correct = 0.0
    lr = 0.0
    for idx in _batches(len(data), cfg.batch_size, rng.permutation(len(data))):
        step += 1
        lr = lr_schedule(step, total_steps, warmup_steps, cfg.lr0)
        model.zero_grad()
        with T.finite_checks(False), T.Tape() as tape:
            logits = model(T.Tensor(data.images[idx]), data.ids[idx])
            loss = T.cross_entropy(logits, data.targets[idx])
            if not np.isfinite(loss.data).all():
                if cfg.checkpoint_dir:
                    _dump_batch(Path(cfg.checkpoint_dir), data, idx, model, f"step {step}")
                raise NonFiniteLoss(f"non-finite loss at step {step}")
            tape.backward(loss)
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        clip_grad_norm(grads, cfg.clip)
        adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
        loss_sum += float(loss.data) * len(idx)
        correct += int((logits.data.argmax(-1) == data.targets[idx]).sum())
    n = len(data)
    return {"loss": loss_sum / n, "accuracy": correct / n, "lr": lr}, step


def predict(model: LaConvNet, data: Dataset, batch_size: int = 128) -> np.ndarray:
    """Argmax predictions in eval mode; the model's train/eval mode is restored afterwards."""
    was_training = model.training
    model.eval()
    try:
        out = [model(T.Tensor(data.images[idx]), data.ids[idx]).data.argmax(-1)
               for idx in _batches(len(data), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(out)


def accuracy_by_kind(pred: np.ndarray, data: Dataset) -> dict[str, float]:
    hit = pred == data.targets
    out = {"acc": float(hit.mean())}
    for kind in np.unique(data.kinds):
        out[f"acc_{kind}"] = float(hit[data.kinds == kind].mean())
    return out


def evaluate(model: LaConvNet, data: Dataset, batch_size: int = 128) -> dict[str, float]:
    """Accuracy overall and per expression kind, using BN running statistics."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return accuracy_by_kind(predict(model, data, batch_size), data)


def random_baseline(data: Dataset, n_classes: int, seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return accuracy_by_kind(rng.integers(0, n_classes, len(data)), data)


def save_model(path: str | os.PathLike, model: LaConvNet, vocab: Vocabulary, extra: dict | None = None) -> None:
    meta = {"config": json.loads(model.cfg.to_json()), "vocab": json.loads(vocab.to_json())}
    meta.update(extra or {})
    checkpoint.save(path, model.state_dict(), meta)


def load_model(path: str | os.PathLike) -> tuple[LaConvNet, Vocabulary, dict]:
    tensors, meta = checkpoint.load(path)
    cfg = NetConfig.from_dict(meta["config"])
    vocab = Vocabulary.from_json(json.dumps(meta["vocab"]))
    model = LaConvNet(cfg, len(vocab))
    model.load_state_dict(tensors)
    model.eval()
    return model, vocab, meta


def _eval_summary(m: dict) -> dict:
    out = {"eval_acc": m["acc"]}
    for k, v in m.items():
        if k.startswith("acc_"):
            out["eval_" + k.replace("acc_attribute", "acc_attr")] = v
    return out


def keep_heap() -> bool:
    """Ask glibc to keep freed memory instead of returning it to the OS.

    Every step allocates and frees the same large activation buffers. With the
    default thresholds each one is a fresh mmap and pays page faults on first
    touch, which costs more than the arithmetic on small GEMMs.
    """
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError, TypeError):
        return False
    M_TRIM_THRESHOLD, M_TOP_PAD, M_MMAP_THRESHOLD = -1, -2, -3
    ok = mallopt(M_MMAP_THRESHOLD, 1 << 30) and mallopt(M_TRIM_THRESHOLD, 1 << 31)
    return bool(ok and mallopt(M_TOP_PAD, 1 << 28))


def fit(model: LaConvNet, vocab: Vocabulary, train: Dataset, test: Dataset, cfg: TrainConfig,
        log: Callable[[str], None] = print, timestamps: bool = True) -> list[dict]:
    """Full run. Writes metrics.jsonl, epoch checkpoints and best.lckp under checkpoint_dir."""
    out_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.jsonl").write_text("")
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total, warmup = cfg.epochs * steps_per_epoch, cfg.warmup_epochs * steps_per_epoch
    rng = np.random.default_rng([cfg.seed, 7])
    keep_heap()
    state = AdamState()
    best = -1.0
    history = []
    step = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        stats, step = train_epoch(model, train, cfg, state, rng, step, total, warmup)
        row = {"epoch": epoch, "lr": stats["lr"], "train_loss": stats["loss"]}
        if epoch % cfg.eval_interval == 0 or epoch == cfg.epochs:
            row.update(_eval_summary(evaluate(model, test)))
            if out_dir:
                # the output path is left out so the file does not depend on where it was written
                settings = {k: v for k, v in asdict(cfg).items() if k != "checkpoint_dir"}
                info = {"epoch": epoch, "eval_acc": row["eval_acc"], "train": settings}
                save_model(out_dir / f"epoch{epoch:03d}.lckp", model, vocab, info)
                if row["eval_acc"] > best:
                    best = row["eval_acc"]
                    save_model(out_dir / "best.lckp", model, vocab, info)
        history.append(row)
        if out_dir:
            with open(out_dir / "metrics.jsonl", "a") as f:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        stamp = f"[{time.perf_counter() - t0:7.1f}s] " if timestamps else ""
        log(stamp + " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return history


def build_vocab(tokens: Sequence[str]) -> Vocabulary:
    return Vocabulary(tokens)


def is_question_set(examples: Sequence[Example]) -> bool:
    return any(e.kind in ANSWER_KINDS for e in examples)
