"""Adam training loop with step decay, global-norm clipping and dev-set selection."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from fedar import autograd as ag
from fedar.corpus import Corpus, EmbeddingMatrix, Review, Vocabulary, build_vocabulary, random_embeddings
from fedar.model import Fedar, ModelConfig, make_batch, multitask_loss

logger = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    initial_lr: float = 0.0005
    decay_factor: float = 0.8
    decay_every: int = 2
    clip_threshold: float = 2.0
    batch_size: int = 32
    max_epochs: int = 10
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    track_train_loss: bool = False

    def __post_init__(self):
        for name in ("initial_lr", "clip_threshold", "batch_size", "decay_every", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("TrainConfig.decay_factor must lie in (0, 1]")
        if self.max_epochs < 0:
            raise ValueError("TrainConfig.max_epochs must be non-negative")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


def schedule_lr(epoch: int, config: TrainConfig) -> float:
    """initial_lr * decay ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    lr = config.initial_lr
    for _ in range(epoch // config.decay_every):
        lr *= config.decay_factor
    return lr


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads.values()])))


def clip_gradients(grads: Mapping[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    """Rescale all gradients together when their global L2 norm exceeds ``threshold``."""
    norm = global_norm(grads)
    if norm <= threshold:
        return dict(grads)
    factor = threshold / norm
    return {n: (g * factor).astype(g.dtype) for n, g in grads.items()}


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, ag.Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise ag.NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype)
    return state


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    accuracy: list[float]
    mse: list[float]
    count: int

    @property
    def avg_accuracy(self) -> float:
        return float(np.mean(self.accuracy))

    @property
    def avg_mse(self) -> float:
        return float(np.mean(self.mse))

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "mse": self.mse, "count": self.count,
                "avg_accuracy": self.avg_accuracy, "avg_mse": self.avg_mse}


def metrics_from_predictions(pred: np.ndarray, gold: np.ndarray, rating_min: int = 1) -> MetricsReport:
    """Per-aspect accuracy and MSE; MSE is on the rating scale."""
    pred = np.asarray(pred).reshape(len(pred), -1)
    gold = np.asarray(gold).reshape(len(gold), -1)
    if pred.shape != gold.shape or len(gold) == 0:
        raise ValueError(f"prediction shape {pred.shape} vs gold {gold.shape}")
    acc = (pred == gold).mean(axis=0)
    diff = (pred + rating_min).astype(np.float64) - (gold + rating_min)
    mse = (diff ** 2).mean(axis=0)
    return MetricsReport([float(a) for a in acc], [float(m) for m in mse], int(len(gold)))


def evaluate(model: Fedar, reviews: Sequence[Review], rating_min: int = 1) -> MetricsReport:
    if not reviews:
        raise ValueError("cannot evaluate an empty split")
    probs = model.predict_proba(reviews)
    gold = np.array([r.aspect_labels for r in reviews])
    return metrics_from_predictions(np.argmax(probs, axis=-1), gold, rating_min)


def mean_loss(model: Fedar, reviews: Sequence[Review], batch_size: int = 64) -> float:
    """Eval-mode loss averaged over reviews."""
    total = 0.0
    for batch in model.batches(reviews, batch_size, with_labels=True):
        out = model.forward(batch)
        total += float(multitask_loss(out.probs, batch.labels).data) * len(batch)
    return total / len(reviews)


# ---------------------------------------------------------------- loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    dev: MetricsReport
    train_eval_loss: float | None = None

    def to_dict(self) -> dict:
        rec = {
            "epoch": self.epoch,
            "lr": self.lr,
            "train_loss": self.train_loss,
            "dev_acc": self.dev.accuracy,
            "dev_mse": self.dev.mse,
            "dev_avg_acc": self.dev.avg_accuracy,
            "dev_avg_mse": self.dev.avg_mse,
        }
        if self.train_eval_loss is not None:
            rec["train_eval_loss"] = self.train_eval_loss
        return rec


@dataclass
class TrainResult:
    model: Fedar
    history: list[EpochRecord]
    best_epoch: int | None

    @property
    def best_dev_accuracy(self) -> float | None:
        if self.best_epoch is None:
            return None
        return self.history[self.best_epoch].dev.avg_accuracy


def train_step(model: Fedar, batch, state: AdamState, lr: float, config: TrainConfig,
               rng: np.random.Generator) -> float:
    model.zero_grad()
    with ag.Tape():
        loss, _ = model.loss(batch, train=True, rng=rng)
        value = float(loss.data)
        ag.backpropagate(loss)
    grads = {n: p.grad if p.grad is not None else np.zeros_like(p.data) for n, p in model.params.items()}
    grads = clip_gradients(grads, config.clip_threshold)
    adam_step(model.params, grads, state, lr, config.beta1, config.beta2, config.adam_eps)
    return value


def train(
    corpus: Corpus,
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab: Vocabulary | None = None,
    embeddings: EmbeddingMatrix | np.ndarray | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train on the ``train`` split, keep the parameters with the best dev accuracy."""
    train_set, dev_set = corpus.split("train"), corpus.split("dev")
    if not train_set or not dev_set:
        raise ValueError("training needs non-empty train and dev splits")
    vocab = vocab or build_vocabulary(train_set)
    if embeddings is None:
        embeddings = random_embeddings(vocab, model_config.d_emb, train_config.seed)
    matrix = embeddings.matrix if isinstance(embeddings, EmbeddingMatrix) else embeddings
    model = Fedar(model_config, matrix, vocab=vocab, seed=train_config.seed)

    shuffle_seq, dropout_seq = np.random.SeedSequence(train_config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    state = AdamState()
    history: list[EpochRecord] = []
    best_epoch, best_acc, best_state = None, -1.0, model.state()
    bs = train_config.batch_size

    for epoch in range(train_config.max_epochs):
        lr = schedule_lr(epoch, train_config)
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        for b, start in enumerate(range(0, len(order), bs)):
            chunk = [train_set[i] for i in order[start:start + bs]]
            batch = make_batch(chunk, vocab, model_config.num_classes, model_config.max_len)
            try:
                value = train_step(model, batch, state, lr, train_config, dropout_rng)
            except ag.NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {b}: {exc}") from exc
            if not np.isfinite(value):
                raise TrainingDiverged(f"epoch {epoch}, batch {b}: loss is {value}")
            losses.append(value * len(chunk))
        dev = evaluate(model, dev_set, corpus.rating_min)
        record = EpochRecord(epoch, lr, float(np.sum(losses) / len(train_set)), dev)
        if train_config.track_train_loss:
            record.train_eval_loss = mean_loss(model, train_set)
        history.append(record)
        logger.info("epoch %d lr %.6g loss %.4f dev acc %.4f mse %.4f",
                    epoch, lr, record.train_loss, dev.avg_accuracy, dev.avg_mse)
        if on_epoch is not None:
            on_epoch(record)
        if dev.avg_accuracy > best_acc:
            best_epoch, best_acc, best_state = epoch, dev.avg_accuracy, model.state()

    model.load_state(best_state)
    return TrainResult(model, history, best_epoch)
