"""Lecturer-audience uncertainty estimation and the baseline scorers.

A trained model (the lecturer) labels each review.  Perturbed copies of it
(audiences) score how much probability they give the lecturer's labels; the
per-aspect cross entropies are combined into one smoothed product per review.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from fedar import autograd as ag
from fedar.corpus import Review
from fedar.model import LOG_CLAMP, Fedar, make_batch
from fedar.training import AdamState, TrainConfig, train_step

KINDS = ("dropout-prune", "continued-training")
METHODS = ("lead", "max-margin", "pl-variance", "mc-dropout")
MAX_PRUNE_RATE = 0.3
MAX_AUDIENCE_LR = 1e-4


class IneligibleAudience(ValueError):
    pass


@dataclass
class AudienceSpec:
    kind: str = "dropout-prune"
    count: int = 20
    rate: float = 0.1
    lr: float = 1e-5
    batch_budget: int = 50
    batch_size: int = 32
    seed: int = 42
    zeta: float = 1.0

    def check(self) -> None:
        if self.kind not in KINDS:
            raise IneligibleAudience(f"audience kind must be one of {KINDS}, got {self.kind!r}")
        if self.count < 1:
            raise IneligibleAudience("an ensemble needs at least one audience")
        if self.kind == "dropout-prune" and not 0 <= self.rate <= MAX_PRUNE_RATE:
            raise IneligibleAudience(
                f"pruning rate {self.rate} breaks the small-rate rule (0 <= rate <= {MAX_PRUNE_RATE})"
            )
        if self.kind == "continued-training" and not 0 < self.lr <= MAX_AUDIENCE_LR:
            raise IneligibleAudience(
                f"learning rate {self.lr} breaks the small-lr rule (0 < lr <= {MAX_AUDIENCE_LR})"
            )
        if self.batch_budget < 0:
            raise IneligibleAudience("batch budget must be non-negative")

    @classmethod
    def from_dict(cls, obj: dict) -> "AudienceSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown audience keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


def maskable_names(model: Fedar) -> list[str]:
    """Weight matrices of the encoder and the classifiers."""
    return [
        n for n in model.params
        if (n.startswith("encoder.") and n.rsplit(".", 1)[1] in ("W_x", "W_h"))
        or n.rsplit(".", 1)[1] in ("W_out", "W_pred")
    ]


def prune_mask(model: Fedar, rate: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Boolean keep-masks zeroing round(rate * n) of the n maskable entries."""
    names = maskable_names(model)
    sizes = [model.params[n].data.size for n in names]
    total = int(np.sum(sizes))
    keep = np.ones(total, dtype=bool)
    keep[rng.choice(total, size=int(round(rate * total)), replace=False)] = False
    masks, start = {}, 0
    for n, size in zip(names, sizes):
        masks[n] = keep[start:start + size].reshape(model.params[n].shape)
        start += size
    return masks


def spawn_audiences(lecturer: Fedar, spec: AudienceSpec,
                    train_reviews: Sequence[Review] | None = None) -> list[Fedar]:
    spec.check()
    audiences = []
    for mu in range(spec.count):
        rng = np.random.default_rng([spec.seed, mu])
        audience = lecturer.copy()
        if spec.kind == "dropout-prune":
            # pruning: no 1/(1-rate) rescale
            for name, keep in prune_mask(audience, spec.rate, rng).items():
                p = audience.params[name]
                p.data = np.where(keep, p.data, 0).astype(p.dtype)
        elif spec.batch_budget > 0:
            if not train_reviews:
                raise ValueError("continued-training audiences need training reviews")
            cfg = TrainConfig(initial_lr=spec.lr, batch_size=spec.batch_size, seed=spec.seed)
            state = AdamState()
            for _ in range(spec.batch_budget):
                idx = rng.choice(len(train_reviews), size=min(spec.batch_size, len(train_reviews)), replace=False)
                batch = make_batch([train_reviews[i] for i in idx], audience.vocab,
                                   audience.config.num_classes, audience.config.max_len)
                train_step(audience, batch, state, spec.lr, cfg, rng)
        audiences.append(audience)
    return audiences


def audience_uncertainty(audience_probs: np.ndarray, lecturer_labels: np.ndarray) -> np.ndarray:
    """Cross entropy of the audience against the lecturer's one-hot labels.

    ``audience_probs`` is (..., K, N), ``lecturer_labels`` (..., K); the result
    is -log p[label], with p clamped at 1e-12.
    """
    probs = np.asarray(audience_probs, dtype=np.float64)
    labels = np.asarray(lecturer_labels)[..., None]
    picked = np.take_along_axis(probs, labels, axis=-1)[..., 0]
    return -np.log(np.maximum(picked, LOG_CLAMP))


def _check_smoothing(psi, lam, eta):
    psi = np.asarray(psi, dtype=np.float64)
    if np.any(psi < 0):
        raise ValueError("audience uncertainties must be non-negative")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if eta < 1:
        raise ValueError("eta must be at least 1")
    return psi


def aggregate_log_uncertainty(psi, lam: float = 1.0, eta: float = 1.0, zeta=1.0) -> np.ndarray:
    """log of the aggregated score; ``psi`` is (..., A, K)."""
    psi = _check_smoothing(psi, lam, eta)
    with np.errstate(divide="ignore"):  # psi = lam = 0 gives log 0 = -inf, which is exact here
        inner = np.sum(np.log(psi + lam), axis=-1)        # (..., A)
    per_audience = np.logaddexp(inner, math.log(eta))      # log(exp(inner) + eta)
    zeta = np.broadcast_to(np.asarray(zeta, dtype=np.float64), per_audience.shape)
    return np.sum(zeta * per_audience, axis=-1)


def aggregate_uncertainty(psi, lam: float = 1.0, eta: float = 1.0, zeta=1.0):
    """prod_mu (prod_k (psi[mu, k] + lam) + eta) ** zeta, evaluated in log space."""
    out = np.exp(aggregate_log_uncertainty(psi, lam, eta, zeta))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class UncertaintyReport:
    review_ids: list[str]
    lecturer_labels: np.ndarray   # (n, K)
    psi: np.ndarray               # (n, A, K); A = 1 for baselines
    log_score: np.ndarray         # (n,)
    method: str = "lead"
    lam: float = 1.0
    eta: float = 1.0
    zeta: float = 1.0

    @property
    def score(self) -> np.ndarray:
        return np.exp(self.log_score)

    def ranking(self) -> list[str]:
        return rank_and_select(self.review_ids, self.log_score, fraction=1.0)

    def records(self, rating_min: int = 1) -> list[dict]:
        rank = {rid: i + 1 for i, rid in enumerate(self.ranking())}
        return [
            {
                "review_id": rid,
                "lecturer_labels": (self.lecturer_labels[i] + rating_min).tolist(),
                "psi": self.psi[i].tolist(),
                "log_score": float(self.log_score[i]),
                "score": float(np.exp(self.log_score[i])),
                "rank": rank[rid],
            }
            for i, rid in enumerate(self.review_ids)
        ]


def _parallel_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def lead_report(lecturer: Fedar, audiences: Sequence[Fedar], reviews: Sequence[Review],
                lam: float = 1.0, eta: float = 1.0, zeta: float = 1.0, threads: int = 1) -> UncertaintyReport:
    lecturer_labels = np.argmax(lecturer.predict_proba(reviews), axis=-1)
    per_audience = _parallel_map(lambda a: audience_uncertainty(a.predict_proba(reviews), lecturer_labels),
                                 audiences, threads)
    psi = np.stack(per_audience, axis=1)  # (n, A, K)
    return UncertaintyReport([r.id for r in reviews], lecturer_labels, psi,
                             aggregate_log_uncertainty(psi, lam, eta, zeta), "lead", lam, eta, zeta)


def rank_and_select(review_ids: Sequence[str], scores, fraction: float | None = None,
                    threshold: float | None = None) -> list[str]:
    """Most uncertain first (ties by ascending id); top ceil(fraction * n) or scores above threshold."""
    if (fraction is None) == (threshold is None):
        raise ValueError("give exactly one of fraction or threshold")
    scores = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(review_ids)), key=lambda i: (-scores[i], review_ids[i]))
    if threshold is not None:
        return [review_ids[i] for i in order if scores[i] > threshold]
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = math.ceil(fraction * len(review_ids) - 1e-9)
    return [review_ids[i] for i in order[:n]]


# ---------------------------------------------------------------- baselines


def entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -np.sum(p * np.log(np.maximum(p, LOG_CLAMP)), axis=-1)


def mc_dropout_probs(model: Fedar, reviews: Sequence[Review], samples: int = 50, rate: float = 0.5,
                     seed: int = 42) -> np.ndarray:
    """(samples, n, K, N) class probabilities with dropout on the classifier inputs."""
    rng = np.random.default_rng(seed)
    chunks = []
    for batch in model.batches(reviews):
        _, H = model.encode(batch)
        reps = [model.represent(H, batch, k)[4] for k in range(model.config.num_aspects)]
        draws = []
        for _ in range(samples):
            draws.append(np.stack([
                model.classify(s, k, train=rate > 0, rng=rng, dropout_rate=rate)[1].data
                for k, s in enumerate(reps)
            ], axis=1))
        chunks.append(np.stack(draws))
    return np.concatenate(chunks, axis=1)


def baseline_uncertainty(method: str, model: Fedar, reviews: Sequence[Review], samples: int = 50,
                         rate: float = 0.5, seed: int = 42) -> np.ndarray:
    """Per-aspect uncertainty (n, K); larger means less certain."""
    if method == "max-margin":
        return -np.max(model.predict_proba(reviews), axis=-1)
    if method == "pl-variance":
        logits = []
        for batch in model.batches(reviews):
            out = model.forward(batch)
            logits.append(np.stack([l.data for l in out.logits], axis=1))
        return -np.var(np.concatenate(logits), axis=-1)
    if method == "mc-dropout":
        return entropy(mc_dropout_probs(model, reviews, samples, rate, seed)).mean(axis=0)
    raise ValueError(f"unknown uncertainty method {method!r}; expected one of {METHODS[1:]}")


def _to_nonnegative(method: str, raw: np.ndarray) -> np.ndarray:
    # monotone maps into [0, inf) so the smoothed product applies
    if method == "max-margin":
        return 1.0 + raw
    if method == "pl-variance":
        return np.exp(raw)
    return raw


def baseline_scores(method: str, model: Fedar, reviews: Sequence[Review], samples: int = 50,
                    rate: float = 0.5, seed: int = 42, lam: float = 1.0, eta: float = 1.0) -> UncertaintyReport:
    raw = baseline_uncertainty(method, model, reviews, samples, rate, seed)
    psi = np.maximum(_to_nonnegative(method, raw), 0.0)[:, None, :]
    labels = np.argmax(model.predict_proba(reviews), axis=-1)
    return UncertaintyReport([r.id for r in reviews], labels, psi,
                             aggregate_log_uncertainty(psi, lam, eta), method, lam, eta, 1.0)


def triage_error_rate(selected_ids: Sequence[str], predictions: dict[str, Sequence[int]],
                      gold: dict[str, Sequence[int]]) -> float:
    """Fraction of (review, aspect) pairs among the selected reviews that are mislabeled."""
    if not selected_ids:
        return 0.0
    missing = [i for i in selected_ids if i not in predictions or i not in gold]
    if missing:
        raise KeyError(f"selected ids not in the evaluated set: {missing[:5]}")
    wrong = total = 0
    for rid in selected_ids:
        p, g = np.asarray(predictions[rid]), np.asarray(gold[rid])
        wrong += int(np.sum(p != g))
        total += p.size
    return wrong / total
