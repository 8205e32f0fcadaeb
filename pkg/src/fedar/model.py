"""The FEDAR network and its checkpoint format.

Data flows as: frozen word vectors -> highway layer -> stacked BiLSTM ->
per-state enrichment (max, mean, factorization machine) -> per-aspect global
and deliberate self-attention -> optional overall-rating embedding ->
per-aspect two-layer classifier.  All layers are batched over reviews with
right padding; attention masks out padded positions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from fedar import autograd as ag
from fedar.autograd import Tensor
from fedar.corpus import MAX_SEQ_LEN, PAD, Review, Vocabulary
from fedar.io import atomic_write_bytes, atomic_write_text

CHECKPOINT_VERSION = 1
LOG_CLAMP = 1e-12


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_aspects: int
    num_classes: int
    d_emb: int = 300
    d_hidden: int = 600
    encoder_layers: int = 4
    fm_factor_dim: int = 10
    d_attn: int | None = None
    d_classifier: int | None = None
    d_or: int = 50
    dropout_rate: float = 0.2
    use_overall_rating: bool = True
    use_deliberation: bool = True
    use_feature_enrichment: bool = True
    max_len: int = MAX_SEQ_LEN

    def __post_init__(self):
        if self.d_attn is None:
            self.d_attn = self.d_hidden
        if self.d_classifier is None:
            self.d_classifier = self.d_hidden
        dims = ("num_aspects", "num_classes", "d_emb", "d_hidden", "encoder_layers",
                "fm_factor_dim", "d_attn", "d_classifier", "d_or", "max_len")
        for name in dims:
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("ModelConfig.dropout_rate must lie in [0, 1)")

    @property
    def state_width(self) -> int:
        """Width of an aggregated hidden state h_t."""
        extra = 3 if self.use_feature_enrichment else 0
        return 2 * (self.d_hidden + extra)

    @property
    def classifier_width(self) -> int:
        return self.state_width + (self.d_or if self.use_overall_rating else 0)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every trainable tensor, in checkpoint order."""
    shapes: dict[str, tuple[int, ...]] = {}
    e, H = cfg.d_emb, cfg.d_hidden
    shapes.update({
        "highway.W_f": (e, e), "highway.b_f": (e,),
        "highway.W_g": (e, e), "highway.b_g": (e,),
    })
    for layer in range(cfg.encoder_layers):
        d_in = e if layer == 0 else 2 * H
        for side in ("fwd", "bwd"):
            p = f"encoder.l{layer}.{side}"
            shapes.update({f"{p}.W_x": (d_in, 4 * H), f"{p}.W_h": (H, 4 * H), f"{p}.b": (4 * H,)})
    if cfg.use_feature_enrichment:
        for side in ("fwd", "bwd"):
            shapes.update({f"fm.{side}.w0": (1,), f"fm.{side}.w": (H,),
                           f"fm.{side}.V": (H, cfg.fm_factor_dim)})
    D, A, C = cfg.state_width, cfg.d_attn, cfg.d_classifier
    for k in range(cfg.num_aspects):
        p = f"aspect{k}"
        shapes.update({f"{p}.W_G": (D, A), f"{p}.b_G": (A,), f"{p}.v_G": (A,)})
        if cfg.use_deliberation:
            shapes.update({f"{p}.W_D": (D, D), f"{p}.b_D": (D,)})
        shapes.update({
            f"{p}.W_out": (cfg.classifier_width, C), f"{p}.b_out": (C,),
            f"{p}.W_pred": (C, cfg.num_classes), f"{p}.b_pred": (cfg.num_classes,),
        })
    if cfg.use_overall_rating:
        # last row stands for "rating unknown"
        shapes["overall.E"] = (cfg.num_classes + 1, cfg.d_or)
    return shapes


def init_parameters(cfg: ModelConfig, seed: int = 42, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    H = cfg.d_hidden
    out = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf in ("v_G", "E", "w", "V"):
            arr = rng.uniform(-0.1, 0.1, size=shape)
        elif len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        else:
            arr = np.zeros(shape)
            if name.startswith("encoder.") and leaf == "b":
                arr[H:2 * H] = 1.0  # forget gate
        out[name] = arr.astype(dtype)
    return out


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    ids: np.ndarray        # (B, T) token indices, PAD-padded on the right
    mask: np.ndarray       # (B, T) 1 for real tokens
    lengths: np.ndarray    # (B,)
    overall: np.ndarray    # (B,) overall-rating class, num_classes when unknown
    labels: np.ndarray | None  # (B, K)
    review_ids: list[str] = field(default_factory=list)
    tokens: list[tuple[str, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.lengths)


def make_batch(reviews: Sequence[Review], vocab: Vocabulary, num_classes: int,
               max_len: int = MAX_SEQ_LEN, with_labels: bool = True) -> Batch:
    encoded = [vocab.encode(r.tokens, max_len) for r in reviews]
    lengths = np.array([len(e) for e in encoded], dtype=np.int64)
    T = int(lengths.max())
    ids = np.full((len(reviews), T), PAD, dtype=np.int64)
    for i, e in enumerate(encoded):
        ids[i, : len(e)] = e
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    overall = np.array(
        [num_classes if r.overall_rating is None else r.overall_rating for r in reviews], dtype=np.int64
    )
    labels = np.array([r.aspect_labels for r in reviews], dtype=np.int64) if with_labels else None
    return Batch(ids, mask, lengths, overall, labels,
                 [r.id for r in reviews], [tuple(r.tokens[:max_len]) for r in reviews])


def reversal_permutation(lengths: np.ndarray, T: int) -> np.ndarray:
    """Per-row index that reverses the first ``length`` positions and keeps the padding."""
    t = np.arange(T)[None, :]
    L = lengths[:, None]
    return np.where(t < L, L - 1 - t, t)


# ---------------------------------------------------------------- layers


def highway_embed(E: Tensor, W_f: Tensor, b_f: Tensor, W_g: Tensor, b_g: Tensor) -> Tensor:
    """E' = relu(E W_f + b_f) * g + E * (1 - g), with g = sigmoid(E W_g + b_g)."""
    f = ag.relu(E @ W_f + b_f)
    g = ag.sigmoid(E @ W_g + b_g)
    return f * g + E * (1.0 - g)


def lstm_direction(x: Tensor, W_x: Tensor, W_h: Tensor, b: Tensor) -> Tensor:
    """Unidirectional LSTM over axis 1; gate blocks ordered input, forget, output, cell."""
    B, T, _ = x.shape
    H = W_h.shape[0]
    xs = x @ W_x + b
    h = c = None
    outs = []
    for t in range(T):
        z = xs[:, t, :]
        if h is not None:
            z = z + h @ W_h
        gates = ag.sigmoid(z[:, : 3 * H])
        cand = ag.tanh(z[:, 3 * H:])
        i, f, o = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:]
        c = i * cand if c is None else f * c + i * cand
        h = o * ag.tanh(c)
        outs.append(h)
    return ag.stack(outs, axis=1)


def encode_sequence(x: Tensor, lengths: np.ndarray, layers: Sequence[dict]) -> tuple[Tensor, Tensor]:
    """Stacked bidirectional LSTM; returns final-layer forward and backward states.

    ``layers[l]`` maps "fwd"/"bwd" to ``(W_x, W_h, b)``.  Sequences are right
    padded, so reversing each row's real prefix lets the backward direction run
    as a forward pass.  States at padded positions are junk and must be masked.
    """
    if x.shape[1] < 1:
        raise ValueError("encode_sequence: empty sequence")
    perm = reversal_permutation(np.asarray(lengths), x.shape[1])
    for layer in layers:
        fwd = lstm_direction(x, *layer["fwd"])
        bwd = ag.permute_rows(lstm_direction(ag.permute_rows(x, perm), *layer["bwd"]), perm)
        x = ag.concat([fwd, bwd], axis=-1)
    return fwd, bwd


def factorize(z: Tensor, w0: Tensor, w: Tensor, V: Tensor) -> Tensor:
    """Factorization-machine score of the last axis of ``z``; keeps a trailing axis of 1.

    Pairwise term uses 0.5 * sum_f [(z V)_f^2 - (z^2)(V^2)_f].
    """
    n = z.shape[-1]
    if w.shape != (n,) or V.shape[0] != n:
        raise ag.ShapeError(f"factorize: input width {n} vs parameters w{w.shape}, V{V.shape}")
    linear = z @ ag.reshape(w, (n, 1))
    zv = z @ V
    pair = ag.sum(ag.square(zv) - ag.square(z) @ ag.square(V), axis=-1, keepdims=True)
    return w0 + linear + ag.scale(pair, 0.5)


def enrich(h: Tensor, fm: tuple[Tensor, Tensor, Tensor]) -> Tensor:
    """Append max, mean and FM value of each state: width H -> H + 3."""
    return ag.concat([
        h,
        ag.max(h, axis=-1, keepdims=True),
        ag.mean(h, axis=-1, keepdims=True),
        factorize(h, *fm),
    ], axis=-1)


def enrich_and_aggregate(h_fwd: Tensor, h_bwd: Tensor, fm_fwd=None, fm_bwd=None) -> Tensor:
    if fm_fwd is None:
        return ag.concat([h_fwd, h_bwd], axis=-1)
    return ag.concat([enrich(h_fwd, fm_fwd), enrich(h_bwd, fm_bwd)], axis=-1)


def _weighted_sum(alpha: Tensor, H: Tensor) -> Tensor:
    B, T, D = H.shape
    return ag.reshape(ag.reshape(alpha, (B, 1, T)) @ H, (B, D))


def global_attention(H: Tensor, mask: np.ndarray, W_G: Tensor, b_G: Tensor, v_G: Tensor):
    """Returns (alpha (B, T), s_G (B, D))."""
    B, T, _ = H.shape
    proj = ag.tanh(H @ W_G + b_G)
    u = ag.reshape(proj @ ag.reshape(v_G, (v_G.shape[0], 1)), (B, T))
    alpha = ag.softmax(u, mask)
    return alpha, _weighted_sum(alpha, H)


def deliberate_attention(H: Tensor, mask: np.ndarray, s_G: Tensor, W_D: Tensor, b_D: Tensor):
    """Second attention pass with s_G as the query.  Returns (alpha, s_D)."""
    B, T, D = H.shape
    proj = ag.tanh(H @ W_D + b_D)
    u = ag.reshape(proj @ ag.reshape(s_G, (B, D, 1)), (B, T))
    alpha = ag.softmax(u, mask)
    return alpha, _weighted_sum(alpha, H)


def fuse_representation(s_G: Tensor, s_D: Tensor | None, or_embedding: Tensor | None) -> Tensor:
    s = s_G if s_D is None else s_G + s_D
    if or_embedding is not None:
        s = ag.concat([s, or_embedding], axis=-1)
    return s


def classify(s: Tensor, W_out: Tensor, b_out: Tensor, W_pred: Tensor, b_pred: Tensor,
             dropout_rate: float = 0.0, train: bool = False, rng=None,
             dropout_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Two-layer classifier; returns (logits, probabilities)."""
    if train:
        s = ag.apply_dropout(s, dropout_rate, "train", rng, mask=dropout_mask)
    y_out = ag.relu(s @ W_out + b_out)
    logits = y_out @ W_pred + b_pred
    return logits, ag.softmax(logits)


def multitask_loss(probs: Sequence[Tensor], labels: np.ndarray) -> Tensor:
    """Cross-entropy summed over aspects, averaged over the batch."""
    labels = np.asarray(labels)
    B = labels.shape[0]
    total = None
    for k, p in enumerate(probs):
        onehot = np.zeros(p.shape, dtype=p.dtype)
        onehot[np.arange(B), labels[:, k]] = 1
        term = ag.sum(ag.log(p, clamp=LOG_CLAMP) * onehot)
        total = term if total is None else total + term
    return ag.scale(total, -1.0 / B)


# ---------------------------------------------------------------- model


@dataclass
class ForwardOutput:
    embedded: Tensor
    hidden: Tensor
    alpha_g: list[Tensor]
    alpha_d: list[Tensor | None]
    s_g: list[Tensor]
    s_d: list[Tensor | None]
    s: list[Tensor]
    logits: list[Tensor]
    probs: list[Tensor]


@dataclass
class ForwardTrace:
    """Activations of one review, trimmed to its real length."""

    review_id: str
    tokens: tuple[str, ...]
    embedded: np.ndarray
    hidden: np.ndarray
    alpha_g: list[np.ndarray]
    alpha_d: list[np.ndarray | None]
    s_g: list[np.ndarray]
    s_d: list[np.ndarray | None]
    s: list[np.ndarray]
    logits: list[np.ndarray]
    probs: list[np.ndarray]

    def accumulated(self, k: int) -> np.ndarray:
        """Interpretation weights 0.5 * (alpha_G + alpha_D), or alpha_G alone."""
        if self.alpha_d[k] is None:
            return self.alpha_g[k]
        return 0.5 * (self.alpha_g[k] + self.alpha_d[k])

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(np.argmax(p)) for p in self.probs])


class Fedar:
    """Parameters plus the forward pass."""

    def __init__(self, config: ModelConfig, embeddings: np.ndarray, params: dict | None = None,
                 vocab: Vocabulary | None = None, seed: int = 42, dtype=np.float32):
        self.config = config
        self.vocab = vocab
        if embeddings.shape[1] != config.d_emb:
            raise ValueError(f"embedding width {embeddings.shape[1]} != d_emb {config.d_emb}")
        self.embedding = Tensor(np.asarray(embeddings, dtype=dtype), name="embedding")
        arrays = params if params is not None else init_parameters(config, seed, dtype)
        shapes = parameter_shapes(config)
        if set(arrays) != set(shapes):
            raise CheckpointError("parameter names do not match the model config")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.asarray(arrays[name], dtype=dtype)
            if arr.shape != shape:
                raise CheckpointError(f"{name}: shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr.copy(), requires_grad=True, name=name)

    @property
    def dtype(self):
        return self.embedding.dtype

    def astype(self, dtype) -> "Fedar":
        return Fedar(self.config, self.embedding.data, {n: p.data for n, p in self.params.items()},
                     self.vocab, dtype=dtype)

    def copy(self) -> "Fedar":
        return self.astype(self.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            p.data = np.asarray(state[n], dtype=self.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward pieces

    def _encoder_layers(self):
        P = self.params
        return [
            {side: (P[f"encoder.l{l}.{side}.W_x"], P[f"encoder.l{l}.{side}.W_h"], P[f"encoder.l{l}.{side}.b"])
             for side in ("fwd", "bwd")}
            for l in range(self.config.encoder_layers)
        ]

    def encode(self, batch: Batch) -> tuple[Tensor, Tensor]:
        """Returns (highway embeddings, aggregated hidden states)."""
        P = self.params
        E = ag.embedding(self.embedding, batch.ids)
        E2 = highway_embed(E, P["highway.W_f"], P["highway.b_f"], P["highway.W_g"], P["highway.b_g"])
        h_fwd, h_bwd = encode_sequence(E2, batch.lengths, self._encoder_layers())
        if self.config.use_feature_enrichment:
            fm = {s: (P[f"fm.{s}.w0"], P[f"fm.{s}.w"], P[f"fm.{s}.V"]) for s in ("fwd", "bwd")}
            H = enrich_and_aggregate(h_fwd, h_bwd, fm["fwd"], fm["bwd"])
        else:
            H = enrich_and_aggregate(h_fwd, h_bwd)
        return E2, H

    def represent(self, H: Tensor, batch: Batch, k: int):
        """Attention for aspect ``k``: (alpha_G, alpha_D, s_G, s_D, classifier input)."""
        P, cfg = self.params, self.config
        p = f"aspect{k}"
        alpha_g, s_g = global_attention(H, batch.mask, P[f"{p}.W_G"], P[f"{p}.b_G"], P[f"{p}.v_G"])
        alpha_d = s_d = None
        if cfg.use_deliberation:
            alpha_d, s_d = deliberate_attention(H, batch.mask, s_g, P[f"{p}.W_D"], P[f"{p}.b_D"])
        or_emb = ag.embedding(P["overall.E"], batch.overall) if cfg.use_overall_rating else None
        return alpha_g, alpha_d, s_g, s_d, fuse_representation(s_g, s_d, or_emb)

    def classify(self, s: Tensor, k: int, train: bool = False, rng=None, dropout_mask=None,
                 dropout_rate: float | None = None):
        P = self.params
        p = f"aspect{k}"
        rate = self.config.dropout_rate if dropout_rate is None else dropout_rate
        return classify(s, P[f"{p}.W_out"], P[f"{p}.b_out"], P[f"{p}.W_pred"], P[f"{p}.b_pred"],
                        rate, train, rng, dropout_mask)

    def forward(self, batch: Batch, train: bool = False, rng=None,
                dropout_masks: Sequence[np.ndarray] | None = None) -> ForwardOutput:
        E2, H = self.encode(batch)
        out = ForwardOutput(E2, H, [], [], [], [], [], [], [])
        for k in range(self.config.num_aspects):
            alpha_g, alpha_d, s_g, s_d, s = self.represent(H, batch, k)
            mask = None if dropout_masks is None else dropout_masks[k]
            logits, probs = self.classify(s, k, train, rng, mask)
            out.alpha_g.append(alpha_g)
            out.alpha_d.append(alpha_d)
            out.s_g.append(s_g)
            out.s_d.append(s_d)
            out.s.append(s)
            out.logits.append(logits)
            out.probs.append(probs)
        return out

    def loss(self, batch: Batch, train: bool = False, rng=None, dropout_masks=None):
        out = self.forward(batch, train, rng, dropout_masks)
        return multitask_loss(out.probs, batch.labels), out

    # -- inference

    def batches(self, reviews: Sequence[Review], batch_size: int = 64, with_labels: bool = False):
        if self.vocab is None:
            raise ValueError("model has no vocabulary attached")
        for start in range(0, len(reviews), batch_size):
            chunk = reviews[start:start + batch_size]
            yield make_batch(chunk, self.vocab, self.config.num_classes, self.config.max_len, with_labels)

    def predict_proba(self, reviews: Sequence[Review], batch_size: int = 64) -> np.ndarray:
        """(n, K, N) class probabilities in eval mode."""
        chunks = []
        for batch in self.batches(reviews, batch_size):
            out = self.forward(batch)
            chunks.append(np.stack([p.data for p in out.probs], axis=1))
        return np.concatenate(chunks, axis=0)

    def predict(self, reviews: Sequence[Review], batch_size: int = 64):
        """Argmax labels (ties to the lowest class) and one trace per review."""
        traces = []
        for batch in self.batches(reviews, batch_size):
            traces.extend(self.traces(batch, self.forward(batch)))
        labels = np.array([t.labels for t in traces], dtype=np.int64).reshape(len(traces), -1)
        return labels, traces

    def traces(self, batch: Batch, out: ForwardOutput) -> list[ForwardTrace]:
        K = self.config.num_aspects
        result = []
        for i, L in enumerate(batch.lengths):
            def row(t, trim=False):
                if t is None:
                    return None
                return t.data[i, :L].copy() if trim else t.data[i].copy()
            result.append(ForwardTrace(
                review_id=batch.review_ids[i],
                tokens=batch.tokens[i],
                embedded=out.embedded.data[i, :L].copy(),
                hidden=out.hidden.data[i, :L].copy(),
                alpha_g=[row(out.alpha_g[k], True) for k in range(K)],
                alpha_d=[row(out.alpha_d[k], True) for k in range(K)],
                s_g=[row(out.s_g[k]) for k in range(K)],
                s_d=[row(out.s_d[k]) for k in range(K)],
                s=[row(out.s[k]) for k in range(K)],
                logits=[row(out.logits[k]) for k in range(K)],
                probs=[row(out.probs[k]) for k in range(K)],
            ))
        return result


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; exact ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=-1)


# ---------------------------------------------------------------- checkpoints

MANIFEST = "manifest.json"
BLOB = "tensors.bin"


def save_checkpoint(model: Fedar, directory: str | Path, seed: int, extra: dict | None = None) -> Path:
    """Write manifest + little-endian float32 blob (+ vocabulary) into ``directory``."""
    directory = Path(directory)
    entries = []
    chunks = []
    offset = 0
    tensors = [("embedding", model.embedding.data)] + [(n, p.data) for n, p in model.params.items()]
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "float32-le",
        "config": model.config.to_dict(),
        "seed": seed,
        "tensors": entries,
        "extra": extra or {},
    }
    atomic_write_bytes(directory / BLOB, b"".join(chunks))
    if model.vocab is not None:
        atomic_write_text(directory / "vocab.json", json.dumps(model.vocab.to_json(), sort_keys=True) + "\n")
    atomic_write_text(directory / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path, dtype=np.float32) -> tuple[Fedar, dict]:
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {manifest.get('format_version')} != {CHECKPOINT_VERSION}"
        )
    config = ModelConfig.from_dict(manifest["config"])
    blob = (directory / BLOB).read_bytes()
    expected = {"embedding": None, **parameter_shapes(config)}
    arrays = {}
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
        if expected[name] is not None and expected[name] != shape:
            raise CheckpointError(f"{name}: checkpoint shape {shape}, config expects {expected[name]}")
        raw = blob[entry["offset"]: entry["offset"] + entry["nbytes"]]
        if len(raw) != int(np.prod(shape)) * 4:
            raise CheckpointError(f"{name}: truncated tensor data")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    missing = set(expected) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    vocab = None
    vpath = directory / "vocab.json"
    if vpath.is_file():
        vocab = Vocabulary.from_json(json.loads(vpath.read_text(encoding="utf-8")))
    embedding = arrays.pop("embedding")
    return Fedar(config, embedding, arrays, vocab=vocab, dtype=dtype), manifest
