"""Supervised text classifier: hashed bag-of-words encoder + small MLP head.

This is the trained-detector contract (binary detection and multiclass
attribution) with a desk-scale reference implementation: feature hashing
into 2^15 buckets, one tanh hidden layer of width 64, plain mini-batch SGD.
Everything is deterministic given the seed — shuffles come from derived
seeds, hashing never touches Python's salted hash(), and evaluation is pure.
The encoder is pluggable so a heavier sentence encoder can be slotted in
without changing the training loop.
"""

import copy
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .corpus import Document
from .util import DataError, derive_seed, stable_bucket

HIDDEN_WIDTH = 64


@dataclass
class TrainConfig:
    learning_rate: float = 5e-6
    batch_size: int = 64
    epochs: int = 3
    seed: int = 3407
    class_weights: Union[None, str, Sequence[float]] = None  # None | "auto" | vector

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.epochs < 0:
            raise DataError("epochs must be >= 0")
        return self


class HashingEncoder:
    """Bag-of-words over lowercase whitespace tokens, feature-hashed into a
    fixed number of buckets, rows L2-normalized."""

    kind = "hashing"

    def __init__(self, n_buckets: int = 2 ** 15, seed: int = 0,
                 normalize: bool = True):
        self.n_buckets = n_buckets
        self.seed = seed
        self.normalize = normalize

    def spec(self) -> dict:
        return {"kind": self.kind, "n_buckets": self.n_buckets,
                "seed": self.seed, "normalize": self.normalize}

    def encode_batch(self, texts: Sequence[str]) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for i, text in enumerate(texts):
            counts: Dict[int, float] = {}
            for tok in text.lower().split():
                b = stable_bucket(tok, self.seed, self.n_buckets)
                counts[b] = counts.get(b, 0.0) + 1.0
            if self.normalize and counts:
                norm = float(np.sqrt(sum(v * v for v in counts.values())))
                counts = {b: v / norm for b, v in counts.items()}
            for b, v in sorted(counts.items()):
                rows.append(i)
                cols.append(b)
                vals.append(v)
        return sp.csr_matrix((vals, (rows, cols)),
                             shape=(len(texts), self.n_buckets))

    def encode(self, text: str) -> np.ndarray:
        return self.encode_batch([text]).toarray().ravel()


def encoder_from_spec(spec: dict) -> HashingEncoder:
    if spec.get("kind") != "hashing":
        raise DataError(f"unknown encoder kind {spec.get('kind')!r}")
    return HashingEncoder(n_buckets=int(spec["n_buckets"]),
                          seed=int(spec["seed"]),
                          normalize=bool(spec.get("normalize", True)))


@dataclass
class NeuralClassifier:
    encoder: HashingEncoder
    classes: List[str]
    w_hidden: np.ndarray           # [n_buckets x HIDDEN_WIDTH]
    b_hidden: np.ndarray           # [HIDDEN_WIDTH]
    w_out: np.ndarray              # [n_classes x HIDDEN_WIDTH]
    b_out: np.ndarray              # [n_classes]
    frozen: bool = False
    train_log: dict = field(default_factory=dict)

    # -- inference ----------------------------------------------------------
    def _as_text(self, doc) -> str:
        return doc.text if isinstance(doc, Document) else str(doc)

    def hidden_batch(self, X: sp.csr_matrix) -> np.ndarray:
        return np.tanh(X @ self.w_hidden + self.b_hidden)

    def logits_batch(self, X: sp.csr_matrix) -> np.ndarray:
        return self.hidden_batch(X) @ self.w_out.T + self.b_out

    def predict_logits(self, doc) -> np.ndarray:
        """Raw pre-softmax scores, length |classes|. Pure: no state changes."""
        X = self.encoder.encode_batch([self._as_text(doc)])
        return self.logits_batch(X)[0]

    def embed_hidden(self, doc) -> np.ndarray:
        """Penultimate-layer representation (used for exemplar herding)."""
        X = self.encoder.encode_batch([self._as_text(doc)])
        return self.hidden_batch(X)[0]

    def predict_label(self, doc) -> str:
        return self.classes[int(np.argmax(self.predict_logits(doc)))]

    # -- lifecycle ----------------------------------------------------------
    def snapshot(self) -> "NeuralClassifier":
        """Deep frozen copy; later training of the original never changes it."""
        return NeuralClassifier(
            encoder=copy.deepcopy(self.encoder), classes=list(self.classes),
            w_hidden=self.w_hidden.copy(), b_hidden=self.b_hidden.copy(),
            w_out=self.w_out.copy(), b_out=self.b_out.copy(), frozen=True,
            train_log=dict(self.train_log))

    def clone_trainable(self) -> "NeuralClassifier":
        m = self.snapshot()
        m.frozen = False
        return m


def init_classifier(classes: Sequence[str], encoder: Optional[HashingEncoder] = None,
                    seed: int = 0) -> NeuralClassifier:
    """Seeded init: hidden weights ~ N(0,1) (inputs are L2-normalized so
    pre-activations stay O(1)); output layer zero so initial logits are 0."""
    encoder = encoder or HashingEncoder()
    rng = np.random.default_rng(derive_seed(seed, "init"))
    w_hidden = rng.standard_normal((encoder.n_buckets, HIDDEN_WIDTH))
    b_hidden = np.zeros(HIDDEN_WIDTH)
    w_out = np.zeros((len(classes), HIDDEN_WIDTH))
    b_out = np.zeros(len(classes))
    return NeuralClassifier(encoder, list(classes), w_hidden, b_hidden,
                            w_out, b_out)


def auto_class_weights(counts: Sequence[int]) -> np.ndarray:
    """w_c = N / (K * n_c): rebalances cross-entropy under class imbalance."""
    counts = np.asarray(counts, dtype=np.float64)
    if (counts <= 0).any():
        raise DataError("class weight for a class with zero samples")
    return counts.sum() / (len(counts) * counts)


def _resolve_class_weights(config: TrainConfig, classes: List[str],
                           y: np.ndarray) -> Optional[np.ndarray]:
    if config.class_weights is None:
        return None
    if isinstance(config.class_weights, str):
        if config.class_weights != "auto":
            raise DataError(f"unknown class_weights {config.class_weights!r}")
        counts = np.bincount(y, minlength=len(classes))
        return auto_class_weights(counts)
    w = np.asarray(config.class_weights, dtype=np.float64)
    if w.shape != (len(classes),):
        raise DataError(
            f"class_weights length {w.shape} != {len(classes)} classes")
    return w


def batch_loss(model: NeuralClassifier, X, y: np.ndarray,
               class_weights: Optional[np.ndarray] = None) -> float:
    """Mean (optionally class-weighted) cross-entropy of a batch."""
    z = model.logits_batch(X)
    zmax = z.max(axis=1, keepdims=True)
    lse = (zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1)))
    ce = lse - z[np.arange(len(y)), y]
    if class_weights is not None:
        ce = ce * class_weights[y]
    return float(ce.mean())


def loss_and_grads(model: NeuralClassifier, X, y: np.ndarray,
                   class_weights: Optional[np.ndarray] = None,
                   logit_penalty=None):
    """Forward + backward for one batch.

    logit_penalty, when given, is a callable logits -> (extra_loss,
    extra_dlogits) folding an additional differentiable term (e.g. a
    distillation penalty) into the objective; it must use the same
    mean-over-batch reduction as the base loss. Returns (loss, grads) with
    grads keyed w_hidden/b_hidden/w_out/b_out.
    """
    n = X.shape[0]
    H = model.hidden_batch(X)
    z = H @ model.w_out.T + model.b_out
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    p = ez / ez.sum(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(ez.sum(axis=1))
    ce = lse - z[np.arange(n), y]
    w_i = class_weights[y] if class_weights is not None else np.ones(n)
    loss = float((ce * w_i).mean())
    dz = p.copy()
    dz[np.arange(n), y] -= 1.0
    dz *= (w_i / n)[:, None]
    if logit_penalty is not None:
        extra_loss, extra_dz = logit_penalty(z)
        loss += float(extra_loss)
        dz = dz + extra_dz
    grads = {
        "w_out": dz.T @ H,
        "b_out": dz.sum(axis=0),
    }
    dH = dz @ model.w_out
    dA = dH * (1.0 - H * H)          # tanh'
    grads["w_hidden"] = (X.T @ dA) if sp.issparse(X) else X.T @ dA
    grads["b_hidden"] = dA.sum(axis=0)
    if not np.isfinite(loss):
        raise DataError(f"non-finite training loss: {loss}")
    return loss, grads


def sgd_step(model: NeuralClassifier, grads: dict, lr: float) -> None:
    if model.frozen:
        raise DataError("attempt to train a frozen snapshot")
    model.w_out -= lr * grads["w_out"]
    model.b_out -= lr * grads["b_out"]
    model.w_hidden -= lr * np.asarray(grads["w_hidden"])
    model.b_hidden -= lr * grads["b_hidden"]


def train_supervised(train: Sequence[Tuple[Document, str]],
                     config: Optional[TrainConfig] = None,
                     base: Optional[HashingEncoder] = None,
                     classes: Optional[List[str]] = None) -> NeuralClassifier:
    """Mini-batch SGD on (optionally class-weighted) cross-entropy.

    train is a list of (document, label) pairs — labels may differ from
    doc.label (binary mapping of generator names onto "machine"). 0 epochs
    returns the untouched initialization. Deterministic given config.seed.
    """
    config = (config or TrainConfig()).validate()
    if not train:
        raise DataError("empty training set")
    labels = [l for _, l in train]
    present = sorted(set(labels))
    if classes is None:
        classes = present
    else:
        empty = [c for c in classes if c not in present]
        if empty:
            raise DataError(f"class(es) with no training data: {empty}")
    if len(classes) < 2:
        raise DataError("need at least 2 classes")
    index = {c: i for i, c in enumerate(classes)}
    try:
        y = np.array([index[l] for l in labels], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]!r} not in class list") from exc

    model = init_classifier(classes, base, seed=config.seed)
    X = model.encoder.encode_batch([d.text for d, _ in train])
    weights = _resolve_class_weights(config, classes, y)

    n = X.shape[0]
    epoch_losses: List[float] = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng(derive_seed(config.seed, f"epoch:{epoch}"))
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start: start + config.batch_size]
            loss, grads = loss_and_grads(model, X[idx], y[idx], weights)
            sgd_step(model, grads, config.learning_rate)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    model.train_log = {"epoch_losses": epoch_losses,
                       "config": {"learning_rate": config.learning_rate,
                                  "batch_size": config.batch_size,
                                  "epochs": config.epochs,
                                  "seed": config.seed}}
    return model


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_classifier(model: NeuralClassifier, path: str) -> None:
    meta = {"version": CHECKPOINT_VERSION, "classes": model.classes,
            "encoder": model.encoder.spec(), "train_log": model.train_log}
    np.savez_compressed(path, w_hidden=model.w_hidden, b_hidden=model.b_hidden,
                        w_out=model.w_out, b_out=model.b_out,
                        meta=np.frombuffer(json.dumps(meta).encode("utf-8"),
                                           dtype=np.uint8))


def load_classifier(path: str) -> NeuralClassifier:
    blob = np.load(path)
    meta = json.loads(bytes(blob["meta"]).decode("utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {meta.get('version')!r}")
    return NeuralClassifier(
        encoder=encoder_from_spec(meta["encoder"]), classes=list(meta["classes"]),
        w_hidden=blob["w_hidden"], b_hidden=blob["b_hidden"],
        w_out=blob["w_out"], b_out=blob["b_out"],
        train_log=meta.get("train_log", {}))
