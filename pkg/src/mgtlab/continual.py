"""Class-incremental adaptation of an attribution model.

A trained classifier gains one (or more) output head rows for newly seen
generator classes, then updates for one low-learning-rate epoch under one of
five strategies:

  Normal   — fine-tune on the new class only.
  LwF      — Normal + distillation of the frozen pre-update model's logits.
  iCaRL    — replay herded exemplars of the old classes, weighted CE.
  BiC      — iCaRL-style replay + post-hoc affine correction of new-class
             logits fit on an exemplar-built validation set.
  Combine  — replay + distillation + bias correction together.

Update learning rate defaults to base/4; the "paper-literal" preset pins it
to 2.5e-7 instead.
"""

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .corpus import Document
from .neural import (NeuralClassifier, TrainConfig, auto_class_weights,
                     loss_and_grads, sgd_step)
from .util import ContractError, DataError, derive_seed

TECHNIQUES = ("Normal", "LwF", "iCaRL", "BiC", "Combine")
PAPER_LITERAL_UPDATE_LR = 2.5e-7


@dataclass
class LwFConfig:
    lam: float = 0.2
    temperature: float = 2.0

    def validate(self) -> "LwFConfig":
        if self.lam < 0:
            raise DataError("lambda must be >= 0")
        if self.temperature <= 0:
            raise DataError("temperature must be > 0")
        return self


@dataclass
class BiasCorrection:
    alpha: float
    beta: float
    old_n: int


@dataclass
class ExemplarStore:
    budget_per_class: int = 100
    per_class: Dict[str, List[Document]] = field(default_factory=dict)

    def set(self, label: str, docs: Sequence[Document]) -> None:
        if len(docs) > self.budget_per_class:
            raise DataError(
                f"{len(docs)} exemplars exceed budget {self.budget_per_class}")
        self.per_class[label] = list(docs)

    def get(self, label: str) -> List[Document]:
        return list(self.per_class.get(label, []))

    def classes(self) -> List[str]:
        return sorted(self.per_class)

    def all_pairs(self) -> List[Tuple[Document, str]]:
        return [(d, c) for c in sorted(self.per_class)
                for d in self.per_class[c]]


@dataclass
class CILState:
    model: NeuralClassifier
    classes: List[str]
    exemplars: ExemplarStore
    base_config: TrainConfig
    old_snapshot: Optional[NeuralClassifier] = None
    bias_correction: Optional[BiasCorrection] = None
    stage: int = 0


@dataclass
class CILConfig:
    learning_rate: Optional[float] = None   # None -> base/4 (or preset)
    preset: Optional[str] = None            # "paper-literal" -> 2.5e-7
    epochs: int = 1
    batch_size: Optional[int] = None        # None -> base batch size
    lwf: LwFConfig = field(default_factory=LwFConfig)
    seed: int = 3407


# ---------------------------------------------------------------------------
# Head expansion
# ---------------------------------------------------------------------------

def expand_head(model: NeuralClassifier, new_label: str,
                seed: int = 0) -> NeuralClassifier:
    """Append one zero-initialized output row for new_label.

    Old-class logits are bit-identical afterwards and the new logit is 0 on
    every input. seed is reserved for nonzero init strategies.
    """
    if new_label in model.classes:
        raise DataError(f"class {new_label!r} already present")
    out = model.clone_trainable()
    out.classes = list(model.classes) + [new_label]
    out.w_out = np.vstack([out.w_out, np.zeros((1, out.w_out.shape[1]))])
    out.b_out = np.concatenate([out.b_out, [0.0]])
    return out


# ---------------------------------------------------------------------------
# Exemplar selection
# ---------------------------------------------------------------------------

def select_exemplars(embed: Callable[[Document], np.ndarray],
                     docs: Sequence[Document], budget: int, seed: int = 0,
                     strategy: str = "herding") -> List[Document]:
    """Pick up to `budget` representatives of one class.

    Herding greedily chooses the document whose inclusion brings the running
    mean of embeddings closest (Euclidean) to the class mean; ties resolve
    to the earlier document. With |docs| <= budget everything is returned.
    strategy="random" is the seed-controlled fallback.
    """
    if budget < 1:
        raise DataError("budget must be >= 1")
    if not docs:
        raise DataError("no documents to select exemplars from")
    if len(docs) <= budget:
        return list(docs)
    if strategy == "random":
        rng = np.random.default_rng(derive_seed(seed, "exemplar-fallback"))
        idx = sorted(rng.choice(len(docs), size=budget, replace=False))
        return [docs[i] for i in idx]
    if strategy != "herding":
        raise ContractError(f"unknown exemplar strategy {strategy!r}")
    E = np.stack([np.asarray(embed(d), dtype=np.float64) for d in docs])
    mean = E.mean(axis=0)
    chosen: List[int] = []
    running = np.zeros_like(mean)
    remaining = list(range(len(docs)))
    for step in range(budget):
        cand = np.array(remaining)
        trial = (running + E[cand]) / (step + 1)
        dist = np.linalg.norm(trial - mean, axis=1)
        pick = cand[int(np.argmin(dist))]
        chosen.append(pick)
        running = running + E[pick]
        remaining.remove(pick)
    return [docs[i] for i in chosen]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    return z - logsumexp(z, axis=-1, keepdims=True)


def lwf_loss(new_logits, old_logits, target: int, cfg: Optional[LwFConfig] = None) -> float:
    """CE(new, target) + lambda * T^2 * KL(softmax(old/T) || softmax(new[:old]/T)).

    lambda = 0 is exactly the plain cross-entropy — the distillation branch
    is skipped entirely, not multiplied by zero.
    """
    cfg = (cfg or LwFConfig()).validate()
    new = np.asarray(new_logits, dtype=np.float64)
    old = np.asarray(old_logits, dtype=np.float64)
    if old.shape[0] > new.shape[0]:
        raise DataError("old logits longer than new logits")
    ce = float(-_log_softmax(new)[target])
    if cfg.lam == 0:
        return ce
    t = cfg.temperature
    log_p_old = _log_softmax(old / t)
    log_q = _log_softmax(new[: old.shape[0]] / t)
    p_old = np.exp(log_p_old)
    kl = float((p_old * (log_p_old - log_q)).sum())
    return ce + cfg.lam * kl * t * t


def distillation_penalty(old_logits_batch: np.ndarray, cfg: LwFConfig):
    """Batch logit-penalty closure for the SGD loop (mean reduction).

    Returns a callable logits -> (extra_loss, extra_dlogits) implementing
    lambda * T^2 * mean_i KL(softmax(old_i/T) || softmax(new_i[:old]/T)).
    """
    cfg.validate()
    t, lam = cfg.temperature, cfg.lam
    log_p_old = _log_softmax(old_logits_batch / t)
    p_old = np.exp(log_p_old)
    n_old = old_logits_batch.shape[1]

    def penalty(z: np.ndarray):
        n = z.shape[0]
        log_q = _log_softmax(z[:, :n_old] / t)
        kl = (p_old * (log_p_old - log_q)).sum(axis=1)
        extra_loss = lam * t * t * float(kl.mean())
        dz = np.zeros_like(z)
        dz[:, :n_old] = lam * t * (np.exp(log_q) - p_old) / n
        return extra_loss, dz

    return penalty


def weighted_ce(logits, target: int, class_counts) -> float:
    """Cross-entropy scaled by w_target with w_c = N/(K*n_c)."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if (counts <= 0).any():
        raise DataError("class count must be positive for weighted CE")
    z = np.asarray(logits, dtype=np.float64)
    w = counts.sum() / (len(counts) * counts[target])
    return float(-w * _log_softmax(z)[target])


# ---------------------------------------------------------------------------
# Bias correction
# ---------------------------------------------------------------------------

def bic_correct(logits, bc: BiasCorrection) -> np.ndarray:
    """Affine-map new-class logits (indices >= old_n); old entries bit-equal."""
    z = np.asarray(logits, dtype=np.float64)
    if bc.old_n >= z.shape[-1]:
        raise DataError(
            f"old_n {bc.old_n} leaves no new-class entries in {z.shape[-1]} logits")
    out = z.copy()
    out[..., bc.old_n:] = bc.alpha * z[..., bc.old_n:] + bc.beta
    return out


def fit_bic(model: NeuralClassifier, validation: Sequence[Tuple[Document, str]],
            old_n: int, config: Optional[dict] = None) -> BiasCorrection:
    """Fit (alpha, beta) minimizing validation CE of the corrected logits.

    Two-parameter deterministic convex optimization; model weights stay
    untouched. The validation set must contain every class.
    """
    present = {l for _, l in validation}
    missing = [c for c in model.classes if c not in present]
    if missing:
        raise DataError(f"validation set missing class(es): {missing}")
    index = {c: i for i, c in enumerate(model.classes)}
    X = model.encoder.encode_batch([d.text for d, _ in validation])
    logits = model.logits_batch(X)
    y = np.array([index[l] for _, l in validation], dtype=np.int64)
    n = logits.shape[0]
    new_part = logits[:, old_n:]

    def objective(theta):
        a, b = theta
        z = logits.copy()
        z[:, old_n:] = a * new_part + b
        log_p = _log_softmax(z)
        ce = -log_p[np.arange(n), y].mean()
        p = np.exp(log_p)
        dz = p.copy()
        dz[np.arange(n), y] -= 1.0
        dz /= n
        da = float((dz[:, old_n:] * new_part).sum())
        db = float(dz[:, old_n:].sum())
        return ce, np.array([da, db])

    res = minimize(objective, np.array([1.0, 0.0]), jac=True, method="BFGS",
                   options={"gtol": 1e-10, "maxiter": 500})
    alpha, beta = res.x
    return BiasCorrection(float(alpha), float(beta), old_n)


# ---------------------------------------------------------------------------
# The update step
# ---------------------------------------------------------------------------

def resolve_update_lr(config: CILConfig, base: TrainConfig) -> float:
    if config.learning_rate is not None:
        return config.learning_rate
    if config.preset == "paper-literal":
        return PAPER_LITERAL_UPDATE_LR
    if config.preset is not None:
        raise ContractError(f"unknown preset {config.preset!r}")
    return base.learning_rate / 4.0


def cil_update(state: CILState, new_docs: Sequence[Tuple[Document, str]],
               technique: str, config: Optional[CILConfig] = None) -> CILState:
    """One class-incremental stage; returns a new state, input untouched.

    Orchestration: snapshot the old model; expand the head for each unseen
    label (two-at-once batches supported); build the update set (new docs,
    plus old-class exemplars with weighted CE for replay techniques); train
    config.epochs epochs at the reduced learning rate, adding distillation
    for LwF/Combine; refresh new-class exemplars and fit bias correction
    where the technique calls for it.
    """
    if technique not in TECHNIQUES:
        raise ContractError(
            f"unknown technique {technique!r}; known: {', '.join(TECHNIQUES)}")
    config = config or CILConfig()
    config.lwf.validate()
    if not new_docs:
        raise DataError("no new-class documents")
    new_labels: List[str] = []
    for _, label in new_docs:
        if label not in new_labels:
            new_labels.append(label)
    for label in new_labels:
        if label in state.classes:
            raise DataError(f"label {label!r} is not new to the model")

    replay = technique in ("iCaRL", "BiC", "Combine")
    distill = technique in ("LwF", "Combine")
    use_bic = technique in ("BiC", "Combine")
    old_n = len(state.classes)

    snapshot = state.model.snapshot()
    model = state.model.clone_trainable()
    for label in new_labels:
        model = expand_head(model, label)

    exemplars = copy.deepcopy(state.exemplars)
    if replay:
        empty = [c for c in state.classes if not exemplars.get(c)]
        if empty:
            raise DataError(
                f"technique {technique} needs exemplars for old class(es) {empty}")
        replay_pairs = [(d, c) for c in state.classes for d in exemplars.get(c)]
    else:
        replay_pairs = []
    update_pairs = list(new_docs) + replay_pairs

    index = {c: i for i, c in enumerate(model.classes)}
    y = np.array([index[l] for _, l in update_pairs], dtype=np.int64)
    X = model.encoder.encode_batch([d.text for d, _ in update_pairs])
    if replay:
        counts = np.bincount(y, minlength=len(model.classes))
        class_weights = auto_class_weights(counts)
    else:
        class_weights = None

    lr = resolve_update_lr(config, state.base_config)
    batch_size = config.batch_size or state.base_config.batch_size
    n = X.shape[0]
    epoch_losses = []
    for epoch in range(config.epochs):
        # Technique-independent stream: with lam=0 the LwF loss reduces to
        # plain CE, and the weight trajectory must then match Normal exactly.
        rng = np.random.default_rng(derive_seed(
            config.seed, f"cil:{state.stage}:{epoch}"))
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start: start + batch_size]
            penalty = None
            if distill and config.lwf.lam > 0:
                old_logits = snapshot.logits_batch(X[idx])
                penalty = distillation_penalty(old_logits, config.lwf)
            loss, grads = loss_and_grads(model, X[idx], y[idx], class_weights,
                                         logit_penalty=penalty)
            sgd_step(model, grads, lr)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)) if losses else math.nan)

    if replay:
        for label in new_labels:
            docs = [d for d, l in new_docs if l == label]
            picked = select_exemplars(
                model.embed_hidden, docs, exemplars.budget_per_class,
                seed=derive_seed(config.seed, f"exemplars:{label}"))
            exemplars.set(label, picked)

    bias = None
    if use_bic:
        bias = fit_bic(model, exemplars.all_pairs(), old_n)

    model.train_log = {"cil_stage": state.stage + 1, "technique": technique,
                       "learning_rate": lr, "epoch_losses": epoch_losses}
    return CILState(model=model, classes=list(model.classes),
                    exemplars=exemplars, base_config=state.base_config,
                    old_snapshot=snapshot, bias_correction=bias,
                    stage=state.stage + 1)


def corrected_logits(state: CILState, doc) -> np.ndarray:
    z = state.model.predict_logits(doc)
    if state.bias_correction is not None:
        z = bic_correct(z, state.bias_correction)
    return z


def cil_predict_label(state: CILState, doc) -> str:
    return state.classes[int(np.argmax(corrected_logits(state, doc)))]
