"""Calibrated decisions over detector outputs.

Two families: F1-maximizing score thresholds for zero-shot detectors, and
shallow linear classifiers (multinomial logistic, one-vs-rest linear SVM)
over detector feature vectors for binary and attribution tasks.
"""

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .detectors import HIGHER_IS_MACHINE, LOWER_IS_MACHINE
from .util import ContractError, DataError

MACHINE = "machine"
HUMAN = "human"


@dataclass
class ThresholdRule:
    detector: str
    threshold: float
    direction: str
    train_f1: float

    def to_dict(self) -> dict:
        return {"detector": self.detector, "threshold": self.threshold,
                "direction": self.direction, "train_f1": self.train_f1}

    @staticmethod
    def from_dict(d: dict) -> "ThresholdRule":
        return ThresholdRule(d["detector"], float(d["threshold"]),
                             d["direction"], float(d["train_f1"]))


def binary_f1(preds_machine: Sequence[bool], labels_machine: Sequence[bool]) -> float:
    """F1 on the machine (positive) class; zero denominators count as 0."""
    tp = fp = fn = 0
    for p, l in zip(preds_machine, labels_machine):
        if p and l:
            tp += 1
        elif p and not l:
            fp += 1
        elif not p and l:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def _classify(scores, threshold, direction):
    if direction == HIGHER_IS_MACHINE:
        return [s > threshold for s in scores]   # equality -> human
    return [s < threshold for s in scores]


def candidate_thresholds(scores: Sequence[float]) -> List[float]:
    """Midpoints of consecutive distinct sorted scores, plus both infinities."""
    distinct = sorted(set(scores))
    mids = [(a + b) / 2.0 for a, b in zip(distinct, distinct[1:])]
    return [float("-inf")] + mids + [float("inf")]


def calibrate_threshold(scores: Sequence[float], labels: Sequence[str],
                        direction: Optional[str] = None,
                        detector: str = "") -> ThresholdRule:
    """Grid-search the F1-maximizing (threshold, direction) pair.

    Candidates are score-midpoints plus +-inf; both orientations are searched
    unless one is pinned. Ties break toward the smaller threshold, then
    toward higher_is_machine. The returned train_f1 is exactly the machine-F1
    this rule achieves on the calibration data.
    """
    if len(scores) != len(labels):
        raise DataError("scores/labels length mismatch")
    truth = [l == MACHINE for l in labels]
    if all(truth) or not any(truth):
        raise DataError("calibration needs both classes present")
    directions = [direction] if direction else [HIGHER_IS_MACHINE, LOWER_IS_MACHINE]
    best: Optional[Tuple[float, str, float]] = None
    for thr in candidate_thresholds(scores):
        for d in directions:
            f1 = binary_f1(_classify(scores, thr, d), truth)
            if best is None or f1 > best[2]:
                best = (thr, d, f1)
    thr, d, f1 = best
    return ThresholdRule(detector=detector, threshold=thr, direction=d,
                         train_f1=f1)


def apply_threshold(rule: ThresholdRule, score: float) -> str:
    """machine iff the score clears the threshold strictly; equality -> human."""
    if rule.direction == HIGHER_IS_MACHINE:
        return MACHINE if score > rule.threshold else HUMAN
    return MACHINE if score < rule.threshold else HUMAN


# ---------------------------------------------------------------------------
# Linear models
# ---------------------------------------------------------------------------

@dataclass
class LinearModel:
    kind: str                      # "logistic" | "linear_svm"
    classes: List[str]
    weights: np.ndarray            # [classes x features]
    bias: np.ndarray               # [classes]
    feature_names: List[str]
    metadata: dict = field(default_factory=dict)


def _check_features(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {x.shape}")
    bad = ~np.isfinite(x)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise DataError(f"non-finite feature value at row {row}")
    return x


def _encode_labels(labels) -> Tuple[List[str], np.ndarray]:
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise DataError("need at least 2 classes")
    index = {c: i for i, c in enumerate(classes)}
    return classes, np.array([index[l] for l in labels], dtype=np.int64)


def train_logistic(features, labels, l2: float = 1.0, max_iter: int = 1000,
                   tol: float = 1e-8, seed: int = 0,
                   feature_names: Optional[List[str]] = None) -> LinearModel:
    """Multinomial logistic regression by full-batch L-BFGS.

    Objective: (sum_i CE_i + l2/2 * ||W||^2) / n, bias unpenalized. The
    optimizer is deterministic, so identical data and config give identical
    coefficients; seed is accepted for interface symmetry only.
    """
    x = _check_features(features)
    classes, y = _encode_labels(labels)
    n, d = x.shape
    k = len(classes)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    def objective(theta):
        w = theta[: k * d].reshape(k, d)
        b = theta[k * d:]
        z = x @ w.T + b
        lse = logsumexp(z, axis=1)
        ce = np.sum(lse - z[np.arange(n), y])
        obj = (ce + 0.5 * l2 * np.sum(w * w)) / n
        p = np.exp(z - lse[:, None])
        dz = (p - onehot) / n
        gw = dz.T @ x + (l2 / n) * w
        gb = dz.sum(axis=0)
        return obj, np.concatenate([gw.ravel(), gb])

    theta0 = np.zeros(k * d + k)
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-10})
    meta = {"converged": bool(res.success), "iterations": int(res.nit),
            "l2": l2, "tol": tol, "seed": seed}
    if not res.success:
        meta["warning"] = f"optimizer stopped early: {res.message}"
    names = feature_names or [f"f{i}" for i in range(d)]
    return LinearModel("logistic", classes, res.x[: k * d].reshape(k, d).copy(),
                       res.x[k * d:].copy(), list(names), meta)


def train_linear_svm(features, labels, c: float = 1.0, max_iter: int = 1000,
                     tol: float = 1e-8, seed: int = 0,
                     feature_names: Optional[List[str]] = None) -> LinearModel:
    """One-vs-rest linear SVM with squared hinge loss, fit by L-BFGS.

    Per class: (0.5 ||w||^2 + c * sum_i max(0, 1 - y_i f_i)^2) / n. Squared
    hinge keeps the objective smooth for the quasi-Newton solver while
    preserving the max-margin behavior.
    """
    x = _check_features(features)
    classes, y = _encode_labels(labels)
    n, d = x.shape
    weights = np.zeros((len(classes), d))
    bias = np.zeros(len(classes))
    converged = True
    for ci in range(len(classes)):
        sign = np.where(y == ci, 1.0, -1.0)

        def objective(theta, sign=sign):
            w, b = theta[:d], theta[d]
            margin = 1.0 - sign * (x @ w + b)
            viol = np.maximum(margin, 0.0)
            obj = (0.5 * np.dot(w, w) + c * np.sum(viol ** 2)) / n
            dmargin = -2.0 * c * viol * sign / n
            gw = w / n + x.T @ dmargin
            gb = dmargin.sum()
            return obj, np.concatenate([gw, [gb]])

        res = minimize(objective, np.zeros(d + 1), jac=True, method="L-BFGS-B",
                       options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-10})
        converged = converged and bool(res.success)
        weights[ci] = res.x[:d]
        bias[ci] = res.x[d]
    meta = {"converged": converged, "c": c, "tol": tol, "seed": seed}
    if not converged:
        meta["warning"] = "one or more per-class fits stopped early"
    names = feature_names or [f"f{i}" for i in range(d)]
    return LinearModel("linear_svm", classes, weights, bias, list(names), meta)


def decision_scores(model: LinearModel, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != model.weights.shape[1]:
            raise DataError(
                f"feature length {x.shape[0]} != model width {model.weights.shape[1]}")
        return model.weights @ x + model.bias
    if x.shape[1] != model.weights.shape[1]:
        raise DataError(
            f"feature width {x.shape[1]} != model width {model.weights.shape[1]}")
    return x @ model.weights.T + model.bias


def predict(model: LinearModel, features) -> Tuple[str, Dict[str, float]]:
    """Argmax of affine scores; ties break toward the earlier class."""
    z = decision_scores(model, features)
    if z.ndim != 1:
        raise DataError("predict takes a single feature vector")
    label = model.classes[int(np.argmax(z))]
    return label, dict(zip(model.classes, z.tolist()))


def predict_proba(model: LinearModel, features) -> Dict[str, float]:
    """Softmax probabilities (meaningful for logistic models)."""
    z = decision_scores(model, features)
    p = np.exp(z - logsumexp(z))
    return dict(zip(model.classes, p.tolist()))


def predict_batch(model: LinearModel, features) -> List[str]:
    z = decision_scores(model, np.atleast_2d(np.asarray(features, dtype=np.float64)))
    return [model.classes[i] for i in np.argmax(z, axis=1)]


# ---------------------------------------------------------------------------
# Serialization: versioned JSON
# ---------------------------------------------------------------------------

MODEL_FORMAT = "mgtlab-linear-model"
MODEL_VERSION = 1


def model_to_dict(model: LinearModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": model.kind,
        "classes": list(model.classes),
        "weights": model.weights.tolist(),
        "bias": model.bias.tolist(),
        "feature_names": list(model.feature_names),
        "metadata": model.metadata,
    }


def model_from_dict(d: dict) -> LinearModel:
    if d.get("format") != MODEL_FORMAT:
        raise ContractError(f"not a linear model blob: format={d.get('format')!r}")
    if d.get("version") != MODEL_VERSION:
        raise ContractError(f"unsupported model version {d.get('version')!r}")
    return LinearModel(d["kind"], list(d["classes"]),
                       np.array(d["weights"], dtype=np.float64),
                       np.array(d["bias"], dtype=np.float64),
                       list(d["feature_names"]), dict(d.get("metadata", {})))


def save_model(model: LinearModel, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model_to_dict(model), f, indent=2)
        f.write("\n")


def load_model(path: str) -> LinearModel:
    with open(path, "r", encoding="utf-8") as f:
        return model_from_dict(json.load(f))
