"""Experiment protocols and reporting.

Protocols mirror the evaluation pipeline: in-distribution (seeded 80/20
split, calibrate/train on train, evaluate on test), domain/LLM transfer
(fit on source, evaluate on every target; the diagonal is in-distribution),
few-shot transfer (k labeled target examples per class join the source
training data), and class-incremental adaptation. Every protocol is a pure
function of (corpora, config, seed): re-runs are byte-identical, and reports
serialize to JSON or long-format CSV — rendering belongs to downstream
tools.
"""

import csv
import io
import json
import random
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import Document, split_train_test
from .decision import (apply_threshold, calibrate_threshold, predict_batch,
                       train_linear_svm, train_logistic)
from .detectors import FeatureVector, get_detector, score_text, DETECTORS
from .continual import (CILConfig, CILState, ExemplarStore, cil_update,
                        corrected_logits, select_exemplars, TECHNIQUES)
from .neural import TrainConfig, train_supervised
from .util import ContractError, DataError, config_hash, derive_seed

BINARY = "binary"
ATTRIBUTION = "attribution"
SUPERVISED = "supervised"


# ---------------------------------------------------------------------------
# Metrics and reports
# ---------------------------------------------------------------------------

def f1(preds: Sequence[str], labels: Sequence[str], positive: str) -> float:
    """F1 = 2PR/(P+R) for one positive class, or unweighted macro mean.

    Zero-denominator precision or recall counts as 0 (degenerate classes
    score 0 rather than poisoning the mean).
    """
    if len(preds) != len(labels):
        raise DataError("preds/labels length mismatch")
    if positive == "macro":
        classes = sorted(set(labels) | set(preds))
        return float(np.mean([f1(preds, labels, c) for c in classes]))
    tp = sum(1 for p, l in zip(preds, labels) if p == positive and l == positive)
    fp = sum(1 for p, l in zip(preds, labels) if p == positive and l != positive)
    fn = sum(1 for p, l in zip(preds, labels) if p != positive and l == positive)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


@dataclass
class EvalReport:
    task: str
    classes: List[str]
    per_class: Dict[str, Dict[str, float]]   # class -> precision/recall/f1/support
    macro_f1: float
    confusion: List[List[int]]               # rows true, cols predicted
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "classes": list(self.classes),
            "per_class": {c: self.per_class[c] for c in self.classes},
            "macro_f1": self.macro_f1,
            "confusion": self.confusion,
            "metadata": self.metadata,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        return EvalReport(d["task"], list(d["classes"]),
                          {c: dict(v) for c, v in d["per_class"].items()},
                          float(d["macro_f1"]),
                          [list(row) for row in d["confusion"]],
                          dict(d.get("metadata", {})))

    def class_f1(self, cls: str) -> float:
        return self.per_class[cls]["f1"]


def classification_report(preds: Sequence[str], labels: Sequence[str],
                          classes: Sequence[str], task: str,
                          metadata: Optional[dict] = None) -> EvalReport:
    if len(preds) != len(labels):
        raise DataError("preds/labels length mismatch")
    classes = list(classes)
    index = {c: i for i, c in enumerate(classes)}
    k = len(classes)
    confusion = [[0] * k for _ in range(k)]
    for p, l in zip(preds, labels):
        if l not in index:
            raise DataError(f"label {l!r} outside class list")
        if p not in index:
            raise DataError(f"prediction {p!r} outside class list")
        confusion[index[l]][index[p]] += 1
    per_class = {}
    f1s = []
    for i, c in enumerate(classes):
        tp = confusion[i][i]
        support = sum(confusion[i])
        pred_count = sum(confusion[r][i] for r in range(k))
        precision = tp / pred_count if pred_count else 0.0
        recall = tp / support if support else 0.0
        cf1 = (2 * precision * recall / (precision + recall)
               if precision + recall else 0.0)
        per_class[c] = {"precision": precision, "recall": recall,
                        "f1": cf1, "support": support}
        f1s.append(cf1)
    return EvalReport(task, classes, per_class, float(np.mean(f1s)),
                      confusion, metadata or {})


@dataclass
class TransferMatrix:
    axis: str                                 # "domain" | "llm"
    sources: List[str]
    targets: List[str]
    cells: Dict[str, Dict[str, EvalReport]]   # cells[source][target]

    def cell(self, source: str, target: str) -> EvalReport:
        return self.cells[source][target]

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "sources": list(self.sources),
            "targets": list(self.targets),
            "cells": {s: {t: self.cells[s][t].to_dict() for t in self.targets}
                      for s in self.sources},
        }

    @staticmethod
    def from_dict(d: dict) -> "TransferMatrix":
        return TransferMatrix(
            d["axis"], list(d["sources"]), list(d["targets"]),
            {s: {t: EvalReport.from_dict(d["cells"][s][t])
                 for t in d["targets"]} for s in d["sources"]})


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass
class BenchConfig:
    seed: int = 0
    ratio: float = 0.8
    task: str = BINARY                 # "binary" | "attribution"
    decision: str = "threshold"        # metric detectors: "threshold" | "classifier"
    classifier: str = "logistic"       # shallow model kind: "logistic" | "linear_svm"
    calibration_cap: int = 1000        # zero-shot calibration sample cap
    supervised_cap: int = 10000        # supervised fine-tuning sample cap
    test_cap: int = 2000
    skip_first: bool = False           # drop the context-free first token score
    train: TrainConfig = field(default_factory=TrainConfig)
    cil: CILConfig = field(default_factory=CILConfig)
    cil_base_epochs: int = 2
    exemplar_budget: int = 100

    def hash(self) -> str:
        return config_hash(asdict(self))


def _binary_label(doc: Document) -> str:
    return "human" if doc.is_human() else "machine"


def _task_label(doc: Document, task: str) -> str:
    if task == BINARY:
        return _binary_label(doc)
    if task == ATTRIBUTION:
        return doc.label
    raise ContractError(f"unknown task {task!r}")


def _cap(docs: Sequence[Document], n: int, seed: int, name: str) -> List[Document]:
    """Deterministic subsample: shuffle under a derived seed, take n."""
    if len(docs) <= n:
        return list(docs)
    pool = sorted(docs, key=lambda d: d.id)
    random.Random(derive_seed(seed, name)).shuffle(pool)
    return pool[:n]


def _balance(docs: Sequence[Document], task: str, seed: int, name: str,
             total_cap: Optional[int] = None) -> List[Document]:
    """Equal per-class counts (seeded subsample), optionally capped overall."""
    groups: Dict[str, List[Document]] = {}
    for d in docs:
        groups.setdefault(_task_label(d, task), []).append(d)
    m = min(len(g) for g in groups.values())
    if total_cap is not None:
        m = min(m, max(1, total_cap // len(groups)))
    out: List[Document] = []
    for label in sorted(groups):
        pool = sorted(groups[label], key=lambda d: d.id)
        random.Random(derive_seed(seed, f"{name}:{label}")).shuffle(pool)
        out.extend(pool[:m])
    return out


# ---------------------------------------------------------------------------
# Fit / predict plumbing shared by every protocol
# ---------------------------------------------------------------------------

def _features_of(value) -> Tuple[List[float], List[str]]:
    if isinstance(value, FeatureVector):
        return list(value.values), list(value.names)
    return [float(value)], ["score"]


def _fit_decision(train_docs: Sequence[Document], detector: str, backends,
                  config: BenchConfig):
    """Calibrate/train the decision stage on training documents."""
    if detector == SUPERVISED:
        docs = _cap(train_docs, config.supervised_cap, config.seed,
                    "cap:train-supervised")
        pairs = [(d, _task_label(d, config.task)) for d in docs]
        model = train_supervised(pairs, config.train)
        return ("neural", model)
    spec = get_detector(detector)
    docs = _cap(train_docs, config.calibration_cap, config.seed,
                "cap:train-metric")
    values = [score_text(detector, backends, d.text, config.skip_first)
              for d in docs]
    labels = [_task_label(d, config.task) for d in docs]
    if config.decision == "threshold":
        if config.task != BINARY:
            raise ContractError("threshold decision applies to the binary task only")
        if spec.vector_valued:
            raise ContractError(
                f"{detector} is vector-valued; use the classifier decision mode")
        rule = calibrate_threshold([float(v) for v in values], labels,
                                   direction=spec.direction, detector=detector)
        return ("threshold", rule)
    if config.decision == "classifier":
        feats, names = zip(*(_features_of(v) for v in values))
        names = names[0]
        if config.classifier == "logistic":
            model = train_logistic(list(feats), labels, feature_names=list(names))
        elif config.classifier == "linear_svm":
            model = train_linear_svm(list(feats), labels,
                                     feature_names=list(names))
        else:
            raise ContractError(f"unknown classifier kind {config.classifier!r}")
        return ("linear", model)
    raise ContractError(f"unknown decision mode {config.decision!r}")


def _predict_decision(fitted, docs: Sequence[Document], detector: str,
                      backends, config: BenchConfig) -> List[str]:
    kind, obj = fitted
    if kind == "neural":
        X = obj.encoder.encode_batch([d.text for d in docs])
        z = obj.logits_batch(X)
        return [obj.classes[i] for i in np.argmax(z, axis=1)]
    values = [score_text(detector, backends, d.text, config.skip_first)
              for d in docs]
    if kind == "threshold":
        return [apply_threshold(obj, float(v)) for v in values]
    feats = [_features_of(v)[0] for v in values]
    return predict_batch(obj, feats)


def _test_pool(split_test: Sequence[Document], config: BenchConfig,
               seed_name: str) -> List[Document]:
    if config.task == ATTRIBUTION:
        return _balance(split_test, config.task, config.seed, seed_name,
                        total_cap=config.test_cap)
    return _cap(split_test, config.test_cap, config.seed, seed_name)


def _run_cell(train_docs, test_docs, detector, backends, config,
              metadata: dict) -> EvalReport:
    fitted = _fit_decision(train_docs, detector, backends, config)
    preds = _predict_decision(fitted, test_docs, detector, backends, config)
    labels = [_task_label(d, config.task) for d in test_docs]
    classes = (["human", "machine"] if config.task == BINARY
               else sorted(set(labels)))
    md = {"detector": detector, "task": config.task,
          "decision": (SUPERVISED if detector == SUPERVISED else config.decision),
          "seed": config.seed, "config": config.hash(),
          "n_train": len(train_docs), "n_test": len(test_docs)}
    md.update(metadata)
    if fitted[0] == "threshold":
        md["threshold"] = fitted[1].threshold
        md["direction"] = fitted[1].direction
        md["train_f1"] = fitted[1].train_f1
    return classification_report(preds, labels, classes, config.task, md)


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------

def run_in_distribution(corpus: Sequence[Document], detector: str, backends,
                        config: Optional[BenchConfig] = None) -> EvalReport:
    """Seeded split of one corpus; fit on train, report on test."""
    config = config or BenchConfig()
    split = split_train_test(corpus, config.ratio,
                             derive_seed(config.seed, "split"))
    test = _test_pool(split.test, config, "cap:test")
    return _run_cell(split.train, test, detector, backends, config,
                     {"protocol": "in_distribution"})


def run_transfer(corpora: Dict[str, Sequence[Document]], axis: str,
                 detector: str, backends,
                 config: Optional[BenchConfig] = None) -> TransferMatrix:
    """Fit on each source's train split, evaluate on every target's test
    split. The diagonal reproduces run_in_distribution."""
    config = config or BenchConfig()
    if axis not in ("domain", "llm"):
        raise ContractError(f"axis must be 'domain' or 'llm', got {axis!r}")
    if len(corpora) < 2:
        raise DataError("need >= 2 corpora for a transfer matrix")
    keys = sorted(corpora)
    splits = {k: split_train_test(corpora[k], config.ratio,
                                  derive_seed(config.seed, "split"))
              for k in keys}
    tests = {k: _test_pool(splits[k].test, config, "cap:test") for k in keys}
    cells: Dict[str, Dict[str, EvalReport]] = {}
    for source in keys:
        fitted = _fit_decision(splits[source].train, detector, backends, config)
        row: Dict[str, EvalReport] = {}
        for target in keys:
            preds = _predict_decision(fitted, tests[target], detector,
                                      backends, config)
            labels = [_task_label(d, config.task) for d in tests[target]]
            classes = (["human", "machine"] if config.task == BINARY
                       else sorted(set(labels)))
            md = {"detector": detector, "task": config.task,
                  "decision": (SUPERVISED if detector == SUPERVISED
                               else config.decision),
                  "seed": config.seed, "config": config.hash(),
                  "n_train": len(splits[source].train),
                  "n_test": len(tests[target]),
                  "protocol": "transfer", "axis": axis,
                  "source": source, "target": target}
            if fitted[0] == "threshold":
                md["threshold"] = fitted[1].threshold
                md["direction"] = fitted[1].direction
                md["train_f1"] = fitted[1].train_f1
            row[target] = classification_report(preds, labels, classes,
                                                config.task, md)
        cells[source] = row
    return TransferMatrix(axis, keys, keys, cells)


def run_few_shot(source: Sequence[Document], target: Sequence[Document],
                 k: int, detector: str, backends,
                 config: Optional[BenchConfig] = None) -> EvalReport:
    """Transfer with k seeded target-train examples per class added to the
    source training set. k=0 reduces exactly to the plain transfer cell."""
    config = config or BenchConfig()
    if k < 0:
        raise DataError("k must be >= 0")
    src = split_train_test(source, config.ratio, derive_seed(config.seed, "split"))
    tgt = split_train_test(target, config.ratio, derive_seed(config.seed, "split"))
    groups: Dict[str, List[Document]] = {}
    for d in tgt.train:
        groups.setdefault(_task_label(d, config.task), []).append(d)
    shots: List[Document] = []
    for label in sorted(groups):
        pool = sorted(groups[label], key=lambda d: d.id)
        if k > len(pool):
            raise DataError(
                f"k={k} exceeds {len(pool)} target-train documents of class {label!r}")
        rng = random.Random(derive_seed(config.seed, f"fewshot:{label}"))
        shots.extend(rng.sample(pool, k))
    train_docs = list(src.train) + shots
    test = _test_pool(tgt.test, config, "cap:test")
    return _run_cell(train_docs, test, detector, backends, config,
                     {"protocol": "few_shot", "k": k,
                      "shot_ids": sorted(d.id for d in shots)})


def run_cil(corpus: Sequence[Document], techniques: Sequence[str],
            new_classes: Sequence[str],
            config: Optional[BenchConfig] = None) -> Dict[str, List[EvalReport]]:
    """Class-incremental protocol on an attribution corpus.

    Train the base model on every class except the held-out new one(s)
    (cil_base_epochs), then apply each update technique; every stage is
    evaluated on one balanced all-class test split. "joint" is the
    upper bound trained on all classes at once.
    """
    config = config or BenchConfig()
    for t in techniques:
        if t not in TECHNIQUES:
            raise ContractError(
                f"unknown technique {t!r}; known: {', '.join(TECHNIQUES)}")
    all_labels = sorted({d.label for d in corpus})
    for c in new_classes:
        if c not in all_labels:
            raise DataError(f"new class {c!r} not present in the corpus")
    base_classes = [c for c in all_labels if c not in new_classes]
    if len(base_classes) < 2:
        raise DataError("need >= 2 base classes")

    split = split_train_test(corpus, config.ratio,
                             derive_seed(config.seed, "split"))
    test = _balance(split.test, ATTRIBUTION, config.seed, "cil:test",
                    total_cap=config.test_cap)
    test_labels = [d.label for d in test]

    base_cfg = TrainConfig(learning_rate=config.train.learning_rate,
                           batch_size=config.train.batch_size,
                           epochs=config.cil_base_epochs,
                           seed=config.train.seed,
                           class_weights=config.train.class_weights)
    base_train = [d for d in split.train if d.label in base_classes]
    base_train = _cap(base_train, config.supervised_cap, config.seed,
                      "cap:cil-base")
    base_model = train_supervised([(d, d.label) for d in base_train], base_cfg)

    per_class_counts = {c: sum(1 for d in base_train if d.label == c)
                        for c in base_classes}
    store = ExemplarStore(budget_per_class=config.exemplar_budget)
    for c in base_classes:
        docs = [d for d in base_train if d.label == c]
        store.set(c, select_exemplars(
            base_model.embed_hidden, docs, config.exemplar_budget,
            seed=derive_seed(config.seed, f"cil:exemplars:{c}")))

    def evaluate(predict, metadata) -> EvalReport:
        preds = [predict(d) for d in test]
        md = {"task": ATTRIBUTION, "seed": config.seed,
              "config": config.hash(), "n_test": len(test)}
        md.update(metadata)
        return classification_report(preds, test_labels, all_labels,
                                     ATTRIBUTION, md)

    def base_predict(doc):
        return base_model.classes[int(np.argmax(base_model.predict_logits(doc)))]

    stage0 = evaluate(base_predict,
                      {"protocol": "cil", "stage": 0, "technique": "base",
                       "head_dim": len(base_classes)})

    new_cap = max(per_class_counts.values())
    new_pairs: List[Tuple[Document, str]] = []
    for c in new_classes:
        docs = _cap([d for d in split.train if d.label == c], new_cap,
                    config.seed, f"cap:cil-new:{c}")
        new_pairs.extend((d, c) for d in docs)

    results: Dict[str, List[EvalReport]] = {}
    for technique in techniques:
        state = CILState(model=base_model, classes=list(base_model.classes),
                         exemplars=store, base_config=base_cfg)
        updated = cil_update(state, new_pairs, technique, config.cil)
        stage1 = evaluate(
            lambda d: updated.classes[int(np.argmax(corrected_logits(updated, d)))],
            {"protocol": "cil", "stage": 1, "technique": technique,
             "head_dim": len(updated.classes)})
        results[technique] = [stage0, stage1]

    joint_train = _cap(list(split.train), config.supervised_cap, config.seed,
                       "cap:cil-joint")
    joint_model = train_supervised([(d, d.label) for d in joint_train], base_cfg)

    def joint_predict(doc):
        return joint_model.classes[int(np.argmax(joint_model.predict_logits(doc)))]

    results["joint"] = [evaluate(joint_predict,
                                 {"protocol": "cil", "stage": 1,
                                  "technique": "joint",
                                  "head_dim": len(all_labels)})]
    return results


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def _to_payload(obj):
    if isinstance(obj, EvalReport):
        return {"kind": "eval_report", **obj.to_dict()}
    if isinstance(obj, TransferMatrix):
        return {"kind": "transfer_matrix", **obj.to_dict()}
    if isinstance(obj, dict):   # CIL result: technique -> [stage reports]
        return {"kind": "cil_result",
                "techniques": {t: [r.to_dict() for r in reports]
                               for t, reports in sorted(obj.items())}}
    raise ContractError(f"cannot emit object of type {type(obj).__name__}")


def _csv_rows(payload) -> List[List[str]]:
    kind = payload["kind"]
    if kind == "eval_report":
        rows = [["class", "precision", "recall", "f1", "support"]]
        for c in payload["classes"]:
            m = payload["per_class"][c]
            rows.append([c, repr(m["precision"]), repr(m["recall"]),
                         repr(m["f1"]), str(int(m["support"]))])
        rows.append(["macro", "", "", repr(payload["macro_f1"]), ""])
        return rows
    if kind == "transfer_matrix":
        rows = [["source", "target", "metric", "value"]]
        for s in payload["sources"]:
            for t in payload["targets"]:
                cell = payload["cells"][s][t]
                rows.append([s, t, "macro_f1", repr(cell["macro_f1"])])
                for c in cell["classes"]:
                    rows.append([s, t, f"f1:{c}",
                                 repr(cell["per_class"][c]["f1"])])
        return rows
    if kind == "cil_result":
        rows = [["technique", "stage", "metric", "value"]]
        for t in sorted(payload["techniques"]):
            for rep in payload["techniques"][t]:
                stage = rep["metadata"].get("stage", "")
                rows.append([t, str(stage), "macro_f1", repr(rep["macro_f1"])])
                for c in rep["classes"]:
                    rows.append([t, str(stage), f"f1:{c}",
                                 repr(rep["per_class"][c]["f1"])])
        return rows
    raise ContractError(f"cannot render CSV for {kind!r}")


def emit_report(obj, fmt: str, path: str) -> str:
    """Serialize a report/matrix/CIL result with stable field order.

    json round-trips the full structure; csv is flat (long format for
    matrices and CIL results). Byte output is deterministic for fixed input.
    """
    payload = _to_payload(obj)
    if fmt == "json":
        blob = json.dumps(payload, indent=2, ensure_ascii=False) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerows(_csv_rows(payload))
        blob = buf.getvalue()
    else:
        raise ContractError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(blob)
    return path


def load_report(path: str):
    """Inverse of emit_report for JSON payloads."""
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    kind = payload.get("kind")
    if kind == "eval_report":
        return EvalReport.from_dict(payload)
    if kind == "transfer_matrix":
        return TransferMatrix.from_dict(payload)
    if kind == "cil_result":
        return {t: [EvalReport.from_dict(r) for r in reports]
                for t, reports in payload["techniques"].items()}
    raise ContractError(f"unrecognized report payload kind {kind!r}")


# ---------------------------------------------------------------------------
# Registries
# ---------------------------------------------------------------------------

class Registry:
    """Name -> constructor maps for detectors and experiment protocols.
    Unknown names are errors, never silent defaults."""

    def __init__(self):
        self.detectors: Dict[str, object] = dict(DETECTORS)
        self.detectors[SUPERVISED] = SUPERVISED
        self.experiments = {
            "in_distribution": run_in_distribution,
            "transfer": run_transfer,
            "few_shot": run_few_shot,
            "cil": run_cil,
        }

    def get_detector(self, name: str):
        if name not in self.detectors:
            raise ContractError(
                f"unknown detector {name!r}; known: "
                + ", ".join(sorted(self.detectors)))
        return self.detectors[name]

    def get_experiment(self, name: str):
        if name not in self.experiments:
            raise ContractError(
                f"unknown experiment {name!r}; known: "
                + ", ".join(sorted(self.experiments)))
        return self.experiments[name]


REGISTRY = Registry()
