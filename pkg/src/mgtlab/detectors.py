"""Metric detectors: token scores (and predictive distributions) to scalars.

Seven statistics over a proxy model's token scores. Scalar detectors carry a
fixed decision direction so calibration can auto-orient; the rank-histogram
features are vector-valued and feed a shallow classifier instead.
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

from .scorer import ScorerBackend, TokenScores
from .util import ContractError, DataError

HIGHER_IS_MACHINE = "higher_is_machine"
LOWER_IS_MACHINE = "lower_is_machine"


@dataclass
class FeatureVector:
    names: List[str]
    values: List[float]

    def validate(self) -> "FeatureVector":
        if len(self.names) != len(self.values):
            raise ContractError("feature names/values length mismatch")
        if len(set(self.names)) != len(self.names):
            raise ContractError("duplicate feature names")
        return self


@dataclass(frozen=True)
class DetectorSpec:
    name: str
    direction: Optional[str]          # None for vector-valued detectors
    arity: str                        # "one-backend" | "two-backend"
    fn: Optional[Callable] = None     # TokenScores -> float, for one-backend scalars
    vector_valued: bool = False


def _require_nonempty(s: TokenScores) -> None:
    if len(s) == 0:
        raise DataError("empty token scores")


def ll_score(s: TokenScores) -> float:
    """Mean token log-likelihood. Higher = more machine-like."""
    _require_nonempty(s)
    return sum(s.logprobs) / len(s)


def rank_score(s: TokenScores) -> float:
    """Mean 1-based token rank. Lower = more machine-like."""
    _require_nonempty(s)
    return sum(s.ranks) / len(s)


def log_rank_score(s: TokenScores) -> float:
    """Mean log rank. Lower = more machine-like."""
    _require_nonempty(s)
    return sum(math.log(r) for r in s.ranks) / len(s)


def lrr_score(s: TokenScores) -> float:
    """Likelihood/log-rank ratio: (-sum log p) / (sum log rank).

    Higher = more machine-like. Undefined when every rank is 1.
    """
    _require_nonempty(s)
    denom = sum(math.log(r) for r in s.ranks)
    if denom == 0.0:
        raise DataError("log-rank ratio undefined: all ranks are 1")
    return -sum(s.logprobs) / denom


def entropy_score(s: TokenScores) -> float:
    """Mean predictive entropy (nats). Lower = more machine-like."""
    _require_nonempty(s)
    return sum(s.entropies) / len(s)


GLTR_FEATURE_NAMES = ["rank_le_10", "rank_11_100", "rank_101_1000", "rank_gt_1000"]


def gltr_features(s: TokenScores) -> FeatureVector:
    """Fractions of tokens ranked in [1,10], (10,100], (100,1000], (1000,inf).

    Upper bucket edges are inclusive, so rank 10 lands in the first bucket.
    The four fractions always sum to 1.
    """
    _require_nonempty(s)
    buckets = [0, 0, 0, 0]
    for r in s.ranks:
        if r <= 10:
            buckets[0] += 1
        elif r <= 100:
            buckets[1] += 1
        elif r <= 1000:
            buckets[2] += 1
        else:
            buckets[3] += 1
    n = len(s)
    return FeatureVector(list(GLTR_FEATURE_NAMES),
                         [b / n for b in buckets]).validate()


def fast_detect_gpt_score(scoring: ScorerBackend, sampling: ScorerBackend,
                          text: str) -> float:
    """Analytic conditional probability curvature.

    With p the scoring and q the sampling distribution at each position,
    mu_t = E_{v~q_t}[log p_t(v)] and var_t = Var_{v~q_t}[log p_t(v)]; the
    score is (sum_t log p_t(x_t) - sum_t mu_t) / sqrt(sum_t var_t).
    Higher = more machine-like.
    """
    realized = scoring.score_tokens(text)
    tokens = realized.tokens
    total_mu = 0.0
    total_var = 0.0
    for t in range(len(tokens)):
        context = tokens[:t]
        p = scoring.next_token_distribution(context).as_dict()
        q = sampling.next_token_distribution(context)
        mu = 0.0
        second = 0.0
        for v, qv in zip(q.support, q.probs):
            if qv == 0.0:
                continue
            pv = p.get(v, 0.0)
            if pv <= 0.0:
                raise DataError(
                    f"sampling support token {v!r} outside scoring support")
            lp = math.log(pv)
            mu += qv * lp
            second += qv * lp * lp
        total_mu += mu
        total_var += second - mu * mu
    if total_var <= 0.0:
        raise DataError("degenerate distributions: zero curvature variance")
    return (sum(realized.logprobs) - total_mu) / math.sqrt(total_var)


def binoculars_score(observer: ScorerBackend, performer: ScorerBackend,
                     text: str) -> float:
    """Perplexity-to-cross-perplexity ratio. Lower = more machine-like.

    log-PPL is the performer's mean surprisal on the text; log-X-PPL is the
    mean cross-entropy of the observer's predictive distribution against the
    performer's, position by position.
    """
    perf = performer.score_tokens(text)
    n = len(perf)
    log_ppl = -sum(perf.logprobs) / n
    total_xent = 0.0
    for t in range(n):
        context = perf.tokens[:t]
        obs = observer.next_token_distribution(context)
        pperf = performer.next_token_distribution(context).as_dict()
        xent = 0.0
        for v, ov in zip(obs.support, obs.probs):
            if ov == 0.0:
                continue
            pv = pperf.get(v, 0.0)
            if pv <= 0.0:
                raise DataError(
                    f"observer support token {v!r} outside performer support")
            xent -= ov * math.log(pv)
        total_xent += xent
    log_xppl = total_xent / n
    if log_xppl < 1e-12:
        raise DataError("degenerate performer: cross-perplexity ~ 0")
    return log_ppl / log_xppl


DETECTORS: Dict[str, DetectorSpec] = {
    "LL": DetectorSpec("LL", HIGHER_IS_MACHINE, "one-backend", ll_score),
    "Rank": DetectorSpec("Rank", LOWER_IS_MACHINE, "one-backend", rank_score),
    "LogRank": DetectorSpec("LogRank", LOWER_IS_MACHINE, "one-backend",
                            log_rank_score),
    "LRR": DetectorSpec("LRR", HIGHER_IS_MACHINE, "one-backend", lrr_score),
    "Entropy": DetectorSpec("Entropy", LOWER_IS_MACHINE, "one-backend",
                            entropy_score),
    "GLTR": DetectorSpec("GLTR", None, "one-backend", None, vector_valued=True),
    "FastDetectGPT": DetectorSpec("FastDetectGPT", HIGHER_IS_MACHINE,
                                  "two-backend"),
    "Binoculars": DetectorSpec("Binoculars", LOWER_IS_MACHINE, "two-backend"),
}


def get_detector(name: str) -> DetectorSpec:
    if name not in DETECTORS:
        raise ContractError(
            f"unknown detector {name!r}; known: {', '.join(sorted(DETECTORS))}")
    return DETECTORS[name]


def score_text(name: str, backends: Dict[str, ScorerBackend], text: str,
               skip_first: bool = False):
    """Score one text with a named detector.

    `backends` roles: "scoring" always; "sampling" (curvature, defaults to
    scoring), "observer"/"performer" (cross-perplexity, default to scoring).
    Returns a float, or a FeatureVector for vector-valued detectors.
    skip_first drops the context-free first position for scalar statistics
    computed from token scores (two-backend detectors ignore it).
    """
    spec = get_detector(name)
    scoring = backends.get("scoring")
    if scoring is None:
        raise ContractError("backends must include a 'scoring' entry")
    if spec.name == "FastDetectGPT":
        return fast_detect_gpt_score(scoring, backends.get("sampling", scoring),
                                     text)
    if spec.name == "Binoculars":
        return binoculars_score(backends.get("observer", scoring),
                                backends.get("performer", scoring), text)
    s = scoring.score_tokens(text)
    if skip_first and len(s) > 1:
        s = s.without_first()
    if spec.vector_valued:
        return gltr_features(s)
    return spec.fn(s)
