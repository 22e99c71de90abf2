"""Token-scoring contract over pluggable proxy language models.

Conventions shared by every backend:
  * natural logarithms everywhere;
  * ranks are 1-based positions of the realized token in the backend's
    next-token distribution ordered by descending probability, ties broken
    by token string (lexicographic) so identical inputs always give
    identical outputs;
  * entropies are Shannon entropies of the predictive distribution, in nats;
  * position 0 is scored against the empty context (a drop-first switch is
    available for ablations via :meth:`TokenScores.without_first`).

The reference backend is a Laplace-smoothed unigram model fit on a token
stream: p(w) = (count(w)+1) / (N+V).  Every number it produces is
hand-computable, which is what the oracle tests lean on.
"""

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from .util import ContractError, DataError, content_key


@dataclass
class TokenScores:
    """Per-token log-probabilities, ranks and predictive entropies."""

    tokens: List[str]
    logprobs: List[float]
    ranks: List[int]
    entropies: List[float]

    def validate(self) -> "TokenScores":
        n = len(self.tokens)
        if not (len(self.logprobs) == len(self.ranks) == len(self.entropies) == n):
            raise ContractError(
                "TokenScores lists disagree in length: "
                f"{n} tokens, {len(self.logprobs)} logprobs, "
                f"{len(self.ranks)} ranks, {len(self.entropies)} entropies")
        for lp in self.logprobs:
            if lp > 1e-12:
                raise ContractError(f"log-probability above 0: {lp}")
        for r in self.ranks:
            if r < 1:
                raise ContractError(f"rank below 1: {r}")
        for e in self.entropies:
            if e < -1e-12:
                raise ContractError(f"negative entropy: {e}")
        return self

    def __len__(self) -> int:
        return len(self.tokens)

    def without_first(self) -> "TokenScores":
        """Ablation helper: drop the context-free position 0."""
        if len(self.tokens) < 2:
            raise DataError("cannot drop the first position of a 1-token score")
        return TokenScores(self.tokens[1:], self.logprobs[1:],
                           self.ranks[1:], self.entropies[1:])


@dataclass
class NextTokenDistribution:
    support: List[str]
    probs: List[float]

    def validate(self) -> "NextTokenDistribution":
        if len(self.support) != len(self.probs):
            raise ContractError("support/probs length mismatch")
        if len(set(self.support)) != len(self.support):
            raise ContractError("duplicate tokens in distribution support")
        if any(p < 0 for p in self.probs):
            raise ContractError("negative probability in distribution")
        total = sum(self.probs)
        if abs(total - 1.0) > 1e-9:
            raise ContractError(f"distribution sums to {total!r}, not 1")
        return self

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.support, self.probs))


class ScorerBackend:
    """Contract all backends implement. Deterministic: same input, same output."""

    name: str = "backend"

    def tokenize(self, text: str) -> List[str]:
        raise NotImplementedError

    def score_tokens(self, text: str) -> TokenScores:
        raise NotImplementedError

    def next_token_distribution(self, context: Sequence[str]) -> NextTokenDistribution:
        raise NotImplementedError

    @property
    def vocabulary(self) -> Optional[List[str]]:
        """Sorted token set, or None when the backend cannot enumerate it."""
        return None


class UnigramBackend(ScorerBackend):
    """Context-free reference backend over an explicit probability table."""

    def __init__(self, probs: Dict[str, float], name: str = "unigram"):
        if not probs:
            raise DataError("empty probability table")
        self.name = name
        self._probs = dict(probs)
        # descending probability, lexicographic tie-break -> 1-based ranks
        ordered = sorted(self._probs.items(), key=lambda kv: (-kv[1], kv[0]))
        self._rank = {tok: i + 1 for i, (tok, _) in enumerate(ordered)}
        self._logp = {tok: math.log(p) for tok, p in self._probs.items()}
        self._entropy = -sum(p * math.log(p) for p in self._probs.values() if p > 0)
        self._vocab = sorted(self._probs)

    @property
    def vocabulary(self) -> List[str]:
        return list(self._vocab)

    def tokenize(self, text: str) -> List[str]:
        return text.lower().split()

    def _check(self, token: str) -> None:
        if token not in self._probs:
            raise DataError(f"token {token!r} not in backend vocabulary")

    def score_tokens(self, text: str) -> TokenScores:
        tokens = self.tokenize(text)
        if not tokens:
            raise DataError("cannot score empty text")
        for t in tokens:
            self._check(t)
        return TokenScores(
            tokens=tokens,
            logprobs=[self._logp[t] for t in tokens],
            ranks=[self._rank[t] for t in tokens],
            entropies=[self._entropy] * len(tokens),
        ).validate()

    def next_token_distribution(self, context: Sequence[str]) -> NextTokenDistribution:
        for t in context:
            self._check(t)
        support = list(self._vocab)
        return NextTokenDistribution(
            support=support, probs=[self._probs[t] for t in support]).validate()


def fit_reference_unigram(corpus: str, name: str = "unigram") -> UnigramBackend:
    """Laplace-smoothed unigram over lowercase whitespace words.

    p(w) = (count(w)+1)/(N+V); probabilities sum to 1 over the observed
    vocabulary by construction.
    """
    tokens = corpus.lower().split()
    if not tokens:
        raise DataError("cannot fit a unigram model on an empty corpus")
    counts: Dict[str, int] = {}
    for t in tokens:
        counts[t] = counts.get(t, 0) + 1
    n, v = len(tokens), len(counts)
    probs = {w: (c + 1) / (n + v) for w, c in counts.items()}
    return UnigramBackend(probs, name=name)


class TransportError(Exception):
    """Retriable transport failure talking to a scoring service."""


class ScoreCache:
    """Content-addressed on-disk cache of scoring-service responses.

    One JSON file per key; writes go through a temp file + atomic rename so
    concurrent readers never observe a torn record.
    """

    def __init__(self, directory: str):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    def _path(self, key: str) -> str:
        return os.path.join(self.directory, key + ".json")

    def get(self, key: str):
        path = self._path(key)
        if not os.path.exists(path):
            return None
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)

    def put(self, key: str, payload) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(payload, f)
            os.replace(tmp, self._path(key))
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)


class ExternalBackend(ScorerBackend):
    """Adapter for a scoring service speaking the wire contract:

        POST {url}/score         {"text": str}      -> {"tokens": [...], "logprobs": [...],
                                                        "ranks": [...], "entropies": [...]}
        POST {url}/distribution  {"context": [...]} -> {"support": [...], "probs": [...]}

    Responses are cached by (backend name, request kind, payload); repeated
    calls hit the disk cache, not the service.
    """

    def __init__(self, url: str, name: Optional[str] = None,
                 cache_dir: Optional[str] = None, timeout: float = 30.0,
                 retries: int = 2):
        self.url = url.rstrip("/")
        self.name = name or f"external:{self.url}"
        self.cache = ScoreCache(cache_dir) if cache_dir else None
        self.timeout = timeout
        self.retries = retries
        self.service_calls = 0  # instrumentation for cache tests

    # -- wire ---------------------------------------------------------------
    def _post(self, route: str, payload: dict) -> dict:
        import requests

        last = None
        for _ in range(self.retries + 1):
            try:
                resp = requests.post(self.url + route, json=payload,
                                     timeout=self.timeout)
            except requests.RequestException as exc:
                last = exc
                continue
            if resp.status_code >= 500:
                last = TransportError(f"{route}: HTTP {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise ContractError(f"{route}: HTTP {resp.status_code}")
            self.service_calls += 1
            try:
                return resp.json()
            except ValueError as exc:
                raise ContractError(f"{route}: non-JSON response") from exc
        raise TransportError(f"scoring service unreachable: {last}")

    def _cached(self, kind: str, route: str, payload: dict) -> dict:
        key = content_key(self.name, kind, json.dumps(payload, sort_keys=True))
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return hit
        body = self._post(route, payload)
        if self.cache is not None:
            self.cache.put(key, body)
        return body

    # -- backend contract ---------------------------------------------------
    def tokenize(self, text: str) -> List[str]:
        return self.score_tokens(text).tokens

    def score_tokens(self, text: str) -> TokenScores:
        if not text.strip():
            raise DataError("cannot score empty text")
        body = self._cached("score", "/score", {"text": text})
        try:
            scores = TokenScores(
                tokens=list(body["tokens"]), logprobs=list(body["logprobs"]),
                ranks=list(body["ranks"]), entropies=list(body["entropies"]))
        except (KeyError, TypeError) as exc:
            raise ContractError(f"malformed score response: {exc}") from exc
        return scores.validate()

    def next_token_distribution(self, context: Sequence[str]) -> NextTokenDistribution:
        body = self._cached("distribution", "/distribution",
                            {"context": list(context)})
        try:
            dist = NextTokenDistribution(support=list(body["support"]),
                                         probs=list(body["probs"]))
        except (KeyError, TypeError) as exc:
            raise ContractError(f"malformed distribution response: {exc}") from exc
        return dist.validate()


def external_backend(endpoint: str, **kwargs) -> ExternalBackend:
    """Build a backend from a scoring-service descriptor (base URL)."""
    return ExternalBackend(endpoint, **kwargs)
