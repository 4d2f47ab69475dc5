"""Benchmark collection against an OpenAI-compatible chat endpoint.

Request discipline:
  * every response is cached on disk, keyed by a digest of (base_url,
    model, prompt, pitch text, sampling params, sample index), and raw
    payloads are cached before any parsing;
  * cache hits never touch the network, which is also the resumption
    mechanism after an interrupt;
  * a semaphore bounds in-flight requests and a pacing lock bounds the
    issue rate, retries included;
  * transport failures retry with exponential backoff plus jitter, while
    auth and schema rejections fail immediately.

The MockTransport here is the reference test double: it timestamps every
call and tracks peak concurrency so rate/concurrency claims are assertable.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import classify
from .errors import (AuthError, NoLabelTokens, PartialCollection,
                     TransportError)
from .ingest import BenchmarkSet, PredictionRecord
from .tiers import TIER_ORDER, Tier

_PROMPT_DIR = Path(__file__).parent / "assets" / "prompts"


def list_prompts() -> list[str]:
    return sorted(p.stem for p in _PROMPT_DIR.glob("*.txt"))


def load_prompt(name: str) -> str:
    path = _PROMPT_DIR / f"{name}.txt"
    if not path.exists():
        raise FileNotFoundError(
            f"no prompt asset {name!r}; available: {', '.join(list_prompts())}")
    return path.read_text(encoding="utf-8")


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    max_concurrent: int = 4
    requests_per_minute: float = 600.0
    timeout_s: float = 60.0
    max_retries: int = 4
    backoff_base_s: float = 0.5
    backoff_cap_s: float = 30.0


# ---------------------------------------------------------------------------
# Transports


class HttpTransport:
    """POSTs chat completions with bearer auth from the configured env var."""

    def __init__(self, config: EndpointConfig):
        self.config = config

    def chat_completion(self, payload: dict) -> dict:
        import requests

        key = os.environ.get(self.config.api_key_env, "")
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = requests.post(url, json=payload,
                                 headers={"Authorization": f"Bearer {key}"},
                                 timeout=self.config.timeout_s)
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if 400 <= resp.status_code < 500 and resp.status_code != 429:
            raise AuthError(f"request rejected, HTTP {resp.status_code}: "
                            f"{resp.text[:200]}")
        if resp.status_code != 200:
            raise TransportError(f"HTTP {resp.status_code}")
        return resp.json()


@dataclass
class MockCall:
    timestamp: float
    payload: dict
    in_flight: int


class MockTransport:
    """Scripted stand-in for an endpoint.

    script is a callable (payload, call_index) -> response dict, or raises.
    Calls are timestamped and the concurrent in-flight peak is tracked.
    """

    def __init__(self, script, latency_s: float = 0.0):
        self.script = script
        self.latency_s = latency_s
        self.calls: list[MockCall] = []
        self._lock = threading.Lock()
        self._in_flight = 0
        self.max_in_flight = 0

    def chat_completion(self, payload: dict) -> dict:
        with self._lock:
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)
            index = len(self.calls)
            self.calls.append(MockCall(time.monotonic(), payload, self._in_flight))
        try:
            if self.latency_s:
                time.sleep(self.latency_s)
            return self.script(payload, index)
        finally:
            with self._lock:
                self._in_flight -= 1


def logprob_response(top_logprobs: dict[str, float]) -> dict:
    """Shape a first-position top-logprobs response like the live API."""
    return {"choices": [{"message": {"content": ""}, "logprobs": {"content": [
        {"top_logprobs": [{"token": tok, "logprob": lp}
                          for tok, lp in top_logprobs.items()]}]}}]}


def text_response(content: str) -> dict:
    return {"choices": [{"message": {"content": content}}]}


# ---------------------------------------------------------------------------
# Cache and pacing


class ResponseCache:
    """Content-addressed JSON blobs with atomic writes."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def put(self, key: str, payload: dict) -> None:
        final = self._path(key)
        with self._write_lock:
            tmp = final.with_suffix(".tmp")
            tmp.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
            os.replace(tmp, final)


def cache_key(base_url: str, model: str, prompt: str, pitch_text: str,
              params: dict, sample_index: int = 0) -> str:
    blob = json.dumps({"base_url": base_url, "model": model, "prompt": prompt,
                       "pitch": pitch_text, "params": params,
                       "sample": sample_index}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class RateLimiter:
    """Serializes request issue times to at most requests_per_minute."""

    def __init__(self, requests_per_minute: float):
        if requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        self.interval = 60.0 / requests_per_minute
        self._lock = threading.Lock()
        self._next_allowed = 0.0

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                if now >= self._next_allowed:
                    self._next_allowed = max(self._next_allowed, now) + self.interval
                    return
                wait = self._next_allowed - now
            time.sleep(wait)


# ---------------------------------------------------------------------------
# Label-token matching


def match_label_tokens(top_logprobs: dict[str, float]) -> dict[Tier, float]:
    """Map candidate tokens onto tiers by the label-prefix rule.

    A token counts for a tier when, lowercased and stripped of whitespace,
    punctuation, and markdown, it is a (possibly complete) prefix of exactly
    one tier name. Several tokens landing on one tier keep the max log-prob.
    """
    out: dict[Tier, float] = {}
    for token, lp in top_logprobs.items():
        norm = token
        for ch in "*_`#>~":
            norm = norm.replace(ch, "")
        norm = norm.strip().strip(".,!?:;\"'()[]").lower()
        if not norm:
            continue
        hits = [t for t in TIER_ORDER if t.label.startswith(norm)]
        if len(hits) != 1:
            continue
        tier = hits[0]
        if tier not in out or lp > out[tier]:
            out[tier] = lp
    if not out:
        raise NoLabelTokens(
            f"none of {sorted(top_logprobs)} match a tier label prefix")
    return out


# ---------------------------------------------------------------------------
# Collector


class Collector:
    def __init__(self, config: EndpointConfig, transport, cache: ResponseCache):
        self.config = config
        self.transport = transport
        self.cache = cache
        self.limiter = RateLimiter(config.requests_per_minute)
        self._gate = threading.Semaphore(config.max_concurrent)

    # -- single-request plumbing

    def _request(self, key: str, payload: dict) -> dict:
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        jitter = random.Random(key)
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                delay = min(self.config.backoff_cap_s,
                            self.config.backoff_base_s * 2 ** (attempt - 1))
                time.sleep(delay * (1.0 + jitter.random()))
            self.limiter.acquire()
            with self._gate:
                try:
                    response = self.transport.chat_completion(payload)
                except TransportError as exc:
                    last_error = exc
                    continue
            self.cache.put(key, response)  # raw payload, cached before parsing
            return response
        raise TransportError(f"gave up after {self.config.max_retries + 1} "
                             f"attempts: {last_error}")

    def _payload(self, prompt: str, pitch_text: str, params: dict) -> dict:
        return {"model": self.config.model,
                "messages": [{"role": "user",
                              "content": f"{prompt}\n\n{pitch_text}"}],
                **params}

    # -- public fetches

    def fetch_logprobs(self, prompt: str, pitch_text: str,
                       top_k: int = 20) -> dict[Tier, float]:
        """One deterministic request; top tokens at the first answer position."""
        params = {"max_tokens": 1, "temperature": 0, "logprobs": True,
                  "top_logprobs": top_k}
        key = cache_key(self.config.base_url, self.config.model, prompt,
                        pitch_text, params)
        response = self._request(key, self._payload(prompt, pitch_text, params))
        try:
            entries = response["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
            candidates = {e["token"]: float(e["logprob"]) for e in entries}
        except (KeyError, IndexError, TypeError):
            raise AuthError("response missing first-position top_logprobs") from None
        return match_label_tokens(candidates)

    def fetch_samples(self, prompt: str, pitch_text: str, n: int = 8,
                      temperature: float = 1.0) -> list[str]:
        """n independent sampled completions, each its own cache entry."""
        params = {"temperature": temperature}
        texts: dict[int, str] = {}
        missing: list[int] = []
        for i in range(n):
            key = cache_key(self.config.base_url, self.config.model, prompt,
                            pitch_text, params, sample_index=i)
            try:
                response = self._request(key, self._payload(prompt, pitch_text, params))
                texts[i] = str(response["choices"][0]["message"]["content"])
            except (TransportError, AuthError, KeyError, IndexError, TypeError):
                missing.append(i)
        if missing:
            raise PartialCollection(missing, collected=texts)
        return [texts[i] for i in range(n)]

    # -- whole-benchmark collection

    def collect_benchmark(self, bench: BenchmarkSet, prompt: str,
                          mode: str = "logprob", n_samples: int = 8,
                          temperature: float = 1.0,
                          evaluator_id: str | None = None,
                          journal_path: str | Path | None = None
                          ) -> tuple[list[PredictionRecord], dict]:
        """Collect every pitch, skating over per-pitch failures.

        Returns (records, manifest); the manifest lists failures by pitch
        id instead of aborting the run. Re-running after an interrupt only
        fetches what the cache does not already hold.
        """
        if mode not in ("logprob", "sampled"):
            raise ValueError(f"unknown mode: {mode!r}")
        evaluator_id = evaluator_id or self.config.model
        journal = Path(journal_path).open("a", encoding="utf-8") \
            if journal_path else None
        journal_lock = threading.Lock()
        failures: dict[str, str] = {}
        results: dict[str, PredictionRecord] = {}

        def one(pitch) -> None:
            try:
                if mode == "logprob":
                    lps = self.fetch_logprobs(prompt, pitch.text_full)
                    pred = classify.classify_logprob(lps, pitch_id=pitch.id)
                    results[pitch.id] = PredictionRecord(
                        evaluator_id=evaluator_id, pitch_id=pitch.id,
                        kind="logprob", distribution=pred.distribution,
                        confidence=pred.confidence)
                else:
                    texts = self.fetch_samples(prompt, pitch.text_full,
                                               n=n_samples, temperature=temperature)
                    runs = tuple((t, classify.parse_label_text(t)) for t in texts)
                    results[pitch.id] = PredictionRecord(
                        evaluator_id=evaluator_id, pitch_id=pitch.id,
                        kind="sampled", runs=runs)
            except (TransportError, AuthError, NoLabelTokens,
                    PartialCollection) as exc:
                failures[pitch.id] = f"{type(exc).__name__}: {exc}"
            if journal:
                status = "error" if pitch.id in failures else "ok"
                with journal_lock:
                    journal.write(json.dumps({"pitch_id": pitch.id,
                                              "status": status}) + "\n")
                    journal.flush()

        with ThreadPoolExecutor(max_workers=self.config.max_concurrent) as pool:
            list(pool.map(one, bench.pitches))
        if journal:
            journal.close()
        records = [results[p.id] for p in bench.pitches if p.id in results]
        manifest = {"benchmark_id": bench.id, "mode": mode,
                    "model": self.config.model, "evaluator_id": evaluator_id,
                    "n_pitches": len(bench.pitches),
                    "n_collected": len(records),
                    "sampling": {"n_samples": n_samples,
                                 "temperature": temperature} if mode == "sampled"
                    else {"max_tokens": 1, "temperature": 0},
                    "failures": dict(sorted(failures.items()))}
        return records, manifest
