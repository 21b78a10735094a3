"""Completion backends behind one client.

``remote-chat`` talks to a chat-completion endpoint over ``requests``;
``mock-rules`` and ``replay`` are offline and deterministic. The
``CompletionClient`` adds the response cache, audit log, rate limit and
in-flight bound shared by all three.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import requests
import yaml
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from modules.config import DEFAULT_MOCK_RULES, BackendConfig, RetryPolicy
from modules.errors import BackendError, ClassificationFailure, ConfigError, CredentialError, TransportError
from modules.prompting import RenderedPrompt

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = {429, 500, 502, 503, 504}


@dataclass(frozen=True)
class CompletionResult:
    raw_text: str
    attempts: int
    backend: str
    latency: float
    cache_hit: bool
    fingerprint: str
    raw_attempts: tuple[str, ...] = ()


def cache_key(cfg: BackendConfig, prompt: RenderedPrompt, run: int = 0) -> str:
    """Content hash of (model, temperature, template version, prompt text).

    Repeat runs (``run > 0``) are salted so they become fresh calls.
    """
    parts = [cfg.model_id, repr(float(cfg.temperature)), prompt.version, prompt.full_text]
    if run:
        parts.append(f"run={run}")
    blob = json.dumps(parts, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


# ---------- Shared plumbing ----------
class TokenBucket:
    """Refills ``rate`` tokens per second up to ``capacity``; acquire() blocks."""

    def __init__(self, rate: float, capacity: float | None = None, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate)
        self.capacity = float(capacity or max(1.0, rate))
        self.tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._updated = clock()
        self._lock = threading.Lock()

    def acquire(self):
        while True:
            with self._lock:
                now = self._clock()
                self.tokens = min(self.capacity, self.tokens + (now - self._updated) * self.rate)
                self._updated = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                wait = (1 - self.tokens) / self.rate
            self._sleep(wait)


class ResponseCache:
    """JSON-lines map fingerprint -> raw text."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError:
                    logger.warning("skipping torn cache line in %s", self.path)
                    continue
                self._entries[entry["key"]] = entry["text"]

    def get(self, key):
        with self._lock:
            return self._entries.get(key)

    def put(self, key, text):
        with self._lock:
            if self._entries.get(key) == text:
                return
            self._entries[key] = text
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps({"key": key, "text": text}, ensure_ascii=False) + "\n")

    def __len__(self):
        return len(self._entries)


class AuditLog:
    """Append-only request log: fingerprints, attempts, status, latency. Never secrets."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def record(self, **fields):
        entry = {"ts": _now(), **fields}
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text(encoding="utf-8").splitlines() if line.strip()]


# ---------- Backends ----------
class _Retryable(Exception):
    def __init__(self, status=None, detail=""):
        self.status = status
        super().__init__(detail or f"status {status}")


class RemoteChatBackend:
    kind = "remote-chat"

    def __init__(self, cfg: BackendConfig, retry: RetryPolicy | None = None, session=None, sleep=time.sleep):
        self.cfg = cfg
        self.retry = retry or RetryPolicy()
        self._token = os.environ.get(cfg.credential_env)
        if not self._token:
            raise CredentialError(f"{cfg.name}: environment variable {cfg.credential_env} is not set")
        self.session = session or requests.Session()
        self._sleep = sleep

    def _post(self, prompt: RenderedPrompt) -> str:
        payload = {
            "model": self.cfg.model,
            "messages": prompt.messages(),
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_output_tokens,
        }
        headers = {"Authorization": f"Bearer {self._token}"}
        try:
            res = self.session.post(self.cfg.endpoint, json=payload, headers=headers, timeout=self.cfg.timeout)
        except (requests.ConnectionError, requests.Timeout) as e:
            raise _Retryable(None, type(e).__name__) from None
        if res.status_code in (401, 403):
            raise CredentialError(
                f"{self.cfg.name}: credential from {self.cfg.credential_env} rejected (status {res.status_code})"
            )
        if res.status_code in RETRYABLE_STATUS:
            logger.warning("%s: status %s, backing off", self.cfg.name, res.status_code)
            raise _Retryable(res.status_code)
        if res.status_code >= 400:
            raise TransportError(f"{self.cfg.name}: request failed", status=res.status_code)
        try:
            content = res.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise TransportError(f"{self.cfg.name}: response has no choices[0].message.content", res.status_code)
        return content or ""

    def generate(self, prompt: RenderedPrompt, attempt: int = 1, origin: RenderedPrompt | None = None) -> str:
        retrying = Retrying(
            stop=stop_after_attempt(self.retry.transport_attempts),
            wait=wait_exponential(
                multiplier=self.retry.initial_delay, exp_base=self.retry.multiplier, max=self.retry.max_delay
            ),
            retry=retry_if_exception_type(_Retryable),
            sleep=self._sleep,
            reraise=True,
        )
        try:
            return retrying(self._post, prompt)
        except _Retryable as e:
            raise TransportError(
                f"{self.cfg.name}: gave up after {self.retry.transport_attempts} transport attempt(s)", e.status
            ) from None


def _term_pattern(term: str) -> re.Pattern:
    term = term.casefold().strip()
    if term.endswith("*"):
        return re.compile(r"(?<!\w)" + re.escape(term[:-1]))
    return re.compile(r"(?<!\w)" + re.escape(term) + r"(?!\w)")


class MockRulesBackend:
    """Keyword -> code rule table; a pure function of the post text.

    The null code fires when none of its ``absent`` terms appear and no
    other rule fired. ``term*`` matches any word starting with ``term``.
    """

    kind = "mock-rules"

    def __init__(self, rules_path=None):
        path = Path(rules_path or DEFAULT_MOCK_RULES)
        if not path.exists():
            raise ConfigError(f"mock rule table not found: {path}")
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        self.rules = {}
        for rule in raw.get("rules") or []:
            patterns = [_term_pattern(t) for t in rule.get("terms") or []]
            self.rules.setdefault(str(rule["code"]), []).extend(patterns)
        absent = raw.get("absent") or {}
        self.null_code = absent.get("code")
        self.absent = [_term_pattern(t) for t in absent.get("terms") or []]

    def label(self, text: str) -> dict[str, int]:
        folded = text.casefold()
        values = {code: int(any(p.search(folded) for p in pats)) for code, pats in self.rules.items()}
        if self.null_code:
            on_topic = any(p.search(folded) for p in self.absent)
            values[self.null_code] = int(not on_topic and not any(values.values()))
        return values

    def generate(self, prompt: RenderedPrompt, attempt: int = 1, origin: RenderedPrompt | None = None) -> str:
        values = self.label(prompt.payload)
        return ", ".join(f"{code}={values.get(code, 0)}" for code in prompt.target)


class ReplayBackend:
    """Canned responses: key -> list of attempt texts.

    Keys are tried in order: fingerprint of the un-reminded prompt, post id,
    then ``*``. Attempt i takes entry i; the last entry repeats.
    """

    kind = "replay"

    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg
        path = Path(cfg.replay_path)
        if not path.exists():
            raise ConfigError(f"replay file not found: {path}")
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: replay file must map keys to response lists")
        self.script = {str(k): [v] if isinstance(v, str) else [str(x) for x in v] for k, v in raw.items()}

    def generate(self, prompt: RenderedPrompt, attempt: int = 1, origin: RenderedPrompt | None = None) -> str:
        base = origin or prompt
        for key in (cache_key(self.cfg, base), base.post_id, "*"):
            if key in self.script and self.script[key]:
                entries = self.script[key]
                return entries[min(attempt, len(entries)) - 1]
        raise BackendError(f"replay file has no entry for post {base.post_id!r}")


def make_backend(cfg: BackendConfig, retry: RetryPolicy | None = None, session=None, sleep=time.sleep):
    if cfg.kind == "remote-chat":
        return RemoteChatBackend(cfg, retry, session=session, sleep=sleep)
    if cfg.kind == "replay":
        return ReplayBackend(cfg)
    return MockRulesBackend(cfg.rules_path)


# ---------- Client ----------
class CompletionClient:
    def __init__(
        self,
        cfg: BackendConfig,
        retry: RetryPolicy | None = None,
        cache_path=None,
        audit_path=None,
        backend=None,
        session=None,
        sleep=time.sleep,
    ):
        self.cfg = cfg
        self.retry = retry or RetryPolicy()
        self.backend = backend or make_backend(cfg, self.retry, session=session, sleep=sleep)
        self.cache = ResponseCache(cache_path) if (cfg.cache and cache_path) else None
        self.audit = AuditLog(audit_path) if audit_path else None
        self.bucket = TokenBucket(cfg.rate_per_second, sleep=sleep) if cfg.rate_per_second else None
        self._in_flight = threading.BoundedSemaphore(cfg.in_flight)

    def _log(self, **fields):
        if self.audit is not None:
            self.audit.record(backend=self.cfg.name, **fields)

    def complete(self, prompt: RenderedPrompt, attempt: int = 1, origin=None, run: int = 0) -> CompletionResult:
        key = cache_key(self.cfg, prompt, run)
        if self.cache is not None:
            cached = self.cache.get(key)
            if cached is not None:
                self._log(fingerprint=key, post_id=prompt.post_id, attempt=attempt, status="cache-hit", latency=0.0)
                return CompletionResult(cached, 1, self.backend.kind, 0.0, True, key)
        with self._in_flight:
            if self.bucket is not None:
                self.bucket.acquire()
            start = time.perf_counter()
            try:
                text = self.backend.generate(prompt, attempt, origin)
            except BackendError as e:
                latency = time.perf_counter() - start
                status = getattr(e, "status", None)
                self._log(fingerprint=key, post_id=prompt.post_id, attempt=attempt,
                          status=f"error:{status or type(e).__name__}", latency=round(latency, 4))
                raise
            latency = time.perf_counter() - start
        self._log(fingerprint=key, post_id=prompt.post_id, attempt=attempt, status="ok", latency=round(latency, 4))
        if self.cache is not None:
            self.cache.put(key, text)
        return CompletionResult(text, 1, self.backend.kind, latency, False, key)


def complete(cfg: BackendConfig, prompt: RenderedPrompt, audit_path=None, cache_path=None) -> CompletionResult:
    """One completion through a throwaway client; audited and cached only when paths are given."""
    return CompletionClient(cfg, cache_path=cache_path, audit_path=audit_path).complete(prompt)


def format_reminder(prompt: RenderedPrompt, attempt: int, max_attempts: int) -> str:
    line = ", ".join(f"{c}=_" for c in prompt.target)
    return (
        f"Reminder (attempt {attempt} of {max_attempts}): reply with exactly one line "
        f"in the form {line}, each _ being 1 or 0, and nothing else."
    )


def classify_with_retry(client, policy: RetryPolicy, prompt: RenderedPrompt, parser, run: int = 0):
    """Complete and parse, re-asking on malformed output.

    Returns ``(LabelVector, CompletionResult)``; raises ClassificationFailure
    carrying every raw attempt when the budget is spent.
    """
    if isinstance(client, BackendConfig):
        client = CompletionClient(client, policy)
    raws = []
    current = prompt
    result = failure = None
    for attempt in range(1, policy.max_attempts + 1):
        result = client.complete(current, attempt=attempt, origin=prompt, run=run)
        raws.append(result.raw_text)
        outcome = parser(result.raw_text)
        if outcome.ok:
            return outcome.vector, replace(result, attempts=attempt, raw_attempts=tuple(raws))
        failure = outcome.failure
        logger.debug("post %s attempt %d unparseable: %s", prompt.post_id, attempt, failure.reason)
        if not policy.reask_on_malformed:
            break
        current = prompt.with_reminder(format_reminder(prompt, attempt + 1, policy.max_attempts))
    raise ClassificationFailure(failure, replace(result, attempts=len(raws), raw_attempts=tuple(raws)))
