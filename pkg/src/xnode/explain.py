"""Prompts, LLM providers and explanation records.

The offline provider fills a fixed narration from the numbers embedded in
the prompt, so the whole pipeline runs without network access. The remote
provider POSTs JSON to an HTTP endpoint with a bearer token read from an
environment variable.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import httpx

from .context import CONTEXT_KEYS

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "You are a node in a medical graph.\n"
    "Your topological context is: <context_vector>\n"
    "Your predicted label: <predicted_label>.<true_label_clause>\n"
    "Explain in natural language why you predicted <predicted_label>. "
    "If incorrect, describe what might have misled you based on your structure, "
    "features, and neighbors."
)
TRUE_LABEL_CLAUSE = " True label: <true_label>"
PLACEHOLDER = re.compile(r"<(context_vector|predicted_label|true_label|true_label_clause)>")
INT_KEYS = {"degree", "community"}


class ProviderError(RuntimeError):
    pass


class ProviderAuthError(ProviderError):
    pass


class ProviderEmptyError(ProviderError):
    pass


def format_value(key: str, value) -> str:
    if key in INT_KEYS:
        return str(int(value))
    return f"{float(value):.3f}"


def render_context(kv: dict) -> str:
    """``{"key": value, ...}`` in context order, then the top feature entry.

    Floats get three decimals, counts are exact. The result is valid JSON.
    """
    parts = [f'"{key}": {format_value(key, kv[key])}' for key in CONTEXT_KEYS if key in kv]
    if kv.get("top_feature_index") is not None:
        parts.append(f'"top_feature": "F[{int(kv["top_feature_index"])}]='
                     f'{float(kv["top_feature_value"]):.3f}"')
    return "{" + ", ".join(parts) + "}"


def build_prompt(context_kv: dict, predicted_label: str, true_label: str | None = None) -> str:
    if not predicted_label:
        raise ValueError("a predicted label is required to build a prompt")
    clause = TRUE_LABEL_CLAUSE.replace("<true_label>", true_label) if true_label else ""
    text = (PROMPT_TEMPLATE
            .replace("<context_vector>", render_context(context_kv))
            .replace("<true_label_clause>", clause)
            .replace("<predicted_label>", predicted_label))
    assert not PLACEHOLDER.search(text)
    return text


_CTX_LINE = re.compile(r"^Your topological context is: (\{.*\})$", re.M)
_LABEL_LINE = re.compile(r"^Your predicted label: (.*?)\.(?: True label: (.*))?$", re.M)


def parse_prompt(prompt: str) -> tuple[dict, str, str | None]:
    """Recover ``(context, predicted, true)`` from a rendered prompt."""
    ctx, labels = _CTX_LINE.search(prompt), _LABEL_LINE.search(prompt)
    if not ctx or not labels:
        raise ValueError("prompt does not follow the explanation scaffold")
    return json.loads(ctx.group(1)), labels.group(1), labels.group(2)


@dataclass
class ProviderConfig:
    kind: str = "offline"  # or "remote"
    endpoint: str | None = None
    model: str | None = None
    token_env: str | None = None
    adapter: str = "generic"  # or "openai"
    timeout: float = 30.0
    max_retries: int = 3
    backoff: float = 1.0
    concurrency: int = 1

    def __post_init__(self):
        if self.kind not in ("offline", "remote"):
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if self.kind == "remote" and not (self.endpoint and self.model):
            raise ValueError("remote providers need an endpoint and a model name")
        if self.adapter not in ("generic", "openai"):
            raise ValueError(f"unknown adapter {self.adapter!r}")
        if self.concurrency < 1:
            raise ValueError("concurrency must be at least 1")

    @property
    def provider_id(self) -> str:
        return "offline-template" if self.kind == "offline" else f"remote:{self.model}"


def _describe(kv: dict) -> list[str]:
    out = []
    deg = kv.get("degree")
    cc = kv.get("clustering")
    if deg is not None:
        reach = "sparsely" if deg <= 2 else "moderately" if deg <= 6 else "densely"
        out.append(f"I have a degree of {deg}, so I am {reach} connected.")
    if cc is not None:
        tone = "tightly linked to one another" if cc >= 0.5 else "only loosely linked to one another"
        out.append(f"My clustering coefficient is {cc:.3f}; my neighbors are {tone}.")
    if "two_hop_agreement" in kv:
        out.append(f"Within two hops, {kv['two_hop_agreement']:.3f} of the labeled nodes share my label.")
    if "avg_edge_weight" in kv:
        w = kv["avg_edge_weight"]
        out.append(f"My average edge weight is {w:.3f}, a "
                   f"{'strong' if w >= 0.8 else 'modest'} similarity to my neighbors.")
    if "top_feature" in kv:
        out.append(f"My most salient feature is {kv['top_feature']}.")
    if "eigencentrality" in kv or "betweenness" in kv:
        out.append(f"My eigencentrality is {kv.get('eigencentrality', 0.0):.3f} and my betweenness "
                   f"is {kv.get('betweenness', 0.0):.3f}, and I sit in community {kv.get('community', '?')}.")
    return out


def offline_explanation(prompt: str) -> str:
    kv, pred, true = parse_prompt(prompt)
    facts = " ".join(_describe(kv))
    if true is not None and true != pred:
        return (f"I predicted '{pred}', but my true label is '{true}'. {facts} "
                f"Those structural cues pulled me towards '{pred}' even though my "
                f"true class is '{true}'; my neighborhood likely outweighed my own features.")
    opener = (f"I predicted '{pred}', and that matches my true label." if true is not None
              else f"I predicted '{pred}'.")
    return f"{opener} {facts} These signals are consistent with the '{pred}' class."


class RemoteProvider:
    def __init__(self, config: ProviderConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self._client = httpx.Client(timeout=config.timeout, transport=transport)
        self._slots = threading.Semaphore(config.concurrency)

    def _token(self) -> str | None:
        if not self.config.token_env:
            return None
        token = os.environ.get(self.config.token_env)
        if not token:
            raise ProviderAuthError(f"environment variable {self.config.token_env} is not set")
        return token

    def _body(self, prompt: str) -> dict:
        if self.config.adapter == "openai":
            return {"model": self.config.model, "messages": [{"role": "user", "content": prompt}]}
        return {"model": self.config.model, "prompt": prompt}

    def _extract(self, payload: dict) -> str:
        if self.config.adapter == "openai":
            return payload["choices"][0]["message"]["content"] or ""
        for key in ("text", "completion", "output"):
            if key in payload:
                return payload[key] or ""
        raise ProviderError(f"response has no completion field: {sorted(payload)}")

    def complete(self, prompt: str) -> str:
        headers = {}
        token = self._token()
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_exc: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                delay = self.config.backoff * 2 ** (attempt - 1)
                log.warning("provider retry %d/%d in %.2fs (%s)", attempt, self.config.max_retries,
                            delay, last_exc)
                time.sleep(delay)
            try:
                with self._slots:
                    resp = self._client.post(self.config.endpoint, json=self._body(prompt), headers=headers)
            except httpx.TransportError as exc:
                last_exc = exc
                continue
            if resp.status_code in (401, 403):
                raise ProviderAuthError(f"provider rejected credentials (HTTP {resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last_exc = ProviderError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                text = self._extract(resp.json())
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProviderError(f"malformed provider response: {exc}") from exc
            if not text.strip():
                raise ProviderEmptyError("provider returned an empty completion")
            return text
        raise ProviderError(f"gave up after {self.config.max_retries + 1} attempts") from last_exc

    def close(self):
        self._client.close()


def generate_explanation(prompt: str, provider: ProviderConfig | RemoteProvider) -> str:
    if isinstance(provider, RemoteProvider):
        return provider.complete(prompt)
    if provider.kind == "offline":
        return offline_explanation(prompt)
    remote = RemoteProvider(provider)
    try:
        return remote.complete(prompt)
    finally:
        remote.close()


@dataclass
class ExplanationRecord:
    node: int
    context: dict
    predicted: str
    true: str | None
    prompt: str
    text: str
    provider: str
    model: str | None = None
    timestamp: str = ""

    def to_json(self) -> str:
        flat = {k: v for k, v in asdict(self).items() if k != "context"}
        flat.update({f"ctx.{k}": v for k, v in self.context.items()})
        return json.dumps(flat, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "ExplanationRecord":
        obj = json.loads(line)
        if not isinstance(obj, dict):
            raise ValueError("record is not a JSON object")
        ctx = {k[4:]: obj.pop(k) for k in list(obj) if k.startswith("ctx.")}
        names = {f.name for f in fields(cls)} - {"context"}
        missing = {"node", "predicted", "prompt", "text", "provider"} - set(obj)
        if missing:
            raise ValueError(f"missing fields {sorted(missing)}")
        return cls(context=ctx, **{k: v for k, v in obj.items() if k in names})


def explain_nodes(items, provider: ProviderConfig) -> list[ExplanationRecord]:
    """Explain ``(node, context_kv, predicted, true)`` tuples.

    Remote calls fan out over at most ``provider.concurrency`` threads;
    records come back ordered by node id.
    """
    items = sorted(items, key=lambda it: it[0])
    prompts = [build_prompt(kv, pred, true) for _, kv, pred, true in items]
    if provider.kind == "offline":
        texts = [offline_explanation(p) for p in prompts]
    else:
        remote = RemoteProvider(provider)
        try:
            with ThreadPoolExecutor(max_workers=provider.concurrency) as pool:
                texts = list(pool.map(remote.complete, prompts))
        finally:
            remote.close()
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return [ExplanationRecord(node, kv, pred, true, prompt, text, provider.provider_id,
                              provider.model, stamp)
            for (node, kv, pred, true), prompt, text in zip(items, prompts, texts)]


def persist_explanations(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def load_explanations(path) -> list[ExplanationRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(ExplanationRecord.from_json(line))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return out
