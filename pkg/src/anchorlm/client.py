"""Optional external annotator / judge access over an OpenAI-compatible
chat-completion endpoint, with a content-hash disk cache and bounded
parallelism. Nothing in the core studies depends on this module."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .pipeline import AnnotationTag

__all__ = [
    "EndpointConfig",
    "TransportError",
    "HttpTransport",
    "annotate_text",
    "annotate_response",
    "annotate_batch",
    "complete",
    "parse_tag_response",
    "ANNOTATE_DOCUMENT_PROMPT",
    "ANNOTATE_RESPONSE_PROMPT",
]

_TAG_INSTRUCTIONS = (
    "You are an expert annotator. Read the following document and write a "
    "short set of informative tags in the following format: "
    "tag_type:tag_value tag_type:tag_value ...\n\n"
    "The tag_type should be one or more of the following that is most "
    "relevant to the document: topic, domain, language, style, sentiment, "
    "action, entity, location, time, etc.\n\n"
    "Document:\n\"\"\"{text}\"\"\"\n\n"
    "Do not write any text other than the annotations.\n\n"
    "Annotation:"
)

ANNOTATE_DOCUMENT_PROMPT = _TAG_INSTRUCTIONS
ANNOTATE_RESPONSE_PROMPT = _TAG_INSTRUCTIONS.replace("{text}", "{last_message}")


class TransportError(RuntimeError):
    pass


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "ANNOTATOR_API_KEY"
    timeout: float = 60.0
    max_parallel: int = 4
    attempts: int = 3
    backoff: float = 1.0
    cache_dir: Optional[str] = None
    temperature: float = 0.0

    def __post_init__(self):
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")


Transport = Callable[[List[Dict[str, str]], "EndpointConfig"], str]


class HttpTransport:
    """POSTs OpenAI-style chat completions with retry/backoff."""

    def __call__(self, messages: List[Dict[str, str]], config: EndpointConfig) -> str:
        import requests

        url = config.base_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {
            "model": config.model,
            "messages": messages,
            "temperature": config.temperature,
        }
        last_err: Optional[Exception] = None
        for attempt in range(config.attempts):
            try:
                resp = requests.post(url, json=payload, headers=headers, timeout=config.timeout)
                resp.raise_for_status()
                body = resp.json()
                return body["choices"][0]["message"]["content"]
            except Exception as err:  # noqa: BLE001 - retried, re-raised below
                last_err = err
                if attempt + 1 < config.attempts:
                    time.sleep(config.backoff * (2 ** attempt))
        raise TransportError(f"request failed after {config.attempts} attempts: {last_err}")


def parse_tag_response(text: str) -> Tuple[List[AnnotationTag], int]:
    """Parse whitespace-separated key:value items; tokens without a colon
    extend the previous value (annotators emit multi-word values). Returns the
    tags plus the count of dropped malformed leading tokens."""
    tags: List[AnnotationTag] = []
    dropped = 0
    current: Optional[List[str]] = None  # [key, value-so-far]
    for token in text.split():
        if ":" in token:
            if current is not None:
                tags.append(AnnotationTag(current[0], current[1]))
            key, _, value = token.partition(":")
            if not key:
                dropped += 1
                current = None
                continue
            current = [key, value]
        elif current is not None:
            current[1] = (current[1] + " " + token).strip()
        else:
            dropped += 1
    if current is not None:
        tags.append(AnnotationTag(current[0], current[1].strip()))
    tags = [t for t in tags if t.value]
    return tags, dropped


def _cache_path(config: EndpointConfig, prompt: str) -> Optional[str]:
    if not config.cache_dir:
        return None
    digest = hashlib.sha256(f"{config.model}\x00{prompt}".encode()).hexdigest()
    return os.path.join(config.cache_dir, f"{digest}.txt")


def _cached_call(prompt: str, config: EndpointConfig, transport: Transport) -> str:
    path = _cache_path(config, prompt)
    if path and os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    raw = transport([{"role": "user", "content": prompt}], config)
    if path:
        os.makedirs(config.cache_dir, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=config.cache_dir)
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    return raw


def annotate_text(
    text: str,
    config: EndpointConfig,
    transport: Optional[Transport] = None,
) -> List[AnnotationTag]:
    """Tag a document chunk. Responses are cached by content hash."""
    if not text.strip():
        raise ValueError("empty text")
    transport = transport or HttpTransport()
    prompt = ANNOTATE_DOCUMENT_PROMPT.format(text=text)
    raw = _cached_call(prompt, config, transport)
    tags, _ = parse_tag_response(raw)
    return tags


def annotate_response(
    last_message: str,
    config: EndpointConfig,
    transport: Optional[Transport] = None,
) -> List[AnnotationTag]:
    """Tag a post-training response (its final assistant message)."""
    if not last_message.strip():
        raise ValueError("empty message")
    transport = transport or HttpTransport()
    prompt = ANNOTATE_RESPONSE_PROMPT.format(last_message=last_message)
    raw = _cached_call(prompt, config, transport)
    tags, _ = parse_tag_response(raw)
    return tags


def annotate_batch(
    texts: Sequence[str],
    config: EndpointConfig,
    transport: Optional[Transport] = None,
) -> List[List[AnnotationTag]]:
    """Annotate many chunks with at most `max_parallel` requests in flight."""
    transport = transport or HttpTransport()
    with ThreadPoolExecutor(max_workers=config.max_parallel) as pool:
        return list(pool.map(lambda t: annotate_text(t, config, transport), texts))


def complete(
    prompt: str,
    config: EndpointConfig,
    transport: Optional[Transport] = None,
) -> str:
    """Generic judge hook: send one prompt, return the raw completion text."""
    if not prompt.strip():
        raise ValueError("empty prompt")
    transport = transport or HttpTransport()
    return _cached_call(prompt, config, transport)
