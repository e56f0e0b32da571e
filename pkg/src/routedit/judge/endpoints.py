"""Judge endpoints: anything with ``complete(system_prompt, parts) -> str``."""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import urllib.request
from typing import Protocol, Sequence

TOKEN_ENV = "ROUTEDIT_JUDGE_TOKEN"


class TransportError(ConnectionError):
    pass


class JudgeEndpoint(Protocol):
    def complete(self, system_prompt: str, parts: Sequence[tuple[str, object]]) -> str: ...


class ScriptedEndpoint:
    """Replays a fixed script; an ``Exception`` entry is raised instead of returned."""

    def __init__(self, script: Sequence[str | Exception], repeat_last: bool = True):
        self.script = list(script)
        self.repeat_last = repeat_last
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, system_prompt, parts):
        with self._lock:
            i = self.calls
            self.calls += 1
        if i >= len(self.script):
            if not self.repeat_last or not self.script:
                raise TransportError("script exhausted")
            i = len(self.script) - 1
        item = self.script[i]
        if isinstance(item, Exception):
            raise item
        return item


class HashMockEndpoint:
    """Deterministic offline judge: scores derive from a hash of the request."""

    def __init__(self):
        self.calls = 0

    def complete(self, system_prompt, parts):
        self.calls += 1
        h = hashlib.sha256(system_prompt.encode())
        for kind, payload in parts:
            h.update(payload if isinstance(payload, bytes) else str(payload).encode())
        d = h.digest()
        ic, cf, vq = (1 + b % 100 for b in d[:3])
        return (
            "Brief reasoning: deterministic mock score.\n"
            f"Instruction Compliance: {ic}\n"
            f"Consistency & Detail Fidelity: {cf}\n"
            f"Visual Quality & Stability: {vq}\n"
        )


class HttpEndpoint:
    """OpenAI-compatible chat-completions client; images are sent as JPEG data URLs."""

    def __init__(self, url: str, model: str = "", token_env: str = TOKEN_ENV, timeout: float = 120.0):
        self.url, self.model, self.timeout = url, model, timeout
        self.token = os.environ.get(token_env, "")

    def payload(self, system_prompt, parts) -> dict:
        content = []
        for kind, value in parts:
            if kind == "image":
                b64 = base64.b64encode(value).decode()
                content.append({"type": "image_url", "image_url": {"url": f"data:image/jpeg;base64,{b64}"}})
            else:
                content.append({"type": "text", "text": value})
        body = {"messages": [{"role": "system", "content": system_prompt}, {"role": "user", "content": content}]}
        if self.model:
            body["model"] = self.model
        return body

    def complete(self, system_prompt, parts):
        data = json.dumps(self.payload(system_prompt, parts)).encode()
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.url, data=data, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read())
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError("unexpected response body") from exc


def make_endpoint(spec: str, model: str = "") -> JudgeEndpoint:
    if spec == "mock":
        return HashMockEndpoint()
    if spec.startswith(("http://", "https://")):
        return HttpEndpoint(spec, model)
    raise ValueError(f"endpoint must be 'mock' or an http(s) URL, got {spec!r}")
