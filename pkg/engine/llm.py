"""
External chat-completion planner (optional).
- SKILLSTATE_ENDPOINT: base URL of an OpenAI-compatible API, e.g. http://localhost:11434/v1
- The bearer token is read from the environment variable named by SKILLSTATE_TOKEN_VAR.
- The answer is parsed with engine.planner.parse_plan; it never touches the verifier.
"""
import logging
import os
import threading
from typing import Any, Dict, Optional

import requests

from .planner import (
    Refusal,
    PlannerTimeout,
    PlannerTransportError,
    TaskSpec,
    parse_plan,
    serialize_prompt,
)
from .skill_graph import TopoView
from .state import EmbodimentState

logger = logging.getLogger(__name__)

ENDPOINT: Optional[str] = os.environ.get("SKILLSTATE_ENDPOINT")
MODEL: str = os.environ.get("SKILLSTATE_MODEL", "gpt-4o-mini")
TIMEOUT: float = float(os.environ.get("SKILLSTATE_TIMEOUT", "30"))
TOKEN_VAR: str = os.environ.get("SKILLSTATE_TOKEN_VAR", "SKILLSTATE_API_KEY")
MAX_INFLIGHT: int = int(os.environ.get("SKILLSTATE_MAX_INFLIGHT", "4"))

SYSTEM_PROMPT = (
    "You are a task planner for a mobile manipulator. "
    "Only use the skill ids you are given and respect the allowed transitions."
)

# shared by every planner instance in the process
_INFLIGHT = threading.BoundedSemaphore(MAX_INFLIGHT)


def _message_text(data: Dict[str, Any]) -> str:
    choices = data.get("choices") or []
    if not choices:
        return ""
    first = choices[0] or {}
    message = first.get("message") or {}
    return message.get("content") or first.get("text") or ""


class ChatCompletionPlanner:
    name = "external"

    def __init__(
        self,
        endpoint: Optional[str] = None,
        model: Optional[str] = None,
        timeout: Optional[float] = None,
        token_var: Optional[str] = None,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = (endpoint or ENDPOINT or "").rstrip("/")
        if not self.endpoint:
            raise ValueError("no endpoint configured; set SKILLSTATE_ENDPOINT or pass --endpoint")
        self.model = model or MODEL
        self.timeout = float(timeout) if timeout is not None else TIMEOUT
        self.token_var = token_var or TOKEN_VAR
        self.http = session or requests

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_var)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, payload: Dict[str, Any]) -> requests.Response:
        url = f"{self.endpoint}/chat/completions"
        last: Optional[Exception] = None
        # one retry on connection errors; timeouts are final
        for attempt in range(2):
            try:
                with _INFLIGHT:
                    return self.http.post(url, json=payload, headers=self._headers(), timeout=self.timeout)
            except requests.Timeout as exc:
                raise PlannerTimeout(f"no answer from {url} within {self.timeout}s") from exc
            except requests.RequestException as exc:
                last = exc
                logger.warning("request to %s failed (attempt %d): %s", url, attempt + 1, exc)
        raise PlannerTransportError(f"could not reach {url}: {last}")

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": prompt},
            ],
            "temperature": 0,
        }
        resp = self._post(payload)
        if resp.status_code != 200:
            raise PlannerTransportError(f"endpoint answered HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise PlannerTransportError(f"endpoint returned invalid JSON: {exc}") from exc
        return _message_text(data)

    def propose(self, task: TaskSpec, view: TopoView, state: EmbodimentState, feedback: Optional[str] = None):
        text = self.complete(serialize_prompt(task, view, state, feedback))
        if not text.strip():
            return Refusal("empty completion")
        return parse_plan(text, view)
