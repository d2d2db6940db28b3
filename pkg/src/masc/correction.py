"""Anomaly-triggered intervention through a dedicated correction agent.

When a step is flagged, the correction agent receives the query, the
conversation history, and the flagged output inside a fixed reflection
prompt, and must answer with a JSON object:

    {"correction_needed": "Yes" or "No", "final_response": "..."}

Protocol rules implemented here:

* "No" forces the final response back to the original flagged output, no
  matter what the payload says.
* Unparseable or incomplete replies fall back to the original output and log
  a protocol violation; a broken corrector must never corrupt the trajectory.
* The corrector is invoked only for flagged steps, once per step; corrected
  outputs are not re-scored.
* Remote transport failure is fail-open: the original output survives and
  the failure is reported in the outcome.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

from .detector import AnomalyVerdict
from .errors import ConfigError

logger = logging.getLogger(__name__)

PROMPT_TEMPLATE = """You are an AI agent playing the role of "{role}".
You previously generated a response during a multi-agent reasoning process,
but an anomaly detector flagged your output as potentially incorrect.
Your task is to carefully reflect on whether your earlier response was indeed
wrong given the original query and the current context.

Please follow these rules strictly:
1. Re-examine the original query and your earlier response in the context of your role.
2. If after reflection you believe your previous response is correct and does not require modification, explicitly state that no correction is needed.
3. If you identify errors or find a better answer, provide a corrected response.
4. Always output in the fixed JSON format below. Do not add extra explanations outside the JSON.

Output format:
{{
  "correction_needed": "Yes" or "No",
  "final_response": "If correction_needed=No, repeat your original response here. If Yes, provide the corrected response."
}}

Input Information:
- Query: {query}
- Your Previous Response: {flagged_output}
- Context (previous steps if available):
{context}"""


@dataclass(frozen=True)
class CorrectionPolicySpec:
    """Configuration for the correction agent's policy."""

    kind: str = "scripted"  # "scripted" | "remote_chat"
    endpoint: str | None = None
    model_name: str | None = None
    script: dict[str, str] | None = None  # flagged output -> raw reply
    max_attempts: int = 3
    timeout: float = 30.0

    def __post_init__(self):
        if self.kind not in ("scripted", "remote_chat"):
            raise ConfigError(f"unknown correction policy kind {self.kind!r}")
        if self.kind == "remote_chat" and (not self.endpoint or not self.model_name):
            raise ConfigError("remote_chat policy requires endpoint and model_name")


@dataclass(frozen=True)
class CorrectionRequest:
    """Everything the correction agent sees about a flagged step."""

    role: str
    query: str
    history: tuple[tuple[str, str], ...]  # (role, output) for steps 1..t-1
    flagged_output: str

    @property
    def instruction(self) -> str:
        return build_correction_prompt(self)


@dataclass(frozen=True)
class CorrectionResult:
    correction_needed: bool
    final_response: str
    raw: str
    protocol_violation: bool = False


@dataclass
class CorrectionOutcome:
    """What happened at one step: the surviving output plus bookkeeping."""

    output: str
    invoked: bool = False
    replaced: bool = False
    failed: bool = False
    result: CorrectionResult | None = None


def build_correction_prompt(req: CorrectionRequest) -> str:
    """Render the canonical recovery prompt, byte-deterministic."""
    if req.history:
        context = "\n".join(f"[{role}] {output}" for role, output in req.history)
    else:
        context = "(none)"
    return PROMPT_TEMPLATE.format(
        role=req.role,
        query=req.query,
        flagged_output=req.flagged_output,
        context=context,
    )


def _first_json_object(text: str) -> dict | None:
    """Extract the first top-level JSON object embedded in free text."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(text[start : i + 1])
                    except json.JSONDecodeError:
                        break
                    if isinstance(obj, dict):
                        return obj
                    break
        start = text.find("{", start + 1)
    return None


def parse_correction_response(raw: str, original: str) -> CorrectionResult:
    """Interpret the agent's reply under the recovery protocol.

    "No" (or any fallback) pins final_response to the original output; only
    an explicit "Yes" with a textual final_response replaces it.
    """
    obj = _first_json_object(raw)
    if obj is None or "correction_needed" not in obj or "final_response" not in obj:
        logger.warning("correction protocol violation: unparseable reply %.80r", raw)
        return CorrectionResult(
            correction_needed=False,
            final_response=original,
            raw=raw,
            protocol_violation=True,
        )
    needed_raw = obj["correction_needed"]
    if isinstance(needed_raw, bool):
        needed = needed_raw
    elif isinstance(needed_raw, str) and needed_raw.strip().lower() in ("yes", "no"):
        needed = needed_raw.strip().lower() == "yes"
    else:
        logger.warning(
            "correction protocol violation: correction_needed=%r", needed_raw
        )
        return CorrectionResult(
            correction_needed=False,
            final_response=original,
            raw=raw,
            protocol_violation=True,
        )
    if not needed:
        return CorrectionResult(correction_needed=False, final_response=original, raw=raw)
    final = obj["final_response"]
    if not isinstance(final, str):
        logger.warning("correction protocol violation: final_response=%r", final)
        return CorrectionResult(
            correction_needed=False,
            final_response=original,
            raw=raw,
            protocol_violation=True,
        )
    return CorrectionResult(correction_needed=True, final_response=final, raw=raw)


# -- policies -----------------------------------------------------------------

PolicyFn = Callable[[CorrectionRequest, str], str]


class ScriptedPolicy:
    """Table- or function-driven corrector for tests and fixtures."""

    def __init__(self, script: dict[str, str] | PolicyFn):
        self._script = script
        self.calls = 0

    def reply(self, req: CorrectionRequest, prompt: str) -> str:
        self.calls += 1
        if callable(self._script):
            return self._script(req, prompt)
        reply = self._script.get(req.flagged_output)
        if reply is None:
            return json.dumps({"correction_needed": "No", "final_response": ""})
        return reply


class RemoteChatPolicy:
    """Client for POST {endpoint}/chat with a single user message."""

    def __init__(self, spec: CorrectionPolicySpec):
        import requests

        self.spec = spec
        self._session = requests.Session()
        self.calls = 0

    def reply(self, req: CorrectionRequest, prompt: str) -> str:
        import requests

        self.calls += 1
        url = self.spec.endpoint.rstrip("/") + "/chat"
        body = {
            "model": self.spec.model_name,
            "messages": [{"role": "user", "content": prompt}],
        }
        last_error = "no attempts made"
        for attempt in range(self.spec.max_attempts):
            if attempt:
                time.sleep(0.05 * attempt)
            try:
                resp = self._session.post(url, json=body, timeout=self.spec.timeout)
            except requests.RequestException as exc:
                last_error = str(exc)
                continue
            if resp.status_code != 200:
                last_error = f"HTTP {resp.status_code}"
                continue
            return str(resp.json()["content"])
        raise ConnectionError(
            f"correction request failed after {self.spec.max_attempts} attempts: "
            f"{last_error}"
        )


def build_policy(spec: CorrectionPolicySpec):
    if spec.kind == "scripted":
        return ScriptedPolicy(spec.script or {})
    return RemoteChatPolicy(spec)


def apply_correction(
    policy, verdict: AnomalyVerdict, req: CorrectionRequest
) -> CorrectionOutcome:
    """Gate on the verdict and return the surviving output for step t.

    Unflagged steps pass through untouched with zero policy calls. Flagged
    steps go through the corrector once; its failure keeps the original
    output (fail-open) and marks the outcome failed.
    """
    if not verdict.flagged:
        return CorrectionOutcome(output=req.flagged_output)
    prompt = build_correction_prompt(req)
    try:
        raw = policy.reply(req, prompt)
    except Exception as exc:  # fail-open: the detector is advisory
        logger.warning("correction agent failed; keeping original output: %s", exc)
        return CorrectionOutcome(
            output=req.flagged_output, invoked=True, failed=True
        )
    result = parse_correction_response(raw, req.flagged_output)
    return CorrectionOutcome(
        output=result.final_response,
        invoked=True,
        replaced=result.final_response != req.flagged_output,
        result=result,
    )
