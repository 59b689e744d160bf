"""Generation clients for the reasoner step."""

from __future__ import annotations

from typing import Mapping, Protocol

from ..evaluation import normalize_answer
from ..retrieve import _post_json


class GenerationClient(Protocol):
    def generate(self, prompt: str, max_tokens: int = 64, temperature: float = 0.0) -> str: ...


class GenerationError(RuntimeError):
    pass


class HTTPGenerationClient:
    """Client for ``POST <url> {"prompt", "max_tokens", "temperature"} -> {"text"}``."""

    def __init__(self, url: str, timeout: float = 120.0, retries: int = 2):
        self.url = url
        self.timeout = timeout
        self.retries = retries

    def generate(self, prompt: str, max_tokens: int = 64, temperature: float = 0.0) -> str:
        payload = {"prompt": prompt, "max_tokens": max_tokens, "temperature": temperature}
        try:
            out = _post_json(self.url, payload, self.timeout, self.retries)
            return str(out["text"]).strip()
        except (ConnectionError, KeyError, ValueError) as e:
            raise GenerationError(f"generation request failed: {e}") from e


class LookupGenerationClient:
    """Diagnostic reasoner that knows the gold answers.

    Finds the question it is being asked (the target segment of the prompt
    starts with it) and returns that question's gold answer if the answer
    text occurs in the target segment, else the empty string. It measures
    whether retrieval put the answer in front of the reasoner.
    """

    def __init__(self, answers: Mapping[str, str]):
        # longest first so that a question that prefixes another never shadows it
        self.answers = sorted(answers.items(), key=lambda kv: -len(kv[0]))

    def generate(self, prompt: str, max_tokens: int = 64, temperature: float = 0.0) -> str:
        target = prompt.rsplit("\n\n", 1)[-1]
        for question, answer in self.answers:
            if target.startswith(question):
                haystack = f" {normalize_answer(target[len(question):])} "
                needle = normalize_answer(answer)
                return answer if needle and f" {needle} " in haystack else ""
        return ""
