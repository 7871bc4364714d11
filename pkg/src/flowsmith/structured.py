"""Structured output over chat completions.

Model replies carry machine-readable payloads as fenced YAML blocks embedded
in prose. This module extracts and validates those blocks and implements the
repair-retry policy: when a reply fails to parse, the request is re-issued
once (per configured retry) with the parse error quoted back to the model.
"""

from __future__ import annotations

import re
from typing import Callable, TypeVar

import yaml

from .gateway import ChatMessage, ChatResponse

FENCE_RE = re.compile(r"```[ \t]*[\w-]*[ \t]*\n(.*?)```", re.DOTALL)

T = TypeVar("T")


class StructuredOutputError(Exception):
    """Reply did not contain a usable structured payload."""


class NoBlockFoundError(StructuredOutputError):
    """No fenced block with the expected shape was present."""


class MultipleBlocksError(StructuredOutputError):
    """More than one candidate block was present; the payload is ambiguous."""


def fenced_blocks(text: str) -> list[str]:
    """All fenced code blocks in ``text``, fence markers stripped."""
    return [m.group(1) for m in FENCE_RE.finditer(text)]


def extract_yaml_block(text: str, required_key: str) -> dict:
    """Find the single fenced YAML mapping containing ``required_key``.

    Blocks that are not YAML mappings or lack the key are ignored as prose,
    which keeps extraction tolerant of explanatory code snippets around the
    payload. Zero candidates raises :class:`NoBlockFoundError`, more than one
    raises :class:`MultipleBlocksError`.
    """
    candidates = []
    for block in fenced_blocks(text):
        try:
            doc = yaml.safe_load(block)
        except yaml.YAMLError:
            continue
        if isinstance(doc, dict) and required_key in doc:
            candidates.append(doc)
    if not candidates:
        raise NoBlockFoundError(
            f"no fenced YAML block with key {required_key!r} found"
        )
    if len(candidates) > 1:
        raise MultipleBlocksError(
            f"{len(candidates)} fenced blocks with key {required_key!r} found"
        )
    return candidates[0]


REPAIR_TEMPLATE = (
    "Your previous reply could not be parsed: {error}\n"
    "Reply again, following the required format exactly."
)


def request_structured(
    gateway,
    messages: list[ChatMessage],
    parser: Callable[[str], T],
    repair_retries: int = 1,
) -> tuple[T, list[ChatResponse]]:
    """Call the gateway and parse the reply, repairing on parse failure.

    ``parser`` raises on bad input. Each repair round appends the failing
    assistant reply plus a user message quoting the parse error, then asks
    again; after ``repair_retries`` repairs the last parse error propagates.
    Returns the parsed value and every gateway response consumed (for token
    accounting), so callers see exactly 1 + repairs completions.
    """
    conversation = list(messages)
    responses: list[ChatResponse] = []
    for round_index in range(repair_retries + 1):
        response = gateway.complete(conversation)
        responses.append(response)
        try:
            return parser(response.content), responses
        except Exception as exc:
            if round_index == repair_retries:
                raise
            conversation.append(ChatMessage(role="assistant", content=response.content))
            conversation.append(
                ChatMessage(role="user", content=REPAIR_TEMPLATE.format(error=exc))
            )
    raise AssertionError("unreachable")
