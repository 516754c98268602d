"""Candidate generators behind one contract: ``propose(ctx) -> GeneratorOutput``."""

from __future__ import annotations

from .base import (
    EXEMPLAR_SLOTS,
    GENERATIVE_KINDS,
    KINDS,
    GenerationError,
    Generator,
    GeneratorOutput,
    PromptContext,
    extract_expressions,
)
from .grammar import GrammarConfig, GrammarGenerator, canonical_params
from .llm import AuthError, EndpointConfig, LLMGenerator, TransportError
from .templates import SYSTEM_MESSAGE, MissingSlotError, messages_for, render_prompt

__all__ = [
    "AuthError",
    "EXEMPLAR_SLOTS",
    "EndpointConfig",
    "GENERATIVE_KINDS",
    "GenerationError",
    "Generator",
    "GeneratorOutput",
    "GrammarConfig",
    "GrammarGenerator",
    "KINDS",
    "LLMGenerator",
    "MissingSlotError",
    "PromptContext",
    "SYSTEM_MESSAGE",
    "TransportError",
    "canonical_params",
    "extract_expressions",
    "messages_for",
    "render_prompt",
]
