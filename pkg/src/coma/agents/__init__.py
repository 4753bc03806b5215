"""LLM/VLM agents: providers, prompt templates, reply parsers and review artifacts."""

from .parsers import (BODY_PARTS, STEP_PATTERN, CorrectionInstruction, LocalEdit, PlanSegment,
                      ReplyParseError, parse_correction, parse_local_edits, parse_steps)
from .providers import (ChatMessage, HashEmbedder, LiveProvider, ProviderConfig, ProviderError,
                        ScriptedProvider, TranscriptExhausted, TranscriptMismatch, make_provider)
from .review import ReviewArtifact, read_review, render_for_review
from .templates import TEMPLATE_IDS, PromptTemplate, TemplateError, load_template, render_template

__all__ = [
    "BODY_PARTS", "STEP_PATTERN", "CorrectionInstruction", "LocalEdit", "PlanSegment", "ReplyParseError",
    "parse_correction", "parse_local_edits", "parse_steps",
    "ChatMessage", "HashEmbedder", "LiveProvider", "ProviderConfig", "ProviderError", "ScriptedProvider",
    "TranscriptExhausted", "TranscriptMismatch", "make_provider",
    "ReviewArtifact", "read_review", "render_for_review",
    "TEMPLATE_IDS", "PromptTemplate", "TemplateError", "load_template", "render_template",
]
