"""Agent calls: one function per planner/reviewer/trajectory request."""

from __future__ import annotations

import logging
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

from ..trajedit import CurveSpec, extract_code_block, parse_curve_spec
from .parsers import (CorrectionInstruction, PlanSegment, ReplyParseError,
                      extract_rewrite, format_description_dict, parse_bodypart_lines, parse_correction,
                      parse_local_edits, parse_segment_meta, parse_steps)
from .providers import ChatMessage
from .templates import format_words, load_template, load_vocabulary, render_template

logger = logging.getLogger(__name__)

REASK = "Your previous reply could not be parsed. Follow the output format exactly."

T = TypeVar("T")


def ask(llm, template_id: str, bindings: dict, parse: Callable[[str], T], reask: bool = True) -> T:
    """Render, chat, parse.  On a parse failure ask once more with a format reminder."""
    prompt = render_template(load_template(template_id), bindings)
    messages = [ChatMessage("user", prompt)]
    reply = llm.chat(messages, template_id)
    try:
        return parse(reply)
    except (ReplyParseError, ValueError) as exc:
        if not reask:
            raise
        logger.warning("%s reply did not parse (%s); asking again", template_id, exc)
        messages = messages + [ChatMessage("assistant", reply or "(empty)"), ChatMessage("user", REASK)]
        return parse(llm.chat(messages, template_id))


def rewrite(prompt: str, llm, vocabulary: Optional[Sequence[str]] = None) -> str:
    words = format_words(vocabulary if vocabulary is not None else load_vocabulary())

    def parse(reply: str) -> str:
        text, found = extract_rewrite(reply)
        if not found:
            logger.warning("rewrite reply has no 'A person ...' line; using the whole reply")
        return text

    return ask(llm, "rewrite", {"input_prompt": prompt, "words_list": words}, parse)


def segment(concrete: str, original: str, llm) -> List[dict]:
    return ask(llm, "segment", {"input_prompt": concrete, "original_action": original},
               lambda r: parse_steps(r, original))


def decompose(step: dict, llm) -> PlanSegment:
    """Base prompt, four local edits, then duration and trajectory text."""
    text = step["prompt"]

    def parse_base(reply: str) -> str:
        base = (reply or "").strip().strip("\"'").strip()
        if not base:
            raise ReplyParseError("empty base-motion reply")
        return base

    base = ask(llm, "base_motion", {"input_prompt": text}, parse_base)
    edits = ask(llm, "local_edits", {"input_prompt": f"Action description: {text}\nBase motion: {base}"},
                parse_local_edits)
    duration, traj = ask(llm, "segment_meta", {"input_prompt": text}, parse_segment_meta)
    return PlanSegment(text, step.get("original_prompt", ""), base, edits, traj, duration)


def caption(artifact_path: str, vlm) -> str:
    def parse(reply: str) -> str:
        if not reply or not reply.strip():
            raise ReplyParseError("empty caption")
        return reply.strip()

    return ask(vlm, "caption", {"video_path": str(artifact_path)}, parse)


def bodyparts(description: str, llm) -> dict:
    return ask(llm, "bodyparts", {"input_prompt": f"Motion Description: {description}"}, parse_bodypart_lines)


def instruct(caption_text: str, prompt: str, llm) -> CorrectionInstruction:
    """Split both texts into body parts, then compare (prompt is the standard)."""
    want = bodyparts(prompt, llm)
    seen = bodyparts(caption_text, llm)
    body = (f"Motion Description1: {format_description_dict(prompt, want)}\n"
            f"Motion Description2: {format_description_dict(caption_text, seen)}")
    return ask(llm, "compare", {"input_prompt": body}, parse_correction)


def trajectory_program(traj_text: str, llm) -> Tuple[str, CurveSpec]:
    def parse(reply: str):
        code = extract_code_block(reply)
        return code, parse_curve_spec(code)

    return ask(llm, "trajectory", {"input_prompt": traj_text}, parse)
