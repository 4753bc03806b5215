"""Parsers for planner, decomposer and reviewer replies.

Every parser either returns a value or raises :class:`ReplyParseError`.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

BODY_PARTS: Tuple[str, ...] = ("left arm", "right arm", "left leg", "right leg")

STEP_PATTERN = r'(?m)^step\d+:\s*(.*?)(?=(\nstep\d+:)|$)'


class ReplyParseError(ValueError):
    def __init__(self, msg: str, reply: str = "", pos: Optional[int] = None):
        where = f" (at offset {pos})" if pos is not None else ""
        super().__init__(msg + where)
        self.reply = reply
        self.pos = pos


@dataclass(frozen=True)
class LocalEdit:
    body_part: str
    description: Optional[str]


@dataclass(frozen=True)
class PlanSegment:
    prompt: str
    original_prompt: str
    base: str = ""
    local_edits: Tuple[LocalEdit, ...] = ()
    traj: Optional[str] = None
    duration_s: Optional[float] = None

    def __post_init__(self):
        if self.local_edits:
            if tuple(e.body_part for e in self.local_edits) != BODY_PARTS:
                raise ValueError(f"local edits must list {BODY_PARTS} in order")
        if self.duration_s is not None and not self.duration_s > 0:
            raise ValueError("duration must be positive")

    def edit_for(self, body_part: str) -> Optional[str]:
        for e in self.local_edits:
            if e.body_part == body_part:
                return e.description
        return None


@dataclass(frozen=True)
class CorrectionInstruction:
    left_arm: Optional[str] = None
    right_arm: Optional[str] = None
    lower_body: Optional[str] = None

    @property
    def empty(self) -> bool:
        return self.left_arm is None and self.right_arm is None and self.lower_body is None


def _is_none(text: str) -> bool:
    return text.strip().strip("\"'“”‘’.[]*` ").lower() in ("none", "")


def _clean(text: str) -> str:
    return text.strip().strip("*` ").strip()


# ---------------------------------------------------------------- planner

_OUTPUT_PREFIX = re.compile(r"^[\s\-*>#]*(?:\**output\**\s*:\**)?\s*", re.IGNORECASE)


def extract_rewrite(reply: str) -> Tuple[str, bool]:
    """(rewritten prompt, found).  Picks the last line that starts with "A person" once
    bullets and an "Output:" label are removed; otherwise the whole reply, found=False."""
    if not reply or not reply.strip():
        raise ReplyParseError("empty rewrite reply")
    for line in reversed(reply.strip().splitlines()):
        body = _OUTPUT_PREFIX.sub("", line, count=1).strip().strip("\"'“”").strip()
        if body.lower().startswith("a person"):
            return body, True
    return reply.strip(), False


def parse_steps(reply: str, original_prompt: str = "") -> List[Dict[str, str]]:
    text = (reply or "").strip()
    matches = re.findall(STEP_PATTERN, text, re.DOTALL)
    out = []
    for match in matches:
        desc = match[0].strip()
        if desc:
            out.append({"prompt": desc, "original_prompt": original_prompt})
    if not out:
        raise ReplyParseError("no 'step<N>:' lines found", reply)
    return out


_EDITS_BLOCK = re.compile(r"<LOCAL_EDITS_JSON>(.*?)</LOCAL_EDITS_JSON>", re.DOTALL)


def parse_local_edits(reply: str) -> Tuple[LocalEdit, ...]:
    blocks = list(_EDITS_BLOCK.finditer(reply or ""))
    if not blocks:
        raise ReplyParseError("missing <LOCAL_EDITS_JSON> ... </LOCAL_EDITS_JSON> block", reply)
    block = blocks[-1]
    try:
        data = json.loads(block.group(1))
    except json.JSONDecodeError as exc:
        raise ReplyParseError(f"malformed local-edits JSON: {exc.msg}", reply,
                              block.start(1) + exc.pos) from None
    if not isinstance(data, list):
        raise ReplyParseError("local edits must be a JSON array", reply, block.start(1))
    found: Dict[str, Optional[str]] = {}
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            raise ReplyParseError(f"entry {i} is not an object", reply, block.start(1))
        part = item.get("body part")
        desc = item.get("description")
        if not isinstance(part, str) or not isinstance(desc, str):
            raise ReplyParseError(f"entry {i} needs string 'body part' and 'description'", reply,
                                  block.start(1))
        part = " ".join(part.lower().split())
        if part not in BODY_PARTS:
            raise ReplyParseError(f"entry {i}: unknown body part {part!r}", reply, block.start(1))
        if part in found:
            raise ReplyParseError(f"body part {part!r} listed twice", reply, block.start(1))
        found[part] = None if _is_none(desc) else desc.strip()
    missing = [p for p in BODY_PARTS if p not in found]
    if missing:
        raise ReplyParseError(f"local edits missing {missing}", reply, block.start(1))
    return tuple(LocalEdit(p, found[p]) for p in BODY_PARTS)


_META_LINE = re.compile(r"^[\s\-*]*(duration|trajectory)\s*\**\s*:\s*\**(.*)$", re.IGNORECASE | re.MULTILINE)
_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?")


def parse_segment_meta(reply: str) -> Tuple[Optional[float], Optional[str]]:
    """(duration seconds or None, trajectory text or None)."""
    got: Dict[str, str] = {}
    for m in _META_LINE.finditer(reply or ""):
        got[m.group(1).lower()] = m.group(2)
    if not got:
        raise ReplyParseError("expected 'Duration:' and 'Trajectory:' lines", reply)
    duration = None
    if "duration" in got:
        num = _NUMBER.search(got["duration"])
        if num and float(num.group()) > 0:
            duration = float(num.group())
    traj = got.get("trajectory")
    traj = None if traj is None or _is_none(traj) else _clean(traj)
    return duration, traj


# ---------------------------------------------------------------- reviewer

def _labelled_lines(reply: str, labels: Tuple[str, ...]) -> Dict[str, str]:
    pattern = re.compile(r"^[\s\-*>#]*(" + "|".join(re.escape(l) for l in labels) + r")\s*\**\s*:\s*(.*)$",
                         re.IGNORECASE)
    out: Dict[str, str] = {}
    for line in (reply or "").splitlines():
        m = pattern.match(line)
        if not m:
            continue
        key = " ".join(m.group(1).lower().split())
        if key in out:
            logger.warning("duplicate %r line in reply; keeping the last one", key)
        out[key] = _clean(m.group(2))
    return out


def parse_bodypart_lines(reply: str) -> Dict[str, str]:
    """Four labelled lines ("Right arm: ...") keyed right_arm/left_arm/right_leg/left_leg."""
    labels = ("right arm", "left arm", "right leg", "left leg")
    got = _labelled_lines(reply, labels)
    missing = [l for l in labels if not got.get(l)]
    if missing:
        raise ReplyParseError(f"missing body-part lines: {missing}", reply)
    return {l.replace(" ", "_"): got[l] for l in labels}


def parse_correction(reply: str) -> CorrectionInstruction:
    labels = ("left arm", "right arm", "lower body")
    got = _labelled_lines(reply, labels)
    if not got:
        raise ReplyParseError("no 'Left arm:', 'Right arm:' or 'Lower body:' lines", reply)
    for l in labels:
        if l not in got:
            logger.warning("correction reply has no %r line; treating it as None", l)
    vals = {l.replace(" ", "_"): (None if l not in got or _is_none(got[l]) else got[l]) for l in labels}
    return CorrectionInstruction(**vals)


def format_description_dict(motion: str, parts: Dict[str, str]) -> str:
    return json.dumps({"motion": motion, "Right arm": parts["right_arm"], "Left arm": parts["left_arm"],
                       "Right leg": parts["right_leg"], "Left leg": parts["left_leg"]}, ensure_ascii=False)
