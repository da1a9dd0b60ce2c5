"""Prompt templates and request builders.

The top-level ``*.txt`` files are the method's prompts, kept byte-for-byte;
``baseline/`` holds this package's own prompts (CoT, PoT, re-prompts).
Slots are written ``{name}`` and only the named slots are substituted, so
literal braces elsewhere survive rendering.
"""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources
from typing import Sequence

from ..core import ReasoningInstance
from ..provider import ImagePart, Message, ModelRequest, TextPart

_SLOT_RE = re.compile(r"\{([a-z_]+)\}")

TEMPLATE_SLOTS = {
    "generate": (),
    "refine": ("output", "stdout", "err", "checker_output"),
    "judge": ("json_str", "code_str", "output", "stdout", "err"),
    "switch": (),
    "algorithmicity": (),
}


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    """Load a template by name, e.g. ``"judge"`` or ``"baseline/cot"``."""
    ref = resources.files(__package__)
    for part in name.split("/")[:-1]:
        ref = ref / part
    return (ref / f"{name.split('/')[-1]}.txt").read_text(encoding="utf-8")


def render(template: str, **slots: str) -> str:
    def sub(m: re.Match) -> str:
        key = m.group(1)
        if key not in slots:
            return m.group(0)
        return str(slots[key])

    missing = {m.group(1) for m in _SLOT_RE.finditer(template)} - set(slots)
    known = {s for slots_ in TEMPLATE_SLOTS.values() for s in slots_}
    if missing & known:
        raise KeyError(f"missing prompt slots: {sorted(missing & known)}")
    return _SLOT_RE.sub(sub, template)


def render_refine(output: str, stdout: str, err: str, checker_output: str) -> str:
    return render(load_template("refine"), output=output, stdout=stdout, err=err, checker_output=checker_output)


def render_judge(json_str: str, code_str: str, output: str, stdout: str, err: str) -> str:
    return render(
        load_template("judge"), json_str=json_str, code_str=code_str, output=output, stdout=stdout, err=err
    )


def render_with_question(template_name: str, question: str) -> str:
    """Templates that end in a TARGET QUESTION / QUESTION header get the query appended."""
    return load_template(template_name) + question


def instance_images(instance: ReasoningInstance) -> tuple[ImagePart, ...]:
    return tuple(ImagePart(m.read_bytes(), m.kind) for m in instance.attachments)


def question_message(instance: ReasoningInstance, prefix: str = "") -> Message:
    parts: list[TextPart | ImagePart] = [TextPart(prefix + instance.query_text)]
    parts.extend(instance_images(instance))
    return Message("user", tuple(parts))


def generation_messages(instance: ReasoningInstance) -> list[Message]:
    return [Message.text("system", load_template("generate")), question_message(instance)]


def judge_messages(instance: ReasoningInstance, rendered_judge: str) -> list[Message]:
    return [Message.text("system", rendered_judge), question_message(instance)]


def single_turn(instance: ReasoningInstance, template_name: str) -> list[Message]:
    return [question_message(instance, prefix=load_template(template_name))]


def build_request(model_id: str, messages: Sequence[Message], temperature: float = 0.0,
                  max_output_tokens: int | None = None) -> ModelRequest:
    return ModelRequest(model_id, tuple(messages), temperature, max_output_tokens)


def _head(name: str) -> str:
    return load_template(name).split("\n", 1)[0]


def classify_request(request: ModelRequest) -> str:
    """Name the prompt a request was built from.

    One of generate, refine, judge, switch, algorithmicity, cot, pot or unknown.
    """
    first = request.messages[0].text_content
    if first.startswith(_head("generate")):
        refine_head = _head("refine")
        if any(m.role == "user" and m.text_content.startswith(refine_head) for m in request.messages):
            return "refine"
        return "generate"
    for name in ("judge", "switch", "algorithmicity"):
        if first.startswith(_head(name)):
            return name
    if first.startswith(_head("baseline/cot")):
        return "cot"
    if first.startswith(_head("baseline/pot")):
        return "pot"
    return "unknown"
