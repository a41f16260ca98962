"""Prompt template bank keyed by task and step.

Default templates ship as a JSON asset inside the package; a directory
override can supply a modified copy. Placeholders use the {NAME} form:
{RESPONSE}, {IMAGE_K}, {BOX}, {QUESTION}, {CHOICES}, {ANNOTATIONS}, {CONTEXT}.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .benchdata import TaskKind


class TemplateError(KeyError):
    pass


_PLACEHOLDER = re.compile(r"\{([A-Z][A-Z_0-9]*)\}")


@dataclass(frozen=True)
class PromptTemplate:
    text: str
    append_format: bool = False


def render(template: PromptTemplate, suffix: str = "", **bindings: str) -> str:
    """Bind placeholders; any marker left unbound is an error."""
    def _sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in bindings:
            raise TemplateError(f"placeholder {{{name}}} not bound")
        return str(bindings[name])

    out = _PLACEHOLDER.sub(_sub, template.text)
    if template.append_format:
        out += suffix
    residual = _PLACEHOLDER.search(out)
    if residual:
        raise TemplateError(f"residual placeholder {residual.group(0)} after render")
    return out


def choice_list(n_images: int) -> str:
    return " | ".join(f"Image{k}" for k in range(1, n_images + 1)) + "."


class TemplateBank:
    def __init__(self, data: dict):
        self.format_suffix: str = data["format_suffix"]
        self._cot: dict[str, dict[str, str]] = data["cot"]
        self._direct: dict[str, str] = data["direct"]
        self.forge: dict[str, str] = data.get("forge", {})

    @classmethod
    def default(cls) -> "TemplateBank":
        raw = resources.files("migkit").joinpath("assets/prompts.json").read_text("utf-8")
        return cls(json.loads(raw))

    @classmethod
    def from_file(cls, path: str | Path) -> "TemplateBank":
        return cls(json.loads(Path(path).read_text("utf-8")))

    def cot(self, task: TaskKind, step: int) -> PromptTemplate:
        entry = self._cot.get(task.value, {})
        key = f"step{step}"
        if key not in entry:
            raise TemplateError(f"no template for task={task.value} step={step}")
        # only grounding requests carry the box-format suffix
        return PromptTemplate(text=entry[key], append_format=(step == 2))

    def direct(self, task: TaskKind) -> PromptTemplate:
        text = self._direct.get(task.value, self._direct.get("default"))
        if text is None:
            raise TemplateError(f"no direct template for task={task.value}")
        return PromptTemplate(text=text, append_format=True)

    def forge_template(self, name: str) -> PromptTemplate:
        if name not in self.forge:
            raise TemplateError(f"no forge template named {name!r}")
        return PromptTemplate(text=self.forge[name], append_format=False)
