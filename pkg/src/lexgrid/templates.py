"""Versioned prompt templates.

One plain-text file per LLM agent ships with the package. The first line
declares the template version (recorded in every trace step); the rest is
the prompt body with {{name}} placeholders. Rendering is strict: every
placeholder in the body must receive a value.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

_PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")
_VERSION_PREFIX = "version:"


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    version: str
    body: str

    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RE.findall(self.body))

    def render(self, **values: str) -> str:
        missing = self.placeholders() - set(values)
        if missing:
            raise KeyError(f"template {self.name}: missing values for {sorted(missing)}")
        return _PLACEHOLDER_RE.sub(lambda m: str(values[m.group(1)]), self.body).strip()


def load_template(name: str) -> PromptTemplate:
    """Load a packaged template by agent name (e.g. "binary_qa")."""
    text = resources.files("lexgrid.prompts").joinpath(f"{name}.txt").read_text("utf-8")
    first, _, body = text.partition("\n")
    if not first.startswith(_VERSION_PREFIX):
        raise ValueError(f"template {name}: first line must declare 'version:'")
    return PromptTemplate(
        name=name,
        version=first[len(_VERSION_PREFIX):].strip(),
        body=body.strip(),
    )
