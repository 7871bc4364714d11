"""Prompt templates and the capabilities document.

Stage prompts ship as plain-text assets next to this module so they can be
tuned without touching code. Templates use ``str.format`` placeholders;
:func:`render_prompt` fills them.
"""

from __future__ import annotations

from importlib import resources


def load_prompt(name: str) -> str:
    """Raw template text for ``prompts/<name>.txt``."""
    return (
        resources.files("flowsmith.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    )


def render_prompt(name: str, **values: str) -> str:
    return load_prompt(name).format(**values)


def load_capabilities_text() -> str:
    """The bundled framework summary fed to synthesis stages."""
    return (
        resources.files("flowsmith.prompts").joinpath("capabilities.md").read_text(encoding="utf-8")
    )
