"""Prompt templates shipped with the package.

``ask_system.txt`` and ``user_sim.txt`` reproduce published user-simulation
prompts byte for byte; the judge instruction reproduces a published
MT-Bench++ judging prompt. The context-judge and negative-response templates
are original to this package.
"""

from __future__ import annotations

import functools
from importlib import resources


@functools.lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    """Template text with the file's final newline removed."""
    text = resources.files("dialogpipe").joinpath("templates", name).read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text
