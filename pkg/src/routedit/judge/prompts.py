"""Rubric system prompts, assembled from the versioned text assets."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

from ..config import CATEGORIES, ConfigError

PROMPT_VERSION = "1"

RUBRIC_FILES = {
    "LocalChange": "local_change.txt",
    "LocalRemove": "local_remove.txt",
    "LocalAdd": "local_add.txt",
    "GlobalStyle": "global_style.txt",
}

AXES = ("Instruction Compliance", "Consistency & Detail Fidelity", "Visual Quality & Stability")

SOURCE_HEADER = "Source video (before editing), 5 uniformly sampled frames:"
EDITED_HEADER = "Edited video (after editing), 5 uniformly sampled frames:"
CLOSING = (
    "Please compare these two videos based on the sampled frames and provide the requested scores "
    "in the specified format."
)


@lru_cache(maxsize=None)
def asset(name: str) -> str:
    return resources.files(__package__).joinpath("assets", name).read_text(encoding="utf-8")


def build_prompt(category: str, instruction: str) -> str:
    """System prompt for ``category`` with ``instruction`` embedded verbatim."""
    if category not in RUBRIC_FILES:
        raise ConfigError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    rubric = asset(RUBRIC_FILES[category]).rstrip("\n")
    rules = asset("common_rules.txt").rstrip("\n")
    # plain replace: the instruction may contain braces or backticks
    fmt = asset("response_format.txt").rstrip("\n").replace("{edit_prompt}", instruction)
    body = rubric.replace("<COMMON_RULES>\n<RESPONSE_FORMAT>", rules + "\n\n" + fmt)
    return body + "\n"
