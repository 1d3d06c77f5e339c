"""Versioned prompt templates stored under prompts/<version>/<name>.txt."""

import os
from functools import lru_cache

from langchain_core.prompts import PromptTemplate

PROMPTS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "prompts")
DEFAULT_VERSION = "v1"


@lru_cache(maxsize=None)
def load_prompt(name: str, version: str = DEFAULT_VERSION) -> PromptTemplate:
    path = os.path.join(PROMPTS_DIR, version, f"{name}.txt")
    if not os.path.exists(path):
        raise FileNotFoundError(f"prompt template not found: {path}")
    return PromptTemplate.from_file(path, encoding="utf-8")


def render_prompt(name: str, version: str = DEFAULT_VERSION, **values) -> str:
    return load_prompt(name, version).format(**values).strip()


def available_versions():
    if not os.path.isdir(PROMPTS_DIR):
        return []
    return sorted(d for d in os.listdir(PROMPTS_DIR) if os.path.isdir(os.path.join(PROMPTS_DIR, d)))
