"""Versioned JSON schemas for the on-disk formats and a validator for them."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema

from hopgraph.errors import ValidationError

NAMES = ("scene_graph", "srl_document")


@lru_cache(maxsize=None)
def load(name: str) -> dict:
    if name not in NAMES:
        raise ValidationError(f"unknown schema {name!r}; known: {', '.join(NAMES)}")
    text = resources.files(__name__).joinpath(f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


@lru_cache(maxsize=None)
def _validator(name: str):
    schema = load(name)
    cls = jsonschema.validators.validator_for(schema)
    cls.check_schema(schema)
    return cls(schema)


def validate(doc, name: str) -> None:
    """Raise :class:`ValidationError` naming the first offending path."""
    errors = sorted(_validator(name).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ValidationError(f"{name} document invalid at {where}: {err.message}")
