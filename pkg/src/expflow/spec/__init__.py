"""Experiment specification language: parsing, resolution, validation."""

from expflow.spec.expressions import Expression, Placeholder, parse_expression
from expflow.spec.model import (
    Diagnostic,
    Number,
    ObjectNode,
    ResolvedDocument,
    SpecDocument,
    Span,
)
from expflow.spec.parser import parse_file, parse_spec
from expflow.spec.resolver import interpolate, resolve
from expflow.spec.serializer import dump_document, dump_objects
from expflow.spec.validator import validate

__all__ = [
    "Diagnostic",
    "Expression",
    "Number",
    "ObjectNode",
    "Placeholder",
    "ResolvedDocument",
    "SpecDocument",
    "Span",
    "dump_document",
    "dump_objects",
    "interpolate",
    "parse_expression",
    "parse_file",
    "parse_spec",
    "resolve",
    "validate",
]
