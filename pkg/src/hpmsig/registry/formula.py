"""Derived-metric formulas: ``+ - * /`` and parentheses over event names,
``time`` and numeric literals.

Formulas are parsed with :mod:`ast` and checked against a node whitelist,
then evaluated with :class:`fractions.Fraction` so integer-valued
expressions stay exact and the final conversion to float rounds once.
"""
from __future__ import annotations

import ast
from fractions import Fraction
from typing import Mapping

TIME = "time"

_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div)
_UNARYOPS = (ast.UAdd, ast.USub)


class FormulaError(ValueError):
    """Malformed formula or missing identifier."""


class MetricDivisionError(FormulaError, ZeroDivisionError):
    """A divisor evaluated to zero."""


def canonical_identifier(event_name: str) -> str:
    """``L1D.REPLACEMENT`` -> ``L1D_REPLACEMENT``."""
    return event_name.replace(".", "_").replace(":", "_")


def parse(formula: str) -> ast.Expression:
    try:
        tree = ast.parse(formula.strip(), mode="eval")
    except SyntaxError as exc:
        raise FormulaError(f"cannot parse formula {formula!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.Load, ast.Name) + _BINOPS + _UNARYOPS):
            continue
        if isinstance(node, ast.BinOp) and isinstance(node.op, _BINOPS):
            continue
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, _UNARYOPS):
            continue
        if isinstance(node, ast.Constant) and type(node.value) in (int, float):
            continue
        raise FormulaError(
            f"unsupported element {type(node).__name__} in formula {formula!r}"
        )
    return tree


def identifiers(formula: str) -> set[str]:
    """Names referenced by *formula* (including ``time``)."""
    return {n.id for n in ast.walk(parse(formula)) if isinstance(n, ast.Name)}


def _literal(node: ast.Constant, source: str) -> Fraction:
    # Fraction(str) keeps decimal literals such as 1.0E-06 exact
    text = ast.get_source_segment(source, node)
    try:
        return Fraction(text)
    except (TypeError, ValueError):
        return Fraction(node.value)


def evaluate(formula: str, counts: Mapping[str, float], time_s: float | None = None) -> float:
    """Evaluate *formula* with event *counts* and region runtime *time_s*.

    Raises :class:`FormulaError` for unknown identifiers and
    :class:`MetricDivisionError` when a divisor is zero.
    """
    return float(evaluate_exact(formula, counts, time_s))


def evaluate_exact(formula: str, counts: Mapping[str, float],
                   time_s: float | Fraction | None = None) -> Fraction:
    source = formula.strip()
    tree = parse(source)

    def value_of(name: str) -> Fraction:
        if name == TIME:
            if time_s is None:
                raise FormulaError(f"formula {formula!r} needs 'time' but none was given")
            return Fraction(time_s)
        if name in counts:
            return Fraction(counts[name])
        raise FormulaError(f"identifier {name!r} has no count")

    def walk(node: ast.AST) -> Fraction:
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant):
            return _literal(node, source)
        if isinstance(node, ast.Name):
            return value_of(node.id)
        if isinstance(node, ast.UnaryOp):
            operand = walk(node.operand)
            return -operand if isinstance(node.op, ast.USub) else operand
        left, right = walk(node.left), walk(node.right)
        if isinstance(node.op, ast.Add):
            return left + right
        if isinstance(node.op, ast.Sub):
            return left - right
        if isinstance(node.op, ast.Mult):
            return left * right
        if right == 0:
            raise MetricDivisionError(
                f"division by zero in {formula!r} at {ast.unparse(node.right)!r}"
            )
        return left / right

    return walk(tree)
