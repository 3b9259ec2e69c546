"""Front-to-back compilation: source text -> program -> trace -> tape."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff, dsl
from .autodiff import Tape
from .interp import InterpResult, interpret


class CompileError(ValueError):
    def __init__(self, diagnostics: list[dsl.Diagnostic]):
        self.diagnostics = diagnostics
        first = diagnostics[0] if diagnostics else None
        detail = f"{first.message} (line {first.line})" if first else "unknown error"
        super().__init__(f"program invalid: {detail}")


@dataclass
class CompiledModel:
    text: str
    program: dsl.Program
    interp: InterpResult
    tape: Tape
    warnings: list[dsl.Diagnostic]

    @property
    def P0(self) -> np.ndarray:
        return np.array(self.interp.initial_params, dtype=float)

    @property
    def param_names(self) -> tuple[str, ...]:
        return self.interp.param_names

    def params_dict(self, P=None) -> dict[str, float]:
        values = self.P0 if P is None else np.asarray(P, dtype=float)
        return {name: float(v) for name, v in zip(self.param_names, values)}

    def positions(self, P=None) -> np.ndarray:
        P = self.P0 if P is None else np.asarray(P, dtype=float)
        V, _ = autodiff.eval_tape(self.tape, P)
        return V.reshape(-1, 3)


def compile_text(text: str) -> CompiledModel:
    """Parse, validate, interpret, and lower. Raises SyntaxTreeError on bad
    syntax and CompileError when validation reports errors."""
    program = dsl.parse(text)
    diags = dsl.validate(program)
    errors = [d for d in diags if d.severity == "error"]
    if errors:
        raise CompileError(errors)
    result = interpret(program)
    tape = autodiff.lower(result.graph)
    return CompiledModel(
        text=text,
        program=program,
        interp=result,
        tape=tape,
        warnings=[d for d in diags if d.severity != "error"],
    )


def compile_file(path) -> CompiledModel:
    return compile_text(Path(path).read_text(encoding="utf-8"))


def bundled_model_path(name: str) -> Path:
    return Path(__file__).parent / "models" / f"{name}.dcad"


def load_bundled(name: str) -> CompiledModel:
    return compile_file(bundled_model_path(name))


BUNDLED_MODELS = ("box", "bracket", "coupled_cylinder", "dresser", "two_boxes")
