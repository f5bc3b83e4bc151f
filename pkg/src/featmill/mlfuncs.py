"""Registry of scalar ML scoring functions callable from SQL.

Functions are deterministic linear scorers with an identity or logistic
link; weights come from a model file or the built-in defaults. A null input
propagates to a null output.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass

from .errors import DuplicateFunctionError, NonFiniteWeightError

_MIN_P = math.nextafter(0.0, 1.0)
_MAX_P = math.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class MlFunction:
    name: str
    weights: tuple[float, ...]
    bias: float
    link: str  # "identity" | "logistic"

    @property
    def arity(self) -> int:
        return len(self.weights)

    def evaluate(self, xs) -> float | None:
        z = self.bias
        for w, x in zip(self.weights, xs):
            if x is None:
                return None
            z += w * x
        if self.link == "identity":
            return z
        # numerically stable logistic, clamped into the open unit interval
        if z >= 0:
            p = 1.0 / (1.0 + math.exp(-z))
        else:
            e = math.exp(z)
            p = e / (1.0 + e)
        return min(max(p, _MIN_P), _MAX_P)


# Deterministic built-in scorers; weights are engine constants, overridable
# via a model file.
DEFAULT_FUNCTIONS = (
    MlFunction("PREDICT_CHURN", (0.35,), -1.2, "logistic"),
    MlFunction("DETECT_FRAUD", (0.8,), -2.0, "logistic"),
)


class MlRegistry:
    def __init__(self, include_defaults: bool = True):
        self._functions: dict[str, MlFunction] = {}
        self._lock = threading.Lock()
        if include_defaults:
            for fn in DEFAULT_FUNCTIONS:
                self.register(fn)

    def register(self, fn: MlFunction) -> None:
        if fn.link not in ("identity", "logistic"):
            raise ValueError(f"unknown link {fn.link!r}")
        if not fn.weights:
            raise ValueError("weights must be non-empty")
        for w in (*fn.weights, fn.bias):
            if not math.isfinite(w):
                raise NonFiniteWeightError(f"function {fn.name!r} has non-finite weight {w!r}")
        with self._lock:
            if fn.name in self._functions:
                raise DuplicateFunctionError(f"function {fn.name!r} already registered")
            self._functions[fn.name] = fn

    def get(self, name: str) -> MlFunction | None:
        return self._functions.get(name)

    def names(self) -> list[str]:
        return sorted(self._functions)

    def load_model_file(self, path: str) -> int:
        """Load function definitions from a JSON model file.

        Format: a list of objects {"name", "weights", "bias", "link"}.
        Entries replace same-named defaults. Returns the number loaded.
        """
        with open(path, encoding="utf-8") as fh:
            entries = json.load(fh)
        if not isinstance(entries, list):
            raise ValueError("model file must contain a JSON list")
        count = 0
        for entry in entries:
            fn = MlFunction(
                name=str(entry["name"]),
                weights=tuple(float(w) for w in entry["weights"]),
                bias=float(entry.get("bias", 0.0)),
                link=str(entry.get("link", "identity")),
            )
            with self._lock:
                self._functions.pop(fn.name, None)
            self.register(fn)
            count += 1
        return count
