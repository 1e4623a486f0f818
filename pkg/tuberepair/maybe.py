from __future__ import annotations

import abc
from typing import Any, Generic, Optional, TypeVar

TypeSource = TypeVar("TypeSource")


class Maybe(Generic[TypeSource], abc.ABC):
    """Maybe encapsulates a value that may be undefined.

    Metrics use it for quantities the formulas leave undefined: the OKS of a sample without visible
    keypoints, or the AP of an empty radius bin. An undefined value is Nothing, which is not the same as 0.
    """
    _value: TypeSource  # Private maybe value which should not be modified
    _is_nothing: bool  # Private is nothing flag which should not be modified

    def unwrap(self: Maybe[TypeSource]) -> TypeSource:
        """Returns the value of the Just or raises if Nothing."""
        if self._is_nothing:
            raise ValueError("Unwrap error on undefined value")
        return self._value

    def is_just(self) -> bool:
        return not self._is_nothing

    def to_optional(self: Maybe[TypeSource]) -> Optional[TypeSource]:
        if self._is_nothing:
            return None
        return self._value

    @abc.abstractmethod
    def __str__(self: Maybe[TypeSource]) -> str:
        pass

    def __eq__(self: Maybe[TypeSource], __o: object) -> bool:
        return str(self) == str(__o)

    def __repr__(self: Maybe[TypeSource]) -> str:
        return str(self)


class Just(Maybe[TypeSource]):
    """Defined value."""

    def __init__(self, value: TypeSource):
        self._value = value
        self._is_nothing = False

    def __str__(self: Just[TypeSource]) -> str:
        return f"Just({self._value})"


class Nothing(Maybe[Any]):
    """Undefined value."""

    def __init__(self):
        self._value = Any
        self._is_nothing = True

    def __str__(self: Nothing) -> str:
        return "Nothing()"
