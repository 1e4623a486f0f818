from __future__ import annotations

from typing import Callable, Generic, Tuple, TypeVar

TypeSource = TypeVar('TypeSource')
TypeMonoid = TypeVar('TypeMonoid')
TypeResult = TypeVar('TypeResult')


class Writer(Generic[TypeSource, TypeMonoid]):
    """Writer monad: a value paired with an accumulated log.

    The log must be a monoid (associative ``+`` with an identity such as ``[]`` or ``''``). The repair stage
    returns ``Writer(volume, [entry, ...])`` so every bridged pair leaves one entry in the repair log while
    the volume itself flows through the chain.
    """
    _value: Tuple[TypeSource, TypeMonoid]  # Private writer value which should not be modified

    def __init__(self, value: TypeSource, monoid: TypeMonoid) -> None:
        """Writer constructor.

        Parameters
        ----------
        value: TypeSource
            Computation value
        monoid: TypeMonoid
            Log accumulated so far
        """
        self._value = (value, monoid)

    def bind(self: Writer[TypeSource, TypeMonoid],
             function: Callable[[TypeSource], Writer[TypeResult, TypeMonoid]]) -> Writer[TypeResult, TypeMonoid]:
        """Writer bind interface: the logs of both computations are appended (+).

        Parameters
        ----------
        function: Callable[[TypeSource], Writer[TypeResult, TypeMonoid]]
            Function which takes the current value and returns a new writer.

        Returns
        -------
        writer: Writer[TypeResult, TypeMonoid]
        """
        value, monoid = self.run()
        result, other_monoid = function(value).run()
        return self.__class__(result, monoid + other_monoid)  # type: ignore

    def run(self: Writer[TypeSource, TypeMonoid]) -> Tuple[TypeSource, TypeMonoid]:
        return self._value

    def __str__(self) -> str:
        return f'Writer({self._value})'

    def __repr__(self) -> str:
        return str(self)
