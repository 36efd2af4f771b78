"""
ampost - Registries

Name-keyed registries populated by decorators at import time. Autodiff
op-kinds, forward-operator kinds and toy dataset kinds all register here,
so adding a kind is a matter of decorating one class or function.
"""

from typing import Any, Callable, Dict, List, Optional, TypeVar

from .errors import AmpostError

T = TypeVar("T")


class Registry:
    """
    A named collection of registered kinds.

    Attributes:
        label: Human readable name of what is registered (used in errors)
        base: If set, registered objects must be subclasses of this type
        instantiate: Register an instance of the decorated class instead of the class
    """

    def __init__(self, label: str, base: Optional[type] = None, instantiate: bool = False) -> None:
        self.label = label
        self.base = base
        self.instantiate = instantiate
        self._entries: Dict[str, Any] = {}

    def register(self, name: str) -> Callable[[T], T]:
        """
        Decorator registering a class or function under ``name``.

        Args:
            name: The name of the kind (used for lookup)

        Returns:
            Decorator function that registers the object and returns it unchanged
        """
        def decorator(obj: T) -> T:
            if self.base is not None:
                if not (isinstance(obj, type) and issubclass(obj, self.base)):
                    raise TypeError(f"{getattr(obj, '__name__', obj)} must inherit from {self.base.__name__}")
            if name in self._entries:
                raise AmpostError(f"{self.label} '{name}' registered twice")
            self._entries[name] = obj() if self.instantiate else obj
            return obj
        return decorator

    def resolve(self, name: str) -> Any:
        """Look up a registered kind, failing with the list of known names."""
        try:
            return self._entries[name]
        except KeyError:
            known = ", ".join(sorted(self._entries))
            raise AmpostError(f"unknown {self.label} '{name}' (known: {known})") from None

    def names(self) -> List[str]:
        return list(self._entries)

    def __contains__(self, name: object) -> bool:
        return name in self._entries
