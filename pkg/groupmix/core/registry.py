"""
Registry of differentiable functions.

Every op in :mod:`groupmix.core.ops` registers its Function class here under
its public name. The registry is what the gradient suites enumerate, and it
can temporarily corrupt one op's backward rule so a suite can prove it would
catch a broken gradient.
"""
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Dict, FrozenSet, Iterator, List, Optional, Type
import logging

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

_faulted: ContextVar[FrozenSet[str]] = ContextVar("gmx_faulted_functions", default=frozenset())


class FunctionRegistry:
    """
    Registry for differentiable Function classes.

    Keeps track of every op by name and provides fault injection for
    negative-control gradient checks.
    """

    def __init__(self):
        self.functions: Dict[str, Type] = {}
        self.logger = logging.getLogger("groupmix.registry")

    def register(self, function_cls: Type) -> Type:
        """
        Register a Function class under its ``name`` attribute.

        Usable as a class decorator.

        Args:
            function_cls: Function subclass to register

        Returns:
            The class itself
        """
        name = function_cls.name
        if name in self.functions and self.functions[name] is not function_cls:
            self.logger.warning(f"Function {name} already registered, replacing")
        self.functions[name] = function_cls
        self.logger.debug(f"Registered function: {name}")
        return function_cls

    def get(self, name: str) -> Optional[Type]:
        """Get a Function class by name."""
        return self.functions.get(name)

    def list_functions(self) -> List[str]:
        """Get the sorted list of registered function names."""
        return sorted(self.functions)

    @contextmanager
    def inject_fault(self, name: str) -> Iterator[None]:
        """
        Negate the backward rule of one function inside the context.

        Args:
            name: Registered function name

        Raises:
            ConfigurationError: If no function has that name
        """
        if name not in self.functions:
            raise ConfigurationError(
                f"Cannot inject fault into unknown function {name!r}; "
                f"known: {', '.join(self.list_functions())}"
            )
        self.logger.warning(f"Injecting fault: backward of {name} is negated")
        token = _faulted.set(_faulted.get() | {name})
        try:
            yield
        finally:
            _faulted.reset(token)

    def is_faulted(self, name: str) -> bool:
        """Check whether a function's backward is currently negated."""
        return name in _faulted.get()


# Global function registry instance
registry = FunctionRegistry()
register = registry.register
