"""
Tree nodes for run configuration files
"""

from abc import ABC, abstractmethod
from typing import Any, List, Optional, Union


class ConfigNode(ABC):
    """Base class for all config nodes"""
    def __init__(self, line: int = 0, column: int = 0):
        self.line = line
        self.column = column

    @abstractmethod
    def __repr__(self) -> str:
        pass


class Value(ConfigNode):
    """Number, string, boolean, bare name or (nested) list"""
    def __init__(self, value: Any, line: int = 0, column: int = 0, bare: bool = False):
        super().__init__(line, column)
        self.value = value
        self.bare = bare

    def plain(self) -> Any:
        if isinstance(self.value, list):
            return [item.plain() for item in self.value]
        return self.value

    def __repr__(self):
        return f"Value({self.plain()!r})"


class Assignment(ConfigNode):
    """key = value"""
    def __init__(self, key: str, value: Value, line: int = 0, column: int = 0):
        super().__init__(line, column)
        self.key = key
        self.value = value

    def __repr__(self):
        return f"Assignment({self.key} = {self.value!r})"


class Section(ConfigNode):
    """name [label] { items }"""
    def __init__(
        self,
        name: str,
        label: Optional[str],
        items: List[Union[Assignment, "Section"]],
        line: int = 0,
        column: int = 0,
    ):
        super().__init__(line, column)
        self.name = name
        self.label = label
        self.items = items

    @property
    def assignments(self) -> List[Assignment]:
        return [item for item in self.items if isinstance(item, Assignment)]

    @property
    def sections(self) -> List["Section"]:
        return [item for item in self.items if isinstance(item, Section)]

    def __repr__(self):
        label = f" [{self.label}]" if self.label is not None else ""
        return f"Section({self.name}{label}, {len(self.items)} items)"


class ConfigFile(Section):
    """Top level of one config file"""
    def __init__(self, items: List[Union[Assignment, Section]], path: Optional[str] = None):
        super().__init__("<root>", None, items, 1, 1)
        self.path = path

    def __repr__(self):
        return f"ConfigFile({self.path}, {len(self.items)} items)"
