"""
Parser for run configuration files
Builds a ConfigFile tree with a lark LALR grammar
"""

from pathlib import Path
from typing import Optional

from lark import Lark, Token, Transformer, v_args
from lark.exceptions import UnexpectedCharacters, UnexpectedEOF, UnexpectedInput, UnexpectedToken

from aofusion.config.nodes import Assignment, ConfigFile, Section, Value

GRAMMAR = r"""
    start: item*

    ?item: assignment
         | section

    assignment: NAME "=" value
    section: NAME label? "{" item* "}"
    label: "[" (NAME | STRING | NUMBER) "]"

    ?value: NUMBER          -> number
          | STRING          -> string
          | NAME            -> name
          | "[" [value ("," value)*] "]" -> list

    NAME: /[A-Za-z_][A-Za-z0-9_]*/
    STRING: /"[^"\n]*"/
    NUMBER: /[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?/
    COMMENT: /#[^\n]*/

    %import common.WS
    %ignore WS
    %ignore COMMENT
"""


class ConfigError(Exception):
    """Raised for unreadable, malformed or inconsistent config files"""
    pass


def _number(text: str):
    if any(c in text for c in ".eE"):
        return float(text)
    return int(text)


@v_args(meta=True)
class _TreeBuilder(Transformer):

    def start(self, meta, items):
        return list(items)

    def assignment(self, meta, children):
        key, value = children
        return Assignment(str(key), value, key.line, key.column)

    def section(self, meta, children):
        name = children[0]
        label = None
        items = children[1:]
        if items and isinstance(items[0], tuple):
            label = items[0][0]
            items = items[1:]
        return Section(str(name), label, list(items), name.line, name.column)

    def label(self, meta, children):
        token = children[0]
        if token.type == "STRING":
            return (token[1:-1],)
        return (str(token),)

    def number(self, meta, children):
        token = children[0]
        return Value(_number(token), token.line, token.column)

    def string(self, meta, children):
        token = children[0]
        return Value(token[1:-1], token.line, token.column)

    def name(self, meta, children):
        token: Token = children[0]
        if token == "true":
            return Value(True, token.line, token.column)
        if token == "false":
            return Value(False, token.line, token.column)
        return Value(str(token), token.line, token.column, bare=True)

    def list(self, meta, children):
        items = [c for c in children if c is not None]
        line = meta.line if not meta.empty else 0
        column = meta.column if not meta.empty else 0
        return Value(items, line, column)


_PARSER = Lark(GRAMMAR, parser="lalr", propagate_positions=True, maybe_placeholders=True)


def _syntax_message(e: UnexpectedInput) -> str:
    if isinstance(e, UnexpectedEOF):
        return f"Unexpected end of file, expected {', '.join(sorted(e.expected))}"
    if isinstance(e, UnexpectedToken):
        return f"Expected {', '.join(sorted(e.expected))}, got '{e.token}'"
    if isinstance(e, UnexpectedCharacters):
        allowed = ", ".join(sorted(e.allowed or [])) or "a token"
        return f"Expected {allowed}, got '{e.char}'"
    return str(e)


def parse_config(text: str, path: Optional[str] = None) -> ConfigFile:
    """Parse config text; syntax errors become ConfigError with line and column"""
    try:
        tree = _PARSER.parse(text)
    except UnexpectedInput as e:
        where = f"{path}: " if path else ""
        line = getattr(e, "line", "?")
        column = getattr(e, "column", "?")
        raise ConfigError(f"{where}{_syntax_message(e)} at line {line}, column {column}") from e
    return ConfigFile(_TreeBuilder().transform(tree), path)


def load_config_file(path) -> ConfigFile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"Cannot read config file '{path}': {e.strerror or e}") from e
    return parse_config(text, str(path))
