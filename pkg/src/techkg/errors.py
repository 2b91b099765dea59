"""Exception hierarchy shared across the toolkit."""


class TechKgError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(TechKgError):
    """Input violates a declared file or payload schema."""

    def __init__(self, message, *, line=None, path=None):
        self.line = line
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ParseError(TechKgError):
    """Malformed textual input (GML, script source)."""

    def __init__(self, message, *, line=None, column=None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f"line {line}"
            if column is not None:
                loc += f", col {column}"
        super().__init__(f"{loc}: {message}" if loc else message)


class OrderError(TechKgError):
    """Event timestamps regress within a file."""


class MissingAttacker(TechKgError):
    """Operation requires an Attacker node and the graph has none."""


class UnknownPid(TechKgError):
    """Initial process id never appears in the event stream."""


class NoAttackEvents(TechKgError):
    """No events survive windowing and filtering."""


class DepthError(TechKgError):
    """AST nesting exceeds the parse depth limit."""


class PromptError(TechKgError):
    """Report cannot be rendered into an extraction prompt."""


class ModelUnavailable(TechKgError):
    """Text-model transport failed or fixture store has no response."""


class SchemaViolation(TechKgError):
    """Model output failed schema validation after the repair round-trip."""

    def __init__(self, message, violations=None):
        self.violations = list(violations or [])
        super().__init__(message)


class EmptyExtraction(TechKgError):
    """Model returned a structurally valid but entity-free extraction."""


class DanglingRelation(TechKgError):
    """Extraction relation names an entity that was not listed."""


class TechniqueMismatch(TechKgError):
    """Merge inputs carry different MITRE technique ids."""


class SourceMismatch(TechKgError):
    """Same-source merge inputs mix source kinds."""


class RoleError(TechKgError):
    """Cross-source merge received base/additional graphs in swapped roles."""


class EmptyInput(TechKgError):
    """Operation requires at least one input record."""


class ConfigError(TechKgError):
    """Pipeline or client configuration is invalid."""
