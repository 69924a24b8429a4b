"""Exception types raised across the toolkit."""


class PatchforgeError(Exception):
    """Base class for all toolkit errors."""


class InputError(PatchforgeError):
    """Input data is missing or unusable (empty directory, missing HR data)."""


class FormatError(InputError):
    """A file decodes but uses an unsupported bit depth, colorspace or layout."""


class BoundsError(PatchforgeError, IndexError):
    pass


class DimensionError(PatchforgeError, ValueError):
    pass


class ShapeError(DimensionError):
    pass


class ConfigError(PatchforgeError, ValueError):
    pass


class ScoringGapError(PatchforgeError):
    """Selection was asked for a metric that some records do not carry."""

    def __init__(self, metric, missing_ids):
        self.metric = metric
        self.missing_ids = list(missing_ids)
        shown = ", ".join(self.missing_ids[:20])
        more = len(self.missing_ids) - 20
        if more > 0:
            shown += f", ... (+{more} more)"
        super().__init__(f"metric '{metric}' missing on {len(self.missing_ids)} record(s): {shown}")


class ManifestParseError(PatchforgeError):
    def __init__(self, path, line_no, reason):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}: line {line_no}: {reason}")


class SchemaVersionError(PatchforgeError):
    pass


class UndefinedCorrelationError(PatchforgeError, ValueError):
    pass


class EmptyDataError(PatchforgeError, ValueError):
    pass


class InvarianceNotAcknowledged(PatchforgeError):
    pass
