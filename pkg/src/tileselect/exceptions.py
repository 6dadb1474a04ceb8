"""Exception hierarchy shared by all tileselect modules."""


class TileSelectError(Exception):
    """Base class for every error raised by tileselect."""


class TensorFormatError(TileSelectError, ValueError):
    """A tensor file does not conform to the ALTS container layout."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedFormatError(TensorFormatError):
    """Unknown version, dtype code or rank."""


class TruncatedTensorError(TensorFormatError):
    pass


class CatalogError(TileSelectError, ValueError):
    """Malformed or inconsistent tile catalog."""


class DuplicateTileError(CatalogError):
    def __init__(self, tile_id, line=None):
        self.tile_id = tile_id
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"duplicate tile_id {tile_id!r}{where}")


class MissingArtifactError(TileSelectError, FileNotFoundError):
    """A tile record lacks the artifact an operation needs."""


class PreconditionError(TileSelectError, ValueError):
    """Inputs violate an operation's precondition (budget, shapes, ranges)."""
