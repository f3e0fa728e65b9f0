"""Exception hierarchy. Every error carries a machine-parsable ``code``."""


class SettlementMapError(Exception):
    """Base class for all pipeline errors"""
    code = "SETTLEMENT_MAP_ERROR"


class ConfigError(SettlementMapError):
    code = "CONFIG_ERROR"


class MissingInputError(SettlementMapError):
    code = "MISSING_INPUT"


class GeometryError(SettlementMapError):
    code = "INVALID_GEOMETRY"


class NonAlignedInputError(GeometryError):
    code = "NON_ALIGNED_INPUT"


class UnsupportedFormatError(SettlementMapError):
    code = "UNSUPPORTED_FORMAT"


class MissingGeoreferenceError(SettlementMapError):
    code = "MISSING_GEOREFERENCE"


class RotatedTransformError(SettlementMapError):
    code = "ROTATED_TRANSFORM"


class ParseError(SettlementMapError):
    code = "PARSE_ERROR"


class UnsupportedGeometryTypeError(ParseError):
    code = "UNSUPPORTED_GEOMETRY_TYPE"


class GeoIoError(SettlementMapError):
    code = "IO_ERROR"


class CrsMismatchError(SettlementMapError):
    code = "CRS_MISMATCH"


class RasterTooSmallError(SettlementMapError):
    code = "RASTER_TOO_SMALL"


class NoPositivesError(SettlementMapError):
    code = "NO_POSITIVES"


class OutOfBoundsError(SettlementMapError):
    code = "OUT_OF_BOUNDS"


class TileTooSmallError(SettlementMapError):
    code = "TILE_TOO_SMALL"


class SingleClassDatasetError(SettlementMapError):
    code = "SINGLE_CLASS_DATASET"


class MissingScoreError(SettlementMapError):
    code = "MISSING_SCORE"

    def __init__(self, tile_id: str):
        super().__init__(f"Score file has no row for tile '{tile_id}'")
        self.tile_id = tile_id


class MissingTileError(SettlementMapError):
    code = "MISSING_TILE"

    def __init__(self, tile_id: str):
        super().__init__(f"Tile store has no pixels for tile '{tile_id}'")
        self.tile_id = tile_id


class EmptyMatrixError(SettlementMapError):
    code = "EMPTY_MATRIX"


class PatchOverflowError(SettlementMapError):
    code = "PATCH_OVERFLOW"


class StageError(SettlementMapError):
    """A pipeline stage failed; keeps the original error's code"""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.code = getattr(cause, 'code', 'INTERNAL')
