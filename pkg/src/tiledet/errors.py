"""Exception hierarchy. Each family maps to a CLI exit code."""


class TiledetError(Exception):
    exit_code = 1


class ConfigError(TiledetError, ValueError):
    """Invalid configuration or parameter value."""

    exit_code = 2


class DataError(TiledetError, ValueError):
    """Structural-integrity problem in a dataset, manifest or detections file."""

    exit_code = 3


class BoundsError(DataError):
    """A window or box falls outside the raster it refers to."""


class InfeasibleSplitError(DataError):
    pass


class MissingDetectionsError(DataError):
    def __init__(self, patch_id):
        super().__init__(f"no detections recorded for patch {patch_id}")
        self.patch_id = patch_id


class DataIOError(TiledetError, OSError):
    """A file could not be read or written."""

    exit_code = 4
