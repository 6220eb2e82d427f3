"""Exception types. Anything deriving from DataError maps to CLI exit code 4."""


class AudioGeoError(Exception):
    pass


class DataError(AudioGeoError):
    pass


class InvalidCoordinate(DataError, ValueError):
    pass


class InvalidGridSpec(DataError, ValueError):
    pass


class InvalidLevel(DataError, IndexError):
    pass


class UnsupportedAudio(DataError):
    pass


class EmptyAudio(DataError):
    pass


class ShapeError(DataError, ValueError):
    pass


class LabelError(DataError, ValueError):
    pass


class BatchTooSmall(DataError, ValueError):
    pass


class CorruptEmbeddingFile(DataError):
    pass


class CorruptCheckpoint(DataError, ValueError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class EmptyDataset(DataError, ValueError):
    pass


class EmptyGallery(DataError, ValueError):
    pass


class EmptyClipList(DataError, ValueError):
    pass


class GalleryMismatch(DataError, ValueError):
    pass


class LengthMismatch(DataError, ValueError):
    pass


class SamplingExhausted(DataError, RuntimeError):
    pass


class ManifestFieldError(DataError, KeyError):
    def __init__(self, ids, fields=()):
        self.ids = list(ids)
        self.fields = list(fields)
        msg = "entries missing required fields"
        if self.fields:
            msg += " (" + ", ".join(self.fields) + ")"
        super().__init__(msg + ": " + ", ".join(str(i) for i in self.ids))

    def __str__(self):
        return self.args[0]


class ConfigError(AudioGeoError, ValueError):
    """Bad run configuration (CLI exit code 2)."""


class UniformWeightsFallback(UserWarning):
    """All species weights were zero; an unweighted mean map was used."""
