"""Exception types shared across the package.

ValidationError subclasses map to CLI exit code 1, TransportError to exit
code 2 (alongside plain I/O errors).
"""


class CommentMatchError(Exception):
    """Base class for all package errors."""


class ValidationError(CommentMatchError):
    """Bad input data, config, or contract violation."""


class CorpusFormatError(ValidationError):
    """Corpus or annotation file cannot be parsed; carries line context."""


class DuplicateIdError(ValidationError):
    pass


class IntegrityError(ValidationError):
    """Dangling reference between records (e.g. chunk -> missing comment)."""


class EmptyTextError(ValidationError):
    pass


class DegenerateEmbeddingError(ValidationError):
    """Pre-normalization embedding has (near-)zero norm."""


class NonUnitNormError(ValidationError):
    pass


class CacheMissError(ValidationError):
    """Id not present in an embedding cache."""


class ConstantSeriesError(ValidationError):
    """Pearson correlation undefined for a constant series."""


class MissingScoreError(ValidationError):
    pass


class PoolShortfallError(ValidationError):
    """Binned sampling pool smaller than the requested draw."""


class AnnotationError(ValidationError):
    pass


class NonFiniteError(ValidationError):
    """NaN or Inf encountered in a loss or gradient."""


class TransportError(CommentMatchError):
    """Judge transport failure (network, HTTP, replay exhaustion)."""


class JudgeReplyError(ValidationError):
    """Judge reply unparseable or out of range; carries the raw reply."""

    def __init__(self, message: str, raw_reply: str):
        super().__init__(message)
        self.raw_reply = raw_reply
