"""Exception types shared across the package."""


class PragError(Exception):
    """Base class for all package errors."""


class InvalidId(PragError):
    """A token id outside the byte-tokenizer vocabulary was decoded."""


class EmptyCorpus(PragError):
    """An index was requested over a corpus with no documents."""


class EmptyText(PragError):
    """Pretraining was requested on empty text."""


class SeqTooLong(PragError):
    """A token sequence exceeds the model's maximum sequence length."""


class AllMasked(PragError):
    """A loss was requested with every position masked out."""


class FingerprintMismatch(PragError):
    """An adapter or delta was built against a different base model."""


class ShapeMismatch(PragError):
    """Adapter matrix shapes are incompatible with the model config."""


class EmptyList(PragError):
    """A merge was requested over zero adapters."""


class BadMagic(PragError):
    """A serialized blob does not start with the expected magic bytes."""


class VersionUnsupported(PragError):
    """A serialized blob carries a format version this build cannot read."""


class TruncatedPayload(PragError):
    """A serialized blob ends before its declared payload."""


class ChecksumMismatch(PragError):
    """A serialized blob's checksum does not match its payload."""


class DuplicateEntry(PragError):
    """A store put would overwrite an existing adapter without the overwrite flag."""


class IoFailure(PragError):
    """A filesystem operation in the adapter store failed."""


class InsufficientFacts(PragError):
    """QA generation was requested on a document with no extractable facts."""


class EndpointUnreachable(PragError):
    """The external augmenter endpoint could not be reached after retries."""


class MalformedResponse(PragError):
    """The external augmenter returned text that cannot be parsed."""


class Overlong(PragError):
    """A prompt or training sequence cannot fit within the model context."""


class NonFiniteLoss(PragError):
    """Training produced a NaN or infinite loss."""


class NoDocuments(PragError):
    """Retrieval returned no documents in a retrieval mode."""


class ConfigError(PragError):
    """A run configuration file is malformed or carries unknown keys."""
