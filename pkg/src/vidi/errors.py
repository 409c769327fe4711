"""Exception types shared across the toolkit.

Every error raised by a public operation is a subclass of VidiError, so
callers (CLI, HTTP service) can report failures uniformly.
"""


class VidiError(Exception):
    """Base class for all toolkit errors."""


# --- model loading / inference ---

class ManifestParseError(VidiError):
    """A JSON manifest is malformed or violates its schema."""


class ShapeMismatch(VidiError):
    """Tensor shapes are inconsistent with a layer or operation contract."""


class BlobSizeMismatch(VidiError):
    """Weight blob size disagrees with the counts declared in the manifest."""


class NonFiniteActivation(VidiError):
    """A forward or attribution pass produced NaN or Inf values."""


class ClassIndexOutOfRange(VidiError):
    """Requested target class does not exist in the network."""


# --- attribution ---

class EmptyBaselineSet(VidiError):
    """Multi-baseline attribution called with no baselines."""


# --- rendering ---
# (an all-zero map is not an error: the overlay returns the base image with
# a degenerate flag set)

class MissingAttribution(VidiError):
    """A gallery member lacks an attribution map for some class."""


# --- clustering ---

class InconsistentShapes(VidiError):
    """Attribution maps being embedded do not share shape/class count."""


class KTooLarge(VidiError):
    """Requested k exceeds the number of distinct points."""


class EmptyInput(VidiError):
    """An operation requiring at least one element received none."""


class DimensionMismatch(VidiError):
    """Feature vector dimension differs from the model's."""


# --- metrics ---

class LengthMismatch(VidiError):
    """Paired label/assignment vectors have different lengths."""


class UnknownLabel(VidiError):
    """A label is outside the declared class set."""


class DomainError(VidiError):
    """A metric input is outside its mathematical domain."""


# --- data pipeline ---

class DuplicateId(VidiError):
    """Two manifest records share an image_id."""


class ScoreOutOfRange(VidiError):
    """Severity score outside the [0, 6] opacity range."""


class MissingScore(VidiError):
    """Severity scenario record lacks a severity_score."""


class DecodeError(VidiError):
    """An image file could not be decoded."""


class ZeroSizedImage(VidiError):
    """Decoded image has a zero dimension."""


class EmptyClass(VidiError):
    """Stratified split received no records."""


# --- service ---

class ConfigError(VidiError):
    """Run configuration violates its invariants."""


class RunNotFound(VidiError):
    """No run with the given id exists in the data directory."""


class ClusterNotFound(VidiError):
    """Run exists but has no such cluster."""


class InvalidLabel(VidiError):
    """Annotation label missing or outside the scenario's class set."""
