"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line front end can map
failures to process exit statuses without a lookup table.
"""


class ConceptAlignError(ValueError):
    """Base class for data errors raised by this package."""

    exit_code = 3


class NumericFailure(ConceptAlignError):
    """Non-finite values or divergence during optimisation."""

    exit_code = 4


class ZeroNorm(ConceptAlignError):
    pass


class DimMismatch(ConceptAlignError):
    pass


class EmptyInput(ConceptAlignError):
    pass


# storage
class BadMagic(ConceptAlignError):
    pass


class UnsupportedVersion(ConceptAlignError):
    pass


class Truncated(ConceptAlignError):
    pass


class TrailingBytes(ConceptAlignError):
    pass


class UnknownId(ConceptAlignError):
    pass


class SpanOutOfRange(ConceptAlignError):
    pass


class MalformedLine(ConceptAlignError):
    def __init__(self, line_no, message=""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if message else f"line {line_no}")


# training / inference
class SpecInvalid(ConceptAlignError):
    pass


class Divergence(NumericFailure):
    def __init__(self, step, message="loss became non-finite"):
        self.step = step
        super().__init__(f"{message} at step {step}")


class NonFinite(NumericFailure):
    pass


class KTooLarge(ConceptAlignError):
    pass


class NoConcepts(ConceptAlignError):
    pass


class EmptyStore(ConceptAlignError):
    pass


# explainability
class SingleClass(ConceptAlignError):
    pass


class UnknownClass(ConceptAlignError):
    pass


class VocabMismatch(ConceptAlignError):
    pass


class EmptySet(ConceptAlignError):
    pass


# concept extraction
class MalformedRow(ConceptAlignError):
    def __init__(self, line_no, message=""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if message else f"line {line_no}")


class ConflictingSynonym(ConceptAlignError):
    pass


# metrics
class LengthMismatch(ConceptAlignError):
    pass


class DegenerateData(ConceptAlignError):
    pass


class ZeroVariance(ConceptAlignError):
    pass


class TooFewItems(ConceptAlignError):
    pass
