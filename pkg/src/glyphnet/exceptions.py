"""Error types raised across the package, grouped by subsystem."""


class GlyphnetError(Exception):
    """Base class for every error this package raises on purpose."""


# --- tensor engine ---

class InvalidShape(GlyphnetError):
    """A shape contains a zero or negative extent."""


class ShapeMismatch(GlyphnetError):
    """Operand shapes disagree and cannot be broadcast."""


class InvalidAxis(GlyphnetError):
    """A reduction axis is out of range or repeated."""


class NotScalar(GlyphnetError):
    """backward() was asked to start from a non-scalar tensor."""


class DetachedRoot(GlyphnetError):
    """backward() root was not produced on the given graph."""


class InvalidStep(GlyphnetError):
    """Finite-difference step size must be positive."""


# --- layers / model ---

class ChannelMismatch(GlyphnetError):
    """Kernel channel count does not match the input."""


class KernelLargerThanInput(GlyphnetError):
    """Spatial kernel exceeds the (padded) input extent."""


class DegenerateBatch(GlyphnetError):
    """Batch statistics requested over a single element."""


class InvalidProbability(GlyphnetError):
    """Probability outside its legal range."""


class InvalidConfig(GlyphnetError):
    """Model or run configuration violates an invariant."""


# --- data pipeline ---

class CorruptImage(GlyphnetError):
    """Byte stream is not a decodable PNG."""


class MissingClassDir(GlyphnetError):
    """Dataset root lacks a required class subdirectory."""


class EmptyClass(GlyphnetError):
    """A class directory yielded no decodable images."""


class TooFewSamples(GlyphnetError):
    """A class has fewer samples than requested folds."""


class InvalidK(GlyphnetError):
    """Fold count must be at least 2."""


# --- training / evaluation ---

class EmptyBatch(GlyphnetError):
    """Loss requested over zero samples."""


class InvalidLabel(GlyphnetError):
    """Class label outside the model's class range."""


class NonFiniteGradient(GlyphnetError):
    """Optimizer received a NaN or infinite gradient."""


class EmptyDataset(GlyphnetError):
    """Evaluation requested over zero samples."""


class ClassMismatch(GlyphnetError):
    """Checkpoint class count differs from the dataset."""


# --- checkpoint format ---

class BadMagic(GlyphnetError):
    """File does not start with the checkpoint magic bytes."""


class VersionMismatch(GlyphnetError):
    """Checkpoint format version is not supported."""


class TruncatedFile(GlyphnetError):
    """Checkpoint ends in the middle of a record."""


# --- explainability ---

class MissingTargetLayer(GlyphnetError):
    """Requested activation tag was not produced by the forward pass."""


class InvalidClass(GlyphnetError):
    """Target class index outside the model's classes."""


class WriteFailure(GlyphnetError):
    """Output image could not be written."""


# --- cli / config ---

class ConfigError(GlyphnetError):
    """Run configuration file is malformed; message names the key."""
