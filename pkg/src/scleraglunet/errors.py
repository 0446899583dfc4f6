"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all pipeline errors."""


class MalformedImage(PipelineError):
    """Image file violates the P5/P6 format contract."""


class IoFailure(PipelineError):
    """Underlying file I/O failed."""


class InvalidParam(PipelineError):
    """Parameter outside its documented domain."""


class ShapeMismatch(PipelineError):
    """Tensor or image shapes are incompatible."""


class InvalidLabel(PipelineError):
    """Class label outside [0, num_classes)."""


class InvalidConfig(PipelineError):
    """Model or run configuration violates an invariant."""


class ManifestSchemaError(PipelineError):
    """Cohort manifest on disk violates the schema."""


class LeakageDetected(PipelineError):
    """A test-fold participant reached a training or selection stream."""


class NonFiniteLoss(PipelineError):
    """Training loss became NaN or infinite."""


class NonFiniteFitness(PipelineError):
    """Optimizer fitness evaluation returned a non-finite value."""


class LengthMismatch(PipelineError):
    """Paired sequences have different lengths."""


class InvalidLayer(PipelineError):
    """Requested view/block does not exist in the network."""
