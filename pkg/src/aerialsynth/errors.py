"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto the
stable contract: 2 for user/config/input problems, 1 for internal faults.
"""


class PipelineError(Exception):
    exit_code = 1


class UserError(PipelineError):
    exit_code = 2


class MalformedFile(UserError):
    pass


class FileNotFound(UserError):
    pass


class UnknownCategory(UserError):
    pass


class DanglingImageRef(UserError):
    pass


class ConfigError(UserError):
    pass


class MissingUpstream(UserError):
    """A stage was run before the stage it depends on."""


class NoSamplesForClass(PipelineError):
    pass


class ClassNotFitted(PipelineError):
    pass


class AlphaOutOfRange(PipelineError):
    pass


class EmbeddingMissing(UserError):
    pass


class MissingPrototypeClass(PipelineError):
    pass


class BoxOutsideCanvas(PipelineError):
    pass


class EmptyLayout(PipelineError):
    pass


class WindowLargerThanImage(PipelineError):
    pass


class WindowOutOfBounds(PipelineError):
    pass


class CommandNotFound(UserError):
    pass


class MalformedResults(PipelineError):
    pass


class BackgroundSizeMismatch(UserError):
    pass


class PatchLargerThanCanvas(UserError):
    pass


class MissingPatch(PipelineError):
    pass


class SizeMismatch(PipelineError):
    pass


class OverlapInMosaicPlan(PipelineError):
    pass
