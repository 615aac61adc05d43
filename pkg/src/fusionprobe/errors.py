"""Exception hierarchy. Every structured failure derives from FusionProbeError."""


class FusionProbeError(Exception):
    pass


class ConfigError(FusionProbeError):
    pass


# geometry
class BehindCamera(FusionProbeError):
    pass


# kitti_io
class FormatError(FusionProbeError):
    pass


class MalformedCloud(FormatError):
    pass


class MissingKey(FormatError):
    pass


class MalformedMatrix(FormatError):
    pass


class FieldCount(FormatError):
    pass


class NonNumeric(FormatError):
    pass


class UnsupportedFormat(FormatError):
    pass


class CorruptHeader(FormatError):
    pass


# mesh
class NoGeometry(FormatError):
    pass


class BadIndex(FormatError):
    pass


# pose estimation
class NoGround(FusionProbeError):
    pass


class TooSparse(FusionProbeError):
    pass


class Exhausted(FusionProbeError):
    pass


# metrics
class NoGroundTruth(FusionProbeError):
    pass


class InconsistentGT(FusionProbeError):
    pass


class EmptySet(FusionProbeError):
    pass


# campaign
class SeedUnusable(FusionProbeError):
    pass


class SutFailure(FusionProbeError):
    def __init__(self, message, stderr=""):
        super().__init__(message)
        self.stderr = stderr


class SutTimeout(SutFailure):
    pass


class NonZeroExit(SutFailure):
    pass


class UnparsableOutput(SutFailure):
    pass
