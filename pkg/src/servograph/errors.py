"""Exception hierarchy shared across the package."""


class ServographError(Exception):
    """Base class for all library errors."""


class OutOfBounds(ServographError):
    """Pixel coordinate outside the image."""


class InvalidDepth(ServographError):
    """Depth at the requested pixel is the invalid sentinel (0)."""


class BehindCamera(ServographError):
    """3D point has non-positive camera-frame depth."""


class EmptyMask(ServographError):
    """No masked pixel survived validity filtering."""


class TooFewPoints(ServographError):
    """Fewer correspondences than the minimum required by the fitter."""


class DegenerateConfiguration(ServographError):
    """Point configuration does not determine a rigid transform."""


class NoConsensus(ServographError):
    """RANSAC found no inlier set with at least the minimal sample size."""


class NoKeypoints(ServographError):
    """Fewer than 3 keypoint detections on one side of a match."""


class ZeroVector(ServographError):
    """An embedding with zero norm cannot be compared by cosine."""


class PlacementFailure(ServographError):
    """Rejection sampling failed to place all objects without overlap."""


class WorkspaceViolation(ServographError):
    """Commanded end-effector pose leaves the workspace bounds."""


class ScriptFailure(ServographError):
    """The scripted demonstrator cannot complete the task instance."""


class MissingStageLabels(ServographError):
    """Trajectory keyframes lack the stage labels needed to segment."""


class StateMismatch(ServographError):
    """Frame was not rendered from the world state supplied alongside it."""


class EmptyBank(ServographError):
    """Graph construction requires at least one demonstration part."""


class NoPath(ServographError):
    """The goal node is unreachable from the live node."""


class FormatVersionMismatch(ServographError):
    """On-disk bank format version differs from the supported one."""


class CorruptArray(ServographError):
    """Binary array size disagrees with the manifest dimensions."""
