"""Exception hierarchy.  Every error raised on purpose derives from ``AugError``."""


class AugError(Exception):
    pass


class ValidationError(AugError):
    """Malformed input file or parameter."""


class DegenerateVector(AugError, ValueError):
    pass


# parsing
class AllDepthInvalid(AugError):
    def __init__(self, track: int):
        super().__init__(f"track {track}: no valid depth in any frame")
        self.track = track


class DegenerateHand(AugError):
    pass


class UnrepairableTrajectory(AugError):
    pass


class MissingHand(AugError):
    def __init__(self, arm: int):
        super().__init__(f"arm {arm}: no hand landmarks in any frame")
        self.arm = arm


# grounding
class EmptyMask(AugError):
    def __init__(self, obj: int, detail: str = ""):
        super().__init__(f"object {obj}: empty mask{(' (' + detail + ')') if detail else ''}")
        self.obj = obj


class NoSkillSegment(AugError):
    def __init__(self, stage: int, arm: int):
        super().__init__(f"stage {stage}, arm {arm}: no frames satisfy the skill threshold")
        self.stage = stage
        self.arm = arm


class NonMonotoneStages(AugError):
    pass


class GripperEventOutsideSkill(AugError):
    pass


# augmentation
class UnsatisfiableSpec(AugError):
    pass


class PlannerFailure(AugError):
    pass


class UnownedKeypoints(AugError):
    def __init__(self, obj: int):
        super().__init__(f"object {obj} is grasped but owns no keypoints")
        self.obj = obj


class BatchFailure(AugError):
    pass


# dataset io
class InconsistentDemos(AugError):
    pass


class CorruptShard(AugError):
    def __init__(self, path, offset: int, detail: str = ""):
        super().__init__(f"{path} @ byte {offset}: {detail}")
        self.path = path
        self.offset = offset


class UnknownTask(AugError):
    pass
