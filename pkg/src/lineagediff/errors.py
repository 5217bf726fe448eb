"""Exception types shared across the package.

Each error carries the exit code the command line maps it to.
"""


class LineageDiffError(Exception):
    exit_code = 1


class InputError(LineageDiffError, ValueError):
    exit_code = 2


class NumericError(LineageDiffError, ArithmeticError):
    exit_code = 3


class CompatibilityError(LineageDiffError):
    exit_code = 4


# sequence codec
class SequenceTooLong(InputError):
    pass


class EmptySequence(InputError):
    pass


class DecodesEmpty(InputError):
    pass


class MalformedFasta(InputError):
    pass


class InvalidResidue(InputError):
    def __init__(self, record_id, residue, position):
        self.record_id = record_id
        self.residue = residue
        self.position = position
        super().__init__(
            f"record {record_id!r}: invalid residue {residue!r} at position {position}"
        )


# taxonomy
class MalformedDump(InputError):
    pass


class DanglingParent(InputError):
    def __init__(self, ids):
        self.ids = sorted(ids)
        shown = ", ".join(str(i) for i in self.ids[:20])
        more = "" if len(self.ids) <= 20 else f" (+{len(self.ids) - 20} more)"
        super().__init__(f"parent ids not present in dump: {shown}{more}")


class UnknownTaxId(InputError, KeyError):
    def __str__(self):
        return f"unknown tax id {self.args[0]}"


class CycleDetected(InputError):
    pass


class LabelOutOfRange(InputError):
    pass


InvalidLabel = LabelOutOfRange


# diffusion / denoiser
class InvalidScheduleParams(InputError):
    pass


class TimestepOutOfRange(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class NonPositiveVariance(NumericError):
    pass


class PatchSizeMismatch(InputError):
    pass


class UnknownMethod(InputError):
    pass


class UntrainedModel(LineageDiffError):
    pass


class GraphNotRecorded(LineageDiffError):
    pass


# training
class EmptyBatch(InputError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, step, component, value):
        self.step = step
        self.component = component
        self.value = value
        super().__init__(f"non-finite {component} loss ({value}) at step {step}")


class CorruptCheckpoint(CompatibilityError):
    pass


class VersionMismatch(CompatibilityError):
    pass


class IoFailure(LineageDiffError, OSError):
    exit_code = 2
