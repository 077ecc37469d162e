"""Exception types raised across the package.

Every error derives from :class:`JointTaskError` so the CLI can catch one base
class and report the concrete class name.
"""


class JointTaskError(Exception):
    pass


# ops
class EmptyOperands(JointTaskError, ValueError):
    pass


class OperandOutOfRange(JointTaskError, ValueError):
    pass


class MissingTable(JointTaskError, ValueError):
    pass


# data
class UnknownToken(JointTaskError, KeyError):
    def __str__(self):
        return f"UnknownToken: {self.args[0]!r}"


class EmptySplit(JointTaskError, ValueError):
    pass


# model
class SequenceTooLong(JointTaskError, ValueError):
    pass


class TokenOutOfRange(JointTaskError, ValueError):
    pass


# training
class VocabMismatch(JointTaskError, ValueError):
    pass


class EmptyDataset(JointTaskError, ValueError):
    pass


# sweep / fitting
class DegenerateCurve(JointTaskError, ValueError):
    pass


class InsufficientPoints(JointTaskError, ValueError):
    pass


# analysis
class ZeroNormRow(JointTaskError, ValueError):
    pass


class NoQualifyingRuns(JointTaskError, ValueError):
    pass


class DivisorTooLarge(JointTaskError, ValueError):
    pass


class EmptyEvalSet(JointTaskError, ValueError):
    pass


# config
class UnknownKey(JointTaskError, KeyError):
    def __init__(self, key, lineno=None):
        super().__init__(key, lineno)
        self.key = key
        self.lineno = lineno

    def __str__(self):
        where = f" (line {self.lineno})" if self.lineno is not None else ""
        return f"UnknownKey: {self.key!r}{where}"


class TypeMismatch(JointTaskError, ValueError):
    pass


class RunDirExists(JointTaskError, FileExistsError):
    pass
