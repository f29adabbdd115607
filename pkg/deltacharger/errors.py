"""
DeltaCharger error hierarchy

Every error carries a human readable ``detail`` and the process exit code the
command line reports for it.
"""

from typing import Optional


class DeltaChargerError(Exception):
    """Base error, the CLI turns it into a message and an exit code"""

    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class UsageError(DeltaChargerError):
    exit_code = 2


class IOFailure(DeltaChargerError):
    exit_code = 3


class DataError(DeltaChargerError):
    exit_code = 4


class MalformedFile(DataError):
    """A dataset or model file could not be parsed"""

    def __init__(self, detail: str, path=None, line: Optional[int] = None, section: Optional[str] = None):
        self.path = path
        self.line = line
        self.section = section
        where = str(path) if path is not None else "<input>"
        if line is not None:
            where = f"{where}:{line}"
        if section is not None:
            detail = f"{detail} (section: {section})"
        super().__init__(f"{where}: {detail}")


class ChecksumMismatch(DataError):
    pass


class TaskMismatch(DataError):
    pass


class Degenerate(DataError):
    pass


class OutOfRange(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class KinematicsError(DeltaChargerError):
    exit_code = 5


class Unreachable(KinematicsError):
    pass


class JointLimit(KinematicsError):
    pass


class NoIntersection(KinematicsError):
    pass


class IllegalTransition(DeltaChargerError):
    exit_code = 6
