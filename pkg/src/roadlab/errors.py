"""Exception hierarchy shared by all modules.

The CLI maps each family to an exit code: usage problems exit 1, data and
format problems exit 2, numeric faults exit 3.
"""


class RoadlabError(Exception):
    exit_code = 1


class UsageError(RoadlabError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class DataError(RoadlabError):
    exit_code = 2


class FormatError(DataError):
    pass


class IngestionError(DataError):
    def __init__(self, message, path=None, row=None):
        self.path = path
        self.row = row
        where = ""
        if path is not None:
            where += f"{path}"
        if row is not None:
            where += f" row {row}"
        super().__init__(f"{where}: {message}" if where else message)


class CheckpointError(DataError):
    pass


class NumericFault(RoadlabError):
    exit_code = 3


class ShapeError(NumericFault, ValueError):
    pass


class DomainError(NumericFault, ValueError):
    pass


class DegenerateInputError(DomainError):
    pass


class GeometryError(NumericFault, ValueError):
    pass


class StateError(NumericFault, RuntimeError):
    pass


class OptimizerError(NumericFault):
    pass


class SimulationFault(NumericFault):
    pass


class LostError(SimulationFault):
    pass
