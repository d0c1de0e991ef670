"""Exception hierarchy shared by every module of the package."""


class AuxInferError(Exception):
    """Base class for all errors raised by auxinfer."""


class CycleError(AuxInferError):
    def __init__(self, nodes):
        self.nodes = list(nodes)
        super().__init__("parent edges contain a cycle through: " + ", ".join(self.nodes))


class ShapeError(AuxInferError):
    pass


class DuplicateName(AuxInferError):
    pass


class UnknownVariable(AuxInferError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ModelError(AuxInferError):
    """Structurally invalid model definition (bad family/kind combination etc.)."""


class NonFinite(AuxInferError, FloatingPointError):
    pass


class DomainError(AuxInferError, ValueError):
    pass


class UnsupportedFamily(ModelError):
    pass


class FormatError(AuxInferError):
    pass


class RangeError(AuxInferError, ValueError):
    pass


class ConfigError(AuxInferError, ValueError):
    pass
