"""Domain-specific parameter sensitivity analysis and sensitivity-weighted training."""

from ._errors import (
    CapabilityError,
    ContractError,
    DataError,
    DimensionError,
    DivergenceError,
    DspRegError,
    ParseError,
    ProtocolError,
    ValidationFailure,
)
from ._models import (
    DomainDataset,
    ModelSpec,
    ParameterVector,
    SensitivityReport,
    SyntheticSpec,
    TrainConfig,
)
from .analyzer import DomainSensitivityAnalyzer

__all__ = [
    "CapabilityError",
    "ContractError",
    "DataError",
    "DimensionError",
    "DivergenceError",
    "DomainDataset",
    "DomainSensitivityAnalyzer",
    "DspRegError",
    "ModelSpec",
    "ParameterVector",
    "ParseError",
    "ProtocolError",
    "SensitivityReport",
    "SyntheticSpec",
    "TrainConfig",
    "ValidationFailure",
]

__version__ = "0.1.0"
