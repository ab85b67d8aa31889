"""All morphmark specific exception and warning classes should be defined here"""
from pathlib import Path
from typing import Any, Dict, Sequence, Tuple, Union

from .presets import presets


class MorphmarkError(Exception):
    """Base morphmark exception object from which all morphmark sourced exceptions should inherit"""


class InvalidSettingsPath(MorphmarkError):
    """Raised when a settings path is provided that is neither a valid file or directory"""

    def __init__(self, settings_path: str):
        super().__init__(
            f"morphmark was told to use the settings_path: {settings_path} as the base directory "
            "or file that represents the starting point of config file discovery, but it does "
            "not exist."
        )
        self.settings_path = settings_path


class UnsupportedSettings(MorphmarkError):
    """Raised when settings are passed into morphmark (either from config, CLI, or runtime)
    that it doesn't support.
    """

    @staticmethod
    def _format_option(name: str, value: Any, source: str) -> str:
        return f"\t- {name} = {value}  (source: '{source}')"

    def __init__(self, unsupported_settings: Dict[str, Dict[str, Any]]):
        errors = "\n".join(
            self._format_option(name, **option) for name, option in unsupported_settings.items()
        )

        super().__init__(
            "morphmark was provided settings that it doesn't support:\n\n"
            f"{errors}\n\n"
            "Every supported key appears in the resolved_config.json of any run.\n"
        )
        self.unsupported_settings = unsupported_settings


class PresetDoesNotExist(MorphmarkError):
    """Raised when a preset is set by the user that doesn't exist"""

    def __init__(self, preset: str):
        super().__init__(
            f"Specified preset of {preset} does not exist. "
            f"Available presets: {','.join(presets)}."
        )
        self.preset = preset


class InvalidImage(MorphmarkError, ValueError):
    """Raised when an image violates the grid invariants (size, range, finiteness)"""

    def __init__(self, reason: str, source: Union[str, Path] = "<memory>"):
        super().__init__(f"Invalid image {source}: {reason}.")
        self.reason = reason
        self.source = source


class InvalidCoordinates(MorphmarkError, ValueError):
    """Raised when sampling coordinates contain non-finite values"""

    def __init__(self, count: int):
        super().__init__(f"{count} sampling coordinate(s) are not finite.")
        self.count = count


class ShapeMismatch(MorphmarkError, ValueError):
    """Raised when two operands that must share a shape do not"""

    def __init__(self, operation: str, first: Sequence[int], second: Sequence[int]):
        super().__init__(
            f"{operation} expects operands of identical shape, got {tuple(first)} and "
            f"{tuple(second)}."
        )
        self.operation = operation
        self.first = tuple(first)
        self.second = tuple(second)


class SingularTransform(MorphmarkError, ValueError):
    """Raised when an affine transform cannot be inverted or cannot be built"""

    def __init__(self, reason: str):
        super().__init__(f"Singular transform: {reason}.")
        self.reason = reason


class DegenerateMask(MorphmarkError, ValueError):
    """Raised when the landmark mask used by the edge-masked similarity sums to ~0"""

    def __init__(self, mask_sum: float):
        super().__init__(
            f"Landmark mask sums to {mask_sum:.3g}; every landmark lies far outside the frame."
        )
        self.mask_sum = mask_sum


class NegativeWeight(MorphmarkError, ValueError):
    """Raised when a loss weight is negative"""

    def __init__(self, name: str, value: float):
        super().__init__(f"Loss weight {name} must be nonnegative, got {value}.")
        self.name = name
        self.value = value


class DifferentiationError(MorphmarkError, ArithmeticError):
    """Raised when a backward pass cannot be run from the given root"""

    def __init__(self, reason: str, operation: str = ""):
        where = f" (offending operation: {operation})" if operation else ""
        super().__init__(f"Cannot differentiate: {reason}{where}.")
        self.reason = reason
        self.operation = operation


class NonFiniteLoss(MorphmarkError, ArithmeticError):
    """Raised by the trainers when a loss term becomes NaN or infinite"""

    def __init__(self, term: str, epoch: int, step: int, checkpoint: str = ""):
        saved = f" Last good checkpoint: {checkpoint}." if checkpoint else ""
        super().__init__(
            f"Loss term '{term}' became non-finite at epoch {epoch}, step {step}; training "
            f"aborted.{saved}"
        )
        self.term = term
        self.epoch = epoch
        self.step = step
        self.checkpoint = checkpoint


class DatasetTooSmall(MorphmarkError, ValueError):
    """Raised when a dataset has fewer images than an operation needs"""

    def __init__(self, size: int, required: int):
        super().__init__(f"Dataset holds {size} image(s) but at least {required} are required.")
        self.size = size
        self.required = required


class EmptyLossList(MorphmarkError, ValueError):
    """Raised when small-loss selection is asked to choose from nothing"""

    def __init__(self) -> None:
        super().__init__("Small-loss selection needs at least one loss value.")


class LandmarkCountMismatch(MorphmarkError, ValueError):
    """Raised when predicted and reference landmark sets cannot be paired"""

    def __init__(self, predicted: Tuple[int, ...], reference: Tuple[int, ...]):
        super().__init__(
            f"Predicted landmarks have shape {predicted} but the reference has {reference}."
        )
        self.predicted = predicted
        self.reference = reference


class UnsupportedTransform(MorphmarkError, NotImplementedError):
    """Raised when a configured global transform family is not implemented"""

    def __init__(self, kind: str):
        super().__init__(
            f"Global transform '{kind}' is not implemented; use regnet.global_transform=affine."
        )
        self.kind = kind


class MissingArtifact(MorphmarkError, FileNotFoundError):
    """Raised when an upstream artifact a command depends on does not exist"""

    def __init__(self, path: Union[str, Path], produced_by: str = ""):
        hint = f" Run `morphmark {produced_by}` first." if produced_by else ""
        super().__init__(f"Expected file {path} does not exist.{hint}")
        self.path = str(path)
        self.produced_by = produced_by


class OutputNotWritable(MorphmarkError, PermissionError):
    """Raised when an output directory cannot be created or written to"""

    def __init__(self, path: Union[str, Path], original_error: Exception):
        super().__init__(f"Cannot write to output directory {path}: {original_error}")
        self.path = str(path)
        self.original_error = original_error


class DegenerateHeatmapWarning(UserWarning):
    """Issued when a heatmap has no unique peak and decodes to the grid center"""


class LandmarksOutOfFrameWarning(UserWarning):
    """Issued when a transported landmark leaves the image frame"""
