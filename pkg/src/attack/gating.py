"""Per-modality gradient gating for single-sensor attacks."""
from enum import Enum
from typing import Iterable, Tuple

from ..core.insertion import PerturbedInputs
from ..sensors.camera import CameraImage
from ..sensors.lidar import LidarSweep
from .objectives import AttackError


class Modality(Enum):
    LIDAR = "lidar"
    IMAGE = "image"


class ModalityGate:
    """Stops gradients through untargeted sensor inputs; the forward pass still sees both."""

    def __init__(self, targets: Iterable[str]):
        try:
            self.targets = frozenset(Modality(t) if not isinstance(t, Modality) else t for t in targets)
        except ValueError as e:
            raise AttackError(f"Invalid target modality: {e}") from e
        if not self.targets:
            raise AttackError("At least one target modality is required")

    @property
    def is_identity(self) -> bool:
        return self.targets == frozenset(Modality)

    def apply(self, inputs: PerturbedInputs) -> Tuple[CameraImage, LidarSweep]:
        image = inputs.image if Modality.IMAGE in self.targets else inputs.image.detached()
        sweep = inputs.sweep if Modality.LIDAR in self.targets else inputs.sweep.detached()
        return image, sweep

    def __repr__(self) -> str:
        return f"ModalityGate({sorted(m.value for m in self.targets)})"


def gate_modality(targets: Iterable[str]) -> ModalityGate:
    return ModalityGate(targets)
