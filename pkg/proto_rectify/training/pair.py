"""
Student/teacher networks plus the shared rectifier and both optimizers.
"""

import numpy as np
import torch

from ..errors import CorruptFileError
from ..model import SegmentationNetwork, build_network, get_rectifier
from ..model.rectification import Rectifier
from ..settings import ExperimentSettings
from ..util import get_basic_logger
from .ema import ema_update, make_teacher

logger = get_basic_logger(__name__)

PREFIXES = ("student", "teacher", "rectifier", "optim", "mu_optim", "cps")


class ModelPair:
    """
    Everything that changes during training.

    The optimizer only ever sees student parameters; the teacher follows by moving average.
    The rectifier is shared by both networks and updated only by its own step.
    """

    def __init__(self, settings: ExperimentSettings, seed: int | None = None):
        self.settings = settings
        train = settings.train
        self.student: SegmentationNetwork = build_network(settings, settings.seed if seed is None else seed)
        self.teacher: SegmentationNetwork = make_teacher(self.student)  # type: ignore[assignment]
        self.rectifier: Rectifier = get_rectifier(
            settings.rectify.mode, settings.num_classes, settings.rectify, tau=train.tau
        )
        self.optimizer = torch.optim.SGD(
            self.student.parameters(), lr=train.lr0, momentum=train.momentum, weight_decay=train.weight_decay
        )
        trainable = [p for p in self.rectifier.parameters() if p.requires_grad]
        self.mu_optimizer = (
            torch.optim.SGD(trainable, lr=train.lr0, momentum=train.momentum)
            if trainable and self.rectifier.learnable
            else None
        )
        projection_dim = settings.contrast.projection_dim
        self.class_means = torch.zeros(settings.num_classes, projection_dim)
        self.has_mean = torch.zeros(settings.num_classes, dtype=torch.bool)

    def update_teacher(self) -> None:
        ema_update(self.teacher, self.student, self.settings.train.ema_decay)

    def mu(self) -> float:
        return self.rectifier.mu()

    def teacher_gradient_norm(self) -> float:
        """Summed gradient norm over teacher parameters (always 0 unless something leaked)."""
        return float(sum(p.grad.norm() for p in self.teacher.parameters() if p.grad is not None))

    # ------------------------------------------------------------------ persistence

    @staticmethod
    def _momentum(optimizer: torch.optim.Optimizer | None, named) -> dict[str, np.ndarray]:
        if optimizer is None:
            return {}
        arrays = {}
        for name, param in named:
            buffer = optimizer.state.get(param, {}).get("momentum_buffer")
            if buffer is not None:
                arrays[name] = buffer.detach().cpu().numpy().astype(np.float32)
        return arrays

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat `prefix.name -> float32 array` view of every piece of training state."""
        groups: dict[str, dict[str, np.ndarray]] = {
            "student": {k: v.detach().cpu().numpy() for k, v in self.student.state_dict().items()},
            "teacher": {k: v.detach().cpu().numpy() for k, v in self.teacher.state_dict().items()},
            "rectifier": {k: v.detach().cpu().numpy() for k, v in self.rectifier.state_dict().items()},
            "optim": self._momentum(self.optimizer, self.student.named_parameters()),
            "mu_optim": self._momentum(self.mu_optimizer, self.rectifier.named_parameters()),
            "cps": {"class_means": self.class_means.numpy(), "has_mean": self.has_mean.numpy()},
        }
        arrays = {}
        for prefix, group in groups.items():
            for name, value in group.items():
                arrays[f"{prefix}.{name}"] = np.array(value, dtype=np.float32, order="C")
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """
        Restore state written by `state_arrays`.

        Raises:
            CorruptFileError: If a model parameter is missing or has the wrong shape.
        """

        def section(prefix: str) -> dict[str, torch.Tensor]:
            head = prefix + "."
            return {k[len(head) :]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(head)}

        for prefix, module in (("student", self.student), ("teacher", self.teacher), ("rectifier", self.rectifier)):
            state = section(prefix)
            expected = module.state_dict()
            missing = sorted(set(expected) - set(state))
            if missing:
                raise CorruptFileError(f"Checkpoint lacks {prefix} entries: {missing[:3]}")
            for name, value in state.items():
                if name not in expected or expected[name].shape != value.shape:
                    raise CorruptFileError(f"Checkpoint entry {prefix}.{name} does not fit the configured model")
            module.load_state_dict({k: v.to(expected[k].dtype) for k, v in state.items()})

        for prefix, optimizer, module in (
            ("optim", self.optimizer, self.student),
            ("mu_optim", self.mu_optimizer, self.rectifier),
        ):
            if optimizer is None:
                continue
            buffers = section(prefix)
            for name, param in module.named_parameters():
                if name in buffers:
                    optimizer.state[param]["momentum_buffer"] = buffers[name].clone()

        cps = section("cps")
        if "class_means" in cps:
            self.class_means = cps["class_means"].clone()
            self.has_mean = cps["has_mean"] > 0.5
        logger.debug("Restored %d arrays into model pair", len(arrays))
