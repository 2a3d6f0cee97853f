import copy

import torch
from torch import nn

from ..errors import ContractViolation


def make_teacher(student: nn.Module) -> nn.Module:
    """Frozen deep copy of the student."""
    teacher = copy.deepcopy(student)
    for param in teacher.parameters():
        param.requires_grad_(False)
    return teacher


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, alpha: float) -> None:
    """
    θ_t ← α·θ_t + (1 - α)·θ_s for every parameter.

    Raises:
        ContractViolation: If the two modules do not have the same parameter names and shapes.
    """
    teacher_params = dict(teacher.named_parameters())
    student_params = dict(student.named_parameters())
    if teacher_params.keys() != student_params.keys():
        raise ContractViolation("Teacher and student parameter names differ")
    for name, param_t in teacher_params.items():
        param_s = student_params[name]
        if param_t.shape != param_s.shape:
            raise ContractViolation(f"Parameter {name}: teacher {tuple(param_t.shape)} != student {tuple(param_s.shape)}")
        param_t.mul_(alpha).add_(param_s.detach(), alpha=1 - alpha)
