import torch


def poly_lr(iteration: int, max_iters: int, lr0: float, power: float = 0.9) -> float:
    """lr0 * (1 - iteration / max_iters) ** power, clipped at zero past the end."""
    progress = min(max(iteration / max_iters, 0.0), 1.0)
    return lr0 * (1 - progress) ** power


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr
