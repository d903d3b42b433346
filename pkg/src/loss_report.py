from dataclasses import dataclass, field

import torch


@dataclass
class LossReport:
    """A scalar objective, its gradient with respect to the mask (if taken) and named intermediates."""

    value: float
    gradient: torch.Tensor | None = None
    diagnostics: dict = field(default_factory=dict)
