"""
Branch recording for the non-smooth operations of a forward pass.

Clipping, max/min, hard thresholds and the disturbance dead zone report the
branch each element took through ``record_branch``. Inside ``recording()`` these
reports are collected; elsewhere they are free. Two forward passes whose records
differ straddle a kink, which is how the finite-difference oracle decides which
entries to skip.
"""
from contextlib import contextmanager
from contextvars import ContextVar

import torch

_record: ContextVar[list | None] = ContextVar("branch_record", default=None)


def record_branch(name: str, condition: torch.Tensor) -> None:
    record = _record.get()
    if record is not None:
        record.append((name, condition.detach().to(torch.bool).clone()))


@contextmanager
def recording():
    record: list[tuple[str, torch.Tensor]] = []
    token = _record.set(record)
    try:
        yield record
    finally:
        _record.reset(token)


def same_branches(first: list, second: list) -> bool:
    if len(first) != len(second):
        return False
    for (name_a, cond_a), (name_b, cond_b) in zip(first, second):
        if name_a != name_b or cond_a.shape != cond_b.shape or not torch.equal(cond_a, cond_b):
            return False
    return True
