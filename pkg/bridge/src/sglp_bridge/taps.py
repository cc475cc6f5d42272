"""Selecting and observing the prunable units of a PyTorch model.

A TapSpec names the units by module-path patterns (fnmatch syntax, e.g.
``layer*.block*`` to treat each residual block as one prunable layer) and
says how to reduce each unit's output tensor to an (n, d) matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from fnmatch import fnmatch

import numpy as np
import torch
from torch import nn

from .formats import BridgeError


@dataclass(frozen=True)
class TapSpec:
    patterns: tuple[str, ...]
    flatten_mode: str = "flatten"  # or "channel-mean"

    def __post_init__(self) -> None:
        if not self.patterns:
            raise BridgeError("at least one tap pattern is required")
        if self.flatten_mode not in ("flatten", "channel-mean"):
            raise BridgeError(f"unknown flatten mode {self.flatten_mode!r}")

    def matches(self, module_path: str) -> bool:
        return any(fnmatch(module_path, pattern) for pattern in self.patterns)


def match_taps(model: nn.Module, tap: TapSpec) -> list[tuple[str, nn.Module]]:
    """Modules matching the tap patterns, in registration order.

    A prunable unit is tapped as a whole: when both a module and one of its
    descendants match (``block*`` matches ``block0`` and ``block0.linear``),
    only the outermost module is kept.
    """
    matched = [
        (path, module)
        for path, module in model.named_modules()
        if path and tap.matches(path)
    ]
    paths = {path for path, _ in matched}
    found = [
        (path, module)
        for path, module in matched
        if not any(ancestor in paths for ancestor in _ancestors(path))
    ]
    if len(found) < 2:
        raise BridgeError(
            f"tap patterns {list(tap.patterns)} matched {len(found)} module(s); need at least 2"
        )
    return found


def _ancestors(path: str):
    parts = path.split(".")
    for i in range(1, len(parts)):
        yield ".".join(parts[:i])


def to_matrix(output: torch.Tensor, mode: str) -> np.ndarray:
    if output.dim() < 2:
        raise BridgeError(f"tapped output must have a batch dimension, got shape {tuple(output.shape)}")
    if mode == "channel-mean" and output.dim() > 2:
        output = output.reshape(output.shape[0], output.shape[1], -1).mean(dim=2)
    else:
        output = output.reshape(output.shape[0], -1)
    return output.detach().cpu().to(torch.float32).numpy()


def capture_activations(
    model: nn.Module, batch: torch.Tensor, tap: TapSpec
) -> tuple[list[str], list[np.ndarray]]:
    """One forward pass with hooks; returns taps in forward execution order.

    Every tapped module must fire exactly once per forward.
    """
    taps = match_taps(model, tap)
    fired: list[tuple[str, np.ndarray]] = []
    seen: set[str] = set()
    handles = []

    def make_hook(path: str):
        def hook(_module, _inputs, output):
            if not isinstance(output, torch.Tensor):
                raise BridgeError(f"tap {path!r} produced {type(output).__name__}, not a tensor")
            if path in seen:
                raise BridgeError(f"tap {path!r} fired more than once in a single forward")
            seen.add(path)
            fired.append((path, to_matrix(output, tap.flatten_mode)))

        return hook

    for path, module in taps:
        handles.append(module.register_forward_hook(make_hook(path)))
    try:
        model.eval()
        with torch.no_grad():
            model(batch)
    finally:
        for handle in handles:
            handle.remove()
    if len(fired) != len(taps):
        missing = {path for path, _ in taps} - seen
        raise BridgeError(f"taps never fired during forward: {sorted(missing)}")
    names = [path for path, _ in fired]
    matrices = [matrix for _, matrix in fired]
    sample_counts = {m.shape[0] for m in matrices}
    if len(sample_counts) != 1:
        raise BridgeError(f"inconsistent sample counts across taps: {sorted(sample_counts)}")
    for name, matrix in zip(names, matrices):
        if not np.isfinite(matrix).all():
            raise BridgeError(f"tap {name!r} produced non-finite activations")
    return names, matrices
