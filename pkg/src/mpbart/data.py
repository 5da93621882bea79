"""Dataset container and outcome label coding.

The samplers work on outcomes coded 0..C with 0 the reference level;
original labels are kept so predictions can be mapped back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Dataset", "encode_outcomes", "decode_outcomes"]


@dataclass
class Dataset:
    """Coded outcomes S in {0..C} plus a numeric covariate matrix."""

    S: np.ndarray  # int, shape (N,)
    X: np.ndarray  # float, shape (N, P)
    label_order: list  # code -> original label, index 0 is the reference
    covariate_names: list[str]

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.intp)
        self.X = np.asarray(self.X, dtype=float)
        if self.S.shape[0] != self.X.shape[0]:
            raise ValueError("outcome and covariate row counts differ")
        if self.S.size == 0:
            raise ValueError("dataset is empty")
        if self.S.min() < 0 or self.S.max() >= len(self.label_order):
            raise ValueError("coded outcome out of range")

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def num_latent(self) -> int:
        """C: number of outcome levels minus one."""
        return len(self.label_order) - 1


def encode_outcomes(labels: np.ndarray, reference) -> tuple[np.ndarray, list]:
    """Map original labels to {0..C} with the reference level at 0.

    Non-reference labels keep their sorted order. Returns the coded vector
    and the code -> label list.
    """
    labels = np.asarray(labels)
    uniq = sorted(np.unique(labels).tolist())
    if reference not in uniq:
        raise ValueError(f"reference level {reference!r} not among labels {uniq}")
    if len(uniq) < 2:
        raise ValueError("outcome must have at least 2 levels")
    order = [reference] + [u for u in uniq if u != reference]
    code = {label: i for i, label in enumerate(order)}
    S = np.array([code[v] for v in labels.tolist()], dtype=np.intp)
    return S, order


def decode_outcomes(S: np.ndarray, label_order: list) -> np.ndarray:
    return np.asarray(label_order, dtype=object)[np.asarray(S, dtype=np.intp)]
