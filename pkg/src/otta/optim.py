"""
Adam over named numpy tensors, shared by the SOTD minimizer and the encoder training loop.
"""
from typing import Dict, Iterable, Optional

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


class AdamOptimizer:
    """
    Adam with linear warm-up followed by linear decay to zero at the last step.
    Tensors are updated in place.
    """

    def __init__(self, tensors: Dict[str, np.ndarray], lr: float, warmup_steps: int, total_steps: int):
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.total_steps = max(1, total_steps)
        self.step_count = 0
        self.first_moment = {name: np.zeros_like(value) for name, value in tensors.items()}
        self.second_moment = {name: np.zeros_like(value) for name, value in tensors.items()}
        self.updates = {name: 0 for name in tensors}

    def learning_rate(self, step: int) -> float:
        if self.warmup_steps and step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        decay_steps = max(1, self.total_steps - self.warmup_steps)
        return self.lr * max(0.0, (self.total_steps - step) / decay_steps)

    def step(self, tensors: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             names: Optional[Iterable[str]] = None):
        """
        Updates only the named tensors (all of them when names is None); the others keep their values and moments.
        """
        self.step_count += 1
        rate = self.learning_rate(self.step_count)
        for name in (tensors if names is None else names):
            self.updates[name] += 1
            t = self.updates[name]
            self.first_moment[name] = ADAM_BETA1 * self.first_moment[name] + (1 - ADAM_BETA1) * grads[name]
            self.second_moment[name] = ADAM_BETA2 * self.second_moment[name] + (1 - ADAM_BETA2) * grads[name] ** 2
            corrected_first = self.first_moment[name] / (1 - ADAM_BETA1 ** t)
            corrected_second = self.second_moment[name] / (1 - ADAM_BETA2 ** t)
            tensors[name] -= rate * corrected_first / (np.sqrt(corrected_second) + ADAM_EPSILON)
