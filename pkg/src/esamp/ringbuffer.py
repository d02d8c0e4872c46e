"""Fixed-capacity hidden-state ring buffer shared by the decode and training lanes.

The decode lane writes one slot per decode row (step id, sequence id, h1),
completes it with hL once the deep layers finish, and the training lane
acknowledges consumption.  A slot that is still unconsumed can never be
overwritten; attempting it raises CapacityError and is counted.
"""

from __future__ import annotations

import threading
from typing import Sequence

import numpy as np

from .errors import CapacityError, ContractError

FREE = 0
PENDING = 1  # h1 written, hL not yet available
READY = 2  # h1 and hL available, awaiting consumption


class RingBuffer:
    def __init__(self, capacity: int, d: int):
        if capacity <= 0:
            raise ContractError("ring buffer capacity must be positive")
        self.capacity = capacity
        self.d = d
        self.h1 = np.zeros((capacity, d))
        self.hL = np.zeros((capacity, d))
        self.step = np.full(capacity, -1, dtype=np.int64)
        self.seq = np.full(capacity, -1, dtype=np.int64)
        self.status = np.zeros(capacity, dtype=np.int8)
        self.write_cursor = 0
        self.consume_cursor = 0
        self.overwrite_attempts = 0
        self.high_water = 0
        self._lock = threading.Lock()

    def in_flight(self) -> int:
        return int(np.count_nonzero(self.status != FREE))

    def write(self, step: int, seqs: Sequence[int], h1: np.ndarray) -> np.ndarray:
        """Claim the next ``len(seqs)`` slots and store h1; returns the slot ids."""
        n = len(seqs)
        if h1.shape != (n, self.d):
            raise ContractError(f"h1 block {h1.shape} does not match {n} rows of width {self.d}")
        with self._lock:
            slots = (self.write_cursor + np.arange(n)) % self.capacity
            if n > self.capacity or np.any(self.status[slots] != FREE):
                self.overwrite_attempts += 1
                raise CapacityError("ring buffer slot still unconsumed")
            self.h1[slots] = h1
            self.step[slots] = step
            self.seq[slots] = seqs
            self.status[slots] = PENDING
            self.write_cursor = int((self.write_cursor + n) % self.capacity)
            self.high_water = max(self.high_water, self.in_flight())
        return slots

    def complete(self, slots: np.ndarray, hL: np.ndarray) -> None:
        with self._lock:
            if np.any(self.status[slots] != PENDING):
                raise ContractError("completing slots that are not pending")
            self.hL[slots] = hL
            self.status[slots] = READY

    def read(self, slots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Copies of (h1, hL) for ready slots."""
        with self._lock:
            if np.any(self.status[slots] != READY):
                raise ContractError("reading slots that are not ready")
            return self.h1[slots].copy(), self.hL[slots].copy()

    def consume(self, slots: np.ndarray) -> None:
        """Acknowledge that the training lane is done with ``slots``."""
        with self._lock:
            if np.any(self.status[slots] == FREE):
                raise ContractError("double consume of a ring buffer slot")
            self.status[slots] = FREE
            if len(slots):
                self.consume_cursor = int((int(slots[-1]) + 1) % self.capacity)
