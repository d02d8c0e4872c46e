import numpy as np
import pytest

from esamp.errors import CapacityError, ContractError
from esamp.ringbuffer import FREE, PENDING, READY, RingBuffer


def test_write_complete_read_consume():
    rb = RingBuffer(4, 3)
    slots = rb.write(0, [0, 1], np.ones((2, 3)))
    assert slots.tolist() == [0, 1] and rb.status[:2].tolist() == [PENDING, PENDING]
    with pytest.raises(ContractError):
        rb.read(slots)
    rb.complete(slots, 2 * np.ones((2, 3)))
    h1, hL = rb.read(slots)
    assert np.array_equal(h1, np.ones((2, 3))) and np.array_equal(hL, 2 * np.ones((2, 3)))
    rb.consume(slots)
    assert rb.in_flight() == 0 and rb.consume_cursor == 2
    assert rb.status[:2].tolist() == [FREE, FREE]
    with pytest.raises(ContractError):
        rb.consume(slots)


def test_read_returns_copies():
    rb = RingBuffer(2, 2)
    slots = rb.write(0, [0], np.ones((1, 2)))
    rb.complete(slots, np.ones((1, 2)))
    h1, _ = rb.read(slots)
    h1[:] = 5.0
    assert rb.h1[0, 0] == 1.0
    assert rb.status[0] == READY


def test_unconsumed_slot_never_overwritten():
    rb = RingBuffer(3, 2)
    rb.write(0, [0, 1], np.zeros((2, 2)))
    with pytest.raises(CapacityError):
        rb.write(1, [0, 1], np.ones((2, 2)))
    assert rb.overwrite_attempts == 1
    assert not rb.h1.any()
    with pytest.raises(CapacityError):
        rb.write(1, [0, 1, 2, 3], np.ones((4, 2)))


def test_wraparound_and_high_water():
    rb = RingBuffer(3, 1)
    for step in range(7):
        slots = rb.write(step, [0, 1], np.full((2, 1), step))
        rb.complete(slots, np.zeros((2, 1)))
        rb.consume(slots)
    assert rb.high_water == 2 and rb.overwrite_attempts == 0
    assert rb.write_cursor == (7 * 2) % 3


def test_shape_and_capacity_checks():
    with pytest.raises(ContractError):
        RingBuffer(0, 2)
    rb = RingBuffer(2, 2)
    with pytest.raises(ContractError):
        rb.write(0, [0], np.zeros((1, 3)))
    with pytest.raises(ContractError):
        rb.complete(np.array([0]), np.zeros((1, 2)))
