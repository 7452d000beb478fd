import threading

import numpy as np
import pytest

from src.cache import CacheManager
from src.generative import support_moments


@pytest.fixture
def cache_manager():
    return CacheManager()


def test_cache_set_and_get(cache_manager):
    """Test basic cache set and get operations"""
    table = np.arange(6.0).reshape(2, 3)
    cache_manager.set(('table', 2, 3), table)

    assert cache_manager.get(('table', 2, 3)) is table


def test_nonexistent_key(cache_manager):
    """Test getting a nonexistent key returns None"""
    assert cache_manager.get("nonexistent") is None


def test_get_or_compute_computes_once(cache_manager):
    """The compute callback only runs on a miss"""
    calls = []

    def compute():
        calls.append(1)
        return 42

    assert cache_manager.get_or_compute("answer", compute) == 42
    assert cache_manager.get_or_compute("answer", compute) == 42
    assert len(calls) == 1


def test_cache_thread_safety(cache_manager):
    """Test cache operations from multiple threads"""
    def cache_operation():
        for i in range(100):
            cache_manager.set(f"key_{i}", i)
            cache_manager.get(f"key_{i}")

    threads = [threading.Thread(target=cache_operation) for _ in range(3)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    assert cache_manager.get("key_50") == 50
    assert all(cache_manager.get(f"key_{i}") == i for i in range(100))


def test_support_moments_are_memoised():
    """Repeated support-law requests share one table"""
    first = support_moments(9, 3)
    second = support_moments(9, 3)

    assert first is second
