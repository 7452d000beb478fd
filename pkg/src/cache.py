from typing import Any, Callable, Dict, Hashable, Optional
from threading import Lock


class CacheManager:
    """Lock-protected memo table for derived numerical tables."""

    def __init__(self):
        self._cache: Dict[Hashable, Any] = {}
        self._lock = Lock()

    def get(self, key: Hashable) -> Optional[Any]:
        with self._lock:
            return self._cache.get(key)

    def set(self, key: Hashable, value: Any) -> None:
        with self._lock:
            self._cache[key] = value

    def get_or_compute(self, key: Hashable, compute: Callable[[], Any]) -> Any:
        """Return the cached value for key, computing and storing it on a miss."""
        value = self.get(key)
        if value is not None:
            return value
        value = compute()
        self.set(key, value)
        return value
