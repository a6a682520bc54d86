"""Plain volatile reference structures used as recovery oracles.

They deliberately share nothing with the recoverable implementations beyond
plain ints: a list is an insertion-ordered dict, a tree is a dict read back in
key order, a map is a dict.
"""
from __future__ import annotations


class RefList:
    def __init__(self):
        self._items: dict[int, int] = {}

    def append(self, ident: int, value: int) -> None:
        self._items[ident] = value

    def delete(self, ident: int) -> None:
        del self._items[ident]

    def content(self) -> list[int]:
        return list(self._items.values())


class RefTree:
    def __init__(self):
        self._items: dict[int, int] = {}

    def insert(self, key: int, value: int) -> None:
        if key in self._items:
            raise KeyError(key)
        self._items[key] = value

    def delete(self, key: int) -> None:
        del self._items[key]

    def content(self) -> list[tuple[int, int]]:
        return sorted(self._items.items())


class RefMap:
    def __init__(self):
        self._items: dict[int, int] = {}

    def put(self, key: int, value: int) -> None:
        self._items[key] = value

    def remove(self, key: int) -> None:
        del self._items[key]

    def content(self) -> dict[int, int]:
        return dict(self._items)
