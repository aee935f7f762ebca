from __future__ import annotations

from collections import OrderedDict
from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor


class IncongruentParametersError(ValueError):
    """Two parameter sets cannot be combined entry by entry."""


class ParameterSet(OrderedDict):
    """Ordered ``name -> Tensor`` mapping in canonical declaration order."""

    @classmethod
    def from_arrays(cls, items: Iterable[tuple[str, np.ndarray]], requires_grad: bool = True) -> "ParameterSet":
        ps = cls()
        for name, arr in items:
            if name in ps:
                raise ValueError(f"duplicate parameter name {name!r}")
            ps[name] = Tensor(arr, requires_grad=requires_grad, dtype=np.asarray(arr).dtype)
        return ps

    def numel(self) -> int:
        return sum(t.numel() for t in self.values())

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, t.shape) for name, t in self.items()]

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.values()]

    def clone(self) -> "ParameterSet":
        return ParameterSet.from_arrays(((n, t.data.copy()) for n, t in self.items()))

    def zero_grad(self) -> None:
        for t in self.values():
            t.zero_grad()

    def sub(self, prefix: str) -> dict[str, Tensor]:
        """Entries under ``prefix.`` with the prefix stripped."""
        head = prefix + "."
        return {n[len(head):]: t for n, t in self.items() if n.startswith(head)}

    def check_congruent(self, other: Mapping[str, Tensor], what: str = "parameter sets") -> None:
        if list(self.keys()) != list(other.keys()):
            mine, theirs = set(self), set(other)
            missing = sorted(mine - theirs)[:3]
            extra = sorted(theirs - mine)[:3]
            detail = f"missing {missing}" if missing else ""
            if extra:
                detail += (", " if detail else "") + f"unexpected {extra}"
            raise IncongruentParametersError(f"{what} differ in entries: {detail or 'ordering differs'}")
        for name, t in self.items():
            if t.shape != other[name].shape:
                raise IncongruentParametersError(
                    f"{what} differ at {name!r}: {t.shape} vs {other[name].shape}"
                )

    def load_from(self, other: Mapping[str, Tensor]) -> None:
        """Overwrite values with copies of ``other``'s; shapes must match entry by entry."""
        self.check_congruent(other)
        for name, t in self.items():
            t.data = np.array(other[name].data, dtype=t.dtype, copy=True)
            t.zero_grad()

    def equal(self, other: "ParameterSet") -> bool:
        """Bitwise equality of names, shapes and values."""
        if list(self.keys()) != list(other.keys()):
            return False
        return all(
            a.shape == b.shape and a.dtype == b.dtype and a.data.tobytes() == b.data.tobytes()
            for a, b in zip(self.values(), other.values())
        )
