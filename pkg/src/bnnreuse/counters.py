from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class CostCounters:
    """Operation and buffer-access tallies for one engine run.

    bit_ops counts MAC-equivalent element operations actually performed
    (one XNOR/popcount lane per binary element, one add per fixed-point
    element). Word counters are 64-bit-word granular reads.
    """

    bit_ops: int = 0
    weight_words_read: int = 0
    ia_words_read: int = 0
    broadcasts: int = 0
    full_computations: int = 0

    def add(self, **deltas: int) -> None:
        for name, value in deltas.items():
            value = int(value)
            if value < 0:
                raise ValueError(f"counter {name} cannot decrease (delta {value})")
            setattr(self, name, getattr(self, name) + value)

    def merge(self, other: "CostCounters") -> None:
        self.add(**asdict(other))

    def __add__(self, other: "CostCounters") -> "CostCounters":
        out = CostCounters(**asdict(self))
        out.merge(other)
        return out

    def as_dict(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]
