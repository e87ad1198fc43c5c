"""Weighted atom measures over traits or (trait, environment) pairs."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass
class EmpiricalMeasure:
    """Finite weighted sum of point masses.

    `atoms` maps a hashable atom (a trait, or a (trait, token-id) pair) to its
    weight. `total_mass` is kept separately so unit-weight counting measures
    and normalized occupation measures share one type.
    """

    atoms: dict
    total_mass: float

    @staticmethod
    def from_values(values, weight: float = 1.0) -> "EmpiricalMeasure":
        atoms: dict = {}
        n = 0
        for v in values:
            atoms[v] = atoms.get(v, 0.0) + weight
            n += 1
        return EmpiricalMeasure(atoms, n * weight)

    def integrate(self, f) -> float:
        return sum(w * f(a) for a, w in self.atoms.items())

    def mass(self, predicate) -> float:
        return sum(w for a, w in self.atoms.items() if predicate(a))

    def normalized(self) -> "EmpiricalMeasure":
        if self.total_mass <= 0:
            raise ValueError("cannot normalize a zero-mass measure")
        z = self.total_mass
        return EmpiricalMeasure({a: w / z for a, w in self.atoms.items()}, 1.0)

    def tv_distance(self, other) -> float:
        """Total-variation distance, half the L1 gap over the union support.

        `other` may be an EmpiricalMeasure or a plain dict of atom -> mass.
        Both sides should carry comparable total mass (typically 1).
        """
        o = other.atoms if isinstance(other, EmpiricalMeasure) else dict(other)
        keys = set(self.atoms) | set(o)
        return 0.5 * sum(abs(self.atoms.get(k, 0.0) - o.get(k, 0.0)) for k in keys)
