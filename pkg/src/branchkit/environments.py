"""Environments and environment sequences.

A sequence assigns a token e_i to every generation i >= 0; the shift drops
the first k tokens. Seeded i.i.d. sequences are counter-based, so e_i is
random-access and shifting is an O(1) reindexing.
"""
from __future__ import annotations

from dataclasses import dataclass

from .rng import splitmix64

_SCALE = float(1 << 64)  # maps a scrambled 64-bit counter to a uniform in [0,1)


@dataclass(frozen=True)
class EnvironmentToken:
    """One environment symbol: an id plus model-interpreted parameters."""

    id: str
    params: tuple = ()  # sorted (name, value) pairs; keeps the token hashable

    @staticmethod
    def make(id: str, **params: float) -> "EnvironmentToken":
        return EnvironmentToken(id, tuple(sorted(params.items())))

    def get(self, name: str, default: float | None = None) -> float | None:
        for k, v in self.params:
            if k == name:
                return v
        return default

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}={v}" for k, v in self.params)
        return f"EnvironmentToken({self.id}{', ' + inner if inner else ''})"


class EnvironmentSequence:
    """Base class; concrete kinds implement _token(i) for absolute index i."""

    kind: str = "abstract"

    def __init__(self, alphabet: tuple[EnvironmentToken, ...], offset: int = 0):
        ids = [t.id for t in alphabet]
        if len(set(ids)) != len(ids):
            raise ValueError("alphabet token ids must be unique")
        self.alphabet = alphabet
        self.offset = offset

    def token_at(self, i: int) -> EnvironmentToken:
        if i < 0:
            raise ValueError("generation index must be >= 0")
        return self._token(i + self.offset)

    def shift(self, k: int) -> "EnvironmentSequence":
        if k < 0:
            raise ValueError("shift must be >= 0")
        if k == 0:
            return self
        return self._with_offset(self.offset + k)

    def _token(self, i: int) -> EnvironmentToken:
        raise NotImplementedError

    def _with_offset(self, offset: int) -> "EnvironmentSequence":
        raise NotImplementedError


class ConstantEnvironment(EnvironmentSequence):
    kind = "constant"

    def __init__(self, token: EnvironmentToken, offset: int = 0):
        super().__init__((token,), offset)

    def _token(self, i: int) -> EnvironmentToken:
        return self.alphabet[0]

    def _with_offset(self, offset: int) -> "ConstantEnvironment":
        return ConstantEnvironment(self.alphabet[0], offset)


class PeriodicEnvironment(EnvironmentSequence):
    kind = "periodic"

    def __init__(self, tokens, offset: int = 0):
        tokens = tuple(tokens)
        if not tokens:
            raise ValueError("period must contain at least one token")
        super().__init__(tokens, offset)

    @property
    def period(self) -> int:
        return len(self.alphabet)

    def _token(self, i: int) -> EnvironmentToken:
        return self.alphabet[i % len(self.alphabet)]

    def _with_offset(self, offset: int) -> "PeriodicEnvironment":
        return PeriodicEnvironment(self.alphabet, offset)


class ExplicitSequence(EnvironmentSequence):
    """Finite list of tokens; reading past the end is an error, never silent."""

    kind = "explicit"

    def __init__(self, tokens, offset: int = 0):
        tokens = tuple(tokens)
        alphabet = []
        seen = set()
        for t in tokens:
            if t.id not in seen:
                seen.add(t.id)
                alphabet.append(t)
        self.tokens = tokens
        super().__init__(tuple(alphabet), offset)

    def _token(self, i: int) -> EnvironmentToken:
        if i >= len(self.tokens):
            raise IndexError(
                f"explicit sequence has {len(self.tokens)} tokens, index {i} requested"
            )
        return self.tokens[i]

    def _with_offset(self, offset: int) -> "ExplicitSequence":
        return ExplicitSequence(self.tokens, offset)


class IIDEnvironment(EnvironmentSequence):
    """Seeded i.i.d. draws from the alphabet, counter-based in the index."""

    kind = "iid-seeded"

    def __init__(self, tokens, seed: int, weights=None, offset: int = 0):
        tokens = tuple(tokens)
        super().__init__(tokens, offset)
        self.seed = int(seed)
        if weights is None:
            weights = [1.0 / len(tokens)] * len(tokens)
        if len(weights) != len(tokens) or min(weights) < 0:
            raise ValueError("weights must be nonnegative, one per token")
        total = float(sum(weights))
        cum, acc = [], 0.0
        for w in weights:
            acc += w / total
            cum.append(acc)
        cum[-1] = 1.0
        self._cum = tuple(cum)
        self.weights = tuple(float(w) / total for w in weights)

    def _token(self, i: int) -> EnvironmentToken:
        u = splitmix64(splitmix64(self.seed) ^ (i + 1)) / _SCALE
        for j, c in enumerate(self._cum):
            if u <= c:
                return self.alphabet[j]
        return self.alphabet[-1]

    def _with_offset(self, offset: int) -> "IIDEnvironment":
        return IIDEnvironment(self.alphabet, self.seed, self.weights, offset)


def constant(token: EnvironmentToken) -> ConstantEnvironment:
    return ConstantEnvironment(token)


def periodic(tokens) -> PeriodicEnvironment:
    return PeriodicEnvironment(tokens)


def explicit(tokens) -> ExplicitSequence:
    return ExplicitSequence(tokens)


def iid_seeded(tokens, seed: int, weights=None) -> IIDEnvironment:
    return IIDEnvironment(tokens, seed, weights)
