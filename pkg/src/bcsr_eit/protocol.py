"""Stimulation patterns and measurement selections.

Electrodes are zero-based internally; serialized protocols and configs use
1-based electrode numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations

import numpy as np

DEFAULT_AMPLITUDE = 1.0  # mA


@dataclass(frozen=True)
class StimulationProtocol:
    """Current injections plus the differential voltage measurements.

    Attributes
    ----------
    n_electrodes : int
    injections : (n_inj, 2) int array
        ``(source, sink)`` electrode pairs; the source carries ``+amplitude``.
    amplitudes : (n_inj,) float array, mA
    measurements : (M, 3) int array
        ``(injection_index, positive, negative)``; the measured value is
        ``U[positive] - U[negative]``.
    """

    n_electrodes: int
    injections: np.ndarray
    amplitudes: np.ndarray
    measurements: np.ndarray

    def __post_init__(self):
        inj = np.asarray(self.injections, dtype=np.int64).reshape(-1, 2)
        amp = np.asarray(self.amplitudes, dtype=float)
        if amp.ndim == 0:
            amp = np.full(len(inj), float(amp))
        meas = np.asarray(self.measurements, dtype=np.int64).reshape(-1, 3)
        L = int(self.n_electrodes)
        if np.any(inj[:, 0] == inj[:, 1]):
            raise ValueError("source and sink electrode must differ")
        if np.any(inj < 0) or np.any(inj >= L):
            raise ValueError("injection electrode out of range")
        if amp.shape != (len(inj),):
            raise ValueError("one amplitude per injection is required")
        if np.any(meas[:, 0] < 0) or np.any(meas[:, 0] >= len(inj)):
            raise ValueError("measurement references an unknown injection")
        if np.any(meas[:, 1:] < 0) or np.any(meas[:, 1:] >= L):
            raise ValueError("measurement electrode out of range")
        if len(np.unique(meas, axis=0)) != len(meas):
            raise ValueError("duplicate measurement entry")
        for name, a in (("injections", inj), ("amplitudes", amp), ("measurements", meas)):
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @property
    def n_injections(self) -> int:
        return len(self.injections)

    @property
    def M(self) -> int:
        return len(self.measurements)

    def current_patterns(self) -> np.ndarray:
        """(n_inj, L) electrode currents; each row sums to zero."""
        currents = np.zeros((self.n_injections, self.n_electrodes))
        rows = np.arange(self.n_injections)
        currents[rows, self.injections[:, 0]] = self.amplitudes
        currents[rows, self.injections[:, 1]] = -self.amplitudes
        return currents

    def measurement_pairs(self) -> np.ndarray:
        """Distinct (positive, negative) pairs, used for adjoint fields."""
        return np.unique(self.measurements[:, 1:], axis=0)

    def to_dict(self) -> dict:
        return {
            "n_electrodes": self.n_electrodes,
            "injections": (self.injections + 1).tolist(),
            "amplitudes_mA": self.amplitudes.tolist(),
            "measurements": [
                [int(i), int(p) + 1, int(n) + 1] for i, p, n in self.measurements
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StimulationProtocol":
        meas = np.asarray(data["measurements"], dtype=np.int64).reshape(-1, 3)
        meas[:, 1:] -= 1
        return cls(
            int(data["n_electrodes"]),
            np.asarray(data["injections"], dtype=np.int64) - 1,
            np.asarray(data["amplitudes_mA"], dtype=float),
            meas,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _adjacent_pairs(L: int) -> list[tuple[int, int]]:
    return [(p, (p + 1) % L) for p in range(L)]


def reciprocal_key(source: int, sink: int, pos: int, neg: int) -> tuple:
    """Identifier shared by a measurement and its drive/measure swap."""
    return tuple(sorted([(source, sink), (pos, neg)]))


def _drop_reciprocal(injections, measurements):
    kept, seen = [], set()
    # measurements are generated in lexicographic (injection_index, pair) order,
    # so the first occurrence of each reciprocal class is the smaller entry
    for m in measurements:
        src, snk = injections[m[0]]
        key = reciprocal_key(src, snk, m[1], m[2])
        if key in seen:
            continue
        seen.add(key)
        kept.append(m)
    return kept


def adjacent_protocol(
    L: int = 16,
    skip_driven: bool = False,
    drop_reciprocal: bool = False,
    amplitude: float = DEFAULT_AMPLITUDE,
) -> StimulationProtocol:
    """Adjacent drive ``q -> q+1`` with adjacent voltage pairs ``(p, p+1)``.

    With ``skip_driven`` the three pairs touching a driven electrode are
    removed per injection; with ``drop_reciprocal`` only the
    lexicographically smaller member of each reciprocal pair is kept.
    """
    if L < 4:
        raise ValueError("adjacent protocol needs L >= 4 electrodes")
    injections = _adjacent_pairs(L)
    measurements = []
    for k, (a, b) in enumerate(injections):
        for p, n in _adjacent_pairs(L):
            if skip_driven and ({p, n} & {a, b}):
                continue
            measurements.append((k, p, n))
    if drop_reciprocal:
        measurements = _drop_reciprocal(injections, measurements)
    return StimulationProtocol(L, injections, amplitude, measurements)


def tank_protocol(
    terminals,
    L: int = 16,
    skip_driven: bool = False,
    amplitude: float = DEFAULT_AMPLITUDE,
) -> StimulationProtocol:
    """All distinct pairs with at least one electrode from ``terminals``.

    ``terminals`` are 1-based electrode numbers. Each injection drives the
    lower-numbered electrode of the pair as source; adjacent voltage pairs
    are measured (reciprocals are kept).
    """
    terms = sorted({int(t) for t in terminals})
    if not terms:
        raise ValueError("terminal set must be nonempty")
    if terms[0] < 1 or terms[-1] > L:
        raise ValueError(f"terminals must lie in 1..{L}")
    pairs = set()
    for a in terms:
        for b in range(1, L + 1):
            if b != a:
                pairs.add((min(a, b) - 1, max(a, b) - 1))
    injections = sorted(pairs)
    measurements = []
    for k, (a, b) in enumerate(injections):
        for p, n in _adjacent_pairs(L):
            if skip_driven and ({p, n} & {a, b}):
                continue
            measurements.append((k, p, n))
    return StimulationProtocol(L, injections, amplitude, measurements)


def protocol_from_config(spec: dict, L: int) -> StimulationProtocol:
    kind = spec.get("type", "adjacent")
    amp = float(spec.get("amplitude_mA", DEFAULT_AMPLITUDE))
    if kind == "adjacent":
        return adjacent_protocol(
            L, bool(spec.get("skip_driven", False)), bool(spec.get("drop_reciprocal", False)), amp
        )
    if kind == "tank":
        return tank_protocol(spec["terminals"], L, bool(spec.get("skip_driven", False)), amp)
    raise ValueError(f"unknown protocol type {kind!r}")


def measurement_operator(protocol: StimulationProtocol, electrode_voltages) -> np.ndarray:
    """Stack ``U[pos] - U[neg]`` for every measurement (injection-major order)."""
    U = np.asarray(electrode_voltages, dtype=float)
    if U.shape != (protocol.n_injections, protocol.n_electrodes):
        raise ValueError(
            f"expected electrode voltages of shape "
            f"{(protocol.n_injections, protocol.n_electrodes)}, got {U.shape}"
        )
    m = protocol.measurements
    return U[m[:, 0], m[:, 1]] - U[m[:, 0], m[:, 2]]
