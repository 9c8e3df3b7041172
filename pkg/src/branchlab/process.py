"""Galton-Watson trajectories and truncated/shifted companions on shared draws.

The base process follows X_{n+1} = sum_{j=1}^{X_n} xi_{n,j} started from
X_0 = K. For a truncation level a in [0, 1) the companion process is
floored at b = floor(a*K) each step, X_{n+1}^(a) = max{b, progeny sum},
and its shifted version is Y_n^(a) = X_n^(a) - b. Coupling is literal:
every process reads the same addressed draw xi_{n,j}, so the pathwise
sandwich Y_n^(a) <= X_n <= X_n^(a) and the pre-decoupling agreement
between levels are checkable sample by sample, not just in law.

Single-path simulation uses the closure stream by default (one sum draw
per generation); coupled simulation always uses per-individual pools,
since the coupling is defined through individual draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from .offspring import OffspringDistribution
from .randomness import RandomnessSource


class PreconditionViolated(ValueError):
    """A truncated step started below its floor."""


def floor_level(a: float, K: int) -> int:
    """floor(a*K), guarded against binary representation error.

    Levels arrive through JSON configs, so a value meant as 0.1*K may be
    stored as the float just under it; the epsilon keeps the floor from
    dropping a whole unit in that case.
    """
    if not 0.0 <= a < 1.0:
        raise ValueError(f"truncation level must be in [0, 1), got {a}")
    return int(math.floor(a * K + 1e-9))


def default_horizon(K: int, mean: float, multiplier: int = 10) -> int:
    """Generation cap: ``multiplier`` times the asymptotic mean scale.

    The mean extinction scale is log K / (-log mean); ten times that
    makes survival past the cap astronomically unlikely while keeping
    runtime bounded. Requires a strictly subcritical mean.
    """
    if not 0.0 <= mean < 1.0:
        raise ValueError(
            f"no default horizon for offspring mean {mean}; pass an explicit one"
        )
    if mean == 0.0:
        return max(1, multiplier)
    scale = math.log(max(K, 2)) / -math.log(mean)
    return multiplier * max(1, math.ceil(scale))


@dataclass
class PathRecord:
    """One realized trajectory of the base process.

    ``sizes`` starts at X_0 = K and, if the path went extinct, ends at
    its first zero (zero is absorbing, so nothing follows it). When the
    generation cap was hit first, ``horizon_exceeded`` is set instead of
    raising: callers decide whether a censored path is acceptable.
    """

    initial_size: int
    sizes: list[int]
    extinct: bool
    extinction_time: int | None
    horizon_exceeded: bool
    path: int = 0

    def __post_init__(self):
        if self.extinct:
            assert self.extinction_time == len(self.sizes) - 1


@dataclass
class CoupledPaths:
    """Base and truncated/shifted processes driven by one draw pool.

    All sequences share the grid n = 0..horizon. ``indicators[a][n]``
    tells whether the level-a progeny sum at generation n exceeded the
    floor, i.e. whether Y_{n+1}^(a) > 0; it has one entry per simulated
    step (none for the final row). Base sizes keep trailing zeros so the
    rows stay aligned across levels.
    """

    initial_size: int
    levels: list[float]
    floors: dict[float, int]
    base_sizes: list[int]
    truncated: dict[float, list[int]]
    shifted: dict[float, list[int]]
    indicators: dict[float, list[int]]
    extinct: bool
    extinction_time: int | None
    horizon_exceeded: bool
    path: int = 0

    @property
    def horizon(self) -> int:
        return len(self.base_sizes) - 1


def step(
    current: int,
    dist: OffspringDistribution,
    src: RandomnessSource,
    path: int,
    n: int,
) -> int:
    """One generation of the base recursion from individual draws."""
    if current < 0:
        raise ValueError(f"population size must be >= 0, got {current}")
    if current == 0:
        return 0
    return int(src.offspring_pool(path, n, current, dist).sum())


def step_truncated(
    current: int,
    a: float,
    K: int,
    dist: OffspringDistribution,
    src: RandomnessSource,
    path: int,
    n: int,
) -> int:
    """One generation of the floored recursion on the same draws as step()."""
    floor = floor_level(a, K)
    if current < floor:
        raise PreconditionViolated(
            f"truncated process at {current} is below its floor {floor}"
        )
    if current == 0:
        return 0
    progeny = int(src.offspring_pool(path, n, current, dist).sum())
    return max(floor, progeny)


def simulate_path(
    K: int,
    dist: OffspringDistribution,
    src: RandomnessSource,
    path: int,
    *,
    horizon: int | None = None,
    use_closure: bool = True,
) -> PathRecord:
    """Run the base process until extinction or the generation cap.

    With ``use_closure`` (default) each generation costs one progeny-sum
    draw from the path's closure stream. With ``use_closure=False`` the
    per-individual pools are read instead, which reproduces exactly the
    base path of :func:`simulate_coupled` for the same (seed, path).
    """
    if K < 0:
        raise ValueError(f"initial size must be >= 0, got {K}")
    if K == 0:
        return PathRecord(0, [0], True, 0, False, path)
    if horizon is None:
        horizon = default_horizon(K, dist.mean)
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")

    sizes = [K]
    current = K
    closure = use_closure and dist.has_closure
    gen = src.closure_generator(path) if closure else None
    for n in range(horizon):
        if closure:
            current = dist.sample_sum(current, gen)
        else:
            current = step(current, dist, src, path, n)
        sizes.append(current)
        if current == 0:
            return PathRecord(K, sizes, True, n + 1, False, path)
    return PathRecord(K, sizes, False, None, True, path)


def simulate_coupled(
    K: int,
    dist: OffspringDistribution,
    levels: Sequence[float],
    src: RandomnessSource,
    path: int,
    horizon: int | None = None,
) -> CoupledPaths:
    """Drive the base process and every truncation level on one pool.

    Per generation a single block of individual draws is read and its
    prefix sums feed all processes: the base next size is S(X_n), the
    level-a next size is max{floor_a, S(X_n^(a))}, and the indicator is
    1{S(X_n^(a)) > floor_a}. The level 0 process coincides with the base
    path identically, so an empty or {0} level list degenerates to a
    plain trajectory on pool draws.
    """
    if K < 0:
        raise ValueError(f"initial size must be >= 0, got {K}")
    levels = sorted(set(float(a) for a in levels))
    floors = {a: floor_level(a, K) for a in levels}
    if horizon is None:
        horizon = default_horizon(max(K, 1), dist.mean)
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")

    base = K
    current = {a: K for a in levels}
    base_sizes = [K]
    truncated = {a: [K] for a in levels}
    shifted = {a: [K - floors[a]] for a in levels}
    indicators: dict[float, list[int]] = {a: [] for a in levels}
    extinction_time: int | None = 0 if K == 0 else None

    for n in range(horizon):
        need = max([base] + [current[a] for a in levels]) if levels else base
        if need > 0:
            draws = src.offspring_pool(path, n, need, dist)
            prefix = np.concatenate(([0], np.cumsum(draws)))
        else:
            prefix = np.zeros(1, dtype=np.int64)
        base = int(prefix[base])
        base_sizes.append(base)
        if base == 0 and extinction_time is None:
            extinction_time = n + 1
        for a in levels:
            progeny = int(prefix[current[a]])
            floor = floors[a]
            indicators[a].append(1 if progeny > floor else 0)
            current[a] = max(floor, progeny)
            truncated[a].append(current[a])
            shifted[a].append(current[a] - floor)

    return CoupledPaths(
        initial_size=K,
        levels=levels,
        floors=floors,
        base_sizes=base_sizes,
        truncated=truncated,
        shifted=shifted,
        indicators=indicators,
        extinct=extinction_time is not None,
        extinction_time=extinction_time,
        horizon_exceeded=extinction_time is None,
        path=path,
    )


def trajectory_header(levels: Sequence[float]) -> str:
    cols = ["path", "n", "X"]
    for a in levels:
        cols += [f"Xa_{a:.4f}", f"Ya_{a:.4f}", f"I_{a:.4f}"]
    return ",".join(cols)


def write_trajectories(
    records: Iterable[PathRecord | CoupledPaths], out: IO[str]
) -> None:
    """Dump trajectories as CSV, one row per (path, generation).

    Plain paths produce the three base columns; coupled paths add one
    column group per truncation level. Indicators describe the step out
    of a row, so the final row of each path leaves them blank.
    """
    header: str | None = None
    for rec in records:
        levels = rec.levels if isinstance(rec, CoupledPaths) else []
        if header is None:
            header = trajectory_header(levels)
            out.write(header + "\n")
        elif trajectory_header(levels) != header:
            raise ValueError("all records in one dump must share their levels")
        if isinstance(rec, CoupledPaths):
            last = rec.horizon
            for n, x in enumerate(rec.base_sizes):
                row = [str(rec.path), str(n), str(x)]
                for a in levels:
                    row += [
                        str(rec.truncated[a][n]),
                        str(rec.shifted[a][n]),
                        "" if n == last else str(rec.indicators[a][n]),
                    ]
                out.write(",".join(row) + "\n")
        else:
            for n, x in enumerate(rec.sizes):
                out.write(f"{rec.path},{n},{x}\n")
