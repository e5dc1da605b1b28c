"""Seeded Brownian and marked Poisson drivers.

Each path gets its own pair of generators keyed by ``(seed, path)`` so that
the draws for path ``p`` never depend on how many paths or steps were
requested. Enlarging ``M`` keeps existing paths, and enlarging ``n_steps``
at fixed ``dt`` keeps the existing prefix.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ShapeError, ValidationError
from .model import MarkSpace, TimeGrid

__all__ = ["NoiseSpec", "NoiseBundle", "generate", "compensated_integral", "jump_increment",
           "brownian_increment", "dump", "load", "prefix_factory"]

MAX_DRAWS = 2 ** 31
_MAGIC = b"IHNOISE\x00"
_VERSION = 1


@dataclass(frozen=True)
class NoiseSpec:
    d: int
    mark_space: MarkSpace
    M: int
    grid: TimeGrid
    seed: int

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 1:
            raise ValidationError(f"path count M must be >= 1, got {self.M}")
        if int(self.d) != self.d or self.d < 0:
            raise ValidationError(f"Brownian dimension must be >= 0, got {self.d}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    def echo(self) -> dict:
        return {
            "d": int(self.d),
            "intensities": self.mark_space.intensities.tolist(),
            "M": int(self.M),
            "t_max": self.grid.t_max,
            "n_steps": self.grid.n_steps,
            "seed": int(self.seed),
        }


@dataclass(frozen=True)
class NoiseBundle:
    """Brownian increments ``dW`` (M, N, d) and jump counts ``jumps`` (M, N, l, m)."""

    spec: NoiseSpec
    dW: np.ndarray
    jumps: np.ndarray

    @property
    def grid(self) -> TimeGrid:
        return self.spec.grid

    @property
    def rates(self) -> np.ndarray:
        return self.spec.mark_space.intensities

    @property
    def M(self) -> int:
        return self.spec.M

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def identity(self) -> tuple:
        """Key identifying the realisation; equal keys mean identical drivers."""
        s = self.spec
        return (int(s.seed), int(s.M), s.grid.n_steps, s.grid.dt, int(s.d), s.mark_space.intensities.tobytes())

    def compensated(self) -> np.ndarray:
        """Compensated increments N - pi dt, shape (M, N, l, m)."""
        return self.jumps - self.rates * self.grid.dt

    def cumulative_brownian(self) -> np.ndarray:
        """W(t_k), shape (M, N+1, d)."""
        out = np.zeros((self.M, self.grid.n_steps + 1, self.d))
        np.cumsum(self.dW, axis=1, out=out[:, 1:])
        return out

    def cumulative_compensated(self) -> np.ndarray:
        """Compensated counting process at the grid points, shape (M, N+1, l, m)."""
        c = self.compensated()
        out = np.zeros((self.M, self.grid.n_steps + 1) + c.shape[2:])
        np.cumsum(c, axis=1, out=out[:, 1:])
        return out

    def is_trivial(self) -> bool:
        """True when there is no randomness at all (d = 0 and no positive intensity)."""
        return self.d == 0 and not np.any(self.rates > 0)

    def prefix(self, n_steps: int) -> "NoiseBundle":
        """The first ``n_steps`` increments as a bundle on the shorter grid."""
        if n_steps > self.grid.n_steps:
            raise ShapeError("prefix longer than the bundle")
        g = self.grid.extended(n_steps)
        spec = NoiseSpec(self.spec.d, self.spec.mark_space, self.spec.M, g, self.spec.seed)
        return NoiseBundle(spec, self.dW[:, :n_steps], self.jumps[:, :n_steps])


def _path_streams(seed: int, p: int):
    bm = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(p, 0))))
    jp = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(p, 1))))
    return bm, jp


def generate(spec: NoiseSpec) -> NoiseBundle:
    """Draw the drivers for ``spec``; deterministic in the spec."""
    N = spec.grid.n_steps
    dt = spec.grid.dt
    rates = spec.mark_space.intensities
    l, m = rates.shape
    draws = spec.M * N * (spec.d + l * m)
    if draws > MAX_DRAWS:
        raise ConfigurationError(f"{draws} draws exceed the limit {MAX_DRAWS}; reduce M or n_steps")
    dW = np.zeros((spec.M, N, spec.d))
    jumps = np.zeros((spec.M, N, l, m))
    sd = np.sqrt(dt)
    lam = rates * dt
    for p in range(spec.M):
        bm, jp = _path_streams(int(spec.seed), p)
        if spec.d:
            dW[p] = sd * bm.standard_normal((N, spec.d))
        if l * m:
            jumps[p] = jp.poisson(lam, size=(N, l, m))
    dW.setflags(write=False)
    jumps.setflags(write=False)
    return NoiseBundle(spec, dW, jumps)


def prefix_factory(spec: NoiseSpec):
    """Factory ``grid -> bundle`` that reuses one long realisation.

    The returned callable accepts any grid with the spec's ``dt`` and no more
    steps than ``spec.grid``.
    """
    bundle = generate(spec)

    def factory(grid: TimeGrid) -> NoiseBundle:
        if not np.isclose(grid.dt, spec.grid.dt, rtol=1e-12):
            raise ConfigurationError("prefix factory requires the generating step size")
        return bundle.prefix(grid.n_steps)

    return factory


def compensated_integral(r_values: np.ndarray, bundle: NoiseBundle, p: int, k: int) -> np.ndarray:
    """sum_ij r_i(e_j) (N_ij - pi_ij dt) for path ``p`` and step ``k``; r_values is (n, l, m)."""
    r_values = np.asarray(r_values, dtype=float)
    comp = bundle.jumps[p, k] - bundle.rates * bundle.grid.dt
    if r_values.shape[1:] != comp.shape:
        raise ShapeError(f"r shape {r_values.shape} does not match marks {comp.shape}")
    return np.einsum("nij,ij->n", r_values, comp)


def jump_increment(r: np.ndarray, bundle: NoiseBundle, k: int) -> np.ndarray:
    """Batch version of ``compensated_integral``: r is (M, n, l, m), result (M, n)."""
    if r.size == 0:
        return np.zeros(r.shape[:2])
    comp = bundle.jumps[:, k] - bundle.rates * bundle.grid.dt
    return np.einsum("pnij,pij->pn", r, comp)


def brownian_increment(s: np.ndarray, bundle: NoiseBundle, k: int) -> np.ndarray:
    """sigma dW over one step: s is (M, n, d), result (M, n)."""
    if s.size == 0:
        return np.zeros(s.shape[:2])
    return np.einsum("pnd,pd->pn", s, bundle.dW[:, k])


def dump(bundle: NoiseBundle, path: str | Path) -> None:
    """Write the bundle as magic, version, JSON header (spec echo) and raw float64 arrays."""
    header = json.dumps({"spec": bundle.spec.echo(), "dW": list(bundle.dW.shape),
                         "jumps": list(bundle.jumps.shape)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(bundle.dW, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.jumps, dtype="<f8").tobytes())


def load(path: str | Path) -> NoiseBundle:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    if buf.read(len(_MAGIC)) != _MAGIC:
        raise ConfigurationError(f"{path} is not a noise bundle")
    version, hlen = struct.unpack("<II", buf.read(8))
    if version != _VERSION:
        raise ConfigurationError(f"unsupported noise bundle version {version}")
    head = json.loads(buf.read(hlen))
    s = head["spec"]
    rates = np.array(s["intensities"], dtype=float).reshape(
        (len(s["intensities"]), -1) if s["intensities"] else (0, 0))
    spec = NoiseSpec(s["d"], MarkSpace(rates), s["M"], TimeGrid(s["t_max"], s["n_steps"]), s["seed"])

    def take(shape):
        n = int(np.prod(shape))
        a = np.frombuffer(buf.read(8 * n), dtype="<f8").astype(float).reshape(shape)
        a.setflags(write=False)
        return a

    dW = take(tuple(head["dW"]))
    jumps = take(tuple(head["jumps"]))
    return NoiseBundle(spec, dW, jumps)
