"""Conditioned delay-Doppler channel generation.

A sample pairs a random :class:`ScenarioParams` with ``F`` consecutive frames
of a WSSUS Rayleigh channel on an ``M x N`` grid with ``L`` delay taps. Each
tap is a sum-of-sinusoids (Jakes) process sampled at ``1 / bandwidth``; frame
``f`` holds samples ``f*M*N ... (f+1)*M*N - 1`` reshaped row-major to
``M x N``.
"""
from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import kernels, rng

SPEED_OF_LIGHT = 299_792_458.0
DOPPLER_NORM_HZ = 5603.86  # 60 m/s at 28 GHz
N_SINUSOIDS = 32
PDP_DECAY_TAPS = 1.5

CARRIERS_HZ = (2.6e9, 3.5e9, 28e9)
SCS_HZ = (15e3, 30e3, 60e3)
CP_LENGTHS = (0, 16, 32)
ANTENNA_COUNTS = (1, 2, 4)

SNR_RANGE = (0.0, 30.0)
SPEED_RANGE = (1.0, 60.0)
BANDWIDTH_RANGE = (5e6, 40e6)
HORIZON_RANGE = (0, 10)

E_DIM = 20
HORIZON_DIM = 4


class RangeViolation(ValueError):
    """A scenario field lies outside its admissible range or set."""


class ShapeMismatch(ValueError):
    """An array does not have the shape implied by the grid."""


@dataclass(frozen=True)
class GridConfig:
    M: int
    N: int
    L: int
    F: int
    E_dim: int = E_DIM

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError(f"grid needs M, N >= 1, got {self.M}x{self.N}")
        if not 1 <= self.L <= self.M:
            raise ValueError(f"need 1 <= L <= M, got L={self.L}, M={self.M}")
        if self.F < 2:
            raise ValueError(f"need at least 2 frames, got F={self.F}")
        if self.E_dim != E_DIM:
            raise ValueError(f"conditioning layout has {E_DIM} dims, got {self.E_dim}")

    @property
    def MN(self) -> int:
        return self.M * self.N

    @property
    def D(self) -> int:
        """Complex channel vector length ``M*N*L``."""
        return self.M * self.N * self.L

    @property
    def feature_len(self) -> int:
        return 2 * self.D

    @classmethod
    def paper(cls) -> "GridConfig":
        return cls(M=32, N=32, L=6, F=11)

    @classmethod
    def desk(cls) -> "GridConfig":
        return cls(M=8, N=8, L=4, F=11)


@dataclass(frozen=True)
class ScenarioParams:
    snr_db: float
    speed: float
    carrier_hz: float
    bandwidth_hz: float
    scs_hz: float
    cp_len: int
    n_tx: int
    n_rx: int
    horizon: int

    @property
    def doppler_hz(self) -> float:
        return derive_doppler(self.speed, self.carrier_hz)

    @property
    def sample_period_s(self) -> float:
        return 1.0 / self.bandwidth_hz

    def validate(self) -> "ScenarioParams":
        _check_range("snr_db", self.snr_db, SNR_RANGE)
        _check_range("speed", self.speed, SPEED_RANGE)
        _check_range("bandwidth_hz", self.bandwidth_hz, BANDWIDTH_RANGE)
        _check_range("horizon", self.horizon, HORIZON_RANGE)
        if int(self.horizon) != self.horizon:
            raise RangeViolation(f"horizon must be an integer, got {self.horizon}")
        _check_member("carrier_hz", self.carrier_hz, CARRIERS_HZ)
        _check_member("scs_hz", self.scs_hz, SCS_HZ)
        _check_member("cp_len", self.cp_len, CP_LENGTHS)
        _check_member("n_tx", self.n_tx, ANTENNA_COUNTS)
        _check_member("n_rx", self.n_rx, ANTENNA_COUNTS)
        return self


def _check_range(name, value, bounds):
    lo, hi = bounds
    if not (lo <= value <= hi):
        raise RangeViolation(f"{name}={value} outside [{lo}, {hi}]")


def _check_member(name, value, allowed):
    if value not in allowed:
        raise RangeViolation(f"{name}={value} not in {allowed}")


def derive_doppler(speed: float, carrier_hz: float) -> float:
    """Maximum Doppler shift ``v * f_c / c`` in hertz."""
    return speed * carrier_hz / SPEED_OF_LIGHT


def speed_for_doppler(doppler_hz: float, carrier_hz: float) -> float:
    """Inverse of :func:`derive_doppler` in the speed argument."""
    return doppler_hz * SPEED_OF_LIGHT / carrier_hz


def sample_scenario(stream: np.random.Generator) -> ScenarioParams:
    """Draw one scenario: continuous fields uniform, categorical fields uniform over their sets."""
    snr = stream.uniform(*SNR_RANGE)
    speed = stream.uniform(*SPEED_RANGE)
    carrier = CARRIERS_HZ[stream.integers(3)]
    bandwidth = stream.uniform(*BANDWIDTH_RANGE)
    scs = SCS_HZ[stream.integers(3)]
    cp = CP_LENGTHS[stream.integers(3)]
    n_tx = ANTENNA_COUNTS[stream.integers(3)]
    n_rx = ANTENNA_COUNTS[stream.integers(3)]
    horizon = int(stream.integers(HORIZON_RANGE[0], HORIZON_RANGE[1] + 1))
    return ScenarioParams(
        snr_db=float(snr),
        speed=float(speed),
        carrier_hz=carrier,
        bandwidth_hz=float(bandwidth),
        scs_hz=scs,
        cp_len=cp,
        n_tx=n_tx,
        n_rx=n_rx,
        horizon=horizon,
    )


def encode_conditioning(p: ScenarioParams) -> np.ndarray:
    """Map a scenario to the 20-dim conditioning vector.

    Layout: ``[snr/30, (speed-1)/59, (bw_MHz-5)/35, f_D/5603.86, horizon/10]``
    followed by one-hot groups for carrier, SCS, CP length, n_tx and n_rx.
    """
    p.validate()
    e = np.zeros(E_DIM)
    e[0] = p.snr_db / 30.0
    e[1] = (p.speed - 1.0) / 59.0
    e[2] = (p.bandwidth_hz / 1e6 - 5.0) / 35.0
    e[3] = p.doppler_hz / DOPPLER_NORM_HZ
    e[4] = p.horizon / 10.0
    for offset, value, allowed in (
        (5, p.carrier_hz, CARRIERS_HZ),
        (8, p.scs_hz, SCS_HZ),
        (11, p.cp_len, CP_LENGTHS),
        (14, p.n_tx, ANTENNA_COUNTS),
        (17, p.n_rx, ANTENNA_COUNTS),
    ):
        e[offset + allowed.index(value)] = 1.0
    return e


def decode_conditioning(e: np.ndarray) -> ScenarioParams:
    """Recover a scenario from its conditioning vector.

    Categorical groups are recovered exactly; continuous fields to the
    precision of ``e`` (float32 when read from a dataset file).
    """
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (E_DIM,):
        raise ShapeMismatch(f"conditioning vector must have shape ({E_DIM},), got {e.shape}")

    def pick(offset, allowed):
        group = e[offset:offset + 3]
        if not np.isclose(group.sum(), 1.0) or not np.all((group == 0) | (group == 1)):
            raise RangeViolation(f"one-hot group at dims {offset}-{offset + 2} is malformed: {group}")
        return allowed[int(np.argmax(group))]

    clip = lambda v, lo, hi: float(min(max(v, lo), hi))
    return ScenarioParams(
        snr_db=clip(e[0] * 30.0, *SNR_RANGE),
        speed=clip(e[1] * 59.0 + 1.0, *SPEED_RANGE),
        carrier_hz=pick(5, CARRIERS_HZ),
        bandwidth_hz=clip((e[2] * 35.0 + 5.0) * 1e6, *BANDWIDTH_RANGE),
        scs_hz=pick(8, SCS_HZ),
        cp_len=pick(11, CP_LENGTHS),
        n_tx=pick(14, ANTENNA_COUNTS),
        n_rx=pick(17, ANTENNA_COUNTS),
        horizon=int(round(e[4] * 10.0)),
    )


def with_horizon(e: np.ndarray, horizon) -> np.ndarray:
    """Copy of conditioning vector(s) ``e`` with the horizon entry replaced."""
    out = np.array(e, dtype=np.float64, copy=True)
    out[..., HORIZON_DIM] = np.asarray(horizon) / 10.0
    return out


def power_delay_profile(L: int, decay: float = PDP_DECAY_TAPS) -> np.ndarray:
    """Exponential PDP ``p_l ~ exp(-l / decay)`` normalized to unit sum."""
    if L < 1 or decay <= 0:
        raise ValueError("need L >= 1 and decay > 0")
    p = np.exp(-np.arange(L) / decay)
    return p / p.sum()


@dataclass(frozen=True, eq=False)
class ChannelFrameSequence:
    """``F`` consecutive channel frames, ``frames[f, m, n, l]``."""

    frames: np.ndarray
    tap_powers: np.ndarray
    doppler_hz: float
    sample_period_s: float

    @property
    def frame_duration_s(self) -> float:
        F, M, N, L = self.frames.shape
        return M * N * self.sample_period_s


def synthesize_taps(doppler_hz, sample_period_s, n_times, tap_powers, streams) -> np.ndarray:
    """Sum-of-sinusoids Rayleigh processes, one row per tap.

    ``streams`` holds one generator per tap; each draws ``N_SINUSOIDS``
    arrival angles followed by ``N_SINUSOIDS`` phases.
    """
    tap_powers = np.asarray(tap_powers, dtype=np.float64)
    if len(streams) != len(tap_powers):
        raise ValueError("need one stream per tap")
    omega = np.empty((len(tap_powers), N_SINUSOIDS))
    phase = np.empty_like(omega)
    for l, s in enumerate(streams):
        angles = s.uniform(0.0, 2.0 * np.pi, N_SINUSOIDS)
        phase[l] = s.uniform(0.0, 2.0 * np.pi, N_SINUSOIDS)
        omega[l] = 2.0 * np.pi * doppler_hz * np.cos(angles)
    amp = np.sqrt(tap_powers / N_SINUSOIDS)
    return kernels.sos_synthesize(omega, phase, amp, float(sample_period_s), int(n_times))


def generate_frame_sequence(p: ScenarioParams, grid: GridConfig, streams) -> ChannelFrameSequence:
    """Generate ``grid.F`` temporally continuous frames for scenario ``p``.

    ``streams`` is either one generator (spawned into per-tap streams) or a
    sequence of ``grid.L`` generators.
    """
    if isinstance(streams, np.random.Generator):
        streams = streams.spawn(grid.L)
    powers = power_delay_profile(grid.L)
    taps = synthesize_taps(p.doppler_hz, p.sample_period_s, grid.F * grid.MN, powers, streams)
    # (L, F*MN) -> (F, M, N, L)
    frames = taps.reshape(grid.L, grid.F, grid.M, grid.N).transpose(1, 2, 3, 0)
    return ChannelFrameSequence(
        frames=np.ascontiguousarray(frames),
        tap_powers=powers,
        doppler_hz=p.doppler_hz,
        sample_period_s=p.sample_period_s,
    )


def flatten_channel(frame: np.ndarray, grid: GridConfig | None = None) -> np.ndarray:
    """Real feature of one ``M x N x L`` frame: real parts then imaginary parts.

    Complex entries are ordered tap-major, ``index = l*M*N + i``.
    """
    frame = np.asarray(frame)
    if frame.ndim != 3 or (grid is not None and frame.shape != (grid.M, grid.N, grid.L)):
        raise ShapeMismatch(f"expected an M x N x L frame, got shape {frame.shape}")
    h = frame.transpose(2, 0, 1).reshape(-1)
    return np.concatenate([h.real, h.imag])


def flatten_frames(frames: np.ndarray) -> np.ndarray:
    """Vectorized :func:`flatten_channel` over leading axes: ``(..., M, N, L) -> (..., 2D)``."""
    frames = np.asarray(frames)
    lead = frames.shape[:-3]
    h = np.moveaxis(frames, -1, -3).reshape(*lead, -1)
    return np.concatenate([h.real, h.imag], axis=-1)


def unflatten_channel(x: np.ndarray, grid: GridConfig) -> np.ndarray:
    """Inverse of :func:`flatten_channel`."""
    x = np.asarray(x)
    if x.shape[-1] != grid.feature_len:
        raise ShapeMismatch(f"expected feature length {grid.feature_len}, got {x.shape[-1]}")
    h = x[..., :grid.D] + 1j * x[..., grid.D:]
    h = h.reshape(*x.shape[:-1], grid.L, grid.M, grid.N)
    return np.moveaxis(h, -3, -1)


@dataclass(frozen=True, eq=False)
class Sample:
    scenario: ScenarioParams
    conditioning: np.ndarray
    channel: ChannelFrameSequence


@dataclass(eq=False)
class Dataset:
    grid: GridConfig
    samples: list
    base_seed: int
    indices: np.ndarray | None = None
    _features: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.samples)

    def features(self) -> np.ndarray:
        """All flattened frames, shape ``(count, F, 2D)``."""
        if self._features is None:
            self._features = np.stack([flatten_frames(s.channel.frames) for s in self.samples])
        return self._features

    def conditioning(self) -> np.ndarray:
        return np.stack([s.conditioning for s in self.samples])

    def doppler_hz(self) -> np.ndarray:
        return np.array([s.channel.doppler_hz for s in self.samples])

    def frame_duration_s(self) -> np.ndarray:
        return np.array([s.channel.frame_duration_s for s in self.samples])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        base = self.indices if self.indices is not None else np.arange(len(self))
        feats = None if self._features is None else self._features[idx]
        return Dataset(
            grid=self.grid,
            samples=[self.samples[i] for i in idx],
            base_seed=self.base_seed,
            indices=base[idx],
            _features=feats,
        )


def apply_overrides(p: ScenarioParams, overrides: Mapping | None) -> ScenarioParams:
    if not overrides:
        return p
    fields_ = {f.name for f in dataclasses.fields(ScenarioParams)}
    unknown = set(overrides) - fields_
    if unknown:
        raise ValueError(f"unknown scenario override(s): {sorted(unknown)}")
    return dataclasses.replace(p, **overrides).validate()


def generate_sample(grid: GridConfig, base_seed: int, index: int, overrides: Mapping | None = None) -> Sample:
    """Sample ``index`` of the dataset keyed by ``base_seed``; a pure function of its arguments."""
    p = sample_scenario(rng.stream(base_seed, rng.SCENARIO, index))
    p = apply_overrides(p, overrides)
    taps = [rng.stream(base_seed, rng.TAP, index, l) for l in range(grid.L)]
    channel = generate_frame_sequence(p, grid, taps)
    return Sample(scenario=p, conditioning=encode_conditioning(p), channel=channel)


def iter_samples(grid: GridConfig, count: int, base_seed: int, overrides=None, threads: int = 1):
    """Yield samples ``0 .. count-1`` in order, generated on up to ``threads`` workers."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if threads <= 1:
        for i in range(count):
            yield generate_sample(grid, base_seed, i, overrides)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        chunk = 4 * threads
        for start in range(0, count, chunk):
            idx = range(start, min(count, start + chunk))
            yield from pool.map(lambda i: generate_sample(grid, base_seed, i, overrides), idx)


def build_dataset(grid: GridConfig, count: int, base_seed: int, overrides: Mapping | None = None,
                  threads: int = 1) -> Dataset:
    samples = list(iter_samples(grid, count, base_seed, overrides, threads))
    return Dataset(grid=grid, samples=samples, base_seed=base_seed)


def split_dataset(d: Dataset, train_count: int, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random partition into ``train_count`` and ``len(d) - train_count`` samples."""
    if not 0 < train_count < len(d):
        raise ValueError(f"train_count must be in (0, {len(d)}), got {train_count}")
    perm = rng.stream(seed, rng.SPLIT).permutation(len(d))
    return d.subset(np.sort(perm[:train_count])), d.subset(np.sort(perm[train_count:]))


def sample_from_arrays(grid: GridConfig, e: np.ndarray, features: np.ndarray) -> Sample:
    """Rebuild a :class:`Sample` from stored conditioning and ``(F, 2D)`` features."""
    p = decode_conditioning(e)
    frames = unflatten_channel(features, grid)
    channel = ChannelFrameSequence(
        frames=frames,
        tap_powers=power_delay_profile(grid.L),
        doppler_hz=float(e[3]) * DOPPLER_NORM_HZ,
        sample_period_s=p.sample_period_s,
    )
    return Sample(scenario=p, conditioning=np.asarray(e, dtype=np.float64), channel=channel)

