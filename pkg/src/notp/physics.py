"""Phase encoding of bits in two close bases, recorded with Gaussian phase noise.

Codebook on the phase circle (basis spacing ``delta_phi``)::

    basis 0:  bit 0 -> 0          bit 1 -> pi
    basis 1:  bit 0 -> pi + dphi  bit 1 -> dphi

The noise has standard deviation ``sqrt(2 / <n>)`` and is wrapped onto
[0, 2*pi) before the sample is rounded onto a uniform grid of
``2**adc_bits`` levels.  Scalar helpers work on single emissions; the
``*_many`` variants are vectorized over numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .entropy import EntropyStream
from .keys import KeyBuffer

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class NoiseParams:
    """Physical-channel parameters.

    Parameters
    ----------
    mean_photon_number : float
        Mean photon number of the noise source, must be > 1.
    delta_phi : float
        Phase spacing between the two bases, radians, in (0, pi/2).
    adc_bits : int
        Resolution of the recording grid, 8..24.
    guard_ratio : float
        Ratio that makes "much greater than" concrete in the operating
        condition check.
    """

    mean_photon_number: float
    delta_phi: float
    adc_bits: int = 16
    guard_ratio: float = 5.0

    def __post_init__(self):
        if not self.mean_photon_number > 1:
            raise ValueError("mean_photon_number must be > 1")
        if not 0 < self.delta_phi < math.pi / 2:
            raise ValueError("delta_phi must lie in (0, pi/2)")
        if not (isinstance(self.adc_bits, (int, np.integer)) and 8 <= self.adc_bits <= 24):
            raise ValueError("adc_bits must be an integer in [8, 24]")
        if not self.guard_ratio > 0:
            raise ValueError("guard_ratio must be positive")
        if not self.grid_step < self.delta_phi / 4:
            raise ValueError(
                f"grid step {self.grid_step:.3g} rad is not below delta_phi/4; raise adc_bits"
            )

    @classmethod
    def from_exponent(cls, mean_photon_number, dphi_exp: int, **kw) -> "NoiseParams":
        """Build params with ``delta_phi = 2**-dphi_exp`` radians."""
        return cls(mean_photon_number, 2.0 ** -int(dphi_exp), **kw)

    @classmethod
    def unchecked(cls, mean_photon_number, delta_phi, adc_bits=16, guard_ratio=5.0) -> "NoiseParams":
        """Skip validation; for limiting cases such as ``delta_phi = 0``."""
        obj = object.__new__(cls)
        for name, value in (("mean_photon_number", mean_photon_number), ("delta_phi", delta_phi),
                            ("adc_bits", adc_bits), ("guard_ratio", guard_ratio)):
            object.__setattr__(obj, name, value)
        return obj

    @property
    def grid_size(self) -> int:
        return 1 << int(self.adc_bits)

    @property
    def grid_step(self) -> float:
        return TWO_PI / self.grid_size

    @property
    def dphi_exponent(self) -> int | None:
        """``m`` such that ``delta_phi == 2**-m`` exactly, else ``None``."""
        m, e = math.frexp(self.delta_phi)
        if m == 0.5 and -127 <= 1 - e <= 127:
            return 1 - e
        return None


@dataclass(frozen=True)
class PhaseSample:
    """One recorded phase on the ADC grid."""

    grid_index: int
    adc_bits: int = 16

    def __post_init__(self):
        if not 0 <= self.grid_index < (1 << self.adc_bits):
            raise ValueError("grid_index out of range")

    @property
    def phase(self) -> float:
        return TWO_PI * self.grid_index / (1 << self.adc_bits)


@dataclass(frozen=True)
class Emission:
    data_bit: int
    basis: int
    sample: PhaseSample


def sigma_phi(params: NoiseParams) -> float:
    """Phase standard deviation ``sqrt(2/<n>)`` of a coherent state."""
    return math.sqrt(2.0 / params.mean_photon_number)


def ideal_phase(bit, basis, params: NoiseParams):
    """Noiseless codeword phase in [0, 2*pi); accepts scalars or arrays."""
    bit = np.asarray(bit)
    basis = np.asarray(basis)
    offset = basis * params.delta_phi + math.pi * (basis % 2)
    phase = np.mod(offset + math.pi * bit, TWO_PI)
    return float(phase) if phase.ndim == 0 else phase


def quantize(phase, params: NoiseParams):
    """Round phases to the nearest grid level, wrapping at 2*pi."""
    idx = np.rint(np.mod(phase, TWO_PI) / params.grid_step).astype(np.int64) % params.grid_size
    return int(idx) if np.ndim(idx) == 0 else idx


def dequantize(index, params: NoiseParams):
    phase = np.asarray(index, dtype=np.float64) * params.grid_step
    return float(phase) if phase.ndim == 0 else phase


def sample_noise(params: NoiseParams, entropy: EntropyStream, size: int | None = None):
    """Zero-mean Gaussian phase noise with standard deviation ``sigma_phi``."""
    n = 1 if size is None else size
    draws = entropy.normals(n) * sigma_phi(params)
    return float(draws[0]) if size is None else draws


def encode_with_noise(bits, bases, noise, params: NoiseParams) -> np.ndarray:
    """Grid indices for codewords shifted by pre-drawn ``noise``."""
    bits = np.asarray(bits, dtype=np.uint8)
    bases = np.asarray(bases, dtype=np.uint8)
    if bits.shape != bases.shape or bits.shape != np.shape(noise):
        raise ValueError("bits, bases and noise differ in length")
    return np.atleast_1d(quantize(ideal_phase(bits, bases, params) + noise, params))


def record_many(bits, bases, params: NoiseParams, entropy: EntropyStream) -> np.ndarray:
    """Encode, add noise and quantize a whole sequence of emissions."""
    bits = np.asarray(bits, dtype=np.uint8)
    return encode_with_noise(bits, bases, sample_noise(params, entropy, bits.size), params)


def record_emission(bit: int, basis: int, params: NoiseParams, entropy: EntropyStream) -> PhaseSample:
    idx = record_many([bit], [basis], params, entropy)
    return PhaseSample(int(idx[0]), params.adc_bits)


def circular_distance(a, b):
    d = np.mod(np.asarray(a) - np.asarray(b), TWO_PI)
    return np.minimum(d, TWO_PI - d)


def decode_many(indices, bases, params: NoiseParams) -> np.ndarray:
    """Nearest-codeword decision given the basis; ties go to bit 0."""
    phase = dequantize(np.asarray(indices), params)
    bases = np.asarray(bases, dtype=np.uint8)
    d0 = circular_distance(phase, ideal_phase(np.zeros_like(bases), bases, params))
    d1 = circular_distance(phase, ideal_phase(np.ones_like(bases), bases, params))
    return (d1 < d0).astype(np.uint8)


def decode_with_basis(sample: PhaseSample, basis: int, params: NoiseParams) -> int:
    return int(decode_many([sample.grid_index], [basis], params)[0])


def phrg_bits(count: int, entropy: EntropyStream, origin: str = "fresh") -> KeyBuffer:
    """Fresh random bits from the (simulated) physical generator."""
    if count <= 0:
        raise ValueError("count must be positive")
    return KeyBuffer(entropy.bits(count), origin)


def state_overlap(params: NoiseParams, exact: bool = True) -> float:
    """Squared overlap of the two close coherent states.

    ``exact`` uses ``exp(-2<n>(1 - cos(dphi/2)))``; otherwise the small-angle
    form ``exp(-<n> dphi**2 / 4)``.
    """
    n, dphi = params.mean_photon_number, params.delta_phi
    if exact:
        # 1 - cos(x) = 2 sin(x/2)**2 keeps precision for tiny dphi
        return math.exp(-4.0 * n * math.sin(dphi / 4.0) ** 2)
    return math.exp(-n * dphi * dphi / 4.0)


def overlap_probability(params: NoiseParams) -> float:
    """Un-normalized overlap ``exp(-dphi**2 / (2 sigma**2))``."""
    sigma = sigma_phi(params)
    if sigma == 0.0:
        return 0.0 if params.delta_phi > 0 else 1.0
    return math.exp(-params.delta_phi ** 2 / (2.0 * sigma * sigma))
