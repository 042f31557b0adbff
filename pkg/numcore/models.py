"""Core value types: channel-major 3-D tensors, dense matrices and seeded streams."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, check_finite

# Training and inference run in float32; gradient checks and the
# eigensolver tests switch to float64 ("verification mode").
STANDARD_DTYPE = np.float32
VERIFICATION_DTYPE = np.float64

MASK64 = (1 << 64) - 1


@dataclass(frozen=True, eq=False)
class Tensor3:
    """C x H x W scalars stored row-major, channel-major outermost."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ShapeError('rank', 3, values.ndim, 'Tensor3')
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(STANDARD_DTYPE)
        check_finite(values, 'Tensor3 values')
        values = np.array(values, order='C')
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape

    def astype(self, dtype):
        return type(self)(self.values.astype(dtype))


@dataclass(frozen=True, eq=False)
class ImageVolume(Tensor3):
    """An E-channel (one channel per echo) 2-D image."""

    image_id: str = ''

    def astype(self, dtype):
        return ImageVolume(self.values.astype(dtype), image_id=self.image_id)


@dataclass(frozen=True, eq=False)
class DenseMatrix:
    """rows x cols scalars, row-major."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError('rank', 2, values.ndim, 'DenseMatrix')
        check_finite(values, 'DenseMatrix values')
        values = np.array(values, order='C')
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class SeededRng:
    """
    A reproducible random stream identified by (base_seed, stream_id).

    The bit generator is Philox-4x64 (counter-based) keyed with the 128-bit
    value (stream_id << 64) | base_seed and a zero counter, so the sequence is
    a pure function of the pair on every platform.
    """

    base_seed: int
    stream_id: int
    _generator: np.random.Generator = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'base_seed', int(self.base_seed) & MASK64)
        object.__setattr__(self, 'stream_id', int(self.stream_id) & MASK64)
        key = (self.stream_id << 64) | self.base_seed
        object.__setattr__(self, '_generator', np.random.Generator(np.random.Philox(key=key)))

    @property
    def generator(self):
        """The numpy Generator drawing from this stream."""
        return self._generator

    def fresh(self):
        """A new stream positioned at the start of the same sequence."""
        return SeededRng(self.base_seed, self.stream_id)

    # Thin conveniences over the generator
    def uniform(self, low=0.0, high=1.0, size=None):
        return self._generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._generator.integers(low, high, size)

    def permutation(self, n):
        return self._generator.permutation(n)

    def random(self, size=None):
        return self._generator.random(size)
