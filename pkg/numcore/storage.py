"""
TNS1 tensor files and small persistence helpers.

Layout: magic b'TNS1', u32 little-endian rank, rank x u32 dims, then the
little-endian float32 payload in row-major order.
"""

import hashlib
import json
import os
import shutil
import struct
import tempfile
from contextlib import contextmanager
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import PdsmError
from .models import ImageVolume

MAGIC = b'TNS1'


class TensorFormatError(PdsmError, ValueError):
    """A file is not a valid TNS1 tensor."""


def encode_tensor(array):
    array = np.asarray(array)
    header = MAGIC + struct.pack('<I', array.ndim) + struct.pack(f'<{array.ndim}I', *array.shape)
    payload = np.ascontiguousarray(array, dtype='<f4').tobytes()
    return header + payload


def decode_tensor(data, source='<bytes>'):
    if data[:4] != MAGIC:
        raise TensorFormatError(f'{source}: missing TNS1 magic')
    if len(data) < 8:
        raise TensorFormatError(f'{source}: truncated header')
    (rank,) = struct.unpack_from('<I', data, 4)
    if len(data) < 8 + 4 * rank:
        raise TensorFormatError(f'{source}: header declares rank {rank} but holds {len(data)} bytes')
    dims = struct.unpack_from(f'<{rank}I', data, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(data) - offset != 4 * count:
        raise TensorFormatError(f'{source}: payload holds {len(data) - offset} bytes, expected {4 * count}')
    return np.frombuffer(data, dtype='<f4', offset=offset).reshape(dims).astype(np.float32)


def write_tensor(path, array):
    Path(path).write_bytes(encode_tensor(array))
    # mtime granularity can hide a same-size rewrite
    _cached_tensor.cache_clear()


def read_tensor(path):
    path = Path(path)
    return decode_tensor(path.read_bytes(), source=str(path))


@lru_cache(maxsize=8192)
def _cached_tensor(resolved, mtime_ns, size):
    array = read_tensor(resolved)
    array.setflags(write=False)
    return array


def load_image(path, image_id=''):
    """
    Read a TNS1 (E, H, W) image as an ImageVolume. Repeated reads hit a cache
    keyed by path, mtime and size, so a rewritten file is read again.
    """
    resolved = Path(path).resolve()
    stat = resolved.stat()
    return ImageVolume(_cached_tensor(str(resolved), stat.st_mtime_ns, stat.st_size), image_id=image_id)


def write_json(path, payload):
    """Canonical JSON (sorted keys, fixed indent, trailing newline) so equal content gives equal bytes."""
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n', encoding='utf-8')


def read_json(path):
    return json.loads(Path(path).read_text(encoding='utf-8'))


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def tree_digest(root):
    """sha256 over every file under root (relative path + contents), in sorted order."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob('*') if p.is_file()):
        digest.update(path.relative_to(root).as_posix().encode('utf-8'))
        digest.update(bytes.fromhex(sha256_file(path)))
    return digest.hexdigest()


@contextmanager
def atomic_directory(target):
    """
    Yield a temporary sibling directory; on success it replaces target,
    on failure it is removed and target is left untouched.
    """
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f'.{target.name}.', dir=target.parent))
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(staging, target)
